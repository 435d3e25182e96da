#include "vigil/tape.hpp"

#include <cmath>
#include <string>
#include <utility>

namespace vigil {

namespace {
constexpr double kInvSqrt2Pi = 0.3989422804014327;
}

Var GradTape::push(Matrix value, bool requires_grad,
                   std::function<void(GradTape&, const Matrix&)> backprop) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  if (requires_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

GradTape::Node& GradTape::node(Var v) {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) {
    throw IndexError("tape: invalid var id " + std::to_string(v.id));
  }
  return nodes_[v.id];
}

const GradTape::Node& GradTape::node(Var v) const {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size())) {
    throw IndexError("tape: invalid var id " + std::to_string(v.id));
  }
  return nodes_[v.id];
}

void GradTape::accumulate(Var v, const Matrix& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  if (n.grad.empty()) {
    n.grad = Matrix(n.value.rows(), n.value.cols());
  }
  for (int i = 0; i < g.rows(); ++i)
    for (int j = 0; j < g.cols(); ++j) n.grad(i, j) += g(i, j);
}

Var GradTape::param(Matrix value) {
  return push(std::move(value), true, nullptr);
}

Var GradTape::constant(Matrix value) {
  return push(std::move(value), false, nullptr);
}

const Matrix& GradTape::value(Var v) const { return node(v).value; }

const Matrix& GradTape::grad(Var v) const {
  // untouched grads materialize as zeros so callers need no emptiness checks
  Node& n = const_cast<GradTape*>(this)->node(v);
  if (n.grad.empty()) n.grad = Matrix(n.value.rows(), n.value.cols());
  return n.grad;
}

double GradTape::scalar(Var v) const {
  const Matrix& m = node(v).value;
  if (m.rows() != 1 || m.cols() != 1) {
    throw ShapeError("tape: scalar() on a " + m.shape_str() + " node");
  }
  return m(0, 0);
}

Var GradTape::add(Var a, Var b) {
  Matrix out = ops::add(value(a), value(b));
  const bool rg = needs_grad(a) || needs_grad(b);
  return push(std::move(out), rg, [a, b](GradTape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var GradTape::sub(Var a, Var b) {
  Matrix out = ops::sub(value(a), value(b));
  const bool rg = needs_grad(a) || needs_grad(b);
  return push(std::move(out), rg, [a, b](GradTape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, ops::scale(g, -1.0));
  });
}

Var GradTape::hadamard(Var a, Var b) {
  Matrix out = ops::hadamard(value(a), value(b));
  const bool rg = needs_grad(a) || needs_grad(b);
  return push(std::move(out), rg, [a, b](GradTape& t, const Matrix& g) {
    t.accumulate(a, ops::hadamard(g, t.value(b)));
    t.accumulate(b, ops::hadamard(g, t.value(a)));
  });
}

Var GradTape::scale(Var a, double s) {
  Matrix out = ops::scale(value(a), s);
  return push(std::move(out), needs_grad(a), [a, s](GradTape& t, const Matrix& g) {
    t.accumulate(a, ops::scale(g, s));
  });
}

Var GradTape::add_row(Var a, Var row) {
  Matrix out = ops::add_row(value(a), value(row));
  const bool rg = needs_grad(a) || needs_grad(row);
  return push(std::move(out), rg, [a, row](GradTape& t, const Matrix& g) {
    t.accumulate(a, g);
    Matrix rsum(1, g.cols());
    for (int i = 0; i < g.rows(); ++i)
      for (int j = 0; j < g.cols(); ++j) rsum(0, j) += g(i, j);
    t.accumulate(row, rsum);
  });
}

Var GradTape::matmul(Var a, Var b) {
  Matrix out = ops::matmul(value(a), value(b));
  const bool rg = needs_grad(a) || needs_grad(b);
  return push(std::move(out), rg, [a, b](GradTape& t, const Matrix& g) {
    if (t.needs_grad(a)) t.accumulate(a, ops::matmul(g, ops::transpose(t.value(b))));
    if (t.needs_grad(b)) t.accumulate(b, ops::matmul(ops::transpose(t.value(a)), g));
  });
}

Var GradTape::transpose(Var a) {
  Matrix out = ops::transpose(value(a));
  return push(std::move(out), needs_grad(a), [a](GradTape& t, const Matrix& g) {
    t.accumulate(a, ops::transpose(g));
  });
}

Var GradTape::slice_rows(Var a, int r0, int r1) {
  Matrix out = ops::slice_rows(value(a), r0, r1);
  return push(std::move(out), needs_grad(a), [a, r0](GradTape& t, const Matrix& g) {
    Matrix full(t.value(a).rows(), t.value(a).cols());
    for (int i = 0; i < g.rows(); ++i)
      for (int j = 0; j < g.cols(); ++j) full(r0 + i, j) = g(i, j);
    t.accumulate(a, full);
  });
}

Var GradTape::slice_cols(Var a, int c0, int c1) {
  Matrix out = ops::slice_cols(value(a), c0, c1);
  return push(std::move(out), needs_grad(a), [a, c0](GradTape& t, const Matrix& g) {
    Matrix full(t.value(a).rows(), t.value(a).cols());
    for (int i = 0; i < g.rows(); ++i)
      for (int j = 0; j < g.cols(); ++j) full(i, c0 + j) = g(i, j);
    t.accumulate(a, full);
  });
}

Var GradTape::concat_rows(const std::vector<Var>& parts) {
  std::vector<Matrix> values;
  values.reserve(parts.size());
  bool rg = false;
  for (Var p : parts) {
    values.push_back(value(p));
    rg = rg || needs_grad(p);
  }
  Matrix out = ops::concat_rows(values);
  return push(std::move(out), rg, [parts](GradTape& t, const Matrix& g) {
    int r = 0;
    for (Var p : parts) {
      const int n = t.value(p).rows();
      t.accumulate(p, ops::slice_rows(g, r, r + n));
      r += n;
    }
  });
}

Var GradTape::concat_cols(const std::vector<Var>& parts) {
  std::vector<Matrix> values;
  values.reserve(parts.size());
  bool rg = false;
  for (Var p : parts) {
    values.push_back(value(p));
    rg = rg || needs_grad(p);
  }
  Matrix out = ops::concat_cols(values);
  return push(std::move(out), rg, [parts](GradTape& t, const Matrix& g) {
    int c = 0;
    for (Var p : parts) {
      const int n = t.value(p).cols();
      t.accumulate(p, ops::slice_cols(g, c, c + n));
      c += n;
    }
  });
}

namespace {

// dx_j = y_j * (g_j - sum_k g_k y_k), row-wise; exact for masked rows too
// since masked outputs are 0.
Matrix softmax_backward(const Matrix& y, const Matrix& g) {
  Matrix dx(y.rows(), y.cols());
  for (int i = 0; i < y.rows(); ++i) {
    double dot = 0.0;
    for (int j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
    for (int j = 0; j < y.cols(); ++j) dx(i, j) = y(i, j) * (g(i, j) - dot);
  }
  return dx;
}

}  // namespace

Var GradTape::softmax_rows(Var x) {
  Matrix out = ops::softmax_rows(value(x));
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), needs_grad(x), [x, self](GradTape& t, const Matrix& g) {
    t.accumulate(x, softmax_backward(t.value(self), g));
  });
}

Var GradTape::softmax_rows_masked(Var x, Matrix mask) {
  Matrix out = ops::softmax_rows(value(x), &mask);
  Var self{static_cast<int>(nodes_.size())};
  return push(std::move(out), needs_grad(x), [x, self](GradTape& t, const Matrix& g) {
    t.accumulate(x, softmax_backward(t.value(self), g));
  });
}

Var GradTape::layer_norm(Var x, Var gain, Var bias, double eps) {
  Matrix out = ops::layer_norm(value(x), value(gain), value(bias), eps);
  const bool rg = needs_grad(x) || needs_grad(gain) || needs_grad(bias);
  return push(std::move(out), rg, [x, gain, bias, eps](GradTape& t, const Matrix& g) {
    const Matrix& xv = t.value(x);
    const Matrix& gv = t.value(gain);
    const int n = xv.cols();
    Matrix dx(xv.rows(), n);
    Matrix dgain(1, n);
    Matrix dbias(1, n);
    for (int i = 0; i < xv.rows(); ++i) {
      double mean = 0.0;
      for (int j = 0; j < n; ++j) mean += xv(i, j);
      mean /= n;
      double var = 0.0;
      for (int j = 0; j < n; ++j) {
        const double d = xv(i, j) - mean;
        var += d * d;
      }
      var /= n;
      const double inv_sd = 1.0 / std::sqrt(var + eps);
      double mean_gy = 0.0, mean_gyx = 0.0;
      for (int j = 0; j < n; ++j) {
        const double xhat = (xv(i, j) - mean) * inv_sd;
        const double gy = g(i, j) * gv(0, j);
        mean_gy += gy;
        mean_gyx += gy * xhat;
        dgain(0, j) += g(i, j) * xhat;
        dbias(0, j) += g(i, j);
      }
      mean_gy /= n;
      mean_gyx /= n;
      for (int j = 0; j < n; ++j) {
        const double xhat = (xv(i, j) - mean) * inv_sd;
        const double gy = g(i, j) * gv(0, j);
        dx(i, j) = inv_sd * (gy - mean_gy - xhat * mean_gyx);
      }
    }
    t.accumulate(x, dx);
    t.accumulate(gain, dgain);
    t.accumulate(bias, dbias);
  });
}

Var GradTape::gelu(Var x) {
  Matrix out = ops::gelu(value(x));
  return push(std::move(out), needs_grad(x), [x](GradTape& t, const Matrix& g) {
    const Matrix& xv = t.value(x);
    Matrix dx(xv.rows(), xv.cols());
    for (int i = 0; i < xv.rows(); ++i) {
      for (int j = 0; j < xv.cols(); ++j) {
        const double v = xv(i, j);
        const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        dx(i, j) = g(i, j) * (cdf + v * pdf);
      }
    }
    t.accumulate(x, dx);
  });
}

Var GradTape::mse(Var a, Var b) {
  const double loss = ops::mse(value(a), value(b));
  Matrix out(1, 1, {loss});
  const bool rg = needs_grad(a) || needs_grad(b);
  return push(std::move(out), rg, [a, b](GradTape& t, const Matrix& g) {
    const Matrix& av = t.value(a);
    const Matrix& bv = t.value(b);
    const double s = 2.0 * g(0, 0) / static_cast<double>(av.size());
    Matrix d(av.rows(), av.cols());
    for (int i = 0; i < av.rows(); ++i)
      for (int j = 0; j < av.cols(); ++j) d(i, j) = s * (av(i, j) - bv(i, j));
    t.accumulate(a, d);
    t.accumulate(b, ops::scale(d, -1.0));
  });
}

Var GradTape::cross_entropy(Var logits, std::vector<int> targets) {
  const double loss = ops::cross_entropy(value(logits), targets);
  Matrix out(1, 1, {loss});
  return push(std::move(out), needs_grad(logits),
              [logits, targets = std::move(targets)](GradTape& t, const Matrix& g) {
                const Matrix& lv = t.value(logits);
                Matrix probs = ops::softmax_rows(lv);
                const double s = g(0, 0) / lv.rows();
                for (int i = 0; i < lv.rows(); ++i) {
                  probs(i, targets[i]) -= 1.0;
                  for (int j = 0; j < lv.cols(); ++j) probs(i, j) *= s;
                }
                t.accumulate(logits, probs);
              });
}

Var GradTape::picked_nll(Var logits, std::vector<NllPick> picks, double normalizer) {
  const Matrix& lv = value(logits);
  if (normalizer <= 0.0) throw ShapeError("picked_nll: normalizer must be positive");
  double total = 0.0;
  for (const auto& p : picks) {
    if (p.row < 0 || p.row >= lv.rows() || p.col < 0 || p.col >= lv.cols()) {
      throw IndexError("picked_nll: pick (" + std::to_string(p.row) + "," +
                       std::to_string(p.col) + ") out of " + lv.shape_str());
    }
    double mx = lv(p.row, 0);
    for (int j = 1; j < lv.cols(); ++j) mx = std::max(mx, lv(p.row, j));
    double sum = 0.0;
    for (int j = 0; j < lv.cols(); ++j) sum += std::exp(lv(p.row, j) - mx);
    total += p.weight * (std::log(sum) - (lv(p.row, p.col) - mx));
  }
  Matrix out(1, 1, {total / normalizer});
  return push(std::move(out), needs_grad(logits),
              [logits, picks = std::move(picks), normalizer](GradTape& t, const Matrix& g) {
                const Matrix& lv = t.value(logits);
                Matrix d(lv.rows(), lv.cols());
                for (const auto& p : picks) {
                  double mx = lv(p.row, 0);
                  for (int j = 1; j < lv.cols(); ++j) mx = std::max(mx, lv(p.row, j));
                  double sum = 0.0;
                  for (int j = 0; j < lv.cols(); ++j) sum += std::exp(lv(p.row, j) - mx);
                  const double s = g(0, 0) * p.weight / normalizer;
                  for (int j = 0; j < lv.cols(); ++j) {
                    d(p.row, j) += s * std::exp(lv(p.row, j) - mx) / sum;
                  }
                  d(p.row, p.col) -= s;
                }
                t.accumulate(logits, d);
              });
}

void GradTape::backward(Var root) {
  Node& r = node(root);
  if (r.value.rows() != 1 || r.value.cols() != 1) {
    throw ShapeError("backward: root must be 1x1, got " + r.value.shape_str());
  }
  accumulate(root, Matrix(1, 1, {1.0}));
  for (int i = root.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.empty() || !n.backprop) continue;
    n.backprop(*this, n.grad);
  }
  for (const Node& n : nodes_) {
    if (n.requires_grad && !n.grad.empty() && !n.grad.all_finite()) {
      throw NumericError("backward: non-finite gradient");
    }
  }
}

double finite_diff_check(const DiffProbe& op, const Matrix& point, double step) {
  if (step < 1e-7 || step > 1e-3) {
    throw ConfigError("finite_diff_check: step must lie in [1e-7, 1e-3]");
  }
  const Matrix analytic = op.grad(point);
  if (!analytic.same_shape(point)) {
    throw ShapeError("finite_diff_check: gradient shape " + analytic.shape_str() +
                     " does not match point " + point.shape_str());
  }
  if (!analytic.all_finite()) {
    throw NumericError("finite_diff_check: non-finite analytic gradient");
  }
  Matrix probe = point;
  double worst = 0.0;
  for (int i = 0; i < point.rows(); ++i) {
    for (int j = 0; j < point.cols(); ++j) {
      const double x0 = point(i, j);
      probe(i, j) = x0 + step;
      const double fp = op.f(probe);
      probe(i, j) = x0 - step;
      const double fm = op.f(probe);
      probe(i, j) = x0;
      const double central = (fp - fm) / (2.0 * step);
      if (!std::isfinite(central)) {
        throw NumericError("finite_diff_check: non-finite central difference");
      }
      const double rel = std::abs(analytic(i, j) - central) / (std::abs(analytic(i, j)) + 1e-8);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace vigil
