#include "vigil/ops.hpp"

#include <cmath>
#include <string>

namespace vigil::ops {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dims differ, " + a.shape_str() + " x " + b.shape_str());
  }
  Matrix out(a.rows(), b.cols());
  for (int i = 0; i < a.rows(); ++i) {
    for (int k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* brow = b.data() + static_cast<std::size_t>(k) * b.cols();
      double* orow = out.data() + static_cast<std::size_t>(i) * out.cols();
      for (int j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
    }
  }
  out.ensure_finite("matmul output");
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "add");
  Matrix out = a;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out(i, j) += b(i, j);
  return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "sub");
  Matrix out = a;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out(i, j) -= b(i, j);
  return out;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "hadamard");
  Matrix out = a;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out(i, j) *= b(i, j);
  return out;
}

Matrix scale(const Matrix& a, double s) {
  Matrix out = a;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out(i, j) *= s;
  return out;
}

Matrix add_row(const Matrix& a, const Matrix& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ShapeError("add_row: bias " + row.shape_str() + " does not broadcast over " + a.shape_str());
  }
  Matrix out = a;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out(i, j) += row(0, j);
  return out;
}

Matrix softmax_rows(const Matrix& x, const Matrix* mask) {
  if (mask) require_same_shape(x, *mask, "softmax_rows mask");
  Matrix out(x.rows(), x.cols());
  for (int i = 0; i < x.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < x.cols(); ++j) {
      if (mask && (*mask)(i, j) == 0.0) continue;
      mx = std::max(mx, x(i, j));
    }
    if (!std::isfinite(mx)) {
      throw DegenerateRowError("softmax_rows: fully masked row " + std::to_string(i));
    }
    double sum = 0.0;
    for (int j = 0; j < x.cols(); ++j) {
      if (mask && (*mask)(i, j) == 0.0) continue;
      const double e = std::exp(x(i, j) - mx);
      out(i, j) = e;
      sum += e;
    }
    const double inv = 1.0 / sum;
    for (int j = 0; j < x.cols(); ++j) {
      if (mask && (*mask)(i, j) == 0.0) {
        out(i, j) = 0.0;
      } else {
        out(i, j) *= inv;
      }
    }
  }
  return out;
}

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, double eps) {
  if (gain.rows() != 1 || gain.cols() != x.cols() || bias.rows() != 1 || bias.cols() != x.cols()) {
    throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(x.cols()));
  }
  if (eps <= 0.0) throw ShapeError("layer_norm: eps must be positive");
  Matrix out(x.rows(), x.cols());
  const int n = x.cols();
  for (int i = 0; i < x.rows(); ++i) {
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += x(i, j);
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
      const double d = x(i, j) - mean;
      var += d * d;
    }
    var /= n;
    const double inv_sd = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j) {
      out(i, j) = (x(i, j) - mean) * inv_sd * gain(0, j) + bias(0, j);
    }
  }
  out.ensure_finite("layer_norm output");
  return out;
}

Matrix gelu(const Matrix& x) {
  Matrix out = x;
  for (int i = 0; i < x.rows(); ++i) {
    for (int j = 0; j < x.cols(); ++j) {
      const double v = x(i, j);
      out(i, j) = 0.5 * v * (1.0 + std::erf(v * M_SQRT1_2));
    }
  }
  return out;
}

double cross_entropy(const Matrix& logits, const std::vector<int>& targets) {
  if (static_cast<int>(targets.size()) != logits.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(logits.rows()) + " rows");
  }
  double total = 0.0;
  for (int i = 0; i < logits.rows(); ++i) {
    const int t = targets[i];
    if (t < 0 || t >= logits.cols()) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " out of range [0," +
                       std::to_string(logits.cols()) + ") at row " + std::to_string(i));
    }
    double mx = logits(i, 0);
    for (int j = 1; j < logits.cols(); ++j) mx = std::max(mx, logits(i, j));
    double sum = 0.0;
    for (int j = 0; j < logits.cols(); ++j) sum += std::exp(logits(i, j) - mx);
    total += std::log(sum) - (logits(i, t) - mx);
  }
  return total / logits.rows();
}

double mse(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "mse");
  if (a.empty()) return 0.0;
  double total = 0.0;
  for (int i = 0; i < a.rows(); ++i) {
    for (int j = 0; j < a.cols(); ++j) {
      const double d = a(i, j) - b(i, j);
      total += d * d;
    }
  }
  return total / static_cast<double>(a.size());
}

Matrix slice_rows(const Matrix& a, int r0, int r1) {
  if (r0 < 0 || r1 > a.rows() || r0 > r1) {
    throw IndexError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ") out of " + a.shape_str());
  }
  Matrix out(r1 - r0, a.cols());
  for (int i = r0; i < r1; ++i)
    for (int j = 0; j < a.cols(); ++j) out(i - r0, j) = a(i, j);
  return out;
}

Matrix slice_cols(const Matrix& a, int c0, int c1) {
  if (c0 < 0 || c1 > a.cols() || c0 > c1) {
    throw IndexError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") out of " + a.shape_str());
  }
  Matrix out(a.rows(), c1 - c0);
  for (int i = 0; i < a.rows(); ++i)
    for (int j = c0; j < c1; ++j) out(i, j - c0) = a(i, j);
  return out;
}

Matrix concat_rows(const std::vector<Matrix>& parts) {
  if (parts.empty()) return Matrix();
  int rows = 0;
  const int cols = parts.front().cols();
  for (const auto& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  int r = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < p.rows(); ++i, ++r)
      for (int j = 0; j < cols; ++j) out(r, j) = p(i, j);
  }
  return out;
}

Matrix concat_cols(const std::vector<Matrix>& parts) {
  if (parts.empty()) return Matrix();
  int cols = 0;
  const int rows = parts.front().rows();
  for (const auto& p : parts) {
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  Matrix out(rows, cols);
  int c = 0;
  for (const auto& p : parts) {
    for (int j = 0; j < p.cols(); ++j, ++c)
      for (int i = 0; i < rows; ++i) out(i, c) = p(i, j);
  }
  return out;
}

Matrix causal_mask(int n) {
  Matrix m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) m(i, j) = 1.0;
  return m;
}

}  // namespace vigil::ops
