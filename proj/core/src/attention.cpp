#include "vigil/attention.hpp"

#include <cmath>

#include "vigil/ops.hpp"

namespace vigil {

void MHSAConfig::validate() const {
  if (d_model < 1 || n_heads < 1 || ffn_mult < 1) {
    throw ConfigError("mhsa config: all counts must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("mhsa config: d_model " + std::to_string(d_model) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
}

MHSABlock MHSABlock::random(const MHSAConfig& cfg, SeededRng& rng, double residual_scale) {
  cfg.validate();
  const int d = cfg.d_model;
  const int f = cfg.d_ffn();
  const double sd_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double sd_f = 1.0 / std::sqrt(static_cast<double>(f));
  MHSABlock b;
  b.cfg = cfg;
  b.wq = Matrix::randn(d, d, rng, sd_d);
  b.wk = Matrix::randn(d, d, rng, sd_d);
  b.wv = Matrix::randn(d, d, rng, sd_d);
  b.wo = Matrix::randn(d, d, rng, sd_d * residual_scale);
  b.ln1_gain = Matrix::full(1, d, 1.0);
  b.ln1_bias = Matrix(1, d);
  b.w1 = Matrix::randn(d, f, rng, sd_d);
  b.b1 = Matrix(1, f);
  b.w2 = Matrix::randn(f, d, rng, sd_f * residual_scale);
  b.b2 = Matrix(1, d);
  b.ln2_gain = Matrix::full(1, d, 1.0);
  b.ln2_bias = Matrix(1, d);
  return b;
}

ParamRefs MHSABlock::params(const std::string& prefix) {
  return {
      {prefix + ".wq", &wq},           {prefix + ".wk", &wk},
      {prefix + ".wv", &wv},           {prefix + ".wo", &wo},
      {prefix + ".ln1_gain", &ln1_gain}, {prefix + ".ln1_bias", &ln1_bias},
      {prefix + ".w1", &w1},           {prefix + ".b1", &b1},
      {prefix + ".w2", &w2},           {prefix + ".b2", &b2},
      {prefix + ".ln2_gain", &ln2_gain}, {prefix + ".ln2_bias", &ln2_bias},
  };
}

std::vector<std::pair<std::string, const Matrix*>> MHSABlock::params(
    const std::string& prefix) const {
  std::vector<std::pair<std::string, const Matrix*>> out;
  for (auto& [name, m] : const_cast<MHSABlock*>(this)->params(prefix)) {
    out.emplace_back(name, m);
  }
  return out;
}

std::vector<MHSABlock> random_stack(const MHSAConfig& cfg, int depth, SeededRng& rng,
                                    double residual_scale) {
  std::vector<MHSABlock> stack;
  stack.reserve(depth);
  for (int i = 0; i < depth; ++i) stack.push_back(MHSABlock::random(cfg, rng, residual_scale));
  return stack;
}

// ---- KV cache -------------------------------------------------------------

KVCache::KVCache(int n_layers, int max_len, int d_model)
    : max_len_(max_len), d_model_(d_model) {
  if (n_layers < 1 || max_len < 0 || d_model < 1) {
    throw ConfigError("kv cache: bad geometry");
  }
  layers_.resize(n_layers);
  for (auto& l : layers_) {
    l.k = Matrix(max_len, d_model);
    l.v = Matrix(max_len, d_model);
  }
}

int KVCache::size() const { return layers_.empty() ? 0 : layers_.front().count; }

Matrix KVCache::keys(int layer) const {
  const Ring& r = layers_.at(layer);
  Matrix out(r.count, d_model_);
  for (int i = 0; i < r.count; ++i) {
    const int src = (r.start + i) % std::max(1, max_len_);
    for (int j = 0; j < d_model_; ++j) out(i, j) = r.k(src, j);
  }
  return out;
}

Matrix KVCache::values(int layer) const {
  const Ring& r = layers_.at(layer);
  Matrix out(r.count, d_model_);
  for (int i = 0; i < r.count; ++i) {
    const int src = (r.start + i) % std::max(1, max_len_);
    for (int j = 0; j < d_model_; ++j) out(i, j) = r.v(src, j);
  }
  return out;
}

void KVCache::push_row(Ring& r, const Matrix& k_new, const Matrix& v_new, int src_row) {
  if (max_len_ == 0) return;
  int dst;
  if (r.count < max_len_) {
    dst = (r.start + r.count) % max_len_;
    ++r.count;
  } else {
    dst = r.start;  // overwrite the oldest
    r.start = (r.start + 1) % max_len_;
  }
  for (int j = 0; j < d_model_; ++j) {
    r.k(dst, j) = k_new(src_row, j);
    r.v(dst, j) = v_new(src_row, j);
  }
}

void KVCache::append(int layer, const Matrix& k_new, const Matrix& v_new) {
  if (k_new.cols() != d_model_ || v_new.cols() != d_model_ || k_new.rows() != v_new.rows()) {
    throw ShapeError("kv cache append: " + k_new.shape_str() + " / " + v_new.shape_str());
  }
  Ring& r = layers_.at(layer);
  for (int i = 0; i < k_new.rows(); ++i) push_row(r, k_new, v_new, i);
}

void KVCache::commit(int new_tokens) { appended_ += new_tokens; }

// ---- attention forward ----------------------------------------------------

namespace {

void check_stack(const std::vector<MHSABlock>& stack, const Matrix& x) {
  if (stack.empty()) throw ConfigError("mhsa: empty block stack");
  const int d = stack.front().cfg.d_model;
  if (!x.empty() && x.cols() != d) {
    throw ShapeError("mhsa: input has " + std::to_string(x.cols()) + " channels, stack wants " +
                     std::to_string(d));
  }
  for (const auto& b : stack) {
    if (b.cfg.d_model != d) throw ConfigError("mhsa: blocks disagree on d_model");
  }
}

// One block over new tokens x, attending to (k_ctx|v_ctx rows at positions
// cached_first..) followed by the new tokens themselves at new_first...
// window < 0 means unbounded. An explicit_mask (n_new x n_ctx) overrides
// the causal/window construction. Emits this layer's projected k/v.
Matrix block_apply(const MHSABlock& blk, const Matrix& x, const Matrix& k_cached,
                   const Matrix& v_cached, std::int64_t cached_first, std::int64_t new_first,
                   std::int64_t window, bool causal, const Matrix* explicit_mask, Matrix* out_k,
                   Matrix* out_v) {
  const int n_heads = blk.cfg.n_heads;
  const int dh = blk.cfg.d_head();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  const Matrix a = ops::layer_norm(x, blk.ln1_gain, blk.ln1_bias);
  const Matrix q = ops::matmul(a, blk.wq);
  const Matrix k_new = ops::matmul(a, blk.wk);
  const Matrix v_new = ops::matmul(a, blk.wv);
  if (out_k) *out_k = k_new;
  if (out_v) *out_v = v_new;

  const int n_new = x.rows();
  const int n_cached = k_cached.rows();
  const int n_ctx = n_cached + n_new;
  const Matrix k_all = n_cached ? ops::concat_rows({k_cached, k_new}) : k_new;
  const Matrix v_all = n_cached ? ops::concat_rows({v_cached, v_new}) : v_new;

  // Context row j sits at absolute position cached_first + j; queries are
  // the trailing n_new rows. (new_first == cached_first + n_cached.)
  const bool windowed = window >= 0;
  Matrix mask;
  bool need_mask = causal || windowed || explicit_mask;
  if (explicit_mask) {
    if (explicit_mask->rows() != n_new || explicit_mask->cols() != n_ctx) {
      throw ShapeError("attention mask is " + explicit_mask->shape_str() + ", wanted " +
                       std::to_string(n_new) + "x" + std::to_string(n_ctx));
    }
    mask = *explicit_mask;
  } else if (need_mask) {
    mask = Matrix(n_new, n_ctx);
    for (int i = 0; i < n_new; ++i) {
      const std::int64_t pq = new_first + i;
      for (int j = 0; j < n_ctx; ++j) {
        const std::int64_t pk = cached_first + j;
        const bool ok = (!causal || pk <= pq) && (!windowed || pk >= pq - window);
        mask(i, j) = ok ? 1.0 : 0.0;
      }
    }
  }

  std::vector<Matrix> head_ctx;
  head_ctx.reserve(n_heads);
  for (int h = 0; h < n_heads; ++h) {
    const Matrix qh = ops::slice_cols(q, h * dh, (h + 1) * dh);
    const Matrix kh = ops::slice_cols(k_all, h * dh, (h + 1) * dh);
    const Matrix vh = ops::slice_cols(v_all, h * dh, (h + 1) * dh);
    Matrix scores = ops::scale(ops::matmul(qh, ops::transpose(kh)), inv_sqrt_dh);
    const Matrix attn = ops::softmax_rows(scores, need_mask ? &mask : nullptr);
    head_ctx.push_back(ops::matmul(attn, vh));
  }
  const Matrix ctx = n_heads == 1 ? head_ctx.front() : ops::concat_cols(head_ctx);
  const Matrix h1 = ops::add(x, ops::matmul(ctx, blk.wo));

  const Matrix b = ops::layer_norm(h1, blk.ln2_gain, blk.ln2_bias);
  const Matrix f1 = ops::gelu(ops::add_row(ops::matmul(b, blk.w1), blk.b1));
  const Matrix f2 = ops::add_row(ops::matmul(f1, blk.w2), blk.b2);
  return ops::add(h1, f2);
}

}  // namespace

Matrix mhsa_full(const std::vector<MHSABlock>& stack, const Matrix& x, bool causal) {
  check_stack(stack, x);
  if (x.rows() == 0) return Matrix(0, stack.front().cfg.d_model);
  Matrix cur = x;
  const Matrix no_cache(0, stack.front().cfg.d_model);
  for (const auto& blk : stack) {
    cur = block_apply(blk, cur, no_cache, no_cache, 0, 0, -1, causal, nullptr, nullptr, nullptr);
  }
  return cur;
}

Matrix mhsa_full_masked(const std::vector<MHSABlock>& stack, const Matrix& x, const Matrix& mask) {
  check_stack(stack, x);
  if (x.rows() == 0) return Matrix(0, stack.front().cfg.d_model);
  Matrix cur = x;
  const Matrix no_cache(0, stack.front().cfg.d_model);
  for (const auto& blk : stack) {
    cur = block_apply(blk, cur, no_cache, no_cache, 0, 0, -1, true, &mask, nullptr, nullptr);
  }
  return cur;
}

Matrix mhsa_stream(const std::vector<MHSABlock>& stack, KVCache& cache, const Matrix& x_new) {
  check_stack(stack, x_new);
  const int d = stack.front().cfg.d_model;
  if (cache.n_layers() != static_cast<int>(stack.size()) || cache.d_model() != d) {
    throw ConfigError("mhsa_stream: cache built for " + std::to_string(cache.n_layers()) +
                      " layers x " + std::to_string(cache.d_model()) + ", stack is " +
                      std::to_string(stack.size()) + " x " + std::to_string(d));
  }
  if (x_new.rows() == 0) return Matrix(0, d);

  const std::int64_t base = cache.position_counter();
  const int n_cached = cache.size();
  const std::int64_t cached_first = base - n_cached;

  Matrix cur = x_new;
  for (int l = 0; l < static_cast<int>(stack.size()); ++l) {
    Matrix k_new, v_new;
    const Matrix k_cached = cache.keys(l);
    const Matrix v_cached = cache.values(l);
    cur = block_apply(stack[l], cur, k_cached, v_cached, cached_first, base, cache.max_len(),
                      /*causal=*/true, nullptr, &k_new, &v_new);
    cache.append(l, k_new, v_new);
  }
  cache.commit(x_new.rows());
  return cur;
}

// ---- positional encoding --------------------------------------------------

Matrix positional_encoding(int count, std::int64_t start_index, int d_model) {
  if (start_index < 0) throw IndexError("positional_encoding: negative start index");
  Matrix pe(count, d_model);
  for (int i = 0; i < count; ++i) {
    const double pos = static_cast<double>(start_index + i);
    for (int c = 0; c < d_model; ++c) {
      const double freq = std::pow(10000.0, -2.0 * (c / 2) / static_cast<double>(d_model));
      pe(i, c) = (c % 2 == 0) ? std::sin(pos * freq) : std::cos(pos * freq);
    }
  }
  return pe;
}

Matrix positional_encode(const Matrix& x, std::int64_t start_index) {
  return ops::add(x, positional_encoding(x.rows(), start_index, x.cols()));
}

}  // namespace vigil
