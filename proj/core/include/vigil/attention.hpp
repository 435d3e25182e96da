#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vigil/matrix.hpp"
#include "vigil/optim.hpp"
#include "vigil/rng.hpp"

namespace vigil {

struct MHSAConfig {
  int d_model = 32;
  int n_heads = 4;
  int ffn_mult = 4;

  int d_head() const { return d_model / n_heads; }
  int d_ffn() const { return d_model * ffn_mult; }
  void validate() const;
};

// Pre-norm residual transformer block:
//   h = x + (attn(ln1(x)) @ wo)
//   y = h + (gelu(ln2(h) @ w1 + b1) @ w2 + b2)
// With wo = w2 = 0 the block is exactly the identity.
struct MHSABlock {
  MHSAConfig cfg;
  Matrix wq, wk, wv, wo;        // d_model x d_model
  Matrix ln1_gain, ln1_bias;    // 1 x d_model
  Matrix w1, b1;                // d_model x d_ffn, 1 x d_ffn
  Matrix w2, b2;                // d_ffn x d_model, 1 x d_model
  Matrix ln2_gain, ln2_bias;

  // residual_scale scales the init of wo and w2; 0 gives an identity block.
  static MHSABlock random(const MHSAConfig& cfg, SeededRng& rng, double residual_scale = 1.0);

  ParamRefs params(const std::string& prefix);
  std::vector<std::pair<std::string, const Matrix*>> params(const std::string& prefix) const;
};

std::vector<MHSABlock> random_stack(const MHSAConfig& cfg, int depth, SeededRng& rng,
                                    double residual_scale = 1.0);

// Bounded per-layer ring buffers of projected keys/values. Eviction is
// strictly oldest-first; position_counter() counts every token ever
// appended, so retained entries keep their absolute positions.
class KVCache {
 public:
  KVCache() = default;
  KVCache(int n_layers, int max_len, int d_model);

  int n_layers() const { return static_cast<int>(layers_.size()); }
  int max_len() const { return max_len_; }
  int d_model() const { return d_model_; }

  // Stored positions (identical across layers between stream steps).
  int size() const;
  std::int64_t position_counter() const { return appended_; }
  std::int64_t first_position() const { return appended_ - size(); }

  // Rows ordered oldest -> newest.
  Matrix keys(int layer) const;
  Matrix values(int layer) const;

  void append(int layer, const Matrix& k_new, const Matrix& v_new);
  // Called once per stream step after all layers appended the same count.
  void commit(int new_tokens);

 private:
  struct Ring {
    Matrix k, v;  // capacity rows
    int start = 0;
    int count = 0;
  };
  void push_row(Ring& r, const Matrix& k_new, const Matrix& v_new, int src_row);

  std::vector<Ring> layers_;
  int max_len_ = 0;
  int d_model_ = 0;
  std::int64_t appended_ = 0;
};

// Full-sequence forward over a block stack. causal=true restricts
// attention at position i to positions <= i; causal=false is the
// bidirectional mode. Empty input returns an empty matrix.
Matrix mhsa_full(const std::vector<MHSABlock>& stack, const Matrix& x, bool causal);

// Full-sequence forward under an explicit attention mask (rows = queries,
// nonzero = may attend). The mask must be causal-compatible if the result
// is meant to match any streaming replay.
Matrix mhsa_full_masked(const std::vector<MHSABlock>& stack, const Matrix& x, const Matrix& mask);

// Streaming forward for x_new (one or more tokens). Token at absolute
// position p attends to positions in [p - max_len, p], whether they sit
// in the cache or earlier in x_new; new keys/values are appended and the
// oldest evicted beyond max_len. With max_len >= total length this
// reproduces mhsa_full(causal=true) on the concatenated stream.
Matrix mhsa_stream(const std::vector<MHSABlock>& stack, KVCache& cache, const Matrix& x_new);

// Fixed sinusoidal table: rows for absolute positions start_index ..
// start_index+count-1.
Matrix positional_encoding(int count, std::int64_t start_index, int d_model);
// x plus the encodings for its rows.
Matrix positional_encode(const Matrix& x, std::int64_t start_index);

}  // namespace vigil
