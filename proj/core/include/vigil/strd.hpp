#pragma once

#include <vector>

#include "vigil/attention.hpp"
#include "vigil/matrix.hpp"
#include "vigil/optim.hpp"
#include "vigil/rng.hpp"
#include "vigil/vision.hpp"

namespace vigil {

// Temporal relation module: a small MHSA stack plus a residual output
// linear layer. At init the output projection (and the blocks' residual
// branches) are zero, so the module starts as the identity and training
// moves it toward the offline teacher's transform.
struct STRDModule {
  int depth = 2;  // 1..3
  std::vector<MHSABlock> blocks;
  Matrix w_out;  // d_model x d_model, residual: out = h + h @ w_out

  // Near-identity init (the training start point).
  static STRDModule init(const MHSAConfig& cfg, int depth, SeededRng& rng);
  // Fully random init (the no-distillation ablation arm).
  static STRDModule random(const MHSAConfig& cfg, int depth, SeededRng& rng);

  const MHSAConfig& config() const { return blocks.front().cfg; }
  int d_model() const { return config().d_model; }
  KVCache make_cache(int max_len) const;
  ParamRefs params();
};

// Token blocks concatenated along time, row order (pair, patch). Pair
// indices must be strictly increasing.
Matrix strd_concat(const std::vector<TokenBlock>& blocks);

// Offline mode: full-sequence causal attention over all rows at once.
Matrix strd_forward(const STRDModule& strd, const Matrix& v_images);
// Streaming mode: one or more new tokens against the bounded cache.
Matrix strd_forward_stream(const STRDModule& strd, KVCache& cache, const Matrix& v_new);

// Mean squared difference between the streamed-then-transformed tokens
// and the offline teacher tokens. Gradients flow to the student side
// only; the teacher matrix is a constant.
double distill_loss(const Matrix& v_video_hat, const Matrix& v_images_hat);

// One stream's input tokens and its precomputed offline teacher tokens.
struct DistillExample {
  Matrix v_images;  // M x d_model, encoder output
  Matrix teacher;   // M x d_model, teacher-transformed
};

struct DistillOptions {
  int epochs = 10;
  double lr = 1e-4;
  int batch_size = 8;
  double weight_decay = 0.01;
};

struct DistillResult {
  std::vector<double> epoch_loss;  // mean training loss per epoch
  std::int64_t steps = 0;
};

// AdamW + cosine decay over the full step budget. Throws TrainingError
// with the offending step index if the loss goes non-finite.
DistillResult train_distill(STRDModule& strd, const std::vector<DistillExample>& dataset,
                            const DistillOptions& options, SeededRng& rng);

// Mean offline distillation loss over a held-out set.
double distill_eval(const STRDModule& strd, const std::vector<DistillExample>& dataset);

}  // namespace vigil
