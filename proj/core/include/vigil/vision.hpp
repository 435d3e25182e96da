#pragma once

#include <vector>

#include "vigil/attention.hpp"
#include "vigil/matrix.hpp"
#include "vigil/rng.hpp"

namespace vigil {

// A frame is an (H*W) x C matrix; the sequence owns its geometry.
// Sequences are padded to even length by repeating the last frame.
struct FrameSequence {
  int height = 0;
  int width = 0;
  int channels = 0;
  double fps = 2.0;
  std::vector<Matrix> frames;

  static FrameSequence create(int height, int width, int channels, double fps,
                              std::vector<Matrix> frames);

  int frame_count() const { return static_cast<int>(frames.size()); }
  int pair_count() const { return frame_count() / 2; }
  double pair_timestamp(int pair_index) const { return 2.0 * pair_index / fps; }
};

// The N patch tokens produced from one frame pair.
struct TokenBlock {
  int pair_index = 0;
  double timestamp = 0.0;
  Matrix tokens;  // N x d_model
};

struct VisionEncoderConfig {
  int height = 16;
  int width = 16;
  int channels = 4;
  int patch = 8;
  int d_model = 32;

  int patches_per_frame() const { return (height / patch) * (width / patch); }
  int tokens_per_pair() const { return patches_per_frame(); }
  int fused_patch_dim() const { return 2 * patch * patch * channels; }
  void validate() const;
};

// Patch tokenizer over consecutive frame pairs: the two temporal slices of
// each patch are concatenated channel-wise and linearly projected, then
// positionally encoded by global patch index. Weights freeze after
// construction and never change during any training stage.
class VisionEncoder {
 public:
  VisionEncoder(const VisionEncoderConfig& cfg, SeededRng& rng);

  const VisionEncoderConfig& config() const { return cfg_; }
  const Matrix& embed_weight() const { return w_embed_; }
  const Matrix& embed_bias() const { return b_embed_; }
  bool frozen() const { return frozen_; }

 private:
  VisionEncoderConfig cfg_;
  Matrix w_embed_;  // fused_patch_dim x d_model
  Matrix b_embed_;  // 1 x d_model
  bool frozen_ = true;
};

TokenBlock encode_frame_pair(const VisionEncoder& enc, const Matrix& f_prev, const Matrix& f_curr,
                             int pair_index, double fps = 2.0);

std::vector<TokenBlock> encode_sequence(const VisionEncoder& enc, const FrameSequence& seq);

// Offline path: every pair embedded, concatenated in time order, then run
// through the teacher stack over the full sequence. Returns M x d_model
// with M = pair_count * tokens_per_pair. bidirectional=false keeps the
// teacher causal (the default distillation target); true gives the
// full-context variant for studying the gap.
Matrix encode_video_teacher(const VisionEncoder& enc, const std::vector<MHSABlock>& teacher_stack,
                            const FrameSequence& seq, bool bidirectional = false);

}  // namespace vigil
