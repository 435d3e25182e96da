#include "vigil/vision.hpp"

#include <cmath>

#include "vigil/ops.hpp"

namespace vigil {

void VisionEncoderConfig::validate() const {
  if (height < 1 || width < 1 || channels < 1 || patch < 1 || d_model < 1) {
    throw ConfigError("vision encoder config: all dims must be >= 1");
  }
  if (height % patch != 0 || width % patch != 0) {
    throw ConfigError("vision encoder config: frame " + std::to_string(height) + "x" +
                      std::to_string(width) + " not divisible by patch " + std::to_string(patch));
  }
}

FrameSequence FrameSequence::create(int height, int width, int channels, double fps,
                                    std::vector<Matrix> frames) {
  FrameSequence seq;
  seq.height = height;
  seq.width = width;
  seq.channels = channels;
  seq.fps = fps;
  seq.frames = std::move(frames);
  for (const auto& f : seq.frames) {
    if (f.rows() != height * width || f.cols() != channels) {
      throw ShapeError("frame is " + f.shape_str() + ", sequence wants " +
                       std::to_string(height * width) + "x" + std::to_string(channels));
    }
  }
  if (seq.frames.size() % 2 != 0 && !seq.frames.empty()) {
    seq.frames.push_back(seq.frames.back());  // duplicate the last frame
  }
  return seq;
}

VisionEncoder::VisionEncoder(const VisionEncoderConfig& cfg, SeededRng& rng) : cfg_(cfg) {
  cfg_.validate();
  const double sd = 1.0 / std::sqrt(static_cast<double>(cfg_.fused_patch_dim()));
  w_embed_ = Matrix::randn(cfg_.fused_patch_dim(), cfg_.d_model, rng, sd);
  b_embed_ = Matrix::randn(1, cfg_.d_model, rng, 0.02);
}

TokenBlock encode_frame_pair(const VisionEncoder& enc, const Matrix& f_prev, const Matrix& f_curr,
                             int pair_index, double fps) {
  const auto& cfg = enc.config();
  if (!f_prev.same_shape(f_curr)) {
    throw ShapeError("encode_frame_pair: frames differ, " + f_prev.shape_str() + " vs " +
                     f_curr.shape_str());
  }
  if (f_prev.rows() != cfg.height * cfg.width || f_prev.cols() != cfg.channels) {
    throw ShapeError("encode_frame_pair: frame " + f_prev.shape_str() + " does not match encoder " +
                     std::to_string(cfg.height) + "x" + std::to_string(cfg.width) + "x" +
                     std::to_string(cfg.channels));
  }
  if (pair_index < 0) throw IndexError("encode_frame_pair: negative pair index");

  const int p = cfg.patch;
  const int px = cfg.width / p;
  const int n = cfg.tokens_per_pair();

  // Row k of `patches` is the fused receptive field of patch k: all of
  // f_prev's slice first, then f_curr's, scanning the patch row-major.
  Matrix patches(n, cfg.fused_patch_dim());
  for (int patch_idx = 0; patch_idx < n; ++patch_idx) {
    const int py0 = (patch_idx / px) * p;
    const int px0 = (patch_idx % px) * p;
    int col = 0;
    for (const Matrix* frame : {&f_prev, &f_curr}) {
      for (int dy = 0; dy < p; ++dy) {
        for (int dx = 0; dx < p; ++dx) {
          const int pixel = (py0 + dy) * cfg.width + (px0 + dx);
          for (int c = 0; c < cfg.channels; ++c) {
            patches(patch_idx, col++) = (*frame)(pixel, c);
          }
        }
      }
    }
  }

  TokenBlock block;
  block.pair_index = pair_index;
  block.timestamp = 2.0 * pair_index / fps;
  Matrix tokens = ops::add_row(ops::matmul(patches, enc.embed_weight()), enc.embed_bias());
  block.tokens = positional_encode(tokens, static_cast<std::int64_t>(pair_index) * n);
  return block;
}

std::vector<TokenBlock> encode_sequence(const VisionEncoder& enc, const FrameSequence& seq) {
  std::vector<TokenBlock> blocks;
  blocks.reserve(seq.pair_count());
  for (int i = 0; i < seq.pair_count(); ++i) {
    blocks.push_back(encode_frame_pair(enc, seq.frames[2 * i], seq.frames[2 * i + 1], i, seq.fps));
  }
  return blocks;
}

Matrix encode_video_teacher(const VisionEncoder& enc, const std::vector<MHSABlock>& teacher_stack,
                            const FrameSequence& seq, bool bidirectional) {
  const auto blocks = encode_sequence(enc, seq);
  std::vector<Matrix> parts;
  parts.reserve(blocks.size());
  for (const auto& b : blocks) parts.push_back(b.tokens);
  const Matrix v_images = ops::concat_rows(parts);
  const int expect = seq.pair_count() * enc.config().tokens_per_pair();
  if (v_images.rows() != expect) {
    throw ShapeError("encode_video_teacher: token count " + std::to_string(v_images.rows()) +
                     " != pairs*patches " + std::to_string(expect));
  }
  if (v_images.rows() == 0) return Matrix(0, enc.config().d_model);
  return mhsa_full(teacher_stack, v_images, /*causal=*/!bidirectional);
}

}  // namespace vigil
