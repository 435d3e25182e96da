#include <doctest.h>

#include <cmath>

#include "vigil/ops.hpp"
#include "vigil/vision.hpp"

using namespace vigil;

namespace {

VisionEncoderConfig small_cfg() {
  VisionEncoderConfig c;
  c.height = 16;
  c.width = 16;
  c.channels = 4;
  c.patch = 8;
  c.d_model = 32;
  return c;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  REQUIRE(a.same_shape(b));
  double m = 0.0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b(i, j)));
  return m;
}

}  // namespace

TEST_CASE("config validation") {
  VisionEncoderConfig bad = small_cfg();
  bad.patch = 7;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK(small_cfg().tokens_per_pair() == 4);
  CHECK(small_cfg().fused_patch_dim() == 2 * 8 * 8 * 4);
}

TEST_CASE("zero frames embed to positional encodings plus bias") {
  SeededRng rng(1);
  const VisionEncoder enc(small_cfg(), rng);
  const Matrix zero(16 * 16, 4);
  const TokenBlock block = encode_frame_pair(enc, zero, zero, 0);
  CHECK(block.tokens.rows() == 4);
  CHECK(block.tokens.cols() == 32);

  const Matrix expected =
      positional_encode(ops::add_row(Matrix(4, 32), enc.embed_bias()), 0);
  CHECK(max_abs_diff(block.tokens, expected) == 0.0);
}

TEST_CASE("swapping the frames changes the tokens") {
  SeededRng rng(2);
  const VisionEncoder enc(small_cfg(), rng);
  const Matrix f0 = Matrix::randn(16 * 16, 4, rng);
  const Matrix f1 = Matrix::randn(16 * 16, 4, rng);
  const TokenBlock ab = encode_frame_pair(enc, f0, f1, 0);
  const TokenBlock ba = encode_frame_pair(enc, f1, f0, 0);
  CHECK(max_abs_diff(ab.tokens, ba.tokens) > 1e-6);
}

TEST_CASE("pair index shifts tokens by exactly the positional-encoding delta") {
  SeededRng rng(3);
  const VisionEncoder enc(small_cfg(), rng);
  const Matrix f0 = Matrix::randn(16 * 16, 4, rng);
  const Matrix f1 = Matrix::randn(16 * 16, 4, rng);
  const TokenBlock p0 = encode_frame_pair(enc, f0, f1, 0);
  const TokenBlock p1 = encode_frame_pair(enc, f0, f1, 1);
  const Matrix delta = ops::sub(p1.tokens, p0.tokens);
  const Matrix expected = ops::sub(positional_encoding(4, 4, 32), positional_encoding(4, 0, 32));
  CHECK(max_abs_diff(delta, expected) <= 1e-12);
  CHECK(p1.timestamp == doctest::Approx(1.0));  // pair 1 starts at frame 2, 2 fps
}

TEST_CASE("frame shape mismatches are rejected") {
  SeededRng rng(4);
  const VisionEncoder enc(small_cfg(), rng);
  const Matrix good(16 * 16, 4);
  CHECK_THROWS_AS(encode_frame_pair(enc, good, Matrix(16 * 16, 3), 0), ShapeError);
  CHECK_THROWS_AS(encode_frame_pair(enc, Matrix(8 * 8, 4), Matrix(8 * 8, 4), 0), ShapeError);
  CHECK_THROWS_AS(encode_frame_pair(enc, good, good, -1), IndexError);
}

TEST_CASE("odd-length sequences pad by repeating the last frame") {
  std::vector<Matrix> frames(5, Matrix(16 * 16, 4));
  const FrameSequence seq = FrameSequence::create(16, 16, 4, 2.0, std::move(frames));
  CHECK(seq.frame_count() == 6);
  CHECK(seq.pair_count() == 3);
  CHECK(seq.frames[5] == seq.frames[4]);
}

TEST_CASE("token count law: M = pairs x patches") {
  SeededRng rng(5);
  const VisionEncoder enc(small_cfg(), rng);
  SeededRng frng(6);

  auto make_seq = [&](int t) {
    std::vector<Matrix> frames;
    for (int i = 0; i < t; ++i) frames.push_back(Matrix::randn(16 * 16, 4, frng));
    return FrameSequence::create(16, 16, 4, 2.0, std::move(frames));
  };

  const auto teacher = random_stack(MHSAConfig{32, 4, 2}, 2, rng);
  const Matrix m8 = encode_video_teacher(enc, teacher, make_seq(8));
  CHECK(m8.rows() == (8 / 2) * 4);  // 16 tokens
  const Matrix m16 = encode_video_teacher(enc, teacher, make_seq(16));
  CHECK(m16.rows() == 2 * m8.rows());  // doubling T doubles M

  const auto blocks = encode_sequence(enc, make_seq(8));
  CHECK(blocks.size() == 4);
  for (const auto& b : blocks) CHECK(b.tokens.rows() == 4);
}

TEST_CASE("teacher over one pair equals the stack applied to that block") {
  SeededRng rng(7);
  const VisionEncoder enc(small_cfg(), rng);
  const auto teacher = random_stack(MHSAConfig{32, 4, 2}, 2, rng);
  SeededRng frng(8);
  std::vector<Matrix> frames{Matrix::randn(16 * 16, 4, frng), Matrix::randn(16 * 16, 4, frng)};
  const FrameSequence seq = FrameSequence::create(16, 16, 4, 2.0, frames);

  const Matrix via_teacher = encode_video_teacher(enc, teacher, seq);
  const TokenBlock block = encode_frame_pair(enc, frames[0], frames[1], 0);
  const Matrix direct = mhsa_full(teacher, block.tokens, true);
  CHECK(max_abs_diff(via_teacher, direct) == 0.0);
}

TEST_CASE("encoder weights are frozen value types") {
  SeededRng rng(9);
  const VisionEncoder enc(small_cfg(), rng);
  CHECK(enc.frozen());
  const std::vector<double> before = enc.embed_weight().storage();

  // hammer the encoder with work; weights must be byte-identical after
  SeededRng frng(10);
  for (int i = 0; i < 5; ++i) {
    encode_frame_pair(enc, Matrix::randn(16 * 16, 4, frng), Matrix::randn(16 * 16, 4, frng), i);
  }
  CHECK(enc.embed_weight().storage() == before);
}
