#include <doctest.h>

#include <cmath>

#include "vigil/attention.hpp"
#include "vigil/ops.hpp"

using namespace vigil;

namespace {

std::vector<MHSABlock> test_stack(int depth, int d = 16, int heads = 4, std::uint64_t seed = 11) {
  SeededRng rng(seed);
  return random_stack(MHSAConfig{d, heads, 2}, depth, rng);
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
  CHECK_THROWS_AS((MHSAConfig{10, 3, 4}.validate()), ConfigError);
  CHECK_THROWS_AS((MHSAConfig{0, 1, 1}.validate()), ConfigError);
  MHSAConfig ok{12, 3, 4};
  CHECK(ok.d_head() == 4);
}

TEST_CASE("single token: causal and bidirectional agree") {
  const auto stack = test_stack(2);
  SeededRng rng(1);
  const Matrix x = Matrix::randn(1, 16, rng);
  CHECK(max_abs_diff(mhsa_full(stack, x, true), mhsa_full(stack, x, false)) == 0.0);
}

TEST_CASE("causal masking: perturbing token j only changes outputs >= j") {
  const auto stack = test_stack(2);
  SeededRng rng(2);
  const Matrix x = Matrix::randn(8, 16, rng);
  const Matrix base = mhsa_full(stack, x, true);
  for (int j : {2, 5}) {
    Matrix perturbed = x;
    perturbed(j, 3) += 0.5;
    const Matrix out = mhsa_full(stack, perturbed, true);
    for (int i = 0; i < 8; ++i) {
      const double diff = max_abs_diff(ops::slice_rows(out, i, i + 1), ops::slice_rows(base, i, i + 1));
      if (i < j) {
        CHECK(diff == 0.0);  // exact: the past cannot see the future
      }
    }
    CHECK(max_abs_diff(ops::slice_rows(out, j, j + 1), ops::slice_rows(base, j, j + 1)) > 0.0);
  }
}

TEST_CASE("bidirectional differs from causal at position 0") {
  const auto stack = test_stack(2);
  SeededRng rng(3);
  const Matrix x = Matrix::randn(8, 16, rng);
  const Matrix causal = mhsa_full(stack, x, true);
  const Matrix full = mhsa_full(stack, x, false);
  CHECK(max_abs_diff(ops::slice_rows(causal, 0, 1), ops::slice_rows(full, 0, 1)) > 1e-9);
}

TEST_CASE("empty input passes through as empty") {
  const auto stack = test_stack(1);
  CHECK(mhsa_full(stack, Matrix(0, 16), true).rows() == 0);
  KVCache cache(1, 8, 16);
  CHECK(mhsa_stream(stack, cache, Matrix(0, 16)).rows() == 0);
  CHECK(cache.position_counter() == 0);
}

TEST_CASE("streaming token-by-token reproduces the offline causal forward") {
  const auto stack = test_stack(2);
  SeededRng rng(4);
  const int T = 24;
  const Matrix x = Matrix::randn(T, 16, rng);
  const Matrix offline = mhsa_full(stack, x, true);

  KVCache cache(2, T, 16);
  Matrix streamed(T, 16);
  for (int t = 0; t < T; ++t) {
    const Matrix out = mhsa_stream(stack, cache, ops::slice_rows(x, t, t + 1));
    for (int j = 0; j < 16; ++j) streamed(t, j) = out(0, j);
  }
  CHECK(max_abs_diff(streamed, offline) <= 1e-9);
  CHECK(cache.position_counter() == T);
  CHECK(cache.size() == T);
}

TEST_CASE("streaming in mixed chunk sizes reproduces the offline causal forward") {
  const auto stack = test_stack(3);
  SeededRng rng(5);
  const int T = 21;
  const Matrix x = Matrix::randn(T, 16, rng);
  const Matrix offline = mhsa_full(stack, x, true);

  KVCache cache(3, 64, 16);
  std::vector<Matrix> outs;
  int t = 0;
  for (int chunk : {1, 4, 2, 7, 1, 6}) {
    outs.push_back(mhsa_stream(stack, cache, ops::slice_rows(x, t, t + chunk)));
    t += chunk;
  }
  CHECK(t == T);
  CHECK(max_abs_diff(ops::concat_rows(outs), offline) <= 1e-9);
}

TEST_CASE("max_len 0: every token attends only to itself") {
  const auto stack = test_stack(2);
  SeededRng rng(6);
  const Matrix x = Matrix::randn(6, 16, rng);

  KVCache cache(2, 0, 16);
  const Matrix streamed = mhsa_stream(stack, cache, x);
  CHECK(cache.size() == 0);
  CHECK(cache.position_counter() == 6);

  for (int t = 0; t < 6; ++t) {
    const Matrix solo = mhsa_full(stack, ops::slice_rows(x, t, t + 1), true);
    CHECK(max_abs_diff(ops::slice_rows(streamed, t, t + 1), solo) <= 1e-12);
  }
}

TEST_CASE("eviction: attention over evicted tokens is exactly zero (single layer)") {
  // One layer, window 4: token 7 attends to 3..7 only. Output invariance
  // under perturbation of tokens 0..2 is equivalent to those attention
  // weights being exactly zero.
  const auto stack = test_stack(1);
  SeededRng rng(7);
  const int max_len = 4;
  Matrix x = Matrix::randn(8, 16, rng);

  auto last_output = [&](const Matrix& input) {
    KVCache cache(1, max_len, 16);
    Matrix out;
    for (int t = 0; t < input.rows(); ++t) {
      out = mhsa_stream(stack, cache, ops::slice_rows(input, t, t + 1));
    }
    return out;
  };

  const Matrix base = last_output(x);
  for (int j : {0, 1, 2}) {
    Matrix perturbed = x;
    perturbed(j, 0) += 100.0;
    CHECK(max_abs_diff(last_output(perturbed), base) == 0.0);
  }
  Matrix in_window = x;
  in_window(5, 0) += 1.0;
  CHECK(max_abs_diff(last_output(in_window), base) > 0.0);
}

TEST_CASE("eviction: a depth-d stack's exact horizon is d windows") {
  // Layer 2 consumes layer-1 outputs that were computed while older
  // tokens were still in layer 1's window, so the receptive field
  // compounds: depth 2 x window 2 reaches 4 positions behind a query.
  const auto stack = test_stack(2);
  SeededRng rng(17);
  Matrix x = Matrix::randn(10, 16, rng);

  auto last_output = [&](const Matrix& input) {
    KVCache cache(2, 2, 16);
    Matrix out;
    for (int t = 0; t < input.rows(); ++t) {
      out = mhsa_stream(stack, cache, ops::slice_rows(input, t, t + 1));
    }
    return out;
  };

  const Matrix base = last_output(x);
  for (int j : {0, 2, 4}) {  // beyond 9 - 2*2
    Matrix perturbed = x;
    perturbed(j, 0) += 100.0;
    CHECK(max_abs_diff(last_output(perturbed), base) == 0.0);
  }
  Matrix in_window = x;
  in_window(8, 0) += 1.0;
  CHECK(max_abs_diff(last_output(in_window), base) > 0.0);
}

TEST_CASE("cache bound: stored positions never exceed max_len") {
  const auto stack = test_stack(1);
  SeededRng rng(8);
  KVCache cache(1, 5, 16);
  for (int t = 0; t < 40; ++t) {
    mhsa_stream(stack, cache, Matrix::randn(1, 16, rng));
    CHECK(cache.size() <= 5);
    CHECK(cache.size() == std::min<std::int64_t>(cache.position_counter(), 5));
  }
  CHECK(cache.position_counter() == 40);  // monotone, counts everything ever seen
}

TEST_CASE("cache/stack mismatch raises a configuration error") {
  const auto stack = test_stack(2);
  KVCache wrong_layers(1, 8, 16);
  SeededRng rng(9);
  const Matrix x = Matrix::randn(1, 16, rng);
  CHECK_THROWS_AS(mhsa_stream(stack, wrong_layers, x), ConfigError);
  KVCache wrong_width(2, 8, 8);
  CHECK_THROWS_AS(mhsa_stream(stack, wrong_width, x), ConfigError);
}

TEST_CASE("positional encoding: additive, analytic row 0, streaming equivalence") {
  SeededRng rng(10);
  const Matrix a = Matrix::randn(4, 8, rng);
  const Matrix b = Matrix::randn(4, 8, rng);
  const Matrix da = ops::sub(positional_encode(a, 3), a);
  const Matrix db = ops::sub(positional_encode(b, 3), b);
  CHECK(max_abs_diff(da, db) <= 1e-12);  // encoding is independent of content

  const Matrix row0 = positional_encoding(1, 0, 8);
  for (int c = 0; c < 8; ++c) {
    CHECK(row0(0, c) == doctest::Approx(c % 2 == 0 ? 0.0 : 1.0).epsilon(1e-12));
  }

  const Matrix offline = positional_encoding(10, 0, 8);
  const Matrix windowed = ops::concat_rows({positional_encoding(4, 0, 8),
                                            positional_encoding(3, 4, 8),
                                            positional_encoding(3, 7, 8)});
  CHECK(max_abs_diff(offline, windowed) == 0.0);

  CHECK_THROWS_AS(positional_encoding(2, -1, 8), IndexError);
}
