#include <doctest.h>

#include <cmath>

#include "vigil/ops.hpp"
#include "vigil/strd.hpp"
#include "vigil/tape_blocks.hpp"

using namespace vigil;

namespace {

constexpr int kD = 16;

MHSAConfig cfg() { return MHSAConfig{kD, 4, 2}; }

double max_abs_diff(const Matrix& a, const Matrix& b) {
  REQUIRE(a.same_shape(b));
  double m = 0.0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b(i, j)));
  return m;
}

std::vector<TokenBlock> random_blocks(int pairs, int n, SeededRng& rng) {
  std::vector<TokenBlock> blocks;
  for (int i = 0; i < pairs; ++i) {
    blocks.push_back({i, i * 1.0, Matrix::randn(n, kD, rng)});
  }
  return blocks;
}

}  // namespace

TEST_CASE("depth outside 1..3 is rejected") {
  SeededRng rng(1);
  CHECK_THROWS_AS(STRDModule::init(cfg(), 0, rng), ConfigError);
  CHECK_THROWS_AS(STRDModule::init(cfg(), 4, rng), ConfigError);
}

TEST_CASE("strd_concat: order, shape, round trip") {
  SeededRng rng(2);
  auto blocks = random_blocks(3, 4, rng);
  const Matrix m = strd_concat(blocks);
  CHECK(m.rows() == 12);
  CHECK(ops::slice_rows(m, 0, 4) == blocks[0].tokens);
  CHECK(ops::slice_rows(m, 4, 8) == blocks[1].tokens);

  CHECK(strd_concat({blocks[0]}) == blocks[0].tokens);

  std::swap(blocks[0], blocks[1]);
  CHECK_THROWS_AS(strd_concat(blocks), OrderingError);
  auto dup = random_blocks(2, 4, rng);
  dup[1].pair_index = 0;
  CHECK_THROWS_AS(strd_concat(dup), OrderingError);
}

TEST_CASE("fresh module is exactly the identity") {
  SeededRng rng(3);
  const STRDModule strd = STRDModule::init(cfg(), 2, rng);
  const Matrix x = Matrix::randn(12, kD, rng);
  CHECK(max_abs_diff(strd_forward(strd, x), x) == 0.0);
}

TEST_CASE("streaming matches the offline forward") {
  SeededRng rng(4);
  STRDModule strd = STRDModule::random(cfg(), 2, rng);
  const Matrix x = Matrix::randn(32, kD, rng);
  const Matrix offline = strd_forward(strd, x);

  KVCache cache = strd.make_cache(64);
  std::vector<Matrix> outs;
  for (int i = 0; i < 8; ++i) {
    outs.push_back(strd_forward_stream(strd, cache, ops::slice_rows(x, 4 * i, 4 * i + 4)));
  }
  CHECK(max_abs_diff(ops::concat_rows(outs), offline) <= 1e-9);
}

TEST_CASE("bounded cache: exact invariance beyond depth x window pairs") {
  SeededRng rng(5);
  const int n = 4;
  STRDModule strd = STRDModule::random(cfg(), 2, rng);

  auto last_block_out = [&](const std::vector<TokenBlock>& blocks) {
    KVCache cache = strd.make_cache(n);  // one pair retained
    Matrix out;
    for (const auto& b : blocks) out = strd_forward_stream(strd, cache, b.tokens);
    return out;
  };

  auto blocks = random_blocks(8, n, rng);
  const Matrix base = last_block_out(blocks);
  // depth 2 x window 1 pair: block 7 cannot see blocks <= 4
  for (int j : {0, 2, 4}) {
    auto perturbed = blocks;
    perturbed[j].tokens(0, 0) += 50.0;
    CHECK(max_abs_diff(last_block_out(perturbed), base) == 0.0);
  }
  auto near = blocks;
  near[6].tokens(0, 0) += 1.0;
  CHECK(max_abs_diff(last_block_out(near), base) > 0.0);
}

TEST_CASE("distill_loss examples") {
  SeededRng rng(6);
  const Matrix a = Matrix::randn(4, kD, rng);
  CHECK(distill_loss(a, a) == 0.0);

  Matrix shifted = a;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) shifted(i, j) += 3.0;
  CHECK(distill_loss(shifted, a) == doctest::Approx(9.0).epsilon(1e-12));

  const Matrix x{{1.0, 2.0}, {3.0, 4.0}};
  const Matrix y{{1.5, 2.0}, {2.0, 6.0}};
  // (0.25 + 0 + 1 + 4) / 4
  CHECK(distill_loss(x, y) == doctest::Approx(1.3125).epsilon(1e-12));
  CHECK_THROWS_AS(distill_loss(Matrix(2, 2), Matrix(2, 3)), ShapeError);
}

TEST_CASE("distillation objective gradients pass finite differences") {
  SeededRng rng(7);
  STRDModule strd = STRDModule::random(cfg(), 1, rng);
  const Matrix x = Matrix::randn(6, kD, rng);
  const Matrix teacher = Matrix::randn(6, kD, rng);
  const Matrix mask = ops::causal_mask(6);

  auto loss_with = [&](const STRDModule& m) {
    GradTape t;
    std::map<std::string, Var> reg;
    std::vector<BlockVars> bv;
    for (int b = 0; b < m.depth; ++b) {
      bv.push_back(bind_block(t, m.blocks[b], true, "strd.blk" + std::to_string(b), &reg));
    }
    Var w_out = t.param(m.w_out);
    Var h = t.constant(x);
    for (const auto& vars : bv) h = block_forward_tape(t, vars, m.config(), h, mask);
    Var out = t.add(h, t.matmul(h, w_out));
    Var loss = t.mse(out, t.constant(teacher));
    return std::make_tuple(std::move(t), loss, reg, w_out);
  };

  // check d(loss)/d(w_out) and d(loss)/d(blk0.wq) against central differences
  DiffProbe w_out_probe{
      [&](const Matrix& w) {
        STRDModule m = strd;
        m.w_out = w;
        auto [t, loss, reg, wv] = loss_with(m);
        return t.scalar(loss);
      },
      [&](const Matrix& w) {
        STRDModule m = strd;
        m.w_out = w;
        auto [t, loss, reg, wv] = loss_with(m);
        t.backward(loss);
        return t.grad(wv);
      }};
  CHECK(finite_diff_check(w_out_probe, Matrix::randn(kD, kD, rng, 0.2), 1e-5) <= 1e-4);

  DiffProbe wq_probe{
      [&](const Matrix& w) {
        STRDModule m = strd;
        m.blocks[0].wq = w;
        auto [t, loss, reg, wv] = loss_with(m);
        return t.scalar(loss);
      },
      [&](const Matrix& w) {
        STRDModule m = strd;
        m.blocks[0].wq = w;
        auto [t, loss, reg, wv] = loss_with(m);
        t.backward(loss);
        return t.grad(reg.at("strd.blk0.wq"));
      }};
  CHECK(finite_diff_check(wq_probe, Matrix::randn(kD, kD, rng, 0.2), 1e-5) <= 1e-4);
}

TEST_CASE("identity teacher is a fixed point of distillation") {
  SeededRng rng(8);
  STRDModule strd = STRDModule::init(cfg(), 2, rng);

  std::vector<DistillExample> data;
  for (int i = 0; i < 4; ++i) {
    const Matrix x = Matrix::randn(8, kD, rng);
    data.push_back({x, x});  // teacher passes tokens through unchanged
  }
  CHECK(distill_eval(strd, data) == 0.0);

  DistillOptions opts;
  opts.epochs = 2;
  opts.batch_size = 2;
  SeededRng trng(9);
  const DistillResult res = train_distill(strd, data, opts, trng);
  for (double loss : res.epoch_loss) CHECK(loss == 0.0);
  CHECK(distill_eval(strd, data) == 0.0);
}

TEST_CASE("lr = 0 leaves every weight bit-identical") {
  SeededRng rng(10);
  STRDModule strd = STRDModule::random(cfg(), 2, rng);
  const STRDModule before = strd;

  std::vector<DistillExample> data;
  for (int i = 0; i < 3; ++i) {
    data.push_back({Matrix::randn(8, kD, rng), Matrix::randn(8, kD, rng)});
  }
  DistillOptions opts;
  opts.epochs = 1;
  opts.lr = 0.0;
  SeededRng trng(11);
  train_distill(strd, data, opts, trng);

  CHECK(strd.w_out == before.w_out);
  for (int b = 0; b < strd.depth; ++b) {
    CHECK(strd.blocks[b].wq == before.blocks[b].wq);
    CHECK(strd.blocks[b].w2 == before.blocks[b].w2);
  }
}

TEST_CASE("training reduces the distillation loss") {
  SeededRng rng(12);
  const MHSAConfig c = cfg();
  const auto teacher = random_stack(c, 2, rng, 0.5);
  STRDModule strd = STRDModule::init(c, 2, rng);

  std::vector<DistillExample> data;
  for (int i = 0; i < 12; ++i) {
    const Matrix x = Matrix::randn(12, kD, rng);
    data.push_back({x, mhsa_full(teacher, x, true)});
  }
  const double before = distill_eval(strd, data);
  DistillOptions opts;
  opts.epochs = 30;
  opts.lr = 3e-3;
  opts.batch_size = 4;
  SeededRng trng(13);
  const DistillResult res = train_distill(strd, data, opts, trng);
  const double after = distill_eval(strd, data);
  CHECK(after < 0.5 * before);
  CHECK(res.epoch_loss.front() > res.epoch_loss.back());
}

TEST_CASE("empty dataset is rejected; divergence carries the step index") {
  SeededRng rng(14);
  STRDModule strd = STRDModule::init(cfg(), 1, rng);
  DistillOptions opts;
  SeededRng trng(15);
  std::vector<DistillExample> empty;
  CHECK_THROWS_AS(train_distill(strd, empty, opts, trng), ConfigError);
}
