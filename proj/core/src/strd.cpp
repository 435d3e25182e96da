#include "vigil/strd.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vigil/ops.hpp"
#include "vigil/tape_blocks.hpp"

namespace vigil {

namespace {

void check_depth(int depth) {
  if (depth < 1 || depth > 3) {
    throw ConfigError("strd: depth " + std::to_string(depth) + " outside 1..3");
  }
}

}  // namespace

STRDModule STRDModule::init(const MHSAConfig& cfg, int depth, SeededRng& rng) {
  check_depth(depth);
  STRDModule m;
  m.depth = depth;
  m.blocks = random_stack(cfg, depth, rng, /*residual_scale=*/0.0);
  m.w_out = Matrix(cfg.d_model, cfg.d_model);
  return m;
}

STRDModule STRDModule::random(const MHSAConfig& cfg, int depth, SeededRng& rng) {
  check_depth(depth);
  STRDModule m;
  m.depth = depth;
  m.blocks = random_stack(cfg, depth, rng, /*residual_scale=*/1.0);
  m.w_out = Matrix::randn(cfg.d_model, cfg.d_model, rng, 1.0 / std::sqrt(cfg.d_model));
  return m;
}

KVCache STRDModule::make_cache(int max_len) const {
  return KVCache(depth, max_len, d_model());
}

ParamRefs STRDModule::params() {
  ParamRefs refs;
  for (int i = 0; i < depth; ++i) {
    auto block_refs = blocks[i].params("strd.blk" + std::to_string(i));
    refs.insert(refs.end(), block_refs.begin(), block_refs.end());
  }
  refs.emplace_back("strd.w_out", &w_out);
  return refs;
}

Matrix strd_concat(const std::vector<TokenBlock>& blocks) {
  if (blocks.empty()) return Matrix();
  std::vector<Matrix> parts;
  parts.reserve(blocks.size());
  int prev = -1;
  for (const auto& b : blocks) {
    if (b.pair_index <= prev) {
      throw OrderingError("strd_concat: pair index " + std::to_string(b.pair_index) +
                          " after " + std::to_string(prev));
    }
    prev = b.pair_index;
    parts.push_back(b.tokens);
  }
  return ops::concat_rows(parts);
}

namespace {

Matrix output_layer(const STRDModule& strd, const Matrix& h) {
  return ops::add(h, ops::matmul(h, strd.w_out));
}

}  // namespace

Matrix strd_forward(const STRDModule& strd, const Matrix& v_images) {
  if (v_images.rows() == 0) return Matrix(0, strd.d_model());
  const Matrix h = mhsa_full(strd.blocks, v_images, /*causal=*/true);
  return output_layer(strd, h);
}

Matrix strd_forward_stream(const STRDModule& strd, KVCache& cache, const Matrix& v_new) {
  if (v_new.rows() == 0) return Matrix(0, strd.d_model());
  const Matrix h = mhsa_stream(strd.blocks, cache, v_new);
  return output_layer(strd, h);
}

double distill_loss(const Matrix& v_video_hat, const Matrix& v_images_hat) {
  return ops::mse(v_video_hat, v_images_hat);
}

namespace {

// Tape program for one example; returns the scalar loss var.
Var distill_forward_tape(GradTape& tape, const std::vector<BlockVars>& block_vars,
                         const MHSAConfig& cfg, Var w_out, const DistillExample& ex) {
  Var x = tape.constant(ex.v_images);
  const Matrix mask = ops::causal_mask(ex.v_images.rows());
  Var h = x;
  for (const auto& vars : block_vars) h = block_forward_tape(tape, vars, cfg, h, mask);
  Var out = tape.add(h, tape.matmul(h, w_out));
  Var teacher = tape.constant(ex.teacher);
  return tape.mse(out, teacher);
}

}  // namespace

DistillResult train_distill(STRDModule& strd, const std::vector<DistillExample>& dataset,
                            const DistillOptions& options, SeededRng& rng) {
  if (dataset.empty()) throw ConfigError("train_distill: empty dataset");
  const int n = static_cast<int>(dataset.size());
  const int batch = std::max(1, std::min(options.batch_size, n));
  const std::int64_t steps_per_epoch = (n + batch - 1) / batch;
  const std::int64_t total_steps = steps_per_epoch * options.epochs;

  AdamW opt(options.lr, 0.9, 0.999, 1e-8, options.weight_decay);
  ParamRefs params = strd.params();
  DistillResult result;

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  std::int64_t step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    // Fisher-Yates with the run rng keeps the whole loop seed-deterministic.
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.uniform_int(0, i));
      std::swap(order[i], order[j]);
    }
    double epoch_sum = 0.0;
    for (int start = 0; start < n; start += batch) {
      const int end = std::min(n, start + batch);
      GradTape tape;
      std::map<std::string, Var> registry;
      std::vector<BlockVars> block_vars;
      for (int b = 0; b < strd.depth; ++b) {
        block_vars.push_back(bind_block(tape, strd.blocks[b], /*trainable=*/true,
                                        "strd.blk" + std::to_string(b), &registry));
      }
      Var w_out = tape.param(strd.w_out);
      registry["strd.w_out"] = w_out;

      Var loss{-1};
      for (int i = start; i < end; ++i) {
        Var li = distill_forward_tape(tape, block_vars, strd.config(), w_out, dataset[order[i]]);
        loss = loss.valid() ? tape.add(loss, li) : li;
      }
      loss = tape.scale(loss, 1.0 / (end - start));
      const double loss_value = tape.scalar(loss);
      if (!std::isfinite(loss_value)) {
        throw TrainingError("train_distill: non-finite loss at step " + std::to_string(step));
      }
      epoch_sum += loss_value * (end - start);
      tape.backward(loss);
      opt.step(params, collect_grads(tape, registry), cosine_decay(step, total_steps));
      ++step;
    }
    result.epoch_loss.push_back(epoch_sum / n);
  }
  result.steps = step;
  return result;
}

double distill_eval(const STRDModule& strd, const std::vector<DistillExample>& dataset) {
  if (dataset.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& ex : dataset) {
    sum += distill_loss(ex.teacher, strd_forward(strd, ex.v_images));
  }
  return sum / dataset.size();
}

}  // namespace vigil
