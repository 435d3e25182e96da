#include "vigil/stream_lm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vigil/ops.hpp"
#include "vigil/strd.hpp"
#include "vigil/tape_blocks.hpp"

namespace vigil {

// ---- interleaved sequences --------------------------------------------

void InterleavedSequence::validate() const {
  for (int i = 0; i < positions(); ++i) {
    if (l[i] && f[i]) {
      throw ConfigError("interleaved sequence: l and f both set at position " + std::to_string(i));
    }
  }
  std::vector<std::uint8_t> is_final(positions(), 0);
  for (int pos : block_final_position) is_final[pos] = 1;
  for (int i = 0; i < positions(); ++i) {
    if (f[i] && !is_final[i]) {
      throw ConfigError("interleaved sequence: f set off a frame-final position " +
                        std::to_string(i));
    }
    if (is_final[i]) {
      const bool next_is_response = i + 1 < positions() && l[i + 1];
      if (f[i] == next_is_response) {
        throw ConfigError("interleaved sequence: bad gate flag at position " + std::to_string(i));
      }
    }
  }
}

namespace {

struct PendingTokens {
  std::vector<int> ids;
  bool supervised = false;
};

}  // namespace

InterleavedSequence build_interleaved(const AnnotationSet& annotations, TaskMode mode,
                                      const std::vector<TokenBlock>& blocks,
                                      const std::vector<QueryInsert>& query_schedule,
                                      const Vocab& vocab) {
  const int pairs = static_cast<int>(blocks.size());
  for (int k = 0; k < pairs; ++k) {
    if (blocks[k].pair_index != k) {
      throw OrderingError("build_interleaved: block " + std::to_string(k) + " carries pair index " +
                          std::to_string(blocks[k].pair_index));
    }
  }
  auto pair_of = [&](int frame, const char* what) {
    const int p = frame / 2;
    if (frame < 0 || p >= pairs) {
      throw AlignmentError(std::string("build_interleaved: ") + what + " frame " +
                           std::to_string(frame) + " beyond the stream's " +
                           std::to_string(pairs) + " pairs");
    }
    return p;
  };

  // Token runs waiting to be emitted after each pair's block.
  std::vector<std::vector<PendingTokens>> after(pairs);
  if (mode == TaskMode::VAP) {
    for (const auto& r : annotations.vap) {
      auto ids = vocab.encode(r.response);
      ids.push_back(vocab.response_end());
      after[pair_of(r.frame, "prediction")].push_back({std::move(ids), true});
    }
  } else if (mode == TaskMode::VAD) {
    for (const auto& r : annotations.vad) {
      auto ids = vocab.encode(r.response);
      ids.push_back(vocab.response_end());
      after[pair_of(r.frame, "detection")].push_back({std::move(ids), true});
    }
  } else {
    for (const auto& r : annotations.vaa) {
      const int p = pair_of(r.frame, "analysis query");
      std::vector<int> q{vocab.query_start()};
      for (int id : vocab.encode(r.query)) q.push_back(id);
      q.push_back(vocab.query_end());
      after[p].push_back({std::move(q), false});
      auto ans = vocab.encode(r.answer);
      ans.push_back(vocab.response_end());
      after[p].push_back({std::move(ans), true});
    }
  }
  for (const auto& q : query_schedule) {
    const int p = pair_of(q.frame, "scheduled query");
    std::vector<int> ids{vocab.query_start()};
    for (int id : vocab.encode(q.tokens)) ids.push_back(id);
    ids.push_back(vocab.query_end());
    after[p].push_back({std::move(ids), false});
  }

  InterleavedSequence seq;
  seq.blocks = blocks;
  auto emit_token = [&seq](int id, bool supervised) {
    seq.items.push_back({-1, id});
    seq.token_at.push_back(id);
    seq.l.push_back(supervised ? 1 : 0);
    seq.f.push_back(0);
  };

  emit_token(vocab.bos(), false);
  emit_token(vocab.query_start(), false);
  for (int id : vocab.encode(task_prompt(mode))) emit_token(id, false);
  emit_token(vocab.query_end(), false);

  for (int k = 0; k < pairs; ++k) {
    const int n = blocks[k].tokens.rows();
    seq.items.push_back({k, -1});
    for (int r = 0; r < n; ++r) {
      seq.token_at.push_back(-1);
      seq.l.push_back(0);
      seq.f.push_back(0);
    }
    seq.block_final_position.push_back(seq.positions() - 1);
    for (const auto& run : after[k]) {
      for (int id : run.ids) emit_token(id, run.supervised);
    }
  }

  for (int b = 0; b < pairs; ++b) {
    const int pos = seq.block_final_position[b];
    const bool next_is_response = pos + 1 < seq.positions() && seq.l[pos + 1];
    seq.f[pos] = next_is_response ? 0 : 1;
  }
  seq.validate();
  return seq;
}

// ---- model --------------------------------------------------------------

StreamLM StreamLM::init(const StreamLMConfig& cfg, const Vocab& vocab, SeededRng& rng) {
  cfg.mhsa().validate();
  StreamLM m;
  m.cfg = cfg;
  m.vocab = vocab;
  const int d = cfg.d_model;
  const double sd = 1.0 / std::sqrt(static_cast<double>(d));
  m.embed = Matrix::randn(vocab.size(), d, rng, sd);
  m.w_proj = Matrix::identity(d);
  m.blocks = random_stack(cfg.mhsa(), cfg.n_layers, rng, /*residual_scale=*/1.0);
  m.lnf_gain = Matrix::full(1, d, 1.0);
  m.lnf_bias = Matrix(1, d);
  m.w_head = Matrix::randn(d, vocab.size(), rng, sd);
  return m;
}

std::vector<std::string> StreamLM::linear_layer_names() const {
  std::vector<std::string> names{"lm.proj"};
  for (int i = 0; i < cfg.n_layers; ++i) {
    for (const char* f : {"wq", "wk", "wv", "wo", "w1", "w2"}) {
      names.push_back("lm.blk" + std::to_string(i) + "." + f);
    }
  }
  names.push_back("lm.head");
  return names;
}

const Matrix& StreamLM::base_weight(const std::string& name) const {
  return const_cast<StreamLM*>(this)->base_weight(name);
}

Matrix& StreamLM::base_weight(const std::string& name) {
  if (name == "lm.proj") return w_proj;
  if (name == "lm.head") return w_head;
  if (name.rfind("lm.blk", 0) == 0) {
    const auto dot = name.find('.', 6);
    if (dot != std::string::npos) {
      const int idx = std::stoi(name.substr(6, dot - 6));
      if (idx >= 0 && idx < cfg.n_layers) {
        MHSABlock& b = blocks[idx];
        const std::string field = name.substr(dot + 1);
        if (field == "wq") return b.wq;
        if (field == "wk") return b.wk;
        if (field == "wv") return b.wv;
        if (field == "wo") return b.wo;
        if (field == "w1") return b.w1;
        if (field == "w2") return b.w2;
      }
    }
  }
  throw ConfigError("stream lm: no linear layer named '" + name + "'");
}

Matrix StreamLM::effective_weight(const std::string& name) const {
  const Matrix& base = base_weight(name);
  auto it = adapters.find(name);
  if (it == adapters.end()) return base;
  return ops::add(base, ops::scale(ops::matmul(it->second.a, it->second.b), it->second.scaling()));
}

std::vector<MHSABlock> StreamLM::effective_blocks() const {
  std::vector<MHSABlock> out = blocks;
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string prefix = "lm.blk" + std::to_string(i) + ".";
    out[i].wq = effective_weight(prefix + "wq");
    out[i].wk = effective_weight(prefix + "wk");
    out[i].wv = effective_weight(prefix + "wv");
    out[i].wo = effective_weight(prefix + "wo");
    out[i].w1 = effective_weight(prefix + "w1");
    out[i].w2 = effective_weight(prefix + "w2");
  }
  return out;
}

StreamLM apply_lora(const StreamLM& model, const LoRASpec& spec, SeededRng& rng) {
  StreamLM out = model;
  std::vector<std::string> targets = spec.targets.empty() ? model.linear_layer_names() : spec.targets;
  for (const auto& name : targets) {
    const Matrix& base = out.base_weight(name);  // throws on unknown layer
    const int d_in = base.rows();
    const int d_out = base.cols();
    if (spec.rank > std::min(d_in, d_out)) {
      throw RankError("apply_lora: rank " + std::to_string(spec.rank) + " exceeds " + name +
                      " (" + base.shape_str() + ")");
    }
    LoRAAdapter adapter;
    adapter.a = Matrix::randn(d_in, spec.rank, rng, 1.0 / std::sqrt(static_cast<double>(d_in)));
    adapter.b = Matrix(spec.rank, d_out);  // zero: adapted == base until trained
    adapter.alpha = spec.alpha;
    out.adapters[name] = std::move(adapter);
  }
  return out;
}

void merge_lora(StreamLM& model) {
  for (auto& [name, adapter] : model.adapters) {
    Matrix& base = model.base_weight(name);
    base = ops::add(base, ops::scale(ops::matmul(adapter.a, adapter.b), adapter.scaling()));
  }
  model.adapters.clear();
}

// ---- forwards ------------------------------------------------------------

namespace {

Matrix embed_rows(const StreamLM& model, const std::vector<int>& ids) {
  Matrix out(static_cast<int>(ids.size()), model.cfg.d_model);
  for (int i = 0; i < out.rows(); ++i) {
    const int id = ids[i];
    if (id < 0 || id >= model.vocab.size()) {
      throw VocabError("stream lm: token id " + std::to_string(id) + " outside the vocabulary");
    }
    for (int j = 0; j < out.cols(); ++j) out(i, j) = model.embed(id, j);
  }
  return out;
}

Matrix input_rows(const StreamLM& model, const InterleavedSequence& seq, const Matrix& proj_eff) {
  std::vector<Matrix> parts;
  std::vector<int> text_run;
  auto flush = [&]() {
    if (!text_run.empty()) {
      parts.push_back(embed_rows(model, text_run));
      text_run.clear();
    }
  };
  for (const auto& item : seq.items) {
    if (item.is_block()) {
      flush();
      parts.push_back(ops::matmul(seq.blocks[item.block].tokens, proj_eff));
    } else {
      text_run.push_back(item.token);
    }
  }
  flush();
  return ops::concat_rows(parts);
}

Matrix head_dists(const Matrix& x, const Matrix& lnf_gain, const Matrix& lnf_bias,
                  const Matrix& head) {
  const Matrix z = ops::layer_norm(x, lnf_gain, lnf_bias);
  return ops::softmax_rows(ops::matmul(z, head));
}

}  // namespace

Matrix interleaved_attention_mask(const InterleavedSequence& seq) {
  const int n = seq.positions();
  // run id per position: consecutive supervised tokens share one id
  std::vector<int> run(n, -1);
  int next_run = 0;
  for (int i = 0; i < n; ++i) {
    if (!seq.l[i]) continue;
    run[i] = (i > 0 && seq.l[i - 1]) ? run[i - 1] : next_run++;
  }
  Matrix mask(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j <= i; ++j) {
      mask(i, j) = (run[j] < 0 || run[j] == run[i]) ? 1.0 : 0.0;
    }
  }
  return mask;
}

Matrix lm_forward(const StreamLM& model, const InterleavedSequence& seq) {
  if (seq.positions() == 0) return Matrix(0, model.vocab.size());
  const Matrix proj_eff = model.effective_weight("lm.proj");
  // no LM-level positional encoding: the visual tokens already carry the
  // vision-side encoding, and text templates are order-distinct, so the
  // rows are position-complete as-is (and live sessions line up with the
  // training layout even though generated replies never persist)
  Matrix x = input_rows(model, seq, proj_eff);
  x = mhsa_full_masked(model.effective_blocks(), x, interleaved_attention_mask(seq));
  return head_dists(x, model.lnf_gain, model.lnf_bias, model.effective_weight("lm.head"));
}

LMStream make_lm_stream(const StreamLM& model, int cache_len) {
  LMStream s;
  s.blocks = model.effective_blocks();
  s.proj = model.effective_weight("lm.proj");
  s.head = model.effective_weight("lm.head");
  s.lnf_gain = model.lnf_gain;
  s.lnf_bias = model.lnf_bias;
  s.cache = KVCache(model.cfg.n_layers, cache_len, model.cfg.d_model);
  return s;
}

namespace {

Matrix lm_stream_step(LMStream& stream, const Matrix& rows) {
  stream.next_position += rows.rows();
  const Matrix y = mhsa_stream(stream.blocks, stream.cache, rows);
  return head_dists(y, stream.lnf_gain, stream.lnf_bias, stream.head);
}

}  // namespace

Matrix lm_stream_feed_visual(LMStream& stream, const Matrix& vhat_tokens) {
  return lm_stream_step(stream, ops::matmul(vhat_tokens, stream.proj));
}

Matrix lm_stream_feed_tokens(LMStream& stream, const StreamLM& model, const std::vector<int>& ids) {
  return lm_stream_step(stream, embed_rows(model, ids));
}

// ---- joint loss ------------------------------------------------------------

JointLoss joint_loss(const Matrix& dists, const InterleavedSequence& seq, double w,
                     const Vocab& vocab) {
  if (w < 0.0) throw ConfigError("joint_loss: w must be >= 0");
  if (dists.rows() != seq.positions()) {
    throw ShapeError("joint_loss: " + std::to_string(dists.rows()) + " rows for " +
                     std::to_string(seq.positions()) + " positions");
  }
  constexpr double kFloor = 1e-12;
  JointLoss out;
  double text_sum = 0.0;
  double eos_sum = 0.0;
  const int n = seq.positions();
  for (int i = 0; i < n; ++i) {
    if (i + 1 < n && seq.l[i + 1]) {
      double p = dists(i, seq.token_at[i + 1]);
      if (p < kFloor) {
        p = kFloor;
        ++out.underflow_count;
      }
      text_sum += -std::log(p);
      ++out.text_positions;
    }
    if (seq.f[i]) {
      double p = dists(i, vocab.stream_eos());
      if (p < kFloor) {
        p = kFloor;
        ++out.underflow_count;
      }
      eos_sum += -std::log(p);
      ++out.eos_positions;
    }
  }
  // Silence positions only enter the normalizer when their term is active,
  // which keeps exp(loss at w=0) identical to the perplexity metric.
  const int norm = out.text_positions + (w > 0.0 ? out.eos_positions : 0);
  if (norm == 0) return out;
  out.text_part = text_sum / norm;
  out.eos_part = eos_sum / norm;
  out.total = out.text_part + w * out.eos_part;
  return out;
}

// ---- stage-2 fine-tuning ----------------------------------------------------

namespace {

struct FinetunePrep {
  InterleavedSequence layout;
  Matrix latent;  // relation-stack output (pre output-layer), or raw tokens
  std::vector<NllPick> picks_text;
  std::vector<NllPick> picks_eos;
};

FinetunePrep prepare_example(const StreamLM& model, const STRDModule* strd, bool train_w_out,
                             const VisionEncoder& encoder, const AnnotatedStream& stream,
                             TaskMode mode, double w) {
  FinetunePrep prep;
  const auto blocks = encode_sequence(encoder, stream.frames);
  prep.layout = build_interleaved(stream.annotations, mode, blocks, {}, model.vocab);
  const Matrix v_images = strd_concat(blocks);
  if (!strd) {
    prep.latent = v_images;  // relation module bypassed
  } else if (train_w_out) {
    // pre-output latent; the trainable output layer is applied on tape
    prep.latent = mhsa_full(strd->blocks, v_images, /*causal=*/true);
  } else {
    prep.latent = strd_forward(*strd, v_images);  // frozen output layer baked in
  }
  const int n = prep.layout.positions();
  for (int i = 0; i < n; ++i) {
    if (i + 1 < n && prep.layout.l[i + 1]) {
      prep.picks_text.push_back({i, prep.layout.token_at[i + 1], 1.0});
    }
    if (prep.layout.f[i]) prep.picks_eos.push_back({i, model.vocab.stream_eos(), w});
  }
  return prep;
}

struct LMBind {
  std::vector<BlockVars> blocks;
  Var proj, head;
  Var lnf_gain, lnf_bias;
  std::map<std::string, Var> registry;
};

Var bind_linear(GradTape& tape, const StreamLM& model, const std::string& name,
                std::map<std::string, Var>& registry) {
  const Matrix& base = model.base_weight(name);
  auto it = model.adapters.find(name);
  if (it == model.adapters.end()) return tape.constant(base);
  Var a = tape.param(it->second.a);
  Var b = tape.param(it->second.b);
  registry["lora." + name + ".a"] = a;
  registry["lora." + name + ".b"] = b;
  return tape.add(tape.constant(base), tape.scale(tape.matmul(a, b), it->second.scaling()));
}

LMBind bind_lm(GradTape& tape, const StreamLM& model) {
  LMBind bind;
  bind.proj = bind_linear(tape, model, "lm.proj", bind.registry);
  bind.head = bind_linear(tape, model, "lm.head", bind.registry);
  bind.lnf_gain = tape.constant(model.lnf_gain);
  bind.lnf_bias = tape.constant(model.lnf_bias);
  for (int i = 0; i < model.cfg.n_layers; ++i) {
    const std::string prefix = "lm.blk" + std::to_string(i) + ".";
    BlockVars v;
    v.wq = bind_linear(tape, model, prefix + "wq", bind.registry);
    v.wk = bind_linear(tape, model, prefix + "wk", bind.registry);
    v.wv = bind_linear(tape, model, prefix + "wv", bind.registry);
    v.wo = bind_linear(tape, model, prefix + "wo", bind.registry);
    v.w1 = bind_linear(tape, model, prefix + "w1", bind.registry);
    v.w2 = bind_linear(tape, model, prefix + "w2", bind.registry);
    const MHSABlock& blk = model.blocks[i];
    v.ln1_gain = tape.constant(blk.ln1_gain);
    v.ln1_bias = tape.constant(blk.ln1_bias);
    v.b1 = tape.constant(blk.b1);
    v.b2 = tape.constant(blk.b2);
    v.ln2_gain = tape.constant(blk.ln2_gain);
    v.ln2_bias = tape.constant(blk.ln2_bias);
    bind.blocks.push_back(v);
  }
  return bind;
}

// Rebuilds the full forward on tape and returns the joint loss var.
Var finetune_forward_tape(GradTape& tape, const StreamLM& model, const LMBind& bind,
                          Var strd_w_out, const FinetunePrep& prep) {
  const auto& layout = prep.layout;
  Var vhat = strd_w_out.valid()
                 ? tape.add(tape.constant(prep.latent),
                            tape.matmul(tape.constant(prep.latent), strd_w_out))
                 : tape.constant(prep.latent);

  std::vector<Var> parts;
  std::vector<int> text_run;
  const int n_tok = layout.blocks.empty() ? 0 : layout.blocks.front().tokens.rows();
  auto flush = [&]() {
    if (!text_run.empty()) {
      parts.push_back(tape.constant(embed_rows(model, text_run)));
      text_run.clear();
    }
  };
  for (const auto& item : layout.items) {
    if (item.is_block()) {
      flush();
      Var rows = tape.slice_rows(vhat, item.block * n_tok, (item.block + 1) * n_tok);
      parts.push_back(tape.matmul(rows, bind.proj));
    } else {
      text_run.push_back(item.token);
    }
  }
  flush();
  Var x = tape.concat_rows(parts);

  const Matrix mask = interleaved_attention_mask(layout);
  for (const auto& blk : bind.blocks) {
    x = block_forward_tape(tape, blk, model.cfg.mhsa(), x, mask);
  }
  Var z = tape.layer_norm(x, bind.lnf_gain, bind.lnf_bias);
  Var logits = tape.matmul(z, bind.head);

  std::vector<NllPick> picks = prep.picks_text;
  bool use_eos = false;
  for (const auto& p : prep.picks_eos) {
    if (p.weight > 0.0) {
      picks.push_back(p);
      use_eos = true;
    }
  }
  const double norm = static_cast<double>(prep.picks_text.size()) +
                      (use_eos ? static_cast<double>(prep.picks_eos.size()) : 0.0);
  return tape.picked_nll(logits, std::move(picks), std::max(1.0, norm));
}

}  // namespace

FinetuneResult train_finetune(StreamLM& model, STRDModule& strd, const VisionEncoder& encoder,
                              const std::vector<AnnotatedStream>& dataset,
                              const FinetuneOptions& options, SeededRng& rng) {
  if (dataset.empty()) throw ConfigError("train_finetune: empty dataset");
  if (model.adapters.empty()) throw ConfigError("train_finetune: attach adapters first");

  const bool train_w_out = options.use_strd && options.train_strd_output;
  std::vector<FinetunePrep> preps;
  for (const auto& stream : dataset) {
    for (TaskMode mode : options.modes) {
      preps.push_back(prepare_example(model, options.use_strd ? &strd : nullptr, train_w_out,
                                      encoder, stream, mode, options.w));
    }
  }

  ParamRefs params;
  for (auto& [name, adapter] : model.adapters) {
    params.emplace_back("lora." + name + ".a", &adapter.a);
    params.emplace_back("lora." + name + ".b", &adapter.b);
  }
  if (train_w_out) params.emplace_back("strd.w_out", &strd.w_out);

  AdamW opt(options.lr);
  const int n = static_cast<int>(preps.size());
  const std::int64_t total_steps = static_cast<std::int64_t>(n) * options.epochs;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);

  FinetuneResult result;
  std::int64_t step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    for (int i = n - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.uniform_int(0, i));
      std::swap(order[i], order[j]);
    }
    double epoch_sum = 0.0;
    int counted = 0;
    for (int idx : order) {
      const FinetunePrep& prep = preps[idx];
      if (prep.picks_text.empty() && prep.picks_eos.empty()) continue;
      GradTape tape;
      LMBind bind = bind_lm(tape, model);
      Var w_out{-1};
      if (train_w_out) {
        w_out = tape.param(strd.w_out);
        bind.registry["strd.w_out"] = w_out;
      }
      Var loss = finetune_forward_tape(tape, model, bind, w_out, prep);
      const double loss_value = tape.scalar(loss);
      if (!std::isfinite(loss_value)) {
        throw TrainingError("train_finetune: non-finite loss at step " + std::to_string(step));
      }
      epoch_sum += loss_value;
      ++counted;
      tape.backward(loss);
      opt.step(params, collect_grads(tape, bind.registry), cosine_decay(step, total_steps));
      ++step;
    }
    result.epoch_loss.push_back(counted ? epoch_sum / counted : 0.0);
  }
  result.steps = step;
  return result;
}

InterleavedSequence build_stream_sequence(const StreamLM& model, const STRDModule* strd,
                                          const VisionEncoder& encoder,
                                          const AnnotatedStream& stream, TaskMode mode) {
  auto blocks = encode_sequence(encoder, stream.frames);
  if (strd) {
    const Matrix vhat = strd_forward(*strd, strd_concat(blocks));
    int row = 0;
    for (auto& b : blocks) {
      b.tokens = ops::slice_rows(vhat, row, row + b.tokens.rows());
      row += b.tokens.rows();
    }
  }
  return build_interleaved(stream.annotations, mode, blocks, {}, model.vocab);
}

JointLoss finetune_eval(const StreamLM& model, const STRDModule* strd,
                        const VisionEncoder& encoder, const std::vector<AnnotatedStream>& dataset,
                        const std::vector<TaskMode>& modes, double w) {
  JointLoss agg;
  int count = 0;
  for (const auto& stream : dataset) {
    for (TaskMode mode : modes) {
      const auto seq = build_stream_sequence(model, strd, encoder, stream, mode);
      const Matrix dists = lm_forward(model, seq);
      const JointLoss jl = joint_loss(dists, seq, w, model.vocab);
      if (jl.text_positions + jl.eos_positions == 0) continue;
      agg.total += jl.total;
      agg.text_part += jl.text_part;
      agg.eos_part += jl.eos_part;
      agg.text_positions += jl.text_positions;
      agg.eos_positions += jl.eos_positions;
      agg.underflow_count += jl.underflow_count;
      ++count;
    }
  }
  if (count) {
    agg.total /= count;
    agg.text_part /= count;
    agg.eos_part /= count;
  }
  return agg;
}

}  // namespace vigil
