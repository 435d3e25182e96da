#include <doctest.h>

#include <cmath>

#include "vigil/metrics.hpp"
#include "vigil/ops.hpp"
#include "vigil/stream_lm.hpp"
#include "vigil/strd.hpp"

using namespace vigil;

namespace {

constexpr int kD = 16;

StreamLMConfig lm_cfg() { return StreamLMConfig{kD, 4, 2, 2}; }

StreamLM small_lm(std::uint64_t seed = 21, int categories = 4) {
  SeededRng rng(seed);
  return StreamLM::init(lm_cfg(), Vocab::standard(categories), rng);
}

std::vector<TokenBlock> random_blocks(int pairs, int n, SeededRng& rng) {
  std::vector<TokenBlock> blocks;
  for (int i = 0; i < pairs; ++i) blocks.push_back({i, i * 1.0, Matrix::randn(n, kD, rng)});
  return blocks;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  REQUIRE(a.same_shape(b));
  double m = 0.0;
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b(i, j)));
  return m;
}

AnnotationSet vad_annotation(int frame, int category, std::vector<std::string> extra = {}) {
  AnnotationSet ann;
  VadRecord r;
  r.frame = frame;
  r.category = category;
  r.response = {"<cat" + std::to_string(category) + ">"};
  for (auto& t : extra) r.response.push_back(t);
  ann.vad.push_back(std::move(r));
  return ann;
}

}  // namespace

TEST_CASE("all-silent stream: every frame-final position gates, nothing is supervised text") {
  SeededRng rng(1);
  const auto blocks = random_blocks(4, 2, rng);
  const Vocab vocab = Vocab::standard(4);
  const auto seq = build_interleaved(AnnotationSet{}, TaskMode::VAD, blocks, {}, vocab);

  int f_count = 0;
  for (int i = 0; i < seq.positions(); ++i) {
    CHECK(seq.l[i] == 0);
    if (seq.f[i]) ++f_count;
  }
  CHECK(f_count == 4);
  for (int b = 0; b < 4; ++b) CHECK(seq.f[seq.block_final_position[b]] == 1);
}

TEST_CASE("a 3-token response clears the gate flag and sets three l flags") {
  SeededRng rng(2);
  const auto blocks = random_blocks(3, 2, rng);
  const Vocab vocab = Vocab::standard(4);
  // two response tokens + the terminator = 3 supervised positions
  const auto seq =
      build_interleaved(vad_annotation(2, 1, {"detected"}), TaskMode::VAD, blocks, {}, vocab);

  int l_count = 0;
  for (int i = 0; i < seq.positions(); ++i) l_count += seq.l[i];
  CHECK(l_count == 3);
  CHECK(seq.f[seq.block_final_position[1]] == 0);  // the response follows this block
  CHECK(seq.f[seq.block_final_position[0]] == 1);
  CHECK(seq.f[seq.block_final_position[2]] == 1);
}

TEST_CASE("hand-enumerated flag table for a 4-pair, 1-response stream") {
  SeededRng rng(3);
  const auto blocks = random_blocks(4, 2, rng);
  const Vocab vocab = Vocab::standard(4);
  const auto seq =
      build_interleaved(vad_annotation(4, 0, {"detected", "now"}), TaskMode::VAD, blocks, {}, vocab);

  // layout: bos <q> detect </q> | b0 b0 | b1 b1 | b2 b2 | <cat0> detected now </r> | b3 b3
  REQUIRE(seq.positions() == 16);
  std::vector<int> expect_l(16, 0);
  for (int i = 10; i <= 13; ++i) expect_l[i] = 1;
  std::vector<int> expect_f(16, 0);
  expect_f[5] = 1;
  expect_f[7] = 1;
  expect_f[9] = 0;  // next position is the response
  expect_f[15] = 1;
  for (int i = 0; i < 16; ++i) {
    INFO("position " << i);
    CHECK(seq.l[i] == expect_l[i]);
    CHECK(seq.f[i] == expect_f[i]);
  }
  CHECK(seq.token_at[10] == vocab.category_id(0));
  CHECK(seq.token_at[13] == vocab.response_end());
}

TEST_CASE("flag consistency holds on randomly annotated streams") {
  SeededRng rng(4);
  const Vocab vocab = Vocab::standard(6);
  TimelineConfig tcfg;
  tcfg.frames = 24;
  for (int trial = 0; trial < 100; ++trial) {
    const EventTimeline tl = gen_timeline(rng, tcfg);
    const AnnotationSet ann = gen_annotations(tl, vocab);
    const auto blocks = random_blocks(tl.length / 2, 2, rng);
    for (TaskMode mode : {TaskMode::VAP, TaskMode::VAD, TaskMode::VAA}) {
      const auto seq = build_interleaved(ann, mode, blocks, {}, vocab);
      seq.validate();  // throws on any l/f inconsistency
      for (int i = 0; i < seq.positions(); ++i) CHECK((seq.l[i] & seq.f[i]) == 0);
    }
  }
}

TEST_CASE("records beyond the stream raise an alignment error") {
  SeededRng rng(5);
  const auto blocks = random_blocks(3, 2, rng);
  const Vocab vocab = Vocab::standard(4);
  CHECK_THROWS_AS(build_interleaved(vad_annotation(10, 0), TaskMode::VAD, blocks, {}, vocab),
                  AlignmentError);
  auto bad_blocks = blocks;
  bad_blocks[1].pair_index = 5;
  CHECK_THROWS_AS(build_interleaved(AnnotationSet{}, TaskMode::VAD, bad_blocks, {}, vocab),
                  OrderingError);
}

TEST_CASE("zeroed head gives the uniform distribution everywhere") {
  StreamLM model = small_lm(6);
  model.w_head = Matrix(kD, model.vocab.size());
  SeededRng rng(7);
  const auto blocks = random_blocks(2, 2, rng);
  const auto seq = build_interleaved(AnnotationSet{}, TaskMode::VAD, blocks, {}, model.vocab);
  const Matrix dists = lm_forward(model, seq);
  const double uniform = 1.0 / model.vocab.size();
  for (int i = 0; i < dists.rows(); ++i)
    for (int j = 0; j < dists.cols(); ++j)
      CHECK(dists(i, j) == doctest::Approx(uniform).epsilon(1e-12));
}

TEST_CASE("unknown token ids raise a vocabulary error") {
  StreamLM model = small_lm(8);
  LMStream stream = make_lm_stream(model, 64);
  CHECK_THROWS_AS(lm_stream_feed_tokens(stream, model, {model.vocab.size() + 3}), VocabError);
  CHECK_THROWS_AS(model.vocab.token(-1), VocabError);
  CHECK_THROWS_AS(model.vocab.id("nonsense"), VocabError);
}

TEST_CASE("streaming replay equals the full forward on a 50-position stream") {
  StreamLM model = small_lm(9);
  SeededRng rng(10);
  const auto blocks = random_blocks(8, 4, rng);  // 32 visual positions
  const Vocab& vocab = model.vocab;
  AnnotationSet ann = vad_annotation(4, 1, {"detected", "now"});
  ann.vad.push_back({10, 2, {"<cat2>", "detected"}});
  const auto seq = build_interleaved(ann, TaskMode::VAD, blocks, {}, vocab);
  REQUIRE(seq.positions() >= 40);

  const Matrix full = lm_forward(model, seq);

  // replay like a live session: frames and queries persist in the cache,
  // supervised response runs are fed transiently and rolled back
  LMStream stream = make_lm_stream(model, 256);
  std::vector<Matrix> parts;
  int pos = 0;
  std::vector<int> run;
  bool run_supervised = false;
  auto flush = [&] {
    if (run.empty()) return;
    if (run_supervised) {
      const KVCache snapshot = stream.cache;
      parts.push_back(lm_stream_feed_tokens(stream, model, run));
      stream.cache = snapshot;
    } else {
      parts.push_back(lm_stream_feed_tokens(stream, model, run));
    }
    run.clear();
  };
  for (const auto& item : seq.items) {
    if (item.is_block()) {
      flush();
      parts.push_back(lm_stream_feed_visual(stream, seq.blocks[item.block].tokens));
      pos += seq.blocks[item.block].tokens.rows();
    } else {
      const bool supervised = seq.l[pos] != 0;
      if (!run.empty() && supervised != run_supervised) flush();
      run_supervised = supervised;
      run.push_back(item.token);
      ++pos;
    }
  }
  flush();
  CHECK(max_abs_diff(ops::concat_rows(parts), full) <= 1e-9);
}

TEST_CASE("swapping two frame blocks only changes the suffix") {
  StreamLM model = small_lm(11);
  SeededRng rng(12);
  auto blocks = random_blocks(6, 2, rng);
  const auto seq = build_interleaved(AnnotationSet{}, TaskMode::VAD, blocks, {}, model.vocab);
  const Matrix base = lm_forward(model, seq);

  auto swapped = blocks;
  std::swap(swapped[2].tokens, swapped[4].tokens);
  const auto seq2 = build_interleaved(AnnotationSet{}, TaskMode::VAD, swapped, {}, model.vocab);
  const Matrix out = lm_forward(model, seq2);

  // positions before block 2's first row are bit-identical
  const int first_changed = 4 + 2 * 2;  // bos + prompt(3) + two blocks

  CHECK(max_abs_diff(ops::slice_rows(out, 0, first_changed),
                     ops::slice_rows(base, 0, first_changed)) == 0.0);
  CHECK(max_abs_diff(out, base) > 1e-9);
}

TEST_CASE("joint loss: hand fixture, silence, and term annihilation") {
  const Vocab vocab = Vocab::standard(4);
  // positions: [block row] [response token </r>] [block row]
  InterleavedSequence seq;
  SeededRng rng(13);
  seq.blocks = random_blocks(2, 1, rng);
  seq.items = {{0, -1}, {-1, vocab.response_end()}, {1, -1}};
  seq.token_at = {-1, vocab.response_end(), -1};
  seq.l = {0, 1, 0};
  seq.f = {0, 0, 1};
  seq.block_final_position = {0, 2};
  seq.validate();

  Matrix dists(3, vocab.size());
  for (int j = 0; j < vocab.size(); ++j) {
    dists(0, j) = dists(1, j) = dists(2, j) = 1.0 / vocab.size();
  }
  dists(0, vocab.response_end()) = 0.25;  // P[Txt] at the l-position's predecessor
  dists(2, vocab.stream_eos()) = 0.5;     // P[EOS] at the f-position

  const JointLoss jl = joint_loss(dists, seq, 1.0, vocab);
  CHECK(jl.text_positions == 1);
  CHECK(jl.eos_positions == 1);
  CHECK(jl.total == doctest::Approx(1.039721).epsilon(1e-6));
  CHECK(jl.total == doctest::Approx((-std::log(0.5) - std::log(0.25)) / 2.0).epsilon(1e-12));

  // w = 0 reduces to masked next-token cross entropy over response tokens
  const JointLoss text_only = joint_loss(dists, seq, 0.0, vocab);
  CHECK(text_only.total == doctest::Approx(-std::log(0.25)).epsilon(1e-12));

  // perfect silence scores zero
  Matrix silent(3, vocab.size());
  silent(2, vocab.stream_eos()) = 1.0;
  InterleavedSequence quiet = seq;
  quiet.l = {0, 0, 0};
  quiet.f = {1, 0, 1};
  silent(0, vocab.stream_eos()) = 1.0;
  CHECK(joint_loss(silent, quiet, 1.0, vocab).total == 0.0);
}

TEST_CASE("joint loss decomposes exactly for every w") {
  StreamLM model = small_lm(14);
  SeededRng rng(15);
  const auto blocks = random_blocks(5, 2, rng);
  const auto seq =
      build_interleaved(vad_annotation(4, 1, {"detected"}), TaskMode::VAD, blocks, {}, model.vocab);
  const Matrix dists = lm_forward(model, seq);
  for (double w : {0.25, 0.5, 1.0, 2.0, 7.5}) {
    const JointLoss jl = joint_loss(dists, seq, w, model.vocab);
    CHECK(jl.total == jl.text_part + w * jl.eos_part);  // bitwise by construction
    CHECK(jl.text_part >= 0.0);
    CHECK(jl.eos_part >= 0.0);
  }
}

TEST_CASE("perplexity bridge: exp of the w=0 loss equals the metric") {
  StreamLM model = small_lm(16);
  SeededRng rng(17);
  const auto blocks = random_blocks(6, 2, rng);
  AnnotationSet ann = vad_annotation(2, 0, {"detected", "now"});
  ann.vad.push_back({8, 3, {"<cat3>", "detected"}});
  const auto seq = build_interleaved(ann, TaskMode::VAD, blocks, {}, model.vocab);

  const Matrix dists = lm_forward(model, seq);
  const JointLoss jl = joint_loss(dists, seq, 0.0, model.vocab);
  const double ppl = lm_ppl(model, {seq});
  CHECK(std::abs(std::exp(jl.total) - ppl) <= 1e-9);
}

TEST_CASE("underflowed probabilities are floored and counted") {
  const Vocab vocab = Vocab::standard(4);
  InterleavedSequence seq;
  SeededRng rng(18);
  seq.blocks = random_blocks(1, 1, rng);
  seq.items = {{0, -1}};
  seq.token_at = {-1};
  seq.l = {0};
  seq.f = {1};
  seq.block_final_position = {0};

  Matrix dists(1, vocab.size());  // all-zero row: P[EOS] underflows
  const JointLoss jl = joint_loss(dists, seq, 1.0, vocab);
  CHECK(jl.underflow_count == 1);
  CHECK(jl.total == doctest::Approx(-std::log(1e-12)).epsilon(1e-9));
}

TEST_CASE("fresh adapters are a bitwise no-op") {
  StreamLM base = small_lm(19);
  SeededRng rng(20);
  StreamLM adapted = apply_lora(base, LoRASpec{4, 8.0, {}}, rng);
  CHECK(adapted.adapters.size() == base.linear_layer_names().size());

  const auto blocks = random_blocks(3, 2, rng);
  const auto seq = build_interleaved(AnnotationSet{}, TaskMode::VAD, blocks, {}, base.vocab);
  CHECK(lm_forward(base, seq) == lm_forward(adapted, seq));  // bitwise
}

TEST_CASE("merge folds adapters into the base weights") {
  StreamLM model = small_lm(22);
  SeededRng rng(23);
  model = apply_lora(model, LoRASpec{4, 8.0, {}}, rng);
  // give the adapters real content
  for (auto& [name, adapter] : model.adapters) {
    adapter.b = Matrix::randn(adapter.b.rows(), adapter.b.cols(), rng, 0.05);
  }
  const auto blocks = random_blocks(3, 2, rng);
  const auto seq = build_interleaved(AnnotationSet{}, TaskMode::VAD, blocks, {}, model.vocab);
  const Matrix adapted = lm_forward(model, seq);

  StreamLM merged = model;
  merge_lora(merged);
  CHECK(merged.adapters.empty());
  CHECK(max_abs_diff(lm_forward(merged, seq), adapted) <= 1e-12);
}

TEST_CASE("alpha/rank pairs with equal scaled products give identical weights") {
  StreamLM model = small_lm(24);
  SeededRng rng(25);
  const Matrix a = Matrix::randn(kD, 4, rng);
  const Matrix b = Matrix::randn(4, kD, rng);

  StreamLM m1 = model;
  m1.adapters["lm.proj"] = LoRAAdapter{a, b, 8.0};  // scale 2

  // rank 8 with zero-padded factors: same product, alpha 16 keeps scale 2
  Matrix a2(kD, 8), b2(8, kD);
  for (int i = 0; i < kD; ++i)
    for (int j = 0; j < 4; ++j) a2(i, j) = a(i, j);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < kD; ++j) b2(i, j) = b(i, j);
  StreamLM m2 = model;
  m2.adapters["lm.proj"] = LoRAAdapter{a2, b2, 16.0};

  CHECK(max_abs_diff(m1.effective_weight("lm.proj"), m2.effective_weight("lm.proj")) <= 1e-12);
}

TEST_CASE("adapter rank beyond the layer dimension is rejected") {
  StreamLM model = small_lm(26);
  SeededRng rng(27);
  CHECK_THROWS_AS(apply_lora(model, LoRASpec{kD + 1, 8.0, {"lm.proj"}}, rng), RankError);
  CHECK_THROWS_AS(apply_lora(model, LoRASpec{4, 8.0, {"lm.bogus"}}, rng), ConfigError);
}

namespace {

std::vector<AnnotatedStream> tiny_training_set(const VisionEncoderConfig& vc, int streams,
                                               std::uint64_t seed) {
  TimelineConfig tcfg;
  tcfg.frames = 16;
  tcfg.categories = 4;
  tcfg.min_events = 1;
  tcfg.max_events = 1;
  tcfg.min_precursor = 4;
  tcfg.max_precursor = 4;
  tcfg.min_duration = 6;
  tcfg.max_duration = 8;
  tcfg.unpredictable_fraction = 0.0;
  tcfg.min_normal_prefix = 2;

  SeededRng rng(seed);
  const auto sigs = gen_signatures(rng, 4, vc.height, vc.width, vc.channels, 1.0, 0.2, 0.5);
  std::vector<AnnotatedStream> out;
  const Vocab vocab = Vocab::standard(4);
  for (int i = 0; i < streams; ++i) {
    const EventTimeline tl = gen_timeline(rng, tcfg);
    out.push_back({i, render_frames(tl, sigs, 0.2, rng, vc.height, vc.width, vc.channels, 2.0),
                   gen_annotations(tl, vocab)});
  }
  return out;
}

}  // namespace

TEST_CASE("fine-tuning: zero lr is a bitwise no-op, real lr reduces the loss") {
  VisionEncoderConfig vc;
  vc.height = 8;
  vc.width = 8;
  vc.channels = 2;
  vc.patch = 4;
  vc.d_model = kD;

  SeededRng mrng(28);
  const VisionEncoder encoder(vc, mrng);
  STRDModule strd = STRDModule::init(MHSAConfig{kD, 4, 2}, 2, mrng);
  StreamLM model = small_lm(29);
  SeededRng arng(30);
  model = apply_lora(model, LoRASpec{2, 4.0, {}}, arng);

  const auto streams = tiny_training_set(vc, 4, 31);

  SUBCASE("lr = 0") {
    const auto before_adapters = model.adapters;
    const Matrix before_w_out = strd.w_out;
    FinetuneOptions opts;
    opts.epochs = 1;
    opts.lr = 0.0;
    SeededRng trng(32);
    train_finetune(model, strd, encoder, streams, opts, trng);
    CHECK(strd.w_out == before_w_out);
    for (const auto& [name, adapter] : model.adapters) {
      CHECK(adapter.a == before_adapters.at(name).a);
      CHECK(adapter.b == before_adapters.at(name).b);
    }
  }

  SUBCASE("loss decreases") {
    const std::vector<TaskMode> modes{TaskMode::VAP, TaskMode::VAD, TaskMode::VAA};
    const double before = finetune_eval(model, &strd, encoder, streams, modes, 1.0).total;
    FinetuneOptions opts;
    opts.epochs = 4;
    opts.lr = 5e-3;
    SeededRng trng(33);
    const FinetuneResult res = train_finetune(model, strd, encoder, streams, opts, trng);
    const double after = finetune_eval(model, &strd, encoder, streams, modes, 1.0).total;
    CHECK(after < before);
    CHECK(res.epoch_loss.back() < res.epoch_loss.front());
  }
}

TEST_CASE("fine-tuning refuses a model without adapters") {
  VisionEncoderConfig vc;
  vc.height = 8;
  vc.width = 8;
  vc.channels = 2;
  vc.patch = 4;
  vc.d_model = kD;
  SeededRng mrng(34);
  const VisionEncoder encoder(vc, mrng);
  STRDModule strd = STRDModule::init(MHSAConfig{kD, 4, 2}, 2, mrng);
  StreamLM model = small_lm(35);
  const auto streams = tiny_training_set(vc, 1, 36);
  FinetuneOptions opts;
  SeededRng trng(37);
  CHECK_THROWS_AS(train_finetune(model, strd, encoder, streams, opts, trng), ConfigError);
}
