#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "vigil/synth.hpp"

using namespace vigil;

namespace {

TimelineConfig small_timeline() {
  TimelineConfig c;
  c.frames = 48;
  c.categories = 6;
  return c;
}

DatasetConfig small_dataset(int train = 4, int test = 2) {
  DatasetConfig c;
  c.timeline = small_timeline();
  c.train_streams = train;
  c.test_streams = test;
  c.seed = 99;
  return c;
}

}  // namespace

TEST_CASE("timeline invariants hold over ten thousand draws") {
  const TimelineConfig cfg = small_timeline();
  SeededRng rng(1);
  for (int i = 0; i < 10000; ++i) {
    const EventTimeline tl = gen_timeline(rng, cfg);
    CHECK(tl.length == cfg.frames);
    int prev_end = 0;
    for (const auto& e : tl.events) {
      CHECK(e.precursor_start >= 1);
      CHECK(e.precursor_start <= e.onset);
      CHECK(e.onset < e.offset);
      CHECK(e.offset <= tl.length - 1);
      CHECK(e.precursor_start > prev_end);
      CHECK(e.onset % 2 == 0);  // pair aligned
      CHECK(e.precursor_start % 2 == 0);
      prev_end = e.offset;
    }
  }
}

TEST_CASE("zero events and fully unpredictable configs") {
  TimelineConfig cfg = small_timeline();
  cfg.min_events = 0;
  cfg.max_events = 0;
  SeededRng rng(2);
  const EventTimeline empty = gen_timeline(rng, cfg);
  CHECK(empty.events.empty());
  const Vocab vocab = Vocab::standard(6);
  const AnnotationSet ann = gen_annotations(empty, vocab);
  CHECK(ann.vap.empty());
  CHECK(ann.vad.empty());
  CHECK(ann.vaa.empty());

  cfg = small_timeline();
  cfg.unpredictable_fraction = 1.0;
  for (int i = 0; i < 50; ++i) {
    const EventTimeline tl = gen_timeline(rng, cfg);
    for (const auto& e : tl.events) CHECK(e.precursor_start == e.onset);
    for (const auto& r : gen_annotations(tl, vocab).vap) CHECK(false);  // no records
  }
}

TEST_CASE("infeasible packing raises a generation error") {
  TimelineConfig cfg = small_timeline();
  cfg.frames = 12;
  cfg.min_events = 3;
  cfg.max_events = 3;
  cfg.min_duration = 8;
  cfg.max_duration = 8;
  SeededRng rng(3);
  CHECK_THROWS_AS(gen_timeline(rng, cfg), GenerationError);
}

TEST_CASE("rendered frames follow the construction exactly at zero noise") {
  SeededRng sig_rng(4);
  const auto sigs = gen_signatures(sig_rng, 2, 8, 8, 2, 1.0, 0.1, 0.5);

  EventTimeline tl;
  tl.length = 12;
  tl.events.push_back({1, 4, 6, 9});
  SeededRng noise_rng(5);
  const FrameSequence seq = render_frames(tl, sigs, 0.0, noise_rng, 8, 8, 2, 2.0);

  CHECK(seq.frame_count() == 12);
  // frames 0..3 normal: identical zero background
  CHECK(seq.frames[0] == Matrix(64, 2));
  CHECK(seq.frames[3] == seq.frames[0]);
  // precursor frames carry the attenuated signature
  for (int f = 4; f < 6; ++f) {
    for (int i = 0; i < 64; ++i)
      for (int j = 0; j < 2; ++j)
        CHECK(seq.frames[f](i, j) == doctest::Approx(0.5 * sigs[1].pattern(i, j)).epsilon(1e-12));
  }
  // anomaly frames carry the full signature
  for (int f = 6; f <= 9; ++f) CHECK(seq.frames[f] == seq.frames[6]);
  for (int i = 0; i < 64; ++i)
    for (int j = 0; j < 2; ++j)
      CHECK(seq.frames[7](i, j) == doctest::Approx(sigs[1].pattern(i, j)).epsilon(1e-12));
  // back to normal
  CHECK(seq.frames[10] == seq.frames[0]);
}

TEST_CASE("signatures keep a 3-sigma separation margin") {
  SeededRng rng(6);
  const double noise_sd = 0.3;
  const auto sigs = gen_signatures(rng, 6, 16, 16, 4, 1.0, noise_sd, 0.5);
  const int dim = 16 * 16 * 4;
  for (std::size_t a = 0; a < sigs.size(); ++a) {
    for (std::size_t b = a + 1; b < sigs.size(); ++b) {
      double ss = 0.0;
      for (int i = 0; i < sigs[a].pattern.rows(); ++i)
        for (int j = 0; j < sigs[a].pattern.cols(); ++j) {
          const double d = sigs[a].pattern(i, j) - sigs[b].pattern(i, j);
          ss += d * d;
        }
      CHECK(std::sqrt(ss / dim) >= 3.0 * noise_sd);
    }
  }
}

TEST_CASE("annotation rules: prediction, detection stride, analysis") {
  const Vocab vocab = Vocab::standard(6);

  EventTimeline tl;
  tl.length = 40;
  tl.events.push_back({2, 4, 10, 16});  // predictable, span 7
  const AnnotationSet ann = gen_annotations(tl, vocab);

  REQUIRE(ann.vap.size() == 1);
  CHECK(ann.vap[0].frame == 4);
  CHECK(ann.vap[0].category == 2);
  CHECK(ann.vap[0].response[0] == "<cat2>");

  // stride = ceil(7/3) = 3: key moments 10, 13, 16
  REQUIRE(ann.vad.size() == 3);
  CHECK(ann.vad[0].frame == 10);
  CHECK(ann.vad[1].frame == 13);
  CHECK(ann.vad[2].frame == 16);

  REQUIRE(ann.vaa.size() == 1);
  CHECK(ann.vaa[0].frame > 10);
  CHECK(ann.vaa[0].frame < 16);

  // every analysis answer names its event's category token
  SeededRng rng(7);
  const TimelineConfig cfg = small_timeline();
  for (int i = 0; i < 1000; ++i) {
    const EventTimeline t = gen_timeline(rng, cfg);
    for (const auto& r : gen_annotations(t, vocab).vaa) {
      bool found = false;
      for (const auto& tok : r.answer) {
        if (tok == "<cat" + std::to_string(r.category) + ">") found = true;
      }
      CHECK(found);
    }
  }
}

TEST_CASE("unpredictable events yield no prediction record") {
  const Vocab vocab = Vocab::standard(6);
  EventTimeline tl;
  tl.length = 24;
  tl.events.push_back({0, 10, 10, 15});
  const AnnotationSet ann = gen_annotations(tl, vocab);
  CHECK(ann.vap.empty());
  CHECK(!ann.vad.empty());
}

TEST_CASE("dataset generation is bit-reproducible and split is disjoint") {
  const Vocab vocab = Vocab::standard(6);
  const DatasetConfig cfg = small_dataset();
  const Dataset a = gen_dataset(cfg, vocab);
  const Dataset b = gen_dataset(cfg, vocab);

  REQUIRE(a.train.size() == 4);
  REQUIRE(a.test.size() == 2);
  const DatasetSplit split = a.split();
  std::set<int> ids(split.train_ids.begin(), split.train_ids.end());
  for (int id : split.test_ids) CHECK(ids.count(id) == 0);

  const auto sigs = dataset_signatures(cfg);
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].seed == b.train[i].seed);
    const FrameSequence fa = render_stream(cfg, a.train[i], sigs);
    const FrameSequence fb = render_stream(cfg, b.train[i], sigs);
    REQUIRE(fa.frame_count() == fb.frame_count());
    for (int f = 0; f < fa.frame_count(); ++f) CHECK(fa.frames[f] == fb.frames[f]);
  }
}

TEST_CASE("dataset files round-trip bit-exactly") {
  const Vocab vocab = Vocab::standard(6);
  const Dataset ds = gen_dataset(small_dataset(80, 20), vocab);
  const std::string path = "/tmp/vigil_test_dataset.jsonl";
  save_dataset(ds, path);
  const Dataset loaded = load_dataset(path);

  CHECK(loaded.config.to_json() == ds.config.to_json());
  CHECK(loaded.config.hash() == ds.config.hash());
  REQUIRE(loaded.train.size() == ds.train.size());
  REQUIRE(loaded.test.size() == ds.test.size());
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    const StreamRecord& x = ds.train[i];
    const StreamRecord& y = loaded.train[i];
    CHECK(x.id == y.id);
    CHECK(x.seed == y.seed);
    CHECK(timeline_to_json_string(x.timeline) == timeline_to_json_string(y.timeline));
    CHECK(annotations_to_json_string(x.annotations) == annotations_to_json_string(y.annotations));
  }

  // and the file itself is byte-stable across saves
  const std::string path2 = "/tmp/vigil_test_dataset2.jsonl";
  save_dataset(loaded, path2);
  std::ifstream f1(path), f2(path2);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  std::remove(path.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("hand-written dataset fixture parses to the expected value") {
  const std::string path = "/tmp/vigil_fixture.jsonl";
  {
    std::ofstream out(path);
    out << R"({"schema":"vigil-dataset","version":1,"config":{"timeline":{"frames":12,"categories":2,"min_events":1,"max_events":1,"min_precursor":4,"max_precursor":4,"min_duration":6,"max_duration":6,"unpredictable_fraction":0.0,"min_normal_prefix":2},"height":8,"width":8,"channels":2,"fps":2.0,"noise_sd":0.1,"signature_rms":1.0,"precursor_scale":0.5,"seed":5,"train_streams":1,"test_streams":0},"config_hash":"ignored"})"
        << "\n";
    out << R"({"id":0,"split":"train","seed":12345,"timeline":{"length":12,"events":[{"cat":1,"pre":2,"on":4,"off":9}]},"annotations":{"vap":[{"frame":2,"cat":1,"response":["<cat1>","warning","expected"]}],"vad":[{"frame":4,"cat":1,"response":["<cat1>","detected","now"]}],"vaa":[]}})"
        << "\n";
  }
  const Dataset ds = load_dataset(path);
  REQUIRE(ds.train.size() == 1);
  CHECK(ds.train[0].seed == 12345);
  REQUIRE(ds.train[0].timeline.events.size() == 1);
  CHECK(ds.train[0].timeline.events[0].onset == 4);
  CHECK(ds.train[0].annotations.vap[0].response.size() == 3);
  std::remove(path.c_str());
}

TEST_CASE("schema version mismatches are refused") {
  const std::string path = "/tmp/vigil_badversion.jsonl";
  {
    std::ofstream out(path);
    out << R"({"schema":"vigil-dataset","version":9,"config":{}})" << "\n";
  }
  CHECK_THROWS_AS(load_dataset(path), DataError);
  {
    std::ofstream out(path);
    out << R"({"something":"else"})" << "\n";
  }
  CHECK_THROWS_AS(load_dataset(path), DataError);
  std::remove(path.c_str());
}

TEST_CASE("annotation timestamps sit on pair boundaries") {
  const Vocab vocab = Vocab::standard(6);
  SeededRng rng(8);
  const TimelineConfig cfg = small_timeline();
  for (int i = 0; i < 200; ++i) {
    const EventTimeline tl = gen_timeline(rng, cfg);
    const AnnotationSet ann = gen_annotations(tl, vocab);
    auto on_boundary = [&](int frame) {
      const double t = pair_time(frame, 2.0);
      const int pair = static_cast<int>(t * 2.0 / 2.0 + 0.5);
      CHECK(pair >= 0);
      CHECK(pair < tl.length / 2);
    };
    for (const auto& r : ann.vap) on_boundary(r.frame);
    for (const auto& r : ann.vad) on_boundary(r.frame);
    for (const auto& r : ann.vaa) on_boundary(r.frame);
  }
}
