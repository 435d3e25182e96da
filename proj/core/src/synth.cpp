#include "vigil/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "vigil/hash.hpp"

namespace vigil {

using nlohmann::ordered_json;

std::string hex64(std::uint64_t value) {
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[i] = digits[value & 0xf];
    value >>= 4;
  }
  return out;
}

void TimelineConfig::validate() const {
  if (frames < 2 || frames % 2 != 0) throw ConfigError("timeline config: frames must be even >= 2");
  if (categories < 1) throw ConfigError("timeline config: categories must be >= 1");
  if (min_events < 0 || max_events < min_events) throw ConfigError("timeline config: bad event counts");
  if (min_precursor < 2 || min_precursor % 2 || max_precursor % 2 || max_precursor < min_precursor) {
    throw ConfigError("timeline config: precursor lengths must be even and ordered");
  }
  if (min_duration < 2 || min_duration % 2 || max_duration % 2 || max_duration < min_duration) {
    throw ConfigError("timeline config: durations must be even and ordered");
  }
  if (unpredictable_fraction < 0.0 || unpredictable_fraction > 1.0) {
    throw ConfigError("timeline config: unpredictable fraction outside [0,1]");
  }
  if (min_normal_prefix < 1) throw ConfigError("timeline config: need >= 1 normal frame up front");
}

void EventTimeline::validate(int categories) const {
  int prev_end = -1;
  for (const auto& e : events) {
    if (e.category < 0 || e.category >= categories) {
      throw GenerationError("timeline: category " + std::to_string(e.category) + " out of range");
    }
    if (!(e.precursor_start <= e.onset && e.onset < e.offset && e.offset <= length - 1)) {
      throw GenerationError("timeline: bad event bounds [" + std::to_string(e.precursor_start) +
                            "," + std::to_string(e.onset) + "," + std::to_string(e.offset) + "]");
    }
    if (e.precursor_start <= prev_end) throw GenerationError("timeline: overlapping events");
    if (e.precursor_start < 1) throw GenerationError("timeline: no normal footage before event");
    prev_end = e.offset;
  }
}

EventTimeline gen_timeline(SeededRng& rng, const TimelineConfig& config) {
  config.validate();
  EventTimeline tl;
  tl.length = config.frames;
  const int count = static_cast<int>(rng.uniform_int(config.min_events, config.max_events));

  int cursor = config.min_normal_prefix + (config.min_normal_prefix % 2);  // even
  for (int e = 0; e < count; ++e) {
    const bool unpredictable = rng.uniform() < config.unpredictable_fraction;
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const int lp = unpredictable
                         ? 0
                         : 2 * static_cast<int>(rng.uniform_int(config.min_precursor / 2,
                                                                config.max_precursor / 2));
      const int la = 2 * static_cast<int>(
                             rng.uniform_int(config.min_duration / 2, config.max_duration / 2));
      const int lo_onset = cursor + lp;
      const int hi_onset = config.frames - la;  // onset + la - 1 <= T - 1
      const int lo_half = lo_onset / 2 + (lo_onset % 2 ? 1 : 0);
      const int hi_half = hi_onset / 2;
      if (lo_half > hi_half) continue;  // this draw does not fit; retry
      const int onset = 2 * static_cast<int>(rng.uniform_int(lo_half, hi_half));
      TimelineEvent ev;
      ev.category = static_cast<int>(rng.uniform_int(0, config.categories - 1));
      ev.precursor_start = onset - lp;
      ev.onset = onset;
      ev.offset = onset + la - 1;
      tl.events.push_back(ev);
      cursor = ev.offset + 3;  // at least one full normal pair between events
      cursor += cursor % 2;
      placed = true;
    }
    if (!placed && e < config.min_events) {
      throw GenerationError("gen_timeline: could not pack " + std::to_string(config.min_events) +
                            " events into " + std::to_string(config.frames) + " frames");
    }
    if (!placed) break;  // optional extra events just do not fit
  }
  tl.validate(config.categories);
  return tl;
}

std::vector<CategorySignature> gen_signatures(SeededRng& rng, int categories, int height,
                                              int width, int channels, double signature_rms,
                                              double noise_sd, double precursor_scale) {
  const int dim = height * width * channels;
  const double min_rms_dist = 3.0 * noise_sd;
  for (int attempt = 0; attempt < 100; ++attempt) {
    std::vector<CategorySignature> sigs;
    sigs.reserve(categories);
    for (int c = 0; c < categories; ++c) {
      CategorySignature s;
      s.pattern = Matrix::randn(height * width, channels, rng, signature_rms);
      s.precursor_scale = precursor_scale;
      sigs.push_back(std::move(s));
    }
    bool ok = true;
    for (int a = 0; a < categories && ok; ++a) {
      for (int b = a + 1; b < categories && ok; ++b) {
        double ss = 0.0;
        for (int i = 0; i < sigs[a].pattern.rows(); ++i) {
          for (int j = 0; j < sigs[a].pattern.cols(); ++j) {
            const double d = sigs[a].pattern(i, j) - sigs[b].pattern(i, j);
            ss += d * d;
          }
        }
        if (std::sqrt(ss / dim) < min_rms_dist) ok = false;
      }
    }
    if (ok) return sigs;
  }
  throw GenerationError("gen_signatures: could not separate categories at this noise level");
}

FrameSequence render_frames(const EventTimeline& timeline,
                            const std::vector<CategorySignature>& signatures, double noise_sd,
                            SeededRng& rng, int height, int width, int channels, double fps) {
  for (const auto& e : timeline.events) {
    if (e.category >= static_cast<int>(signatures.size())) {
      throw ConfigError("render_frames: no signature for category " + std::to_string(e.category));
    }
  }
  std::vector<Matrix> frames;
  frames.reserve(timeline.length);
  for (int f = 0; f < timeline.length; ++f) {
    Matrix frame(height * width, channels);
    for (int i = 0; i < frame.rows(); ++i)
      for (int j = 0; j < frame.cols(); ++j) frame(i, j) = rng.normal(0.0, noise_sd);
    for (const auto& e : timeline.events) {
      double s = 0.0;
      if (f >= e.onset && f <= e.offset) {
        s = 1.0;
      } else if (f >= e.precursor_start && f < e.onset) {
        s = signatures[e.category].precursor_scale;
      }
      if (s != 0.0) {
        const Matrix& pat = signatures[e.category].pattern;
        for (int i = 0; i < frame.rows(); ++i)
          for (int j = 0; j < frame.cols(); ++j) frame(i, j) += s * pat(i, j);
      }
    }
    frames.push_back(std::move(frame));
  }
  return FrameSequence::create(height, width, channels, fps, std::move(frames));
}

double pair_time(int frame, double fps) { return (frame - frame % 2) / fps; }

namespace {

std::string cat_token(int category) { return "<cat" + std::to_string(category) + ">"; }

}  // namespace

AnnotationSet gen_annotations(const EventTimeline& timeline, const Vocab& vocab) {
  AnnotationSet out;
  for (const auto& e : timeline.events) {
    if (!vocab.contains(cat_token(e.category))) {
      throw VocabError("gen_annotations: vocab lacks " + cat_token(e.category));
    }
    if (e.precursor_start < e.onset) {
      VapRecord vap;
      vap.frame = e.precursor_start;
      vap.category = e.category;
      vap.response = {cat_token(e.category), "warning", "expected"};
      out.vap.push_back(std::move(vap));
    }
    // Key moments: the onset plus every stride-th frame of the inclusive
    // span, stride = ceil(span/3).
    const int span = e.offset - e.onset + 1;
    const int stride = std::max(1, (span + 2) / 3);
    for (int f = e.onset; f <= e.offset; f += stride) {
      VadRecord vad;
      vad.frame = f;
      vad.category = e.category;
      vad.response = {cat_token(e.category), "detected", "now"};
      out.vad.push_back(std::move(vad));
    }
    const int qf = e.onset + (e.offset - e.onset + 1) / 2;
    if (qf > e.onset && qf < e.offset) {
      VaaRecord vaa;
      vaa.frame = qf;
      vaa.category = e.category;
      vaa.query = {"what", "is", "happening"};
      vaa.answer = {cat_token(e.category), "anomaly", "ongoing", "since", "onset"};
      out.vaa.push_back(std::move(vaa));
    }
  }
  return out;
}

// ---- dataset --------------------------------------------------------------

namespace {

ordered_json timeline_to_json(const EventTimeline& tl) {
  ordered_json events = ordered_json::array();
  for (const auto& e : tl.events) {
    events.push_back({{"cat", e.category},
                      {"pre", e.precursor_start},
                      {"on", e.onset},
                      {"off", e.offset}});
  }
  return ordered_json{{"length", tl.length}, {"events", std::move(events)}};
}

EventTimeline timeline_from_json(const ordered_json& j) {
  EventTimeline tl;
  tl.length = j.at("length").get<int>();
  for (const auto& e : j.at("events")) {
    tl.events.push_back({e.at("cat").get<int>(), e.at("pre").get<int>(), e.at("on").get<int>(),
                         e.at("off").get<int>()});
  }
  return tl;
}

ordered_json annotations_to_json(const AnnotationSet& a) {
  ordered_json j;
  j["vap"] = ordered_json::array();
  for (const auto& r : a.vap) {
    j["vap"].push_back({{"frame", r.frame}, {"cat", r.category}, {"response", r.response}});
  }
  j["vad"] = ordered_json::array();
  for (const auto& r : a.vad) {
    j["vad"].push_back({{"frame", r.frame}, {"cat", r.category}, {"response", r.response}});
  }
  j["vaa"] = ordered_json::array();
  for (const auto& r : a.vaa) {
    j["vaa"].push_back({{"frame", r.frame},
                        {"cat", r.category},
                        {"query", r.query},
                        {"answer", r.answer}});
  }
  return j;
}

AnnotationSet annotations_from_json(const ordered_json& j) {
  AnnotationSet a;
  for (const auto& r : j.at("vap")) {
    a.vap.push_back({r.at("frame").get<int>(), r.at("cat").get<int>(),
                     r.at("response").get<std::vector<std::string>>()});
  }
  for (const auto& r : j.at("vad")) {
    a.vad.push_back({r.at("frame").get<int>(), r.at("cat").get<int>(),
                     r.at("response").get<std::vector<std::string>>()});
  }
  for (const auto& r : j.at("vaa")) {
    a.vaa.push_back({r.at("frame").get<int>(), r.at("cat").get<int>(),
                     r.at("query").get<std::vector<std::string>>(),
                     r.at("answer").get<std::vector<std::string>>()});
  }
  return a;
}

ordered_json config_to_json(const DatasetConfig& c) {
  return ordered_json{
      {"timeline",
       {{"frames", c.timeline.frames},
        {"categories", c.timeline.categories},
        {"min_events", c.timeline.min_events},
        {"max_events", c.timeline.max_events},
        {"min_precursor", c.timeline.min_precursor},
        {"max_precursor", c.timeline.max_precursor},
        {"min_duration", c.timeline.min_duration},
        {"max_duration", c.timeline.max_duration},
        {"unpredictable_fraction", c.timeline.unpredictable_fraction},
        {"min_normal_prefix", c.timeline.min_normal_prefix}}},
      {"height", c.height},
      {"width", c.width},
      {"channels", c.channels},
      {"fps", c.fps},
      {"noise_sd", c.noise_sd},
      {"signature_rms", c.signature_rms},
      {"precursor_scale", c.precursor_scale},
      {"seed", c.seed},
      {"train_streams", c.train_streams},
      {"test_streams", c.test_streams}};
}

DatasetConfig config_from_json(const ordered_json& j) {
  DatasetConfig c;
  const auto& t = j.at("timeline");
  c.timeline.frames = t.at("frames").get<int>();
  c.timeline.categories = t.at("categories").get<int>();
  c.timeline.min_events = t.at("min_events").get<int>();
  c.timeline.max_events = t.at("max_events").get<int>();
  c.timeline.min_precursor = t.at("min_precursor").get<int>();
  c.timeline.max_precursor = t.at("max_precursor").get<int>();
  c.timeline.min_duration = t.at("min_duration").get<int>();
  c.timeline.max_duration = t.at("max_duration").get<int>();
  c.timeline.unpredictable_fraction = t.at("unpredictable_fraction").get<double>();
  c.timeline.min_normal_prefix = t.at("min_normal_prefix").get<int>();
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.channels = j.at("channels").get<int>();
  c.fps = j.at("fps").get<double>();
  c.noise_sd = j.at("noise_sd").get<double>();
  c.signature_rms = j.at("signature_rms").get<double>();
  c.precursor_scale = j.at("precursor_scale").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.train_streams = j.at("train_streams").get<int>();
  c.test_streams = j.at("test_streams").get<int>();
  return c;
}

constexpr std::uint64_t kSignatureStream = 0xfeed;
constexpr std::uint64_t kStreamBase = 0x100000;
constexpr std::uint64_t kTimelineSub = 1;
constexpr std::uint64_t kNoiseSub = 2;

}  // namespace

std::string DatasetConfig::to_json() const { return config_to_json(*this).dump(); }

DatasetConfig DatasetConfig::from_json(const std::string& text) {
  return config_from_json(ordered_json::parse(text));
}

std::string DatasetConfig::hash() const { return hex64(fnv1a64(to_json())); }

DatasetSplit Dataset::split() const {
  DatasetSplit s;
  for (const auto& r : train) s.train_ids.push_back(r.id);
  for (const auto& r : test) s.test_ids.push_back(r.id);
  s.seed = config.seed;
  s.config_hash = config.hash();
  return s;
}

std::vector<CategorySignature> dataset_signatures(const DatasetConfig& config) {
  SeededRng rng = SeededRng(config.seed).fork(kSignatureStream);
  return gen_signatures(rng, config.timeline.categories, config.height, config.width,
                        config.channels, config.signature_rms, config.noise_sd,
                        config.precursor_scale);
}

Dataset gen_dataset(const DatasetConfig& config, const Vocab& vocab) {
  config.timeline.validate();
  Dataset ds;
  ds.config = config;
  const SeededRng master(config.seed);
  const int total = config.train_streams + config.test_streams;
  for (int i = 0; i < total; ++i) {
    SeededRng base = master.fork(kStreamBase + i);
    SeededRng timeline_rng = base.fork(kTimelineSub);
    StreamRecord rec;
    rec.id = i;
    rec.split = i < config.train_streams ? "train" : "test";
    rec.seed = base.seed();
    rec.timeline = gen_timeline(timeline_rng, config.timeline);
    rec.annotations = gen_annotations(rec.timeline, vocab);
    (rec.split == "train" ? ds.train : ds.test).push_back(std::move(rec));
  }
  return ds;
}

FrameSequence render_stream(const DatasetConfig& config, const StreamRecord& record,
                            const std::vector<CategorySignature>& signatures) {
  SeededRng noise_rng = SeededRng(record.seed).fork(kNoiseSub);
  return render_frames(record.timeline, signatures, config.noise_sd, noise_rng, config.height,
                       config.width, config.channels, config.fps);
}

std::string timeline_to_json_string(const EventTimeline& timeline) {
  return timeline_to_json(timeline).dump();
}

EventTimeline timeline_from_json_string(const std::string& text) {
  return timeline_from_json(ordered_json::parse(text));
}

std::string annotations_to_json_string(const AnnotationSet& annotations) {
  return annotations_to_json(annotations).dump();
}

AnnotationSet annotations_from_json_string(const std::string& text) {
  return annotations_from_json(ordered_json::parse(text));
}

void save_dataset(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("save_dataset: cannot open " + path);
  ordered_json header{{"schema", "vigil-dataset"},
                      {"version", 1},
                      {"config", config_to_json(dataset.config)},
                      {"config_hash", dataset.config.hash()}};
  out << header.dump() << '\n';
  auto write_record = [&out](const StreamRecord& r) {
    ordered_json j{{"id", r.id},
                   {"split", r.split},
                   {"seed", r.seed},
                   {"timeline", timeline_to_json(r.timeline)},
                   {"annotations", annotations_to_json(r.annotations)}};
    out << j.dump() << '\n';
  };
  for (const auto& r : dataset.train) write_record(r);
  for (const auto& r : dataset.test) write_record(r);
  if (!out) throw DataError("save_dataset: write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_dataset: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("load_dataset: empty file " + path);
  ordered_json header = ordered_json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("schema", "") != "vigil-dataset") {
    throw DataError("load_dataset: not a dataset file: " + path);
  }
  if (header.value("version", -1) != 1) {
    throw DataError("load_dataset: unsupported schema version " +
                    std::to_string(header.value("version", -1)));
  }
  Dataset ds;
  ds.config = config_from_json(header.at("config"));
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ordered_json j = ordered_json::parse(line);
    StreamRecord r;
    r.id = j.at("id").get<int>();
    r.split = j.at("split").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.timeline = timeline_from_json(j.at("timeline"));
    r.annotations = annotations_from_json(j.at("annotations"));
    (r.split == "train" ? ds.train : ds.test).push_back(std::move(r));
  }
  return ds;
}

}  // namespace vigil
