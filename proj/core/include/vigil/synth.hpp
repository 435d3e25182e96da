#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vigil/matrix.hpp"
#include "vigil/rng.hpp"
#include "vigil/vision.hpp"
#include "vigil/vocab.hpp"

namespace vigil {

// Ground-truth anomaly script for one stream, in frame indices.
// precursor_start <= onset < offset; frames [precursor_start, onset) carry
// the attenuated signature, [onset, offset] the full one. An event with
// precursor_start == onset is unpredictable and yields no prediction
// annotation.
struct TimelineEvent {
  int category = 0;
  int precursor_start = 0;
  int onset = 0;
  int offset = 0;
};

struct EventTimeline {
  int length = 0;  // T frames
  std::vector<TimelineEvent> events;
  void validate(int categories) const;
};

struct TimelineConfig {
  int frames = 48;
  int categories = 6;
  int min_events = 1;
  int max_events = 2;
  int min_precursor = 4;   // frames, even
  int max_precursor = 8;
  int min_duration = 6;    // anomaly frames, even
  int max_duration = 12;
  double unpredictable_fraction = 0.25;
  int min_normal_prefix = 4;
  void validate() const;
};

// Valid timeline, deterministic per rng state. Events land on frame-pair
// boundaries (even onsets) so every annotation maps onto a pair. Throws
// GenerationError when the config cannot be packed after bounded retries.
EventTimeline gen_timeline(SeededRng& rng, const TimelineConfig& config);

// Per-category mean patch pattern plus the precursor attenuation.
struct CategorySignature {
  Matrix pattern;  // (H*W) x C
  double precursor_scale = 0.5;
};

// Signatures with pairwise RMS distance >= 3x noise_sd, so the rendered
// task is separable by construction.
std::vector<CategorySignature> gen_signatures(SeededRng& rng, int categories, int height,
                                              int width, int channels, double signature_rms,
                                              double noise_sd, double precursor_scale);

FrameSequence render_frames(const EventTimeline& timeline,
                            const std::vector<CategorySignature>& signatures, double noise_sd,
                            SeededRng& rng, int height, int width, int channels, double fps);

// Timestamp of the frame-pair boundary containing `frame`.
double pair_time(int frame, double fps);

struct VapRecord {
  int frame = 0;  // earliest predictable frame (the precursor start)
  int category = 0;
  std::vector<std::string> response;
};
struct VadRecord {
  int frame = 0;  // key moment inside [onset, offset]
  int category = 0;
  std::vector<std::string> response;
};
struct VaaRecord {
  int frame = 0;  // query moment strictly inside the event
  int category = 0;
  std::vector<std::string> query;
  std::vector<std::string> answer;
};

struct AnnotationSet {
  std::vector<VapRecord> vap;
  std::vector<VadRecord> vad;
  std::vector<VaaRecord> vaa;
};

// Templated supervision for all three tasks. Prediction records exist
// only for predictable events; detection key frames are the onset plus
// every ceil(span/3)-th frame of the inclusive event span; analysis
// queries sit strictly inside the event when it has room.
AnnotationSet gen_annotations(const EventTimeline& timeline, const Vocab& vocab);

// ---- dataset --------------------------------------------------------------

struct DatasetConfig {
  TimelineConfig timeline;
  int height = 16;
  int width = 16;
  int channels = 4;
  double fps = 2.0;
  double noise_sd = 0.3;
  double signature_rms = 1.0;
  double precursor_scale = 0.5;
  std::uint64_t seed = 1;
  int train_streams = 500;
  int test_streams = 100;

  std::string to_json() const;
  static DatasetConfig from_json(const std::string& text);
  std::string hash() const;
};

struct StreamRecord {
  int id = 0;
  std::string split;  // "train" | "test"
  std::uint64_t seed = 0;
  EventTimeline timeline;
  AnnotationSet annotations;
};

struct DatasetSplit {
  std::vector<int> train_ids;
  std::vector<int> test_ids;
  std::uint64_t seed = 0;
  std::string config_hash;
};

struct Dataset {
  DatasetConfig config;
  std::vector<StreamRecord> train;
  std::vector<StreamRecord> test;
  DatasetSplit split() const;
};

Dataset gen_dataset(const DatasetConfig& config, const Vocab& vocab);

std::vector<CategorySignature> dataset_signatures(const DatasetConfig& config);

// Frames for one record, bit-identical across calls with the same inputs.
FrameSequence render_stream(const DatasetConfig& config, const StreamRecord& record,
                            const std::vector<CategorySignature>& signatures);

// Line-delimited file: one versioned header object, then one stream per
// line. load(save(x)) == x, bit for bit.
void save_dataset(const Dataset& dataset, const std::string& path);
Dataset load_dataset(const std::string& path);

// JSON object (de)serialization for fixture files and run artifacts.
std::string timeline_to_json_string(const EventTimeline& timeline);
EventTimeline timeline_from_json_string(const std::string& text);
std::string annotations_to_json_string(const AnnotationSet& annotations);
AnnotationSet annotations_from_json_string(const std::string& text);

}  // namespace vigil
