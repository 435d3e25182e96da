#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vigil/scheduler.hpp"
#include "vigil/stream_lm.hpp"
#include "vigil/synth.hpp"
#include "vigil/task.hpp"

namespace vigil {

// Ground-truth matching policy. Windows always derive from the timeline:
// prediction matches inside [precursor_start, onset), detection inside
// [onset, offset], analysis inside [query, stream end). Alternatives hang
// off this struct so the strict defaults stay in one place.
struct MatchingConfig {
  enum class UnansweredPolicy { DistanceToStreamEnd };
  UnansweredPolicy unanswered = UnansweredPolicy::DistanceToStreamEnd;
  bool collapse_duplicates = true;  // repeats inside one window are one hit, never false alarms
};

// Everything the metrics need about one evaluated stream.
struct StreamLog {
  int stream_id = 0;
  TaskMode mode = TaskMode::VAD;
  std::vector<ResponseEvent> events;
  std::vector<double> eos_trace;
  double duration = 0.0;  // seconds
  EventTimeline timeline;
  AnnotationSet annotations;
  double fps = 2.0;
};

struct CategoryCounts {
  int tp = 0, fp = 0, fn = 0;
  int support = 0;
  double f1 = 0.0;  // percent
};

struct MetricReport {
  double lm_ppl = 0.0;
  double time_diff_seconds = 0.0;
  double fluency_pct = 0.0;
  double weighted_f1_pct = 0.0;
  std::optional<double> aat_seconds;
  std::map<int, CategoryCounts> per_category;  // category index -> counts
  int rounds = 0;

  std::string to_json() const;
};

// exp of mean next-token NLL over supervised response positions. Throws
// MetricError when the sequences carry no supervised positions.
double lm_ppl(const StreamLM& model, const std::vector<InterleavedSequence>& sequences);

// Mean |response time - expected time| over ground-truth rounds; an
// unanswered round costs the distance from its expected time to the
// stream end.
double time_diff(const std::vector<StreamLog>& logs, const MatchingConfig& matching);

// Share of per-position decisions matching ground truth inside each
// dialogue round: silence gates on the frames leading up to a round's
// response, then the response tokens themselves.
double fluency(const std::vector<StreamLog>& logs, const Vocab& vocab);

struct WeightedF1 {
  double percent = 0.0;
  std::map<int, CategoryCounts> per_category;
};

// Event-level classification score. A response is a hit when it lands in
// a window with the right category token; repeats inside one window
// collapse; everything else is a false alarm against its own category.
WeightedF1 weighted_f1(const std::vector<StreamLog>& logs, const MatchingConfig& matching,
                       const Vocab& vocab);

// Mean onset-minus-response lead over correct early predictions; absent
// when no prediction beat its onset.
std::optional<double> aat(const std::vector<StreamLog>& logs, const Vocab& vocab);

}  // namespace vigil
