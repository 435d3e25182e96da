#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <vector>

#include "vigil/stream_lm.hpp"
#include "vigil/strd.hpp"
#include "vigil/task.hpp"
#include "vigil/vision.hpp"

namespace vigil {

struct SessionConfig {
  TaskMode mode = TaskMode::VAD;
  double gamma = 0.7;  // in (0,1]; 0.96 for prediction, 0.7 for detection; unused for analysis
  int strd_cache_len = 128;
  int lm_cache_len = 1024;
  int max_response_tokens = 8;
  // Keep generated response tokens in the LM context after a decode. Off
  // by default: the silence probe then depends only on the frames and
  // queries, which makes the respond set at a lower threshold a strict
  // subset of the set at a higher one.
  bool persist_responses = false;
  bool use_strd = true;

  void validate(int tokens_per_pair) const;
};

// One model emission: a gated alert or a query answer.
struct ResponseEvent {
  double timestamp = 0.0;
  TaskMode mode = TaskMode::VAD;
  enum class Trigger { EosGate, Query } trigger = Trigger::EosGate;
  double eos_prob_at_trigger = 0.0;
  int category = -1;               // vocab id, -1 if the reply led with a non-category token
  std::vector<int> description;    // token ids up to (excluding) the terminator
  bool clipped = false;            // hit the response length cap
};

// One streaming inference session: per-frame-pair encode -> relation
// module -> LM, silence-gated response decoding, mid-stream queries.
// Weights are shared read-only; all mutable state lives here.
class Session {
 public:
  Session(const VisionEncoder& encoder, const STRDModule& strd, const StreamLM& model,
          const SessionConfig& config);

  // Ingest one frame pair; returns the response event if one was emitted.
  std::optional<ResponseEvent> step_frame(const Matrix& f_prev, const Matrix& f_curr);

  // Query at stream time t. Served immediately when t has already been
  // reached and nothing else decoded this step; otherwise queued FIFO and
  // served on a later step. The served event also lands in events().
  std::optional<ResponseEvent> submit_query(const std::vector<int>& tokens, double t);

  const std::vector<ResponseEvent>& events() const { return events_; }
  const std::vector<double>& eos_trace() const { return eos_trace_; }
  int pairs_seen() const { return pair_index_; }
  double current_time() const;
  const SessionConfig& config() const { return config_; }

 private:
  struct PendingQuery {
    std::vector<int> tokens;
    double t = 0.0;
  };

  ResponseEvent decode_response(const Matrix& first_dist, ResponseEvent::Trigger trigger,
                                double timestamp, double eos_prob);
  std::optional<ResponseEvent> serve_query_now(const PendingQuery& q);
  void check_counters(std::int64_t strd_added, std::int64_t lm_added);

  const VisionEncoder& encoder_;
  const STRDModule& strd_;
  const StreamLM& model_;
  SessionConfig config_;
  KVCache strd_cache_;
  LMStream lm_;
  int pair_index_ = 0;
  double fps_ = 2.0;
  std::deque<PendingQuery> pending_;
  std::vector<ResponseEvent> events_;
  std::vector<double> eos_trace_;
  std::int64_t expected_strd_positions_ = 0;
  std::int64_t expected_lm_positions_ = 0;
};

struct RunStreamResult {
  std::vector<ResponseEvent> events;
  std::vector<double> eos_trace;
  std::vector<double> step_seconds;  // wall time per frame-pair step
  double pairs_per_second = 0.0;
  double p50_ms = 0.0, p90_ms = 0.0, p99_ms = 0.0;
};

// Drives a whole stream through the session, submitting scheduled queries
// at their pair boundaries. Deterministic given weights + stream + schedule.
RunStreamResult run_stream(Session& session, const FrameSequence& seq,
                           const std::vector<QueryInsert>& query_schedule, const Vocab& vocab);

}  // namespace vigil
