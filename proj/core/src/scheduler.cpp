#include "vigil/scheduler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "vigil/ops.hpp"

namespace vigil {

void SessionConfig::validate(int tokens_per_pair) const {
  if (mode != TaskMode::VAA && (gamma <= 0.0 || gamma > 1.0)) {
    throw ConfigError("session config: gamma must lie in (0,1]");
  }
  if (strd_cache_len < tokens_per_pair || lm_cache_len < tokens_per_pair) {
    throw ConfigError("session config: cache lengths must be >= tokens per pair (" +
                      std::to_string(tokens_per_pair) + ")");
  }
  if (max_response_tokens < 1) throw ConfigError("session config: max response length must be >= 1");
}

Session::Session(const VisionEncoder& encoder, const STRDModule& strd, const StreamLM& model,
                 const SessionConfig& config)
    : encoder_(encoder), strd_(strd), model_(model), config_(config) {
  config_.validate(encoder.config().tokens_per_pair());
  if (encoder.config().d_model != model.cfg.d_model ||
      (config_.use_strd && strd.d_model() != model.cfg.d_model)) {
    throw ConfigError("session: encoder/relation/lm widths disagree");
  }
  strd_cache_ = strd.make_cache(config_.strd_cache_len);
  lm_ = make_lm_stream(model, config_.lm_cache_len);

  // Standing task instruction, mirroring the training layout.
  std::vector<int> prompt{model_.vocab.bos(), model_.vocab.query_start()};
  for (int id : model_.vocab.encode(task_prompt(config_.mode))) prompt.push_back(id);
  prompt.push_back(model_.vocab.query_end());
  lm_stream_feed_tokens(lm_, model_, prompt);
  expected_lm_positions_ = static_cast<std::int64_t>(prompt.size());
}

double Session::current_time() const {
  return pair_index_ > 0 ? 2.0 * (pair_index_ - 1) / fps_ : 0.0;
}

ResponseEvent Session::decode_response(const Matrix& first_dist, ResponseEvent::Trigger trigger,
                                       double timestamp, double eos_prob) {
  ResponseEvent ev;
  ev.timestamp = timestamp;
  ev.mode = config_.mode;
  ev.trigger = trigger;
  ev.eos_prob_at_trigger = eos_prob;

  // Generated tokens condition the decode itself; whether they stay in
  // the session context afterwards is persist_responses.
  KVCache cache_snapshot = lm_.cache;
  const std::int64_t pos_snapshot = lm_.next_position;

  const int eos = model_.vocab.stream_eos();
  const int end = model_.vocab.response_end();
  Matrix dist = first_dist;
  bool terminated = false;
  std::vector<int> emitted;
  for (int step = 0; step < config_.max_response_tokens; ++step) {
    int best = -1;
    double best_p = -1.0;
    for (int v = 0; v < model_.vocab.size(); ++v) {
      if (v == eos) continue;  // the gate token is never response content
      if (dist(0, v) > best_p) {
        best_p = dist(0, v);
        best = v;
      }
    }
    if (best == end) {
      terminated = true;
      break;
    }
    emitted.push_back(best);
    dist = lm_stream_feed_tokens(lm_, model_, {best});
  }
  ev.clipped = !terminated;

  if (!emitted.empty() && model_.vocab.is_category(emitted.front())) {
    ev.category = emitted.front();
    ev.description.assign(emitted.begin() + 1, emitted.end());
  } else {
    ev.description = emitted;
  }

  if (!config_.persist_responses) {
    lm_.cache = std::move(cache_snapshot);
    lm_.next_position = pos_snapshot;
  } else {
    expected_lm_positions_ += static_cast<std::int64_t>(emitted.size());
  }
  return ev;
}

std::optional<ResponseEvent> Session::serve_query_now(const PendingQuery& q) {
  std::vector<int> ids{model_.vocab.query_start()};
  for (int id : q.tokens) ids.push_back(id);
  ids.push_back(model_.vocab.query_end());
  const Matrix dists = lm_stream_feed_tokens(lm_, model_, ids);
  expected_lm_positions_ += static_cast<std::int64_t>(ids.size());
  const Matrix last = ops::slice_rows(dists, dists.rows() - 1, dists.rows());
  const double p_eos = last(0, model_.vocab.stream_eos());
  ResponseEvent ev = decode_response(last, ResponseEvent::Trigger::Query,
                                     std::max(q.t, current_time()), p_eos);
  events_.push_back(ev);
  return ev;
}

void Session::check_counters(std::int64_t strd_added, std::int64_t lm_added) {
  expected_strd_positions_ += strd_added;
  expected_lm_positions_ += lm_added;
  if (config_.use_strd && strd_cache_.position_counter() != expected_strd_positions_) {
    throw ConfigError("session: relation cache advanced unexpectedly");
  }
  if (lm_.cache.position_counter() != expected_lm_positions_) {
    throw ConfigError("session: lm cache advanced unexpectedly");
  }
}

std::optional<ResponseEvent> Session::step_frame(const Matrix& f_prev, const Matrix& f_curr) {
  const TokenBlock block = encode_frame_pair(encoder_, f_prev, f_curr, pair_index_, fps_);
  ++pair_index_;
  const double now = block.timestamp;

  Matrix vhat;
  if (config_.use_strd) {
    vhat = strd_forward_stream(strd_, strd_cache_, block.tokens);
  } else {
    vhat = block.tokens;
  }
  const Matrix dists = lm_stream_feed_visual(lm_, vhat);
  const int n = vhat.rows();
  const Matrix last = ops::slice_rows(dists, n - 1, n);
  const double p_eos = last(0, model_.vocab.stream_eos());
  eos_trace_.push_back(p_eos);

  std::optional<ResponseEvent> emitted;
  if (config_.mode != TaskMode::VAA && p_eos < config_.gamma) {
    ResponseEvent ev = decode_response(last, ResponseEvent::Trigger::EosGate, now, p_eos);
    events_.push_back(ev);
    emitted = ev;
  }
  check_counters(config_.use_strd ? n : 0, n);

  // At most one generation per step: a pending query waits out a gate
  // response and is served on the next frame.
  if (!emitted && !pending_.empty() && pending_.front().t <= now + 1e-9) {
    PendingQuery q = pending_.front();
    pending_.pop_front();
    emitted = serve_query_now(q);
  }
  return emitted;
}

std::optional<ResponseEvent> Session::submit_query(const std::vector<int>& tokens, double t) {
  if (t < 0.0) throw ConfigError("submit_query: negative timestamp");
  if (pair_index_ > 0 && t <= current_time() && pending_.empty()) {
    return serve_query_now(PendingQuery{tokens, t});
  }
  pending_.push_back(PendingQuery{tokens, t});
  return std::nullopt;
}

RunStreamResult run_stream(Session& session, const FrameSequence& seq,
                           const std::vector<QueryInsert>& query_schedule, const Vocab& vocab) {
  using Clock = std::chrono::steady_clock;
  std::vector<QueryInsert> schedule = query_schedule;
  std::stable_sort(schedule.begin(), schedule.end(),
                   [](const QueryInsert& a, const QueryInsert& b) { return a.frame < b.frame; });
  std::size_t next_query = 0;

  RunStreamResult result;
  const auto t_start = Clock::now();
  for (int k = 0; k < seq.pair_count(); ++k) {
    // Queries scheduled for this pair become pending before the step so
    // they are answered right after the pair's block, like in training.
    while (next_query < schedule.size() && schedule[next_query].frame / 2 <= k) {
      session.submit_query(vocab.encode(schedule[next_query].tokens),
                           seq.pair_timestamp(schedule[next_query].frame / 2));
      ++next_query;
    }
    const auto t0 = Clock::now();
    session.step_frame(seq.frames[2 * k], seq.frames[2 * k + 1]);
    result.step_seconds.push_back(std::chrono::duration<double>(Clock::now() - t0).count());
  }
  const double total = std::chrono::duration<double>(Clock::now() - t_start).count();

  result.events = session.events();
  result.eos_trace = session.eos_trace();
  result.pairs_per_second = total > 0 ? seq.pair_count() / total : 0.0;
  if (!result.step_seconds.empty()) {
    std::vector<double> sorted = result.step_seconds;
    std::sort(sorted.begin(), sorted.end());
    auto pct = [&sorted](double q) {
      const std::size_t idx = static_cast<std::size_t>(q * (sorted.size() - 1));
      return sorted[idx] * 1e3;
    };
    result.p50_ms = pct(0.50);
    result.p90_ms = pct(0.90);
    result.p99_ms = pct(0.99);
  }
  return result;
}

}  // namespace vigil
