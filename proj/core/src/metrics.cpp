#include "vigil/metrics.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace vigil {

using nlohmann::ordered_json;

std::string MetricReport::to_json() const {
  ordered_json j{{"lm_ppl", lm_ppl},
                 {"time_diff_seconds", time_diff_seconds},
                 {"fluency_pct", fluency_pct},
                 {"weighted_f1_pct", weighted_f1_pct},
                 {"rounds", rounds}};
  if (aat_seconds) {
    j["aat_seconds"] = *aat_seconds;
  } else {
    j["aat_seconds"] = nullptr;
  }
  ordered_json cats = ordered_json::object();
  for (const auto& [cat, c] : per_category) {
    cats[std::to_string(cat)] = {
        {"tp", c.tp}, {"fp", c.fp}, {"fn", c.fn}, {"support", c.support}, {"f1", c.f1}};
  }
  j["per_category"] = std::move(cats);
  return j.dump(2);
}

double lm_ppl(const StreamLM& model, const std::vector<InterleavedSequence>& sequences) {
  double nll_sum = 0.0;
  std::int64_t count = 0;
  for (const auto& seq : sequences) {
    const Matrix dists = lm_forward(model, seq);
    const int n = seq.positions();
    for (int i = 0; i + 1 < n; ++i) {
      if (!seq.l[i + 1]) continue;
      const double p = std::max(dists(i, seq.token_at[i + 1]), 1e-12);
      nll_sum += -std::log(p);
      ++count;
    }
  }
  if (count == 0) throw MetricError("lm_ppl: no supervised positions in the evaluation set");
  return std::exp(nll_sum / static_cast<double>(count));
}

namespace {

// One ground-truth response round: when the answer is due, what it should
// say, and the window a response may land in.
struct Round {
  double expected = 0.0;
  double window_lo = 0.0;
  double window_hi = 0.0;  // inclusive
  int category = -1;       // vocab id
  std::vector<int> expected_tokens;
};

const TimelineEvent* event_for_frame(const EventTimeline& tl, int frame, bool prediction) {
  for (const auto& e : tl.events) {
    if (prediction && e.precursor_start == frame) return &e;
    if (!prediction && frame >= e.onset && frame <= e.offset) return &e;
  }
  return nullptr;
}

// vocab == nullptr skips category/token resolution (TimeDiff is
// category-agnostic and never reads the templates).
std::vector<Round> rounds_for(const StreamLog& log, const Vocab* vocab) {
  std::vector<Round> rounds;
  const double fps = log.fps;
  if (log.mode == TaskMode::VAP) {
    for (const auto& r : log.annotations.vap) {
      const TimelineEvent* e = event_for_frame(log.timeline, r.frame, true);
      Round rd;
      rd.expected = pair_time(r.frame, fps);
      rd.window_lo = e ? e->precursor_start / fps : rd.expected;
      rd.window_hi = e ? e->onset / fps - 1e-9 : log.duration;  // exclusive of onset
      if (vocab) {
        rd.category = vocab->category_id(r.category);
        rd.expected_tokens = vocab->encode(r.response);
      }
      rounds.push_back(std::move(rd));
    }
  } else if (log.mode == TaskMode::VAD) {
    for (const auto& r : log.annotations.vad) {
      const TimelineEvent* e = event_for_frame(log.timeline, r.frame, false);
      Round rd;
      rd.expected = pair_time(r.frame, fps);
      rd.window_lo = e ? e->onset / fps : rd.expected;
      rd.window_hi = e ? e->offset / fps : log.duration;
      if (vocab) {
        rd.category = vocab->category_id(r.category);
        rd.expected_tokens = vocab->encode(r.response);
      }
      rounds.push_back(std::move(rd));
    }
  } else {
    for (const auto& r : log.annotations.vaa) {
      Round rd;
      rd.expected = pair_time(r.frame, fps);
      rd.window_lo = rd.expected;
      rd.window_hi = log.duration;
      if (vocab) {
        rd.category = vocab->category_id(r.category);
        rd.expected_tokens = vocab->encode(r.answer);
      }
      rounds.push_back(std::move(rd));
    }
  }
  std::sort(rounds.begin(), rounds.end(),
            [](const Round& a, const Round& b) { return a.expected < b.expected; });
  return rounds;
}

}  // namespace

double time_diff(const std::vector<StreamLog>& logs, const MatchingConfig& matching) {
  (void)matching;  // only one unanswered policy so far
  std::vector<const StreamLog*> ordered;
  for (const auto& l : logs) ordered.push_back(&l);
  std::sort(ordered.begin(), ordered.end(),
            [](const StreamLog* a, const StreamLog* b) { return a->stream_id < b->stream_id; });

  double sum = 0.0;
  int rounds_counted = 0;
  for (const StreamLog* log : ordered) {
    for (const auto& rd : rounds_for(*log, nullptr)) {
      const ResponseEvent* matched = nullptr;
      for (const auto& ev : log->events) {
        if (ev.timestamp >= rd.window_lo && ev.timestamp <= rd.window_hi) {
          matched = &ev;  // earliest in-window response (events are time-ordered)
          break;
        }
      }
      sum += matched ? std::abs(matched->timestamp - rd.expected) : (log->duration - rd.expected);
      ++rounds_counted;
    }
  }
  return rounds_counted ? sum / rounds_counted : 0.0;
}

double fluency(const std::vector<StreamLog>& logs, const Vocab& vocab) {
  std::vector<const StreamLog*> ordered;
  for (const auto& l : logs) ordered.push_back(&l);
  std::sort(ordered.begin(), ordered.end(),
            [](const StreamLog* a, const StreamLog* b) { return a->stream_id < b->stream_id; });

  double round_sum = 0.0;
  int round_count = 0;
  for (const StreamLog* log : ordered) {
    const int pairs = static_cast<int>(log->eos_trace.size());
    const double fps = log->fps;
    const bool analysis = log->mode == TaskMode::VAA;
    auto event_at = [log](double t, ResponseEvent::Trigger trigger) -> const ResponseEvent* {
      for (const auto& ev : log->events) {
        if (ev.trigger == trigger && std::abs(ev.timestamp - t) < 1e-9) return &ev;
      }
      return nullptr;
    };

    const auto rounds = rounds_for(*log, &vocab);
    int cursor_pair = 0;  // first pair of the current round
    auto score_span = [&](int from_pair, int to_pair, const Round* rd) {
      int correct = 0, total = 0;
      for (int p = from_pair; p < to_pair; ++p) {
        ++total;
        // silence expected: an unforced alert here is a miss
        if (!event_at(2.0 * p / fps, ResponseEvent::Trigger::EosGate)) ++correct;
      }
      if (rd) {
        const ResponseEvent* ev = event_at(
            rd->expected, analysis ? ResponseEvent::Trigger::Query : ResponseEvent::Trigger::EosGate);
        std::vector<int> emitted;
        if (ev) {
          if (ev->category >= 0) emitted.push_back(ev->category);
          emitted.insert(emitted.end(), ev->description.begin(), ev->description.end());
        }
        for (std::size_t i = 0; i < rd->expected_tokens.size(); ++i) {
          ++total;
          if (i < emitted.size() && emitted[i] == rd->expected_tokens[i]) ++correct;
        }
      }
      if (total > 0) {
        round_sum += 100.0 * correct / total;
        ++round_count;
      }
    };

    for (const auto& rd : rounds) {
      const int rpair = static_cast<int>(rd.expected * fps / 2.0 + 0.5);
      score_span(cursor_pair, std::min(rpair, pairs), &rd);
      cursor_pair = std::min(rpair + 1, pairs);
    }
    if (cursor_pair < pairs || rounds.empty()) {
      score_span(cursor_pair, pairs, nullptr);  // trailing all-silent round
    }
  }
  return round_count ? round_sum / round_count : 100.0;
}

WeightedF1 weighted_f1(const std::vector<StreamLog>& logs, const MatchingConfig& matching,
                       const Vocab& vocab) {
  std::vector<const StreamLog*> ordered;
  for (const auto& l : logs) ordered.push_back(&l);
  std::sort(ordered.begin(), ordered.end(),
            [](const StreamLog* a, const StreamLog* b) { return a->stream_id < b->stream_id; });

  struct Window {
    double lo = 0.0, hi = 0.0;
    int category = -1;  // vocab id
    bool hit = false;
  };

  std::map<int, CategoryCounts> table;  // key: category index
  for (const StreamLog* log : ordered) {
    const double fps = log->fps;
    std::vector<Window> windows;
    for (const auto& e : log->timeline.events) {
      if (log->mode == TaskMode::VAP) {
        if (e.precursor_start >= e.onset) continue;  // unpredictable: no window
        windows.push_back({e.precursor_start / fps, e.onset / fps - 1e-9,
                           vocab.category_id(e.category), false});
      } else {
        windows.push_back({e.onset / fps, e.offset / fps, vocab.category_id(e.category), false});
      }
      table[e.category];  // make sure the category appears in the table
    }
    for (const auto& w : windows) ++table[vocab.category_of(w.category)].support;

    for (const auto& ev : log->events) {
      if (ev.trigger != ResponseEvent::Trigger::EosGate) continue;
      bool counted = false;
      for (auto& w : windows) {
        if (ev.timestamp < w.lo || ev.timestamp > w.hi) continue;
        if (ev.category == w.category) {
          if (!w.hit) {
            w.hit = true;
            ++table[vocab.category_of(w.category)].tp;
          } else if (!matching.collapse_duplicates) {
            ++table[vocab.category_of(w.category)].fp;
          }
          counted = true;  // duplicates inside a hit window are not false alarms
          break;
        }
      }
      if (!counted && ev.category >= 0 && vocab.is_category(ev.category)) {
        ++table[vocab.category_of(ev.category)].fp;
      }
    }
    for (const auto& w : windows) {
      if (!w.hit) ++table[vocab.category_of(w.category)].fn;
    }
  }

  WeightedF1 out;
  double weighted_sum = 0.0;
  int total_support = 0;
  for (auto& [cat, c] : table) {
    const double denom = 2.0 * c.tp + c.fp + c.fn;
    c.f1 = denom > 0 ? 100.0 * 2.0 * c.tp / denom : 0.0;
    weighted_sum += c.f1 * c.support;
    total_support += c.support;
  }
  out.per_category = table;
  out.percent = total_support ? weighted_sum / total_support : 0.0;
  return out;
}

std::optional<double> aat(const std::vector<StreamLog>& logs, const Vocab& vocab) {
  double sum = 0.0;
  int count = 0;
  for (const auto& log : logs) {
    if (log.mode != TaskMode::VAP) continue;
    const double fps = log.fps;
    for (const auto& e : log.timeline.events) {
      if (e.precursor_start >= e.onset) continue;
      const double lo = e.precursor_start / fps;
      const double onset = e.onset / fps;
      for (const auto& ev : log.events) {
        if (ev.trigger != ResponseEvent::Trigger::EosGate) continue;
        if (ev.category != vocab.category_id(e.category)) continue;
        if (ev.timestamp >= lo && ev.timestamp < onset) {
          sum += onset - ev.timestamp;
          ++count;
          break;  // earliest correct early warning per event
        }
      }
    }
  }
  if (count == 0) return std::nullopt;
  return sum / count;
}

}  // namespace vigil
