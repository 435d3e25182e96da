#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vigil/metrics.hpp"
#include "vigil/run_config.hpp"
#include "vigil/scheduler.hpp"
#include "vigil/stream_lm.hpp"
#include "vigil/strd.hpp"
#include "vigil/synth.hpp"

namespace vigil {

// All model state reconstructible from (config, model_seed).
struct ModelBundle {
  Vocab vocab;
  VisionEncoder encoder;
  std::vector<MHSABlock> teacher;
  STRDModule strd;
  StreamLM lm;
};

ModelBundle build_models(const RunConfig& config);

// ---- stage functions; each writes its artifacts under out_dir ----------

void stage_gen_data(const RunConfig& config, const std::string& out_dir);

struct DistillStageResult {
  DistillResult curve;
  double holdout_initial = 0.0;
  double holdout_final = 0.0;
};
DistillStageResult stage_distill(const RunConfig& config, const std::string& data_dir,
                                 const std::string& out_dir);

struct TrainStageResult {
  FinetuneResult curve;
};
TrainStageResult stage_train(const RunConfig& config, const std::string& data_dir,
                             const std::string& distill_dir, const std::string& out_dir,
                             bool no_strd);

struct RunStageResult {
  int streams = 0;
  int events = 0;
  double pairs_per_second = 0.0;
};
RunStageResult stage_run(const RunConfig& config, const std::string& data_dir,
                         const std::string& train_dir, TaskMode mode, const std::string& out_dir,
                         std::optional<double> gamma_override = std::nullopt);

MetricReport stage_eval(const RunConfig& config, const std::string& data_dir,
                        const std::string& train_dir, const std::string& run_dir, TaskMode mode,
                        const std::string& out_dir);

// strd: off / random / frozen / finetuned relation-module arms (table-2 style)
// depth: relation stack depth 1..3 (table-3 style)
void stage_ablate(const RunConfig& config, const std::string& grid, const std::string& data_dir,
                  const std::string& out_dir);
// gamma: threshold sweep -> F1/respond-count curve (fig-5 style); needs the
// train stage's artifacts.
void stage_ablate_gamma(const RunConfig& config, const std::string& data_dir,
                        const std::string& train_dir, const std::string& out_dir);

struct BenchPoint {
  int cache_len = 0;
  double pairs_per_second = 0.0;
  double p50_ms = 0.0, p90_ms = 0.0, p99_ms = 0.0;
  double median_first_half_ms = 0.0;
  double median_second_half_ms = 0.0;
  double receptive_field_seconds = 0.0;
};
std::vector<BenchPoint> stage_bench(const RunConfig& config, int pairs,
                                    const std::string& out_dir);

// ---- shared helpers (also used by tests and the acceptance suite) ------

std::vector<AnnotatedStream> materialize_streams(const Dataset& dataset,
                                                 const std::vector<StreamRecord>& records);

std::vector<DistillExample> make_distill_examples(const ModelBundle& models,
                                                  const std::vector<AnnotatedStream>& streams,
                                                  bool bidirectional_teacher);

// Runs one stream through a fresh session; fills a StreamLog for metrics.
StreamLog run_one_stream(const ModelBundle& models, const RunConfig& config,
                         const Dataset& dataset, const StreamRecord& record, TaskMode mode,
                         std::optional<double> gamma_override = std::nullopt,
                         bool use_strd = true);

// Hand-computed metric fixture: a tiny log plus ground truth plus the
// expected metric values, shipped as one JSON file.
struct GoldenResult {
  std::string name;
  std::string metric;
  double expected = 0.0;
  double computed = 0.0;
  bool pass = false;
};
std::vector<GoldenResult> run_golden_file(const std::string& path);

// Checkpoint helpers shared by stages.
void save_strd_checkpoint(const std::string& path, const STRDModule& strd,
                          const std::string& meta_json);
void load_strd_checkpoint(const std::string& path, STRDModule& strd,
                          const std::string& expected_hash);
void save_adapter_checkpoint(const std::string& path, const StreamLM& model,
                             const std::string& meta_json);
void load_adapter_checkpoint(const std::string& path, StreamLM& model,
                             const std::string& expected_hash, const RunConfig& config);

}  // namespace vigil
