#include "vigil/cli.hpp"

#include <cstdlib>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "vigil/pipeline.hpp"

namespace vigil::cli {

namespace {

std::string resolve_out(const std::string& out) {
  const char* root = std::getenv("VIGIL_OUT_ROOT");
  if (root && *root && !out.empty() && out.front() != '/') {
    return std::string(root) + "/" + out;
  }
  return out;
}

struct Overrides {
  std::optional<std::uint64_t> data_seed, model_seed, train_seed;
  std::optional<int> train_streams, test_streams, frames, categories;
  std::optional<int> strd_depth, lora_rank, distill_epochs, finetune_epochs;
  std::optional<int> strd_cache, lm_cache;
  std::optional<double> gamma_vap, gamma_vad, loss_w, distill_lr, finetune_lr, lora_alpha, noise_sd;

  void apply(RunConfig& c) const {
    if (data_seed) c.data.seed = *data_seed;
    if (model_seed) c.model_seed = *model_seed;
    if (train_seed) c.train_seed = *train_seed;
    if (train_streams) c.data.train_streams = *train_streams;
    if (test_streams) c.data.test_streams = *test_streams;
    if (frames) c.data.timeline.frames = *frames;
    if (categories) c.data.timeline.categories = *categories;
    if (strd_depth) c.strd_depth = *strd_depth;
    if (lora_rank) c.lora_rank = *lora_rank;
    if (distill_epochs) c.distill_epochs = *distill_epochs;
    if (finetune_epochs) c.finetune_epochs = *finetune_epochs;
    if (strd_cache) c.strd_cache_len = *strd_cache;
    if (lm_cache) c.lm_cache_len = *lm_cache;
    if (gamma_vap) c.gamma_vap = *gamma_vap;
    if (gamma_vad) c.gamma_vad = *gamma_vad;
    if (loss_w) c.loss_weight_w = *loss_w;
    if (distill_lr) c.distill_lr = *distill_lr;
    if (finetune_lr) c.finetune_lr = *finetune_lr;
    if (lora_alpha) c.lora_alpha = *lora_alpha;
    if (noise_sd) c.data.noise_sd = *noise_sd;
  }
};

void add_config_options(CLI::App* cmd, std::string& config_path, Overrides& ov) {
  cmd->add_option("--config", config_path, "experiment config file (JSON)");
  cmd->add_option("--seed", ov.data_seed, "dataset seed");
  cmd->add_option("--model-seed", ov.model_seed, "model init seed");
  cmd->add_option("--train-seed", ov.train_seed, "training seed");
  cmd->add_option("--train-streams", ov.train_streams, "training stream count");
  cmd->add_option("--test-streams", ov.test_streams, "test stream count");
  cmd->add_option("--frames", ov.frames, "frames per stream");
  cmd->add_option("--categories", ov.categories, "anomaly category count");
  cmd->add_option("--strd-depth", ov.strd_depth, "relation-module depth (1..3)");
  cmd->add_option("--lora-rank", ov.lora_rank, "adapter rank");
  cmd->add_option("--lora-alpha", ov.lora_alpha, "adapter alpha");
  cmd->add_option("--distill-epochs", ov.distill_epochs, "stage-1 epochs");
  cmd->add_option("--finetune-epochs", ov.finetune_epochs, "stage-2 epochs");
  cmd->add_option("--distill-lr", ov.distill_lr, "stage-1 learning rate");
  cmd->add_option("--finetune-lr", ov.finetune_lr, "stage-2 learning rate");
  cmd->add_option("--gamma-vap", ov.gamma_vap, "prediction gate threshold");
  cmd->add_option("--gamma-vad", ov.gamma_vad, "detection gate threshold");
  cmd->add_option("--loss-w", ov.loss_w, "silence loss weight");
  cmd->add_option("--strd-cache", ov.strd_cache, "relation cache length");
  cmd->add_option("--lm-cache", ov.lm_cache, "lm cache length");
  cmd->add_option("--noise-sd", ov.noise_sd, "frame noise level");
}

RunConfig load_config(const std::string& config_path, const Overrides& ov) {
  RunConfig c = config_path.empty() ? RunConfig{} : RunConfig::from_file(config_path);
  ov.apply(c);
  return c;
}

std::vector<TaskMode> parse_modes(const std::string& mode) {
  if (mode == "all") return {TaskMode::VAP, TaskMode::VAD, TaskMode::VAA};
  return {task_from_name(mode)};
}

}  // namespace

int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"vigil: streaming video anomaly assistant (synthetic desk-scale pipeline)"};
  app.require_subcommand(1);

  std::string config_path;
  Overrides ov;
  std::string data_dir, distill_dir, train_dir, run_dir, out_dir;
  std::string mode = "vad";
  std::string grid = "strd";
  std::vector<std::string> golden_files;
  bool no_strd = false;
  double gamma_override = -1.0;
  int bench_pairs = 2000;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_config_options(gen, config_path, ov);
  gen->add_option("--out", out_dir, "output directory")->required();

  auto* distill = app.add_subcommand("distill", "stage 1: train the relation module");
  add_config_options(distill, config_path, ov);
  distill->add_option("--data", data_dir, "gen-data output directory")->required();
  distill->add_option("--out", out_dir, "output directory")->required();

  auto* train = app.add_subcommand("train", "stage 2: adapter fine-tuning");
  add_config_options(train, config_path, ov);
  train->add_option("--data", data_dir, "gen-data output directory")->required();
  train->add_option("--distill", distill_dir, "distill output directory");
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_flag("--no-strd", no_strd, "bypass the relation module (ablation baseline)");

  auto* run = app.add_subcommand("run", "stream the test split through the assistant");
  add_config_options(run, config_path, ov);
  run->add_option("--data", data_dir, "gen-data output directory")->required();
  run->add_option("--train", train_dir, "train output directory")->required();
  run->add_option("--mode", mode, "vap|vad|vaa|all");
  run->add_option("--gamma", gamma_override, "gate threshold override");
  run->add_option("--out", out_dir, "output directory")->required();

  auto* eval = app.add_subcommand("eval", "score run logs against ground truth");
  add_config_options(eval, config_path, ov);
  eval->add_option("--data", data_dir, "gen-data output directory");
  eval->add_option("--train", train_dir, "train output directory");
  eval->add_option("--run", run_dir, "run output directory");
  eval->add_option("--mode", mode, "vap|vad|vaa|all");
  eval->add_option("--out", out_dir, "output directory");
  eval->add_option("--golden", golden_files, "golden fixture file(s); checks them and exits");

  auto* ablate = app.add_subcommand("ablate", "config-grid experiments");
  add_config_options(ablate, config_path, ov);
  ablate->add_option("--data", data_dir, "gen-data output directory")->required();
  ablate->add_option("--grid", grid, "strd|depth|gamma")->required();
  ablate->add_option("--train", train_dir, "train output directory (gamma grid)");
  ablate->add_option("--out", out_dir, "output directory")->required();

  auto* bench = app.add_subcommand("bench", "throughput and latency vs cache length");
  add_config_options(bench, config_path, ov);
  bench->add_option("--pairs", bench_pairs, "frame pairs to stream");
  bench->add_option("--out", out_dir, "output directory")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    out_dir = resolve_out(out_dir);
    const RunConfig config = load_config(config_path, ov);

    if (gen->parsed()) {
      stage_gen_data(config, out_dir);
      std::cout << "dataset written to " << out_dir << " (hash " << config.data.hash() << ")\n";
    } else if (distill->parsed()) {
      const auto r = stage_distill(config, data_dir, out_dir);
      std::cout << "distill: holdout loss " << r.holdout_initial << " -> " << r.holdout_final
                << " over " << r.curve.steps << " steps\n";
    } else if (train->parsed()) {
      const auto r = stage_train(config, data_dir, distill_dir, out_dir, no_strd);
      std::cout << "train: " << r.curve.steps << " steps, final epoch loss "
                << (r.curve.epoch_loss.empty() ? 0.0 : r.curve.epoch_loss.back()) << "\n";
    } else if (run->parsed()) {
      for (TaskMode m : parse_modes(mode)) {
        const auto r = stage_run(config, data_dir, train_dir, m, out_dir,
                                 gamma_override > 0 ? std::optional<double>(gamma_override)
                                                    : std::nullopt);
        std::cout << "run " << task_name(m) << ": " << r.streams << " streams, " << r.events
                  << " events\n";
      }
    } else if (eval->parsed()) {
      if (!golden_files.empty()) {
        bool all_pass = true;
        for (const auto& f : golden_files) {
          for (const auto& r : run_golden_file(f)) {
            std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name << " " << r.metric << ": got "
                      << r.computed << ", expected " << r.expected << "\n";
            all_pass = all_pass && r.pass;
          }
        }
        return all_pass ? 0 : 2;
      }
      if (data_dir.empty() || train_dir.empty() || run_dir.empty() || out_dir.empty()) {
        std::cerr << "error: eval needs --data, --train, --run and --out (or --golden)\n";
        return 1;
      }
      for (TaskMode m : parse_modes(mode)) {
        const MetricReport report = stage_eval(config, data_dir, train_dir, run_dir, m, out_dir);
        std::cout << "eval " << task_name(m) << ":\n" << report.to_json() << "\n";
      }
    } else if (ablate->parsed()) {
      if (grid == "gamma") {
        if (train_dir.empty()) {
          std::cerr << "error: ablate --grid gamma needs --train\n";
          return 1;
        }
        stage_ablate_gamma(config, data_dir, train_dir, out_dir);
      } else {
        stage_ablate(config, grid, data_dir, out_dir);
      }
      std::cout << "ablation grid '" << grid << "' written to " << out_dir << "\n";
    } else if (bench->parsed()) {
      const auto points = stage_bench(config, bench_pairs, out_dir);
      for (const auto& p : points) {
        std::cout << "cache " << p.cache_len << ": " << p.pairs_per_second << " pairs/s, p50 "
                  << p.p50_ms << " ms, halves " << p.median_first_half_ms << "/"
                  << p.median_second_half_ms << " ms, field " << p.receptive_field_seconds
                  << " s\n";
      }
    }
    return 0;
  } catch (const TrainingError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args;
  args.reserve(argc > 0 ? argc - 1 : 0);
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return dispatch(args);
}

}  // namespace vigil::cli
