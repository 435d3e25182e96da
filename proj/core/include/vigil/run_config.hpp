#pragma once

#include <cstdint>
#include <string>

#include "vigil/synth.hpp"
#include "vigil/task.hpp"

namespace vigil {

// Complete experiment description. Every stage consumes the same config
// and stamps its hash into the artifacts it writes; a stage refuses to
// mix artifacts with different stamps.
struct RunConfig {
  DatasetConfig data;

  // model
  int d_model = 32;
  int n_heads = 4;
  int ffn_mult = 4;
  int patch = 8;
  int strd_depth = 2;
  int lm_layers = 2;
  bool bidirectional_teacher = false;
  std::uint64_t model_seed = 7;

  // stage 1: relation distillation
  int distill_epochs = 10;
  double distill_lr = 1e-4;
  int distill_batch = 2;
  double distill_weight_decay = 0.01;

  // stage 2: adapter fine-tuning
  int finetune_epochs = 2;
  double finetune_lr = 5e-3;
  double loss_weight_w = 1.0;
  int lora_rank = 4;
  double lora_alpha = 8.0;
  std::uint64_t train_seed = 11;

  // inference
  double gamma_vap = 0.96;
  double gamma_vad = 0.7;
  int strd_cache_len = 128;
  int lm_cache_len = 1024;
  int max_response_tokens = 8;
  bool persist_responses = false;

  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  static RunConfig from_file(const std::string& path);
  void save(const std::string& path) const;
  // Stable content hash over every field above.
  std::string hash() const;

  double gamma_for(TaskMode mode) const {
    return mode == TaskMode::VAP ? gamma_vap : gamma_vad;
  }
};

}  // namespace vigil
