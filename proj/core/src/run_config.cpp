#include "vigil/run_config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "vigil/hash.hpp"
#include "vigil/task.hpp"

namespace vigil {

using nlohmann::ordered_json;

std::string RunConfig::to_json() const {
  ordered_json j;
  j["data"] = ordered_json::parse(data.to_json());
  j["model"] = {{"d_model", d_model},
                {"n_heads", n_heads},
                {"ffn_mult", ffn_mult},
                {"patch", patch},
                {"strd_depth", strd_depth},
                {"lm_layers", lm_layers},
                {"bidirectional_teacher", bidirectional_teacher},
                {"model_seed", model_seed}};
  j["distill"] = {{"epochs", distill_epochs},
                  {"lr", distill_lr},
                  {"batch", distill_batch},
                  {"weight_decay", distill_weight_decay}};
  j["finetune"] = {{"epochs", finetune_epochs},
                   {"lr", finetune_lr},
                   {"loss_weight_w", loss_weight_w},
                   {"lora_rank", lora_rank},
                   {"lora_alpha", lora_alpha},
                   {"train_seed", train_seed}};
  j["inference"] = {{"gamma_vap", gamma_vap},
                    {"gamma_vad", gamma_vad},
                    {"strd_cache_len", strd_cache_len},
                    {"lm_cache_len", lm_cache_len},
                    {"max_response_tokens", max_response_tokens},
                    {"persist_responses", persist_responses}};
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  ordered_json j = ordered_json::parse(text, nullptr, false);
  if (j.is_discarded()) throw DataError("run config: invalid JSON");
  RunConfig c;
  if (j.contains("data")) c.data = DatasetConfig::from_json(j.at("data").dump());
  if (j.contains("model")) {
    const auto& m = j.at("model");
    c.d_model = m.value("d_model", c.d_model);
    c.n_heads = m.value("n_heads", c.n_heads);
    c.ffn_mult = m.value("ffn_mult", c.ffn_mult);
    c.patch = m.value("patch", c.patch);
    c.strd_depth = m.value("strd_depth", c.strd_depth);
    c.lm_layers = m.value("lm_layers", c.lm_layers);
    c.bidirectional_teacher = m.value("bidirectional_teacher", c.bidirectional_teacher);
    c.model_seed = m.value("model_seed", c.model_seed);
  }
  if (j.contains("distill")) {
    const auto& d = j.at("distill");
    c.distill_epochs = d.value("epochs", c.distill_epochs);
    c.distill_lr = d.value("lr", c.distill_lr);
    c.distill_batch = d.value("batch", c.distill_batch);
    c.distill_weight_decay = d.value("weight_decay", c.distill_weight_decay);
  }
  if (j.contains("finetune")) {
    const auto& f = j.at("finetune");
    c.finetune_epochs = f.value("epochs", c.finetune_epochs);
    c.finetune_lr = f.value("lr", c.finetune_lr);
    c.loss_weight_w = f.value("loss_weight_w", c.loss_weight_w);
    c.lora_rank = f.value("lora_rank", c.lora_rank);
    c.lora_alpha = f.value("lora_alpha", c.lora_alpha);
    c.train_seed = f.value("train_seed", c.train_seed);
  }
  if (j.contains("inference")) {
    const auto& i = j.at("inference");
    c.gamma_vap = i.value("gamma_vap", c.gamma_vap);
    c.gamma_vad = i.value("gamma_vad", c.gamma_vad);
    c.strd_cache_len = i.value("strd_cache_len", c.strd_cache_len);
    c.lm_cache_len = i.value("lm_cache_len", c.lm_cache_len);
    c.max_response_tokens = i.value("max_response_tokens", c.max_response_tokens);
    c.persist_responses = i.value("persist_responses", c.persist_responses);
  }
  return c;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("run config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void RunConfig::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("run config: cannot write " + path);
  out << to_json() << '\n';
}

std::string RunConfig::hash() const { return hex64(fnv1a64(to_json())); }

}  // namespace vigil
