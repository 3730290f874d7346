#pragma once

// JSON forms of the configuration structs. Readers are strict: unknown keys
// and wrongly typed values are rejected, missing keys keep their defaults.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "kadapter/adapter.hpp"
#include "kadapter/backbone.hpp"
#include "kadapter/errors.hpp"

namespace kadapter {

using Json = nlohmann::json;

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  int warmup_steps = 0;
  int total_steps = 100;
  int batch_size = 16;
  int max_seq_len = 64;
  std::uint64_t seed = 42;
  std::vector<std::string> freeze_prefixes;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
      throw ConfigError("train betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("train.eps must be positive");
    if (weight_decay < 0.0) throw ConfigError("train.weight_decay must be non-negative");
    if (total_steps < 0 || warmup_steps < 0) throw ConfigError("step counts must be non-negative");
    if (warmup_steps > total_steps) throw ConfigError("warmup_steps exceeds total_steps");
    if (batch_size < 1) throw ConfigError("train.batch_size must be at least 1");
    if (max_seq_len < 2) throw ConfigError("train.max_seq_len must be at least 2");
  }

  bool operator==(const TrainConfig&) const = default;
};

namespace detail {

inline void reject_unknown(const Json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

template <class T>
void read_field(const Json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  const Json& v = j.at(key);
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned() == false && v.get<long long>() < 0) throw ConfigError("");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("");
    } else {
      if (!v.is_array()) throw ConfigError("");
    }
    out = v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError(where + "." + key + " has the wrong type");
  }
}

}  // namespace detail

inline Json to_json(const BackboneConfig& c) {
  return {{"n_layers", c.n_layers}, {"hidden", c.hidden},         {"n_heads", c.n_heads},
          {"ffn_inner", c.ffn_inner}, {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
          {"pad_id", c.pad_id},     {"bos_id", c.bos_id},         {"sep_id", c.sep_id},
          {"mask_id", c.mask_id}};
}

inline BackboneConfig backbone_config_from_json(const Json& j, const std::string& where = "backbone") {
  detail::reject_unknown(j, {"n_layers", "hidden", "n_heads", "ffn_inner", "vocab_size", "max_len",
                             "pad_id", "bos_id", "sep_id", "mask_id"},
                         where);
  BackboneConfig c;
  detail::read_field(j, "n_layers", c.n_layers, where);
  detail::read_field(j, "hidden", c.hidden, where);
  detail::read_field(j, "n_heads", c.n_heads, where);
  detail::read_field(j, "ffn_inner", c.ffn_inner, where);
  detail::read_field(j, "vocab_size", c.vocab_size, where);
  detail::read_field(j, "max_len", c.max_len, where);
  detail::read_field(j, "pad_id", c.pad_id, where);
  detail::read_field(j, "bos_id", c.bos_id, where);
  detail::read_field(j, "sep_id", c.sep_id, where);
  detail::read_field(j, "mask_id", c.mask_id, where);
  c.validate();
  return c;
}

inline Json to_json(const AdapterConfig& c) {
  return {{"injection_layers", c.injection_layers},
          {"n_inner", c.n_inner},
          {"hidden", c.hidden},
          {"n_heads", c.n_heads},
          {"down_dim", c.down_dim},
          {"up_dim", c.up_dim},
          {"ffn_inner", c.ffn_inner}};
}

// Validation against a backbone happens where the backbone is known.
inline AdapterConfig adapter_config_from_json(const Json& j, const std::string& where = "adapter") {
  detail::reject_unknown(j, {"injection_layers", "n_inner", "hidden", "n_heads", "down_dim", "up_dim",
                             "ffn_inner"},
                         where);
  AdapterConfig c;
  if (j.contains("injection_layers")) {
    const Json& v = j.at("injection_layers");
    if (!v.is_array()) throw ConfigError(where + ".injection_layers must be an array");
    c.injection_layers.clear();
    for (const auto& x : v) {
      if (!x.is_number_integer()) throw ConfigError(where + ".injection_layers must hold integers");
      c.injection_layers.push_back(x.get<int>());
    }
  }
  detail::read_field(j, "n_inner", c.n_inner, where);
  detail::read_field(j, "hidden", c.hidden, where);
  detail::read_field(j, "n_heads", c.n_heads, where);
  detail::read_field(j, "down_dim", c.down_dim, where);
  detail::read_field(j, "up_dim", c.up_dim, where);
  detail::read_field(j, "ffn_inner", c.ffn_inner, where);
  return c;
}

inline Json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"betas", {c.beta1, c.beta2}},
          {"eps", c.eps},
          {"weight_decay", c.weight_decay},
          {"warmup_steps", c.warmup_steps},
          {"total_steps", c.total_steps},
          {"batch_size", c.batch_size},
          {"max_seq_len", c.max_seq_len},
          {"seed", c.seed},
          {"freeze_prefixes", c.freeze_prefixes}};
}

inline TrainConfig train_config_from_json(const Json& j, const std::string& where = "train") {
  detail::reject_unknown(j, {"lr", "betas", "eps", "weight_decay", "warmup_steps", "total_steps",
                             "batch_size", "max_seq_len", "seed", "freeze_prefixes"},
                         where);
  TrainConfig c;
  detail::read_field(j, "lr", c.lr, where);
  if (j.contains("betas")) {
    const Json& b = j.at("betas");
    if (!b.is_array() || b.size() != 2 || !b[0].is_number() || !b[1].is_number()) {
      throw ConfigError(where + ".betas must be a pair of numbers");
    }
    c.beta1 = b[0].get<double>();
    c.beta2 = b[1].get<double>();
  }
  detail::read_field(j, "eps", c.eps, where);
  detail::read_field(j, "weight_decay", c.weight_decay, where);
  detail::read_field(j, "warmup_steps", c.warmup_steps, where);
  detail::read_field(j, "total_steps", c.total_steps, where);
  detail::read_field(j, "batch_size", c.batch_size, where);
  detail::read_field(j, "max_seq_len", c.max_seq_len, where);
  detail::read_field(j, "seed", c.seed, where);
  if (j.contains("freeze_prefixes")) {
    const Json& v = j.at("freeze_prefixes");
    if (!v.is_array()) throw ConfigError(where + ".freeze_prefixes must be an array");
    for (const auto& x : v) {
      if (!x.is_string()) throw ConfigError(where + ".freeze_prefixes must hold strings");
      c.freeze_prefixes.push_back(x.get<std::string>());
    }
  }
  c.validate();
  return c;
}

// One CLI run. Paths are taken relative to the working directory.
struct RunConfig {
  std::uint64_t seed = 42;
  std::string task;
  std::string out_dir;
  std::string data_dir;
  std::string backbone_ckpt;
  std::string adapter_name = "fac";
  std::string queries;  // probe only; defaults to <data_dir>/queries.jsonl
  std::vector<std::string> adapters;  // finetune/eval; the command-line flags override
  std::size_t typing_variants = 2;    // sentences per entity for typing
  std::size_t task_examples = 1000;   // qa / multichoice examples before splitting
  AdapterConfig adapter;
  TrainConfig train;
  std::optional<BackboneConfig> backbone;  // if given, must match the checkpoint

  Json to_json() const {
    Json j = {{"seed", seed},
              {"task", task},
              {"out_dir", out_dir},
              {"data_dir", data_dir},
              {"backbone_ckpt", backbone_ckpt},
              {"adapter_name", adapter_name},
              {"queries", queries},
              {"adapters", adapters},
              {"typing_variants", typing_variants},
              {"task_examples", task_examples},
              {"adapter", kadapter::to_json(adapter)},
              {"train", kadapter::to_json(train)}};
    if (backbone) j["backbone"] = kadapter::to_json(*backbone);
    return j;
  }
};

inline RunConfig run_config_from_json(const Json& j) {
  detail::reject_unknown(j, {"seed", "task", "out_dir", "data_dir", "backbone_ckpt", "adapter_name",
                             "queries", "adapters", "typing_variants", "task_examples", "adapter", "train",
                             "backbone"},
                         "config");
  RunConfig c;
  detail::read_field(j, "seed", c.seed, "config");
  detail::read_field(j, "task", c.task, "config");
  detail::read_field(j, "out_dir", c.out_dir, "config");
  detail::read_field(j, "data_dir", c.data_dir, "config");
  detail::read_field(j, "backbone_ckpt", c.backbone_ckpt, "config");
  detail::read_field(j, "adapter_name", c.adapter_name, "config");
  detail::read_field(j, "queries", c.queries, "config");
  if (j.contains("adapters")) {
    const Json& v = j.at("adapters");
    if (!v.is_array()) throw ConfigError("config.adapters must be an array");
    for (const auto& x : v) {
      if (!x.is_string()) throw ConfigError("config.adapters must hold paths");
      c.adapters.push_back(x.get<std::string>());
    }
  }
  detail::read_field(j, "typing_variants", c.typing_variants, "config");
  detail::read_field(j, "task_examples", c.task_examples, "config");
  if (j.contains("adapter")) c.adapter = adapter_config_from_json(j.at("adapter"));
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
  if (j.contains("backbone")) c.backbone = backbone_config_from_json(j.at("backbone"));
  // The run seed drives training unless the train section sets its own.
  if (!j.contains("train") || !j.at("train").contains("seed")) c.train.seed = c.seed;
  if (c.out_dir.empty()) throw ConfigError("config.out_dir is required");
  if (c.adapter_name.empty() || c.adapter_name.find('.') != std::string::npos) {
    throw ConfigError("config.adapter_name must be non-empty and contain no '.'");
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace kadapter
