#include "hashcl/config.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <json.hpp>

#include "hashcl/errors.hpp"

namespace hashcl {

using nlohmann::json;

namespace {

ConfigError field_error(const std::string& key, const std::string& what) {
  return ConfigError("config field '" + key + "': " + what);
}

std::size_t as_count(const json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw field_error(key, "expected a non-negative integer");
  }
  return v.get<std::size_t>();
}

double as_number(const json& v, const std::string& key) {
  if (!v.is_number()) throw field_error(key, "expected a number");
  return v.get<double>();
}

bool as_bool(const json& v, const std::string& key) {
  if (!v.is_boolean()) throw field_error(key, "expected true or false");
  return v.get<bool>();
}

std::string as_string(const json& v, const std::string& key) {
  if (!v.is_string()) throw field_error(key, "expected a string");
  return v.get<std::string>();
}

using Setter = std::function<void(ExperimentConfig&, const json&, const std::string&)>;

template <typename T>
Setter count_field(T ExperimentConfig::*part, std::size_t T::*field) {
  return [=](ExperimentConfig& c, const json& v, const std::string& k) {
    (c.*part).*field = as_count(v, k);
  };
}

template <typename T>
Setter number_field(T ExperimentConfig::*part, double T::*field) {
  return [=](ExperimentConfig& c, const json& v, const std::string& k) {
    (c.*part).*field = as_number(v, k);
  };
}

template <typename T>
Setter bool_field(T ExperimentConfig::*part, bool T::*field) {
  return [=](ExperimentConfig& c, const json& v, const std::string& k) {
    (c.*part).*field = as_bool(v, k);
  };
}

template <typename Parse, typename T, typename F>
Setter enum_field(T ExperimentConfig::*part, F T::*field, Parse parse) {
  return [=](ExperimentConfig& c, const json& v, const std::string& k) {
    const std::string name = as_string(v, k);
    try {
      (c.*part).*field = parse(name);
    } catch (const Error& e) {
      throw field_error(k, e.what());
    }
  };
}

const std::map<std::string, Setter>& setters() {
  using C = ExperimentConfig;
  static const std::map<std::string, Setter> table = {
      {"seeds",
       [](C& c, const json& v, const std::string& k) {
         if (!v.is_array() || v.empty()) throw field_error(k, "expected a non-empty list");
         c.seeds.clear();
         for (const auto& s : v) c.seeds.push_back(as_count(s, k));
       }},
      {"out_dir", [](C& c, const json& v, const std::string& k) { c.out_dir = as_string(v, k); }},
      {"n_layers", count_field(&C::encoder, &EncoderConfig::n_layers)},
      {"dim", count_field(&C::encoder, &EncoderConfig::dim)},
      {"n_heads", count_field(&C::encoder, &EncoderConfig::n_heads)},
      {"tokens", count_field(&C::encoder, &EncoderConfig::tokens)},
      {"raw_dim", count_field(&C::encoder, &EncoderConfig::raw_dim)},
      {"mlp_ratio", count_field(&C::encoder, &EncoderConfig::mlp_ratio)},
      {"residual_init_scale", number_field(&C::encoder, &EncoderConfig::residual_init_scale)},
      {"injected_layers",
       [](C& c, const json& v, const std::string& k) {
         if (!v.is_array()) throw field_error(k, "expected a list of 1-based layer numbers");
         c.encoder.injected_layers.clear();
         for (const auto& l : v) {
           const std::size_t layer = as_count(l, k);
           if (layer == 0) throw field_error(k, "layers are numbered from 1");
           c.encoder.injected_layers.push_back(layer - 1);
         }
       }},
      {"n_experts", count_field(&C::pool, &PoolConfig::num_experts)},
      {"prompt_length", count_field(&C::pool, &PoolConfig::prompt_length)},
      {"top_k", count_field(&C::pool, &PoolConfig::top_k)},
      {"prompt_init_scale", number_field(&C::pool, &PoolConfig::prompt_init_scale)},
      {"router_init_std", number_field(&C::pool, &PoolConfig::router_init_std)},
      {"inherit_router", bool_field(&C::pool, &PoolConfig::inherit_router)},
      {"weights_from_penalized", bool_field(&C::pool, &PoolConfig::weights_from_penalized)},
      {"hdr", bool_field(&C::modulator, &ModulatorConfig::hdr_enabled)},
      {"hgm", bool_field(&C::modulator, &ModulatorConfig::hgm_enabled)},
      {"delta", number_field(&C::modulator, &ModulatorConfig::delta)},
      {"alpha_decay", number_field(&C::modulator, &ModulatorConfig::alpha_decay)},
      {"beta", number_field(&C::modulator, &ModulatorConfig::beta)},
      {"poly_exponent", number_field(&C::modulator, &ModulatorConfig::poly_exponent)},
      {"psi_variant", enum_field(&C::modulator, &ModulatorConfig::penalty, parse_penalty_variant)},
      {"gamma_variant", enum_field(&C::modulator, &ModulatorConfig::decay, parse_decay_variant)},
      {"hdr_at_inference", bool_field(&C::modulator, &ModulatorConfig::hdr_at_inference)},
      {"lambda", number_field(&C::train, &TrainConfig::lambda)},
      {"tau", number_field(&C::train, &TrainConfig::tau)},
      {"cr_sign", number_field(&C::train, &TrainConfig::cr_sign)},
      {"epochs", count_field(&C::train, &TrainConfig::epochs)},
      {"batch_size", count_field(&C::train, &TrainConfig::batch_size)},
      {"lr_prompt", number_field(&C::train, &TrainConfig::lr_prompt)},
      {"lr_router", number_field(&C::train, &TrainConfig::lr_router)},
      {"lr_classifier", number_field(&C::train, &TrainConfig::lr_classifier)},
      {"lr_task_head", number_field(&C::train, &TrainConfig::lr_task_head)},
      {"pseudo_per_class", count_field(&C::train, &TrainConfig::pseudo_per_class)},
      {"optimizer", enum_field(&C::train, &TrainConfig::optimizer, parse_optimizer_kind)},
      {"tasks", count_field(&C::data, &DataConfig::tasks)},
      {"classes_per_task", count_field(&C::data, &DataConfig::classes_per_task)},
      {"train_per_class", count_field(&C::data, &DataConfig::train_per_class)},
      {"test_per_class", count_field(&C::data, &DataConfig::test_per_class)},
      {"rho", number_field(&C::data, &DataConfig::rho)},
      {"mean_radius", number_field(&C::data, &DataConfig::mean_radius)},
      {"offset_scale", number_field(&C::data, &DataConfig::offset_scale)},
      {"noise_std", number_field(&C::data, &DataConfig::noise_std)},
      {"pretrain_classes", count_field(&C::data, &DataConfig::pretrain_classes)},
      {"pretrain_train_per_class", count_field(&C::data, &DataConfig::pretrain_train_per_class)},
      {"pretrain_test_per_class", count_field(&C::data, &DataConfig::pretrain_test_per_class)},
      {"pretrain_radius", number_field(&C::data, &DataConfig::pretrain_radius)},
      {"pretrain_head_epochs", count_field(&C::pretrain, &PretrainConfig::head_epochs)},
      {"pretrain_head_lr", number_field(&C::pretrain, &PretrainConfig::head_lr)},
      {"pretrain_epochs", count_field(&C::pretrain, &PretrainConfig::max_epochs)},
      {"pretrain_batch_size", count_field(&C::pretrain, &PretrainConfig::batch_size)},
      {"pretrain_lr", number_field(&C::pretrain, &PretrainConfig::lr)},
      {"pretrain_target_accuracy", number_field(&C::pretrain, &PretrainConfig::target_accuracy)},
  };
  return table;
}

}  // namespace

void ExperimentConfig::validate() const {
  encoder.validate();
  pool.validate();
  modulator.validate();
  train.validate();
  data.validate();
  if (encoder.raw_dim == 0) throw ConfigError("raw_dim must be >= 1");
  if (pretrain.batch_size == 0 || pretrain.max_epochs == 0) {
    throw ConfigError("pretrain_batch_size and pretrain_epochs must be >= 1");
  }
  if (!(pretrain.lr > 0.0)) throw ConfigError("pretrain_lr must be > 0");
  if (!(pretrain.head_lr > 0.0)) throw ConfigError("pretrain_head_lr must be > 0");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
}

ExperimentConfig parse_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) {
    throw ConfigError("config must be a JSON object");
  }
  if (!doc.contains("schema")) {
    throw field_error("schema", "missing; expected " + std::to_string(kConfigSchema));
  }
  if (!doc["schema"].is_number_integer() || doc["schema"].get<long long>() != kConfigSchema) {
    throw field_error("schema", "unsupported version, expected " + std::to_string(kConfigSchema));
  }
  ExperimentConfig cfg;
  const auto& table = setters();
  for (const auto& [key, value] : doc.items()) {
    if (key == "schema") continue;
    auto it = table.find(key);
    if (it == table.end()) {
      throw field_error(key, "unknown key");
    }
    it->second(cfg, value, key);
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot read config " + path.string());
  }
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

std::string config_to_json(const ExperimentConfig& c) {
  json doc;
  doc["schema"] = kConfigSchema;
  doc["seeds"] = c.seeds;
  doc["out_dir"] = c.out_dir;
  doc["n_layers"] = c.encoder.n_layers;
  doc["dim"] = c.encoder.dim;
  doc["n_heads"] = c.encoder.n_heads;
  doc["tokens"] = c.encoder.tokens;
  doc["raw_dim"] = c.encoder.raw_dim;
  doc["mlp_ratio"] = c.encoder.mlp_ratio;
  doc["residual_init_scale"] = c.encoder.residual_init_scale;
  json layers = json::array();
  for (auto l : c.encoder.injected_layers) layers.push_back(l + 1);
  doc["injected_layers"] = layers;
  doc["n_experts"] = c.pool.num_experts;
  doc["prompt_length"] = c.pool.prompt_length;
  doc["top_k"] = c.pool.top_k;
  doc["prompt_init_scale"] = c.pool.prompt_init_scale;
  doc["router_init_std"] = c.pool.router_init_std;
  doc["inherit_router"] = c.pool.inherit_router;
  doc["weights_from_penalized"] = c.pool.weights_from_penalized;
  doc["hdr"] = c.modulator.hdr_enabled;
  doc["hgm"] = c.modulator.hgm_enabled;
  doc["delta"] = c.modulator.delta;
  doc["alpha_decay"] = c.modulator.alpha_decay;
  doc["beta"] = c.modulator.beta;
  doc["poly_exponent"] = c.modulator.poly_exponent;
  doc["psi_variant"] = to_string(c.modulator.penalty);
  doc["gamma_variant"] = to_string(c.modulator.decay);
  doc["hdr_at_inference"] = c.modulator.hdr_at_inference;
  doc["lambda"] = c.train.lambda;
  doc["tau"] = c.train.tau;
  doc["cr_sign"] = c.train.cr_sign;
  doc["epochs"] = c.train.epochs;
  doc["batch_size"] = c.train.batch_size;
  doc["lr_prompt"] = c.train.lr_prompt;
  doc["lr_router"] = c.train.lr_router;
  doc["lr_classifier"] = c.train.lr_classifier;
  doc["lr_task_head"] = c.train.lr_task_head;
  doc["pseudo_per_class"] = c.train.pseudo_per_class;
  doc["optimizer"] = to_string(c.train.optimizer);
  doc["tasks"] = c.data.tasks;
  doc["classes_per_task"] = c.data.classes_per_task;
  doc["train_per_class"] = c.data.train_per_class;
  doc["test_per_class"] = c.data.test_per_class;
  doc["rho"] = c.data.rho;
  doc["mean_radius"] = c.data.mean_radius;
  doc["offset_scale"] = c.data.offset_scale;
  doc["noise_std"] = c.data.noise_std;
  doc["pretrain_classes"] = c.data.pretrain_classes;
  doc["pretrain_train_per_class"] = c.data.pretrain_train_per_class;
  doc["pretrain_test_per_class"] = c.data.pretrain_test_per_class;
  doc["pretrain_radius"] = c.data.pretrain_radius;
  doc["pretrain_head_epochs"] = c.pretrain.head_epochs;
  doc["pretrain_head_lr"] = c.pretrain.head_lr;
  doc["pretrain_epochs"] = c.pretrain.max_epochs;
  doc["pretrain_batch_size"] = c.pretrain.batch_size;
  doc["pretrain_lr"] = c.pretrain.lr;
  doc["pretrain_target_accuracy"] = c.pretrain.target_accuracy;
  return doc.dump(2) + "\n";
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto first = item.find_first_not_of(" \t");
    const auto last = item.find_last_not_of(" \t");
    if (first == std::string::npos) {
      throw ConfigError("seed list '" + text + "' has an empty entry");
    }
    item = item.substr(first, last - first + 1);
    std::size_t used = 0;
    unsigned long long value = 0;
    try {
      value = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || item.front() == '-') {
      throw ConfigError("seed '" + item + "' is not a non-negative integer");
    }
    seeds.push_back(value);
  }
  if (seeds.empty()) {
    throw ConfigError("seed list is empty");
  }
  return seeds;
}

void apply_environment(ExperimentConfig& cfg) {
  if (const char* env = std::getenv("HASHCL_SEED"); env != nullptr && *env != '\0') {
    cfg.seeds = parse_seed_list(env);
  }
}

}  // namespace hashcl
