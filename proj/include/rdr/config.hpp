#pragma once

// Run configuration: one JSON document describing the head, the losses, the
// dataset, the optimizer and the loop parameters. Parsing is strict: unknown
// keys and type mismatches are ConfigErrors naming the offending path, so a
// typo never silently falls back to a default.

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <string>

#include <json.hpp>

#include "rdr/errors.hpp"
#include "rdr/heads.hpp"
#include "rdr/losses.hpp"
#include "rdr/taskgen.hpp"

namespace rdr::config {

inline constexpr int kSchemaVersion = 1;

struct OptimizerConfig {
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("optimizer.lr: must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw ConfigError("optimizer.momentum: must be in [0, 1)");
    }
    if (!(weight_decay >= 0.0)) {
      throw ConfigError("optimizer.weight_decay: must be >= 0");
    }
  }
};

struct RunConfig {
  heads::HeadConfig head;
  losses::LossConfig loss;
  taskgen::DatasetConfig data;
  OptimizerConfig optimizer;
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;
  std::string output_dir = "out";

  void validate() const {
    head.validate();
    loss.validate();
    data.validate();
    optimizer.validate();
    if (epochs == 0) throw ConfigError("epochs: must be >= 1");
    if (batch_size == 0) throw ConfigError("batch_size: must be >= 1");
    if (output_dir.empty()) throw ConfigError("output_dir: must not be empty");
    if (head.input_dim != data.feature_dim) {
      throw ConfigError("head.input_dim (" + std::to_string(head.input_dim) +
                        ") does not match data.feature_dim (" +
                        std::to_string(data.feature_dim) + ")");
    }
    if (head.num_classes != data.num_classes) {
      throw ConfigError("head.num_classes (" + std::to_string(head.num_classes) +
                        ") does not match data.num_classes (" +
                        std::to_string(data.num_classes) + ")");
    }
  }
};

namespace detail {

using nlohmann::json;

inline void check_keys(const json& j, const std::string& scope,
                       std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) known = known || it.key() == k;
    if (!known) {
      throw ConfigError("config: unknown key '" +
                        (scope.empty() ? it.key() : scope + "." + it.key()) + "'");
    }
  }
}

inline void require_object(const json& j, const std::string& path) {
  if (!j.is_object()) {
    throw ConfigError("config: " + path + ": expected an object");
  }
}

inline double get_number(const json& j, const std::string& path) {
  if (!j.is_number()) throw ConfigError("config: " + path + ": expected a number");
  return j.get<double>();
}

inline std::uint64_t get_uint(const json& j, const std::string& path) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_number_integer() && j.get<std::int64_t>() >= 0) {
    return static_cast<std::uint64_t>(j.get<std::int64_t>());
  }
  throw ConfigError("config: " + path + ": expected a non-negative integer");
}

inline std::string get_string(const json& j, const std::string& path) {
  if (!j.is_string()) throw ConfigError("config: " + path + ": expected a string");
  return j.get<std::string>();
}

template <typename T, typename Get>
void assign_if(const json& j, const char* key, const std::string& scope, T& out,
               Get get) {
  if (auto it = j.find(key); it != j.end()) {
    out = static_cast<T>(get(*it, scope.empty() ? key : scope + "." + key));
  }
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  namespace d = detail;
  d::require_object(j, "top level");
  d::check_keys(j, "", {"schema_version", "head", "loss", "data", "optimizer",
                        "epochs", "batch_size", "seed", "output_dir"});
  if (auto it = j.find("schema_version"); it != j.end()) {
    const auto v = d::get_uint(*it, "schema_version");
    if (v != static_cast<std::uint64_t>(kSchemaVersion)) {
      throw ConfigError("config: schema_version " + std::to_string(v) +
                        " is not supported (expected " +
                        std::to_string(kSchemaVersion) + ")");
    }
  }

  RunConfig cfg;

  if (auto it = j.find("data"); it != j.end()) {
    const auto& s = *it;
    d::require_object(s, "data");
    d::check_keys(s, "data",
                  {"num_classes", "feature_dim", "n_train", "n_val", "fg_fraction",
                   "feature_noise", "distractor_dims", "seed"});
    d::assign_if(s, "num_classes", "data", cfg.data.num_classes, d::get_uint);
    d::assign_if(s, "feature_dim", "data", cfg.data.feature_dim, d::get_uint);
    d::assign_if(s, "n_train", "data", cfg.data.n_train, d::get_uint);
    d::assign_if(s, "n_val", "data", cfg.data.n_val, d::get_uint);
    d::assign_if(s, "fg_fraction", "data", cfg.data.fg_fraction, d::get_number);
    d::assign_if(s, "feature_noise", "data", cfg.data.feature_noise, d::get_number);
    d::assign_if(s, "distractor_dims", "data", cfg.data.distractor_dims,
                 d::get_uint);
    d::assign_if(s, "seed", "data", cfg.data.seed, d::get_uint);
  }

  bool input_dim_given = false, num_classes_given = false;
  bool routing_depth_given = false, routing_width_given = false;
  if (auto it = j.find("head"); it != j.end()) {
    const auto& s = *it;
    d::require_object(s, "head");
    d::check_keys(s, "head",
                  {"variant", "input_dim", "trunk", "trunk_width", "num_classes",
                   "routing_branch_depth", "routing_branch_width"});
    if (auto v = s.find("variant"); v != s.end()) {
      cfg.head.variant = heads::variant_from_string(d::get_string(*v, "head.variant"));
    }
    if (auto v = s.find("trunk"); v != s.end()) {
      cfg.head.trunk = heads::trunk_from_string(d::get_string(*v, "head.trunk"));
    }
    d::assign_if(s, "trunk_width", "head", cfg.head.trunk_width, d::get_uint);
    input_dim_given = s.contains("input_dim");
    num_classes_given = s.contains("num_classes");
    routing_depth_given = s.contains("routing_branch_depth");
    routing_width_given = s.contains("routing_branch_width");
    d::assign_if(s, "input_dim", "head", cfg.head.input_dim, d::get_uint);
    d::assign_if(s, "num_classes", "head", cfg.head.num_classes, d::get_uint);
    d::assign_if(s, "routing_branch_depth", "head", cfg.head.routing_depth,
                 d::get_uint);
    d::assign_if(s, "routing_branch_width", "head", cfg.head.routing_width,
                 d::get_uint);
  }
  // Unstated head dimensions follow the dataset; the Lite variant narrows
  // its routing branch unless told otherwise.
  if (!input_dim_given) cfg.head.input_dim = cfg.data.feature_dim;
  if (!num_classes_given) cfg.head.num_classes = cfg.data.num_classes;
  if (cfg.head.variant == heads::Variant::kLite) {
    if (!routing_depth_given) cfg.head.routing_depth = 1;
    if (!routing_width_given) cfg.head.routing_width = 16;
  }

  if (auto it = j.find("loss"); it != j.end()) {
    const auto& s = *it;
    d::require_object(s, "loss");
    d::check_keys(s, "loss",
                  {"cls", "bbox", "focal_gamma", "focal_alpha", "smooth_l1_beta",
                   "iou_floor", "lambda"});
    if (auto v = s.find("cls"); v != s.end()) {
      cfg.loss.cls = losses::cls_loss_from_string(d::get_string(*v, "loss.cls"));
    }
    if (auto v = s.find("bbox"); v != s.end()) {
      cfg.loss.bbox = losses::bbox_loss_from_string(d::get_string(*v, "loss.bbox"));
    }
    d::assign_if(s, "focal_gamma", "loss", cfg.loss.focal_gamma, d::get_number);
    d::assign_if(s, "focal_alpha", "loss", cfg.loss.focal_alpha, d::get_number);
    d::assign_if(s, "smooth_l1_beta", "loss", cfg.loss.smooth_l1_beta,
                 d::get_number);
    d::assign_if(s, "iou_floor", "loss", cfg.loss.iou_floor, d::get_number);
    d::assign_if(s, "lambda", "loss", cfg.loss.lambda, d::get_number);
  }

  if (auto it = j.find("optimizer"); it != j.end()) {
    const auto& s = *it;
    d::require_object(s, "optimizer");
    d::check_keys(s, "optimizer", {"lr", "momentum", "weight_decay"});
    d::assign_if(s, "lr", "optimizer", cfg.optimizer.lr, d::get_number);
    d::assign_if(s, "momentum", "optimizer", cfg.optimizer.momentum, d::get_number);
    d::assign_if(s, "weight_decay", "optimizer", cfg.optimizer.weight_decay,
                 d::get_number);
  }

  d::assign_if(j, "epochs", "", cfg.epochs, d::get_uint);
  d::assign_if(j, "batch_size", "", cfg.batch_size, d::get_uint);
  d::assign_if(j, "seed", "", cfg.seed, d::get_uint);
  if (auto it = j.find("output_dir"); it != j.end()) {
    cfg.output_dir = d::get_string(*it, "output_dir");
  }

  cfg.validate();
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

inline nlohmann::json to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["schema_version"] = kSchemaVersion;
  j["head"] = {{"variant", heads::to_string(cfg.head.variant)},
               {"input_dim", cfg.head.input_dim},
               {"trunk", heads::to_string(cfg.head.trunk)},
               {"trunk_width", cfg.head.trunk_width},
               {"num_classes", cfg.head.num_classes},
               {"routing_branch_depth", cfg.head.routing_depth},
               {"routing_branch_width", cfg.head.routing_width}};
  j["loss"] = {{"cls", losses::to_string(cfg.loss.cls)},
               {"bbox", losses::to_string(cfg.loss.bbox)},
               {"focal_gamma", cfg.loss.focal_gamma},
               {"focal_alpha", cfg.loss.focal_alpha},
               {"smooth_l1_beta", cfg.loss.smooth_l1_beta},
               {"iou_floor", cfg.loss.iou_floor},
               {"lambda", cfg.loss.lambda}};
  j["data"] = {{"num_classes", cfg.data.num_classes},
               {"feature_dim", cfg.data.feature_dim},
               {"n_train", cfg.data.n_train},
               {"n_val", cfg.data.n_val},
               {"fg_fraction", cfg.data.fg_fraction},
               {"feature_noise", cfg.data.feature_noise},
               {"distractor_dims", cfg.data.distractor_dims},
               {"seed", cfg.data.seed}};
  j["optimizer"] = {{"lr", cfg.optimizer.lr},
                    {"momentum", cfg.optimizer.momentum},
                    {"weight_decay", cfg.optimizer.weight_decay}};
  j["epochs"] = cfg.epochs;
  j["batch_size"] = cfg.batch_size;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  return j;
}

}  // namespace rdr::config
