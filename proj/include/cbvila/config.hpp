#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cbvila/common.hpp"

namespace cbvila {

/// All run hyperparameters. Serialized as a flat key=value text file;
/// unknown keys are rejected so typos fail loudly.
struct TrainConfig {
  // model
  int d = 64;
  int heads = 4;
  int enc_layers = 4;
  int fusion_layers = 4;
  int patch = 8;
  int image_size = 32;
  int max_text_len = 12;
  int codebook_size = 64;  // K
  int code_dim = 64;       // d_c, must equal d (quantization is projection-free)
  double init_std = 0.05;  // weight init scale; desk-scale nets need the
                           // image-to-text transport alive at initialization

  // optimizer and schedule
  int epochs = 200;
  int batch_size = 32;
  double init_lr = 1e-5;
  double peak_lr = 1e-4;
  double min_lr = 1e-5;
  int warmup_iters = 1000;
  double weight_decay = 0.02;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  // objectives
  double text_mask_ratio = 0.15;
  double visual_mask_ratio = 0.75;
  double beta = 0.25;  // commitment weight inside the codebook objective
  double w_itm = 1.0;
  double w_mlm = 1.0;
  double w_mim = 1.0;
  double w_pixel = 1.0;
  double w_align = 1.0;
  double w_commit = 1.0;
  bool enable_itm = true;
  bool enable_mlm = true;
  bool enable_mim = true;
  bool enable_pixel = true;  // pixel + alignment + commitment (codebook objective)
  bool infonce_enable = false;
  double infonce_weight = 1.0;
  double infonce_tau = 0.07;

  // quantization
  std::string quantize_mode = "gumbel";  // "gumbel" | "hard"
  double gumbel_tau0 = 1.0;
  double gumbel_tau_end = 0.0625;
  bool gumbel_noise = true;

  // codebook maintenance
  bool deadcode_enable = true;
  int deadcode_threshold = 1;
  double deadcode_noise = 0.01;

  // data: either a directory holding train/ and eval/ datasets, or
  // in-memory synthetic generation
  std::string data_dir;
  int n_train = 500;
  int n_eval = 100;
  std::uint64_t data_seed = 1234;

  // run
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  int checkpoint_every = 1000;

  void validate() const {
    require_config(d > 0 && heads > 0 && d % heads == 0, "model width must divide by heads");
    require_config(enc_layers > 0 && fusion_layers > 0, "layer counts must be positive");
    require_config(patch > 0 && image_size % patch == 0, "image size must divide by patch");
    require_config(max_text_len >= 3, "max_text_len too small");
    require_config(codebook_size >= 2, "codebook needs K >= 2");
    require_config(code_dim == d, "code_dim must equal the model width d");
    require_config(init_std > 0.0 && init_std < 1.0, "init_std must lie in (0,1)");
    require_config(warmup_iters >= 1, "warmup_iters must be >= 1");
    require_config(text_mask_ratio > 0.0 && text_mask_ratio < 1.0, "text mask ratio in (0,1)");
    require_config(visual_mask_ratio > 0.0 && visual_mask_ratio < 1.0, "visual mask ratio in (0,1)");
    require_config(init_lr <= peak_lr, "init_lr must not exceed peak_lr");
    require_config(beta >= 0.0, "beta must be non-negative");
    require_config(quantize_mode == "gumbel" || quantize_mode == "hard",
                   "quantize_mode must be gumbel or hard");
    require_config(gumbel_tau0 > 0.0 && gumbel_tau_end > 0.0, "gumbel temperatures must be positive");
    require_config(epochs > 0 && batch_size > 0, "epochs and batch_size must be positive");
    require_config(n_train >= 2 && n_eval >= 2, "need at least 2 pairs per split");
    require_config(checkpoint_every > 0, "checkpoint_every must be positive");
  }

  int steps_per_epoch() const { return std::max(1, n_train / batch_size); }
  long total_steps() const { return static_cast<long>(epochs) * steps_per_epoch(); }
};

namespace detail {

struct ConfigField {
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("invalid boolean value: " + s);
}

template <typename T>
T parse_number(const std::string& s) {
  std::istringstream in(s);
  T v{};
  in >> v;
  if (in.fail() || !in.eof()) throw ConfigError("invalid numeric value: " + s);
  return v;
}

inline std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

inline const std::map<std::string, ConfigField>& config_fields() {
  static const std::map<std::string, ConfigField> fields = [] {
    std::map<std::string, ConfigField> m;
    auto add_int = [&m](const std::string& key, int TrainConfig::* member) {
      m[key] = {[member](const TrainConfig& c) { return std::to_string(c.*member); },
                [member](TrainConfig& c, const std::string& s) { c.*member = parse_number<int>(s); }};
    };
    auto add_double = [&m](const std::string& key, double TrainConfig::* member) {
      m[key] = {[member](const TrainConfig& c) { return format_double(c.*member); },
                [member](TrainConfig& c, const std::string& s) { c.*member = parse_number<double>(s); }};
    };
    auto add_bool = [&m](const std::string& key, bool TrainConfig::* member) {
      m[key] = {[member](const TrainConfig& c) { return c.*member ? "true" : "false"; },
                [member](TrainConfig& c, const std::string& s) { c.*member = parse_bool(s); }};
    };
    auto add_string = [&m](const std::string& key, std::string TrainConfig::* member) {
      m[key] = {[member](const TrainConfig& c) { return c.*member; },
                [member](TrainConfig& c, const std::string& s) { c.*member = s; }};
    };
    auto add_u64 = [&m](const std::string& key, std::uint64_t TrainConfig::* member) {
      m[key] = {[member](const TrainConfig& c) { return std::to_string(c.*member); },
                [member](TrainConfig& c, const std::string& s) {
                  c.*member = parse_number<std::uint64_t>(s);
                }};
    };

    add_int("model.d", &TrainConfig::d);
    add_int("model.heads", &TrainConfig::heads);
    add_int("model.enc_layers", &TrainConfig::enc_layers);
    add_int("model.fusion_layers", &TrainConfig::fusion_layers);
    add_int("model.patch", &TrainConfig::patch);
    add_int("model.image_size", &TrainConfig::image_size);
    add_int("model.max_text_len", &TrainConfig::max_text_len);
    add_int("codebook.size", &TrainConfig::codebook_size);
    add_int("codebook.dim", &TrainConfig::code_dim);
    add_double("model.init_std", &TrainConfig::init_std);

    add_int("train.epochs", &TrainConfig::epochs);
    add_int("train.batch_size", &TrainConfig::batch_size);
    add_double("train.init_lr", &TrainConfig::init_lr);
    add_double("train.peak_lr", &TrainConfig::peak_lr);
    add_double("train.min_lr", &TrainConfig::min_lr);
    add_int("train.warmup_iters", &TrainConfig::warmup_iters);
    add_double("train.weight_decay", &TrainConfig::weight_decay);
    add_double("train.adam_beta1", &TrainConfig::adam_beta1);
    add_double("train.adam_beta2", &TrainConfig::adam_beta2);
    add_double("train.adam_eps", &TrainConfig::adam_eps);

    add_double("mask.text_ratio", &TrainConfig::text_mask_ratio);
    add_double("mask.visual_ratio", &TrainConfig::visual_mask_ratio);
    add_double("loss.beta", &TrainConfig::beta);
    add_double("loss.w_itm", &TrainConfig::w_itm);
    add_double("loss.w_mlm", &TrainConfig::w_mlm);
    add_double("loss.w_mim", &TrainConfig::w_mim);
    add_double("loss.w_pixel", &TrainConfig::w_pixel);
    add_double("loss.w_align", &TrainConfig::w_align);
    add_double("loss.w_commit", &TrainConfig::w_commit);
    add_bool("objectives.itm", &TrainConfig::enable_itm);
    add_bool("objectives.mlm", &TrainConfig::enable_mlm);
    add_bool("objectives.mim", &TrainConfig::enable_mim);
    add_bool("objectives.pixel", &TrainConfig::enable_pixel);
    add_bool("infonce.enable", &TrainConfig::infonce_enable);
    add_double("infonce.weight", &TrainConfig::infonce_weight);
    add_double("infonce.tau", &TrainConfig::infonce_tau);

    add_string("quantize.mode", &TrainConfig::quantize_mode);
    add_double("quantize.tau0", &TrainConfig::gumbel_tau0);
    add_double("quantize.tau_end", &TrainConfig::gumbel_tau_end);
    add_bool("quantize.noise", &TrainConfig::gumbel_noise);

    add_bool("deadcode.enable", &TrainConfig::deadcode_enable);
    add_int("deadcode.threshold", &TrainConfig::deadcode_threshold);
    add_double("deadcode.noise", &TrainConfig::deadcode_noise);

    add_string("data.dir", &TrainConfig::data_dir);
    add_int("data.n_train", &TrainConfig::n_train);
    add_int("data.n_eval", &TrainConfig::n_eval);
    add_u64("data.seed", &TrainConfig::data_seed);

    add_u64("run.seed", &TrainConfig::seed);
    add_string("run.out_dir", &TrainConfig::out_dir);
    add_int("run.checkpoint_every", &TrainConfig::checkpoint_every);
    return m;
  }();
  return fields;
}

}  // namespace detail

inline TrainConfig parse_train_config(const std::string& text) {
  TrainConfig cfg;
  const auto& fields = detail::config_fields();
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    auto last = line.find_last_not_of(" \t\r");
    line = line.substr(first, last - first + 1);
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      auto b = s.find_first_not_of(" \t");
      auto e = s.find_last_not_of(" \t");
      s = (b == std::string::npos) ? "" : s.substr(b, e - b + 1);
    };
    trim(key);
    trim(value);
    auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("unknown config key: " + key);
    it->second.set(cfg, value);
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig load_train_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InputError("config: cannot open " + path);
  std::ostringstream buf;
  buf << f.rdbuf();
  return parse_train_config(buf.str());
}

/// Canonical text form (sorted keys); embedded in checkpoints and reports.
inline std::string config_to_text(const TrainConfig& cfg) {
  std::string out;
  for (const auto& [key, field] : detail::config_fields()) {
    out += key;
    out += "=";
    out += field.get(cfg);
    out += "\n";
  }
  return out;
}

}  // namespace cbvila
