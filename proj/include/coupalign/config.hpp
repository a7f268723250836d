#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "coupalign/errors.hpp"

namespace coupalign {

enum class WpaMode { bi, uni, off };
enum class RhoOrder { relu_bn, bn_relu };

inline std::string to_string(WpaMode m) {
  switch (m) {
    case WpaMode::bi: return "bi";
    case WpaMode::uni: return "uni";
    case WpaMode::off: return "off";
  }
  return "?";
}

struct ModelConfig {
  std::size_t image_size = 64;
  std::size_t c1 = 16;       // stage-1 channels; doubles per stage
  std::size_t d_lang = 32;   // language hidden size D
  std::size_t d_joint = 32;  // WPA joint embedding size d
  std::size_t d_q = 32;
  std::size_t d_s = 16;
  std::size_t n_queries = 16;
  std::size_t t_max = 16;
  std::size_t vocab_size = 32;
  std::size_t heads = 2;
  std::size_t fusion_heads = 2;
  std::size_t decoder_layers = 2;
  std::size_t decoder_heads = 2;
  WpaMode wpa_mode = WpaMode::bi;
  std::array<bool, 4> wpa_stages{true, true, true, true};
  bool sma_enabled = true;
  RhoOrder rho_order = RhoOrder::relu_bn;

  std::size_t channels(std::size_t stage) const { return c1 << (stage - 1); }  // stage in 1..4
  std::size_t grid(std::size_t stage) const { return image_size / (std::size_t{4} << (stage - 1)); }
  bool wpa_active(std::size_t stage) const { return wpa_mode != WpaMode::off && wpa_stages[stage - 1]; }

  void validate() const {
    if (image_size == 0 || image_size % 32 != 0) {
      throw ConfigError("model.image_size must be a positive multiple of 32, got " + std::to_string(image_size));
    }
    if (n_queries < 1) throw ConfigError("model.n_queries must be >= 1");
    if (t_max < 1) throw ConfigError("model.t_max must be >= 1");
    for (std::size_t d : {c1, d_lang, d_joint, d_q, d_s, heads, fusion_heads, decoder_heads}) {
      if (d == 0) throw ConfigError("model dimensions and head counts must be positive");
    }
  }
};

struct OptimConfig {
  double lr0 = 3e-5;
  double lr_end = 1.5e-5;
  double max_decay_epoch = 25;
  double power = 0.9;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct LossConfig {
  double lambda = 0.1;
  double tau = 0.07;
  bool aux_enabled = true;
  bool aux_normalize = true;
};

struct DataConfig {
  std::uint64_t seed = 1234;
  std::size_t n_train = 500;
  std::size_t n_val = 100;
  std::size_t n_test = 100;
  std::string dir;  // empty: generate in memory from `seed`
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  OptimConfig optim;
  LossConfig loss;
  DataConfig data;
  std::size_t epochs = 30;
  std::size_t batch_size = 16;

  /// Sets one dotted key from its textual value.
  void set(const std::string& key, const std::string& value);
  /// `key = value` lines in a fixed order; parses back to an equal config.
  std::string resolved() const;
  std::uint64_t hash() const;
  void validate() const;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

template <class U>
U parse_number(const std::string& key, const std::string& text) {
  U v{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  auto [p, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || p != last) throw ConfigError("invalid value '" + text + "' for " + key);
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "on") return true;
  if (text == "false" || text == "0" || text == "off") return false;
  throw ConfigError("invalid boolean '" + text + "' for " + key);
}

struct Field {
  const char* key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define COUPALIGN_SIZE_FIELD(KEY, EXPR)                                                        \
  Field {                                                                                      \
    KEY, [](RunConfig& c, const std::string& v) { c.EXPR = parse_number<std::size_t>(KEY, v); }, \
        [](const RunConfig& c) { return std::to_string(c.EXPR); }                              \
  }
#define COUPALIGN_DOUBLE_FIELD(KEY, EXPR)                                                 \
  Field {                                                                                 \
    KEY, [](RunConfig& c, const std::string& v) { c.EXPR = parse_number<double>(KEY, v); }, \
        [](const RunConfig& c) { return fmt_double(c.EXPR); }                             \
  }
#define COUPALIGN_BOOL_FIELD(KEY, EXPR)                                           \
  Field {                                                                         \
    KEY, [](RunConfig& c, const std::string& v) { c.EXPR = parse_bool(KEY, v); }, \
        [](const RunConfig& c) { return std::string(c.EXPR ? "true" : "false"); } \
  }

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      Field{"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_number<std::uint64_t>("seed", v); },
            [](const RunConfig& c) { return std::to_string(c.seed); }},
      Field{"data.seed",
            [](RunConfig& c, const std::string& v) { c.data.seed = parse_number<std::uint64_t>("data.seed", v); },
            [](const RunConfig& c) { return std::to_string(c.data.seed); }},
      COUPALIGN_SIZE_FIELD("data.n_train", data.n_train),
      COUPALIGN_SIZE_FIELD("data.n_val", data.n_val),
      COUPALIGN_SIZE_FIELD("data.n_test", data.n_test),
      Field{"data.dir", [](RunConfig& c, const std::string& v) { c.data.dir = v; },
            [](const RunConfig& c) { return c.data.dir; }},
      COUPALIGN_SIZE_FIELD("model.image_size", model.image_size),
      COUPALIGN_SIZE_FIELD("model.c1", model.c1),
      COUPALIGN_SIZE_FIELD("model.d_lang", model.d_lang),
      COUPALIGN_SIZE_FIELD("model.d_joint", model.d_joint),
      COUPALIGN_SIZE_FIELD("model.d_q", model.d_q),
      COUPALIGN_SIZE_FIELD("model.d_s", model.d_s),
      COUPALIGN_SIZE_FIELD("model.n_queries", model.n_queries),
      COUPALIGN_SIZE_FIELD("model.t_max", model.t_max),
      COUPALIGN_SIZE_FIELD("model.heads", model.heads),
      COUPALIGN_SIZE_FIELD("fusion.heads", model.fusion_heads),
      COUPALIGN_SIZE_FIELD("decoder.layers", model.decoder_layers),
      COUPALIGN_SIZE_FIELD("decoder.heads", model.decoder_heads),
      Field{"seg.order",
            [](RunConfig& c, const std::string& v) {
              if (v == "relu_bn") c.model.rho_order = RhoOrder::relu_bn;
              else if (v == "bn_relu") c.model.rho_order = RhoOrder::bn_relu;
              else throw ConfigError("seg.order must be relu_bn or bn_relu, got '" + v + "'");
            },
            [](const RunConfig& c) {
              return std::string(c.model.rho_order == RhoOrder::relu_bn ? "relu_bn" : "bn_relu");
            }},
      Field{"wpa.mode",
            [](RunConfig& c, const std::string& v) {
              if (v == "bi") c.model.wpa_mode = WpaMode::bi;
              else if (v == "uni") c.model.wpa_mode = WpaMode::uni;
              else if (v == "off") c.model.wpa_mode = WpaMode::off;
              else throw ConfigError("wpa.mode must be bi, uni or off, got '" + v + "'");
            },
            [](const RunConfig& c) { return to_string(c.model.wpa_mode); }},
      Field{"wpa.stages",
            [](RunConfig& c, const std::string& v) {
              std::array<bool, 4> on{false, false, false, false};
              std::stringstream ss(v);
              std::string item;
              while (std::getline(ss, item, ',')) {
                item = trim(item);
                if (item.empty() || item == "none") continue;
                const auto s = parse_number<std::size_t>("wpa.stages", item);
                if (s < 1 || s > 4) throw ConfigError("wpa.stages entries must be in 1..4, got " + item);
                on[s - 1] = true;
              }
              c.model.wpa_stages = on;
            },
            [](const RunConfig& c) {
              std::string out;
              for (std::size_t i = 0; i < 4; ++i) {
                if (!c.model.wpa_stages[i]) continue;
                if (!out.empty()) out += ',';
                out += std::to_string(i + 1);
              }
              return out.empty() ? std::string("none") : out;
            }},
      COUPALIGN_BOOL_FIELD("sma.enabled", model.sma_enabled),
      COUPALIGN_BOOL_FIELD("aux.enabled", loss.aux_enabled),
      COUPALIGN_BOOL_FIELD("aux.normalize", loss.aux_normalize),
      COUPALIGN_DOUBLE_FIELD("loss.lambda", loss.lambda),
      COUPALIGN_DOUBLE_FIELD("loss.tau", loss.tau),
      COUPALIGN_DOUBLE_FIELD("optim.lr0", optim.lr0),
      COUPALIGN_DOUBLE_FIELD("optim.lr_end", optim.lr_end),
      COUPALIGN_DOUBLE_FIELD("optim.max_decay_epoch", optim.max_decay_epoch),
      COUPALIGN_DOUBLE_FIELD("optim.power", optim.power),
      COUPALIGN_DOUBLE_FIELD("optim.weight_decay", optim.weight_decay),
      COUPALIGN_DOUBLE_FIELD("optim.beta1", optim.beta1),
      COUPALIGN_DOUBLE_FIELD("optim.beta2", optim.beta2),
      COUPALIGN_DOUBLE_FIELD("optim.eps", optim.eps),
      COUPALIGN_SIZE_FIELD("train.epochs", epochs),
      COUPALIGN_SIZE_FIELD("train.batch_size", batch_size),
  };
  return table;
}

#undef COUPALIGN_SIZE_FIELD
#undef COUPALIGN_DOUBLE_FIELD
#undef COUPALIGN_BOOL_FIELD

}  // namespace detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
  for (const auto& f : detail::fields()) {
    if (key == f.key) {
      f.set(*this, detail::trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline std::string RunConfig::resolved() const {
  std::string out;
  for (const auto& f : detail::fields()) out += std::string(f.key) + " = " + f.get(*this) + "\n";
  return out;
}

inline std::uint64_t RunConfig::hash() const {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : resolved()) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline void RunConfig::validate() const {
  model.validate();
  if (optim.lr0 < 0 || optim.lr_end < 0) throw ConfigError("learning rates must be non-negative");
  if (optim.lr_end > optim.lr0) throw ConfigError("optim.lr_end must not exceed optim.lr0");
  if (optim.power <= 0) throw ConfigError("optim.power must be positive");
  if (optim.max_decay_epoch <= 0) throw ConfigError("optim.max_decay_epoch must be positive");
  if (optim.weight_decay < 0) throw ConfigError("optim.weight_decay must be non-negative");
  if (loss.lambda < 0) throw ConfigError("loss.lambda must be non-negative");
  if (loss.tau <= 0) throw ConfigError("loss.tau must be positive");
  if (batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (data.n_train == 0 || data.n_val == 0) throw ConfigError("data.n_train and data.n_val must be positive");
}

/// Applies `key = value` lines ('#' starts a comment) on top of `cfg`.
inline void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    cfg.set(detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
}

inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  apply_config_text(cfg, ss.str());
}

}  // namespace coupalign
