#include "westar/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "westar/error.hpp"

namespace westar {
namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const std::string& expected) {
  throw Error(ErrorKind::Config, "config key '" + key + "': cannot read '" + value + "' as " + expected);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || end != v.data() + v.size()) bad_value(key, v, "a non-negative integer");
  return out;
}

std::size_t to_size(const std::string& key, const std::string& v) { return static_cast<std::size_t>(to_u64(key, v)); }

double to_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out)) bad_value(key, v, "a finite number");
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true/false");
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string fmt(bool b) { return b ? "true" : "false"; }

std::string hdn_scheme_name(HdnScheme s) { return s == HdnScheme::Grid ? "grid" : "depth_bins"; }

struct Key {
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define WESTAR_SIZE(name, field)                                                                          \
  {name,                                                                                                  \
   {[](ExperimentConfig& c, const std::string& k, const std::string& v) { c.field = to_size(k, v); },    \
    [](const ExperimentConfig& c) { return std::to_string(c.field); }}}
#define WESTAR_DOUBLE(name, field)                                                                        \
  {name,                                                                                                  \
   {[](ExperimentConfig& c, const std::string& k, const std::string& v) { c.field = to_double(k, v); },  \
    [](const ExperimentConfig& c) { return fmt(c.field); }}}
#define WESTAR_BOOL(name, field)                                                                          \
  {name,                                                                                                  \
   {[](ExperimentConfig& c, const std::string& k, const std::string& v) { c.field = to_bool(k, v); },    \
    [](const ExperimentConfig& c) { return fmt(c.field); }}}

const std::map<std::string, Key>& keys() {
  static const std::map<std::string, Key> table = {
      WESTAR_SIZE("height", data.height),
      WESTAR_SIZE("width", data.width),
      WESTAR_SIZE("n_train", data.n_train),
      WESTAR_SIZE("n_adapt", data.n_adapt),
      WESTAR_SIZE("n_val", data.n_val),
      WESTAR_SIZE("n_test", data.n_test),
      WESTAR_SIZE("min_objects", data.min_objects),
      WESTAR_SIZE("max_objects", data.max_objects),
      {"severity",
       {[](ExperimentConfig& c, const std::string& k, const std::string& v) {
          const auto s = to_size(k, v);
          if (s > 5) bad_value(k, v, "a severity in 0..5");
          c.data.severity = static_cast<int>(s);
        },
        [](const ExperimentConfig& c) { return std::to_string(c.data.severity); }}},
      WESTAR_SIZE("pair_iters", data.pairs.k_iters),
      WESTAR_DOUBLE("pair_equal_ratio", data.pairs.equal_ratio),
      WESTAR_BOOL("pair_allow_equal", data.pairs.allow_equal),

      WESTAR_SIZE("patch", pretrain.shape.patch),
      WESTAR_SIZE("model_width", pretrain.shape.width),
      WESTAR_SIZE("blocks", pretrain.shape.blocks),
      WESTAR_SIZE("mlp_hidden", pretrain.shape.mlp_hidden),
      WESTAR_SIZE("decoder_hidden", pretrain.shape.decoder_hidden),
      WESTAR_SIZE("pretrain_epochs", pretrain.epochs),
      WESTAR_SIZE("pretrain_batch_size", pretrain.batch_size),
      WESTAR_DOUBLE("pretrain_lr", pretrain.lr),
      WESTAR_DOUBLE("pretrain_weight_decay", pretrain.weight_decay),

      WESTAR_SIZE("batch_size", adapt.batch_size),
      WESTAR_DOUBLE("base_lr", adapt.base_lr),
      WESTAR_SIZE("epochs_max", adapt.epochs_max),
      WESTAR_SIZE("patience", adapt.patience),
      WESTAR_DOUBLE("ema_alpha", adapt.ema_alpha),
      WESTAR_BOOL("ema_per_step", adapt.ema_per_step),
      WESTAR_SIZE("lora_rank", adapt.lora_rank),
      WESTAR_DOUBLE("lora_alpha", adapt.lora_alpha),
      WESTAR_DOUBLE("weight_decay", adapt.weight_decay),
      WESTAR_DOUBLE("beta1", adapt.beta1),
      WESTAR_DOUBLE("beta2", adapt.beta2),
      WESTAR_DOUBLE("adam_eps", adapt.adam_eps),
      WESTAR_DOUBLE("lambda_st", adapt.weights.lambda_st),
      WESTAR_DOUBLE("lambda_w", adapt.weights.lambda_w),
      WESTAR_DOUBLE("lambda_r", adapt.weights.lambda_r),
      WESTAR_DOUBLE("margin_delta", adapt.weights.margin_delta),
      WESTAR_DOUBLE("reg_alpha", adapt.weights.reg_alpha),
      WESTAR_DOUBLE("epsilon", adapt.epsilon),
      {"norm_mode",
       {[](ExperimentConfig& c, const std::string&, const std::string& v) { c.adapt.norm_mode = parse_norm_mode(v); },
        [](const ExperimentConfig& c) { return to_string(c.adapt.norm_mode); }}},
      {"hdn_levels",
       {[](ExperimentConfig& c, const std::string& k, const std::string& v) {
          std::vector<std::size_t> levels;
          std::stringstream ss(v);
          for (std::string item; std::getline(ss, item, ',');) levels.push_back(to_size(k, trim(item)));
          if (levels.empty() || levels.front() != 1) bad_value(k, v, "a list starting with 1");
          c.adapt.hdn_levels = levels;
        },
        [](const ExperimentConfig& c) {
          std::string out;
          for (auto l : c.adapt.hdn_levels) out += (out.empty() ? "" : ",") + std::to_string(l);
          return out;
        }}},
      {"hdn_scheme",
       {[](ExperimentConfig& c, const std::string& k, const std::string& v) {
          if (v == "depth_bins") c.adapt.hdn_scheme = HdnScheme::DepthBins;
          else if (v == "grid") c.adapt.hdn_scheme = HdnScheme::Grid;
          else bad_value(k, v, "depth_bins or grid");
        },
        [](const ExperimentConfig& c) { return hdn_scheme_name(c.adapt.hdn_scheme); }}},
      WESTAR_SIZE("min_instance", adapt.min_instance),
      WESTAR_BOOL("detach_student_stats", adapt.detach_student_stats),
      WESTAR_BOOL("enable_st", adapt.enable_st),
      WESTAR_BOOL("enable_ws", adapt.enable_ws),
      WESTAR_BOOL("enable_wr", adapt.enable_wr),
      {"tune_scope",
       {[](ExperimentConfig& c, const std::string&, const std::string& v) { c.adapt.tune_scope = parse_tune_scope(v); },
        [](const ExperimentConfig& c) { return to_string(c.adapt.tune_scope); }}},
      WESTAR_SIZE("crop", adapt.crop),

      {"seed",
       {[](ExperimentConfig& c, const std::string& k, const std::string& v) { set_seed(c, to_u64(k, v)); },
        [](const ExperimentConfig& c) { return std::to_string(c.seed); }}},
      WESTAR_SIZE("n_seeds", n_seeds),
      {"ablate_axis",
       {[](ExperimentConfig& c, const std::string& k, const std::string& v) {
          if (v != "component" && v != "scope" && v != "norm") bad_value(k, v, "component, scope or norm");
          c.ablate_axis = v;
        },
        [](const ExperimentConfig& c) { return c.ablate_axis; }}},
      {"data_dir",
       {[](ExperimentConfig& c, const std::string&, const std::string& v) { c.data_dir = v; },
        [](const ExperimentConfig& c) { return c.data_dir.string(); }}},
      {"out_dir",
       {[](ExperimentConfig& c, const std::string&, const std::string& v) { c.out_dir = v; },
        [](const ExperimentConfig& c) { return c.out_dir.string(); }}},
  };
  return table;
}

#undef WESTAR_SIZE
#undef WESTAR_DOUBLE
#undef WESTAR_BOOL

}  // namespace

void set_seed(ExperimentConfig& cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.data.seed = seed;
  cfg.pretrain.seed = seed;
  cfg.adapt.seed = seed;
}

ExperimentConfig parse_config(const std::string& text, const std::filesystem::path& base_dir) {
  ExperimentConfig cfg;
  std::set<std::string> seen;
  std::istringstream is(text);
  std::size_t line_no = 0;
  for (std::string line; std::getline(is, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw Error(ErrorKind::Config, "config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    const auto it = keys().find(key);
    if (it == keys().end()) throw Error(ErrorKind::Config, "unknown config key '" + key + "'");
    if (!seen.insert(key).second) throw Error(ErrorKind::Config, "config key '" + key + "' given twice");
    try {
      it->second.set(cfg, key, value);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::Config) throw;
      throw Error(ErrorKind::Config, "config key '" + key + "': " + e.what());
    }
  }
  if (cfg.data.min_objects > cfg.data.max_objects) throw Error(ErrorKind::Config, "min_objects exceeds max_objects");
  if (cfg.n_seeds == 0) throw Error(ErrorKind::Config, "n_seeds must be positive");
  if (!base_dir.empty()) {
    if (cfg.data_dir.is_relative()) cfg.data_dir = base_dir / cfg.data_dir;
    if (cfg.out_dir.is_relative()) cfg.out_dir = base_dir / cfg.out_dir;
  }
  cfg.data_dir = std::filesystem::absolute(cfg.data_dir).lexically_normal();
  cfg.out_dir = std::filesystem::absolute(cfg.out_dir).lexically_normal();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorKind::Config, "cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str(), std::filesystem::absolute(path).parent_path());
}

void apply_env_overrides(ExperimentConfig& cfg) {
  if (const char* s = std::getenv("WESTAR_SEED")) set_seed(cfg, to_u64("WESTAR_SEED", s));
}

std::string to_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [key, k] : keys()) out += key + " = " + k.get(cfg) + "\n";
  return out;
}

std::string config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : to_text(cfg)) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace westar
