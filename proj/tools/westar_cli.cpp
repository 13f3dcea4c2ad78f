// westar: generate data, pretrain, adapt, ablate and evaluate.

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "json.hpp"
#include "westar/config.hpp"
#include "westar/dataset.hpp"
#include "westar/error.hpp"
#include "westar/eval_report.hpp"
#include "westar/train.hpp"

namespace fs = std::filesystem;
using namespace westar;
using nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "0.1.0";

const std::vector<std::string> kCleanSplits{"train", "adapt", "val", "test"};

struct Options {
  std::string config;
  std::string checkpoint;
  std::string out;
  bool force = false;
  bool dry_run = false;
};

std::string file_digest(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::uint64_t h = 1469598103934665603ull;
  char buf[4096];
  while (is.read(buf, sizeof buf) || is.gcount() > 0) {
    for (std::streamsize i = 0; i < is.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
  return out;
}

/// Digest over every file below `dir`, in path order.
std::string tree_digest(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string joined;
  for (const auto& f : files) joined += fs::relative(f, dir).generic_string() + ":" + file_digest(f) + "\n";
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : joined) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char out[17];
  std::snprintf(out, sizeof out, "%016llx", static_cast<unsigned long long>(h));
  return out;
}

ordered_json manifest_head(const std::string& command, const ExperimentConfig& cfg) {
  ordered_json m;
  m["command"] = command;
  m["version"] = kVersion;
  m["seed"] = cfg.seed;
  m["config_hash"] = config_hash(cfg);
  return m;
}

/// Records digests of `files` (relative to `dir`) and writes manifest.json.
void write_manifest(ordered_json m, const fs::path& dir, const std::vector<std::string>& files) {
  ordered_json outputs = ordered_json::object();
  for (const auto& f : files) outputs[f] = fs::is_directory(dir / f) ? tree_digest(dir / f) : file_digest(dir / f);
  m["files"] = outputs;
  std::ofstream os(dir / "manifest.json");
  if (!os) throw Error(ErrorKind::Io, "cannot write " + (dir / "manifest.json").string());
  os << m.dump(2) << "\n";
  std::cout << m.dump(2) << "\n";
}

void prepare_out_dir(const fs::path& dir, bool force) {
  if (fs::exists(dir) && !fs::is_directory(dir)) throw Error(ErrorKind::Io, dir.string() + " is not a directory");
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    if (!force) throw Error(ErrorKind::Data, "output directory " + dir.string() + " is not empty (use --force)");
    fs::remove_all(dir);
  }
  fs::create_directories(dir);
}

Split load_split(const ExperimentConfig& cfg, const std::string& name) {
  const fs::path dir = cfg.data_dir / name;
  if (!fs::is_directory(dir)) throw Error(ErrorKind::Data, "missing split " + dir.string() + " (run gen first)");
  return read_split(dir, name);
}

StudentNet load_base(const Options& opt, const ExperimentConfig& cfg) {
  if (opt.checkpoint.empty()) throw Error(ErrorKind::Config, "--checkpoint is required");
  StudentNet net = load_checkpoint(opt.checkpoint).student;
  const auto& want = cfg.pretrain.shape;
  const auto& got = net.shape;
  if (got.patch != want.patch || got.width != want.width || got.blocks != want.blocks ||
      got.mlp_hidden != want.mlp_hidden || got.decoder_hidden != want.decoder_hidden)
    throw Error(ErrorKind::Config, "checkpoint model shape does not match the config");
  if (lora_parameter_count(net) != 0 && cfg.adapt.tune_scope == TuneScope::Lora)
    throw Error(ErrorKind::Config, "checkpoint already carries LoRA factors; adapt from a base checkpoint");
  return net;
}

ordered_json report_json(const MetricsReport& r) {
  return {{"delta1", r.delta1}, {"absrel", r.absrel}, {"n_pixels", r.n_pixels}, {"n_clamped", r.n_clamped}};
}

// ------------------------------------------------------------- commands

int cmd_gen(const Options& opt, const ExperimentConfig& cfg) {
  const fs::path out = opt.out.empty() ? cfg.data_dir : fs::path(opt.out);
  if (opt.dry_run) return 0;
  prepare_out_dir(out, opt.force);
  ordered_json m = manifest_head("gen", cfg);
  ordered_json counts;
  std::vector<std::string> files;
  const std::vector<std::size_t> sizes{cfg.data.n_train, cfg.data.n_adapt, cfg.data.n_val, cfg.data.n_test};
  for (std::size_t i = 0; i < kCleanSplits.size(); ++i) {
    const std::string& name = kCleanSplits[i];
    const Split clean = make_clean_split(name, sizes[i], cfg.data);
    write_split(clean, out / name);
    const Split corrupted = corrupt_split(clean, name + "_c", cfg.data, true);
    write_split(corrupted, out / (name + "_c"));
    counts[name] = clean.size();
    counts[name + "_c"] = corrupted.size();
    files.push_back(name);
    files.push_back(name + "_c");
  }
  m["splits"] = counts;
  m["severity"] = cfg.data.severity;
  write_manifest(m, out, files);
  return 0;
}

int cmd_pretrain(const Options& opt, const ExperimentConfig& cfg) {
  const fs::path out = opt.out.empty() ? cfg.out_dir / "pretrain" : fs::path(opt.out);
  const Split train = load_split(cfg, "train");
  if (opt.dry_run) return 0;
  fs::create_directories(out);
  std::vector<TrajectoryRow> log;
  const StudentNet net = pretrain_toy(train, cfg.pretrain, [&](const TrajectoryRow& r) {
    log.push_back(r);
    std::fprintf(stderr, "pretrain epoch %zu loss %.5f\n", r.epoch, r.loss_st);
  });
  save_checkpoint({net, clone_to_teacher(net, cfg.adapt.ema_alpha)}, out / "base.wstr");
  write_trajectory(log, out / "pretrain_log.csv");
  std::map<std::string, MetricsReport> reports;
  for (const std::string name : {"val", "test"}) reports[name] = evaluate(net, load_split(cfg, name));
  for (const std::string name : {"val_c", "test_c"}) reports[name] = evaluate(net, load_split(cfg, name));
  emit_report(reports, out / "report.json");
  ordered_json m = manifest_head("pretrain", cfg);
  for (const auto& [k, r] : reports) m["metrics"][k] = report_json(r);
  write_manifest(m, out, {"base.wstr", "pretrain_log.csv", "report.json", "report.csv"});
  return 0;
}

int cmd_adapt(const Options& opt, const ExperimentConfig& cfg) {
  const fs::path out = opt.out.empty() ? cfg.out_dir / "adapt" : fs::path(opt.out);
  const StudentNet base = load_base(opt, cfg);
  if (opt.dry_run) return 0;
  const Split adapt = load_split(cfg, "adapt_c"), val = load_split(cfg, "val_c"), test = load_split(cfg, "test_c");
  fs::create_directories(out);
  const AdaptResult r = run_adaptation(base, adapt, val, cfg.adapt, [](const TrajectoryRow& row) {
    std::fprintf(stderr, "epoch %zu lr %.3g st %.5f weak %.5f reg %.6f val_delta1 %.2f\n", row.epoch, row.lr,
                 row.loss_st, row.loss_weak, row.loss_reg, row.val_delta1);
  });
  save_checkpoint(r.best, out / "adapted.wstr");
  write_trajectory(r.trajectory, out / "trajectory.csv");
  const std::map<std::string, MetricsReport> reports{{"test_c/before", evaluate(base, test)},
                                                     {"test_c/after", evaluate(r.best.student, test)}};
  emit_report(reports, out / "report.json");
  ordered_json m = manifest_head("adapt", cfg);
  m["checkpoint"] = fs::absolute(opt.checkpoint).string();
  m["best_epoch"] = r.best_epoch;
  m["epochs_run"] = r.trajectory.size();
  for (const auto& [k, rep] : reports) m["metrics"][k] = report_json(rep);
  write_manifest(m, out, {"adapted.wstr", "trajectory.csv", "report.json", "report.csv"});
  return 0;
}

struct Variant {
  std::string name;
  AdaptConfig cfg;
  bool adapt = true;
};

std::vector<Variant> ablation_variants(const ExperimentConfig& ec) {
  const AdaptConfig base = ec.adapt;
  const auto with_flags = [&](const std::string& name, bool st, bool ws, bool wr) {
    Variant v{name, base};
    v.cfg.enable_st = st;
    v.cfg.enable_ws = ws;
    v.cfg.enable_wr = wr;
    return v;
  };
  std::vector<Variant> out;
  if (ec.ablate_axis == "component") {
    out.push_back({"baseline", base, false});
    out.push_back(with_flags("ST", true, false, false));
    out.push_back(with_flags("WS", false, true, false));
    out.push_back(with_flags("ST+WS", true, true, false));
    out.push_back(with_flags("ST+WS+WR", true, true, true));
  } else if (ec.ablate_axis == "scope") {
    for (auto [name, scope] : {std::pair{"All Params", TuneScope::All},
                               {"Encoder", TuneScope::Encoder},
                               {"Decoder", TuneScope::Decoder},
                               {"LoRA", TuneScope::Lora}}) {
      Variant v{name, base};
      v.cfg.tune_scope = scope;
      out.push_back(v);
    }
  } else {
    for (auto [name, mode] :
         {std::pair{"Global", NormMode::Global}, {"HDN", NormMode::Hdn}, {"SA-HDN", NormMode::SaHdn}}) {
      Variant v{name, base};
      v.cfg.norm_mode = mode;
      out.push_back(v);
    }
  }
  return out;
}

std::pair<double, double> mean_std(const std::vector<double>& xs) {
  double mean = 0.0, var = 0.0;
  for (double x : xs) mean += x / static_cast<double>(xs.size());
  for (double x : xs) var += (x - mean) * (x - mean);
  const double denom = xs.size() > 1 ? static_cast<double>(xs.size() - 1) : 1.0;
  return {mean, std::sqrt(var / denom)};
}

int cmd_ablate(const Options& opt, const ExperimentConfig& cfg) {
  const fs::path out = opt.out.empty() ? cfg.out_dir / ("ablate_" + cfg.ablate_axis) : fs::path(opt.out);
  const StudentNet base = load_base(opt, cfg);
  const auto variants = ablation_variants(cfg);
  if (opt.dry_run) return 0;
  const Split adapt = load_split(cfg, "adapt_c"), val = load_split(cfg, "val_c"), test = load_split(cfg, "test_c");
  fs::create_directories(out);

  std::ofstream runs(out / "runs.csv");
  runs << "variant,seed,delta1,absrel,best_epoch\n";
  std::ofstream table(out / "ablation.csv");
  table << "variant,delta1_mean,delta1_std,absrel_mean,absrel_std,n_seeds\n";
  ordered_json m = manifest_head("ablate", cfg);
  m["axis"] = cfg.ablate_axis;
  m["checkpoint"] = fs::absolute(opt.checkpoint).string();
  const MetricsReport frozen = evaluate(base, test);
  for (const auto& v : variants) {
    std::vector<double> d1, rel;
    for (std::size_t k = 0; k < cfg.n_seeds; ++k) {
      AdaptConfig c = v.cfg;
      c.seed = cfg.seed + k;
      MetricsReport rep = frozen;
      std::size_t best_epoch = 0;
      if (v.adapt) {
        const AdaptResult r = run_adaptation(base, adapt, val, c);
        rep = evaluate(r.best.student, test);
        best_epoch = r.best_epoch;
      }
      std::fprintf(stderr, "%s seed %llu delta1 %.2f\n", v.name.c_str(), static_cast<unsigned long long>(c.seed),
                   rep.delta1);
      d1.push_back(rep.delta1);
      rel.push_back(rep.absrel);
      char line[256];
      std::snprintf(line, sizeof line, "%s,%llu,%.17g,%.17g,%zu\n", v.name.c_str(),
                    static_cast<unsigned long long>(c.seed), rep.delta1, rep.absrel, best_epoch);
      runs << line;
    }
    const auto [dm, ds] = mean_std(d1);
    const auto [am, as] = mean_std(rel);
    char line[256];
    std::snprintf(line, sizeof line, "%s,%.4f,%.4f,%.4f,%.4f,%zu\n", v.name.c_str(), dm, ds, am, as, d1.size());
    table << line;
    m["rows"][v.name] = {{"delta1_mean", dm}, {"delta1_std", ds}, {"absrel_mean", am}, {"absrel_std", as}};
  }
  runs.close();
  table.close();
  write_manifest(m, out, {"ablation.csv", "runs.csv"});
  return 0;
}

int cmd_eval(const Options& opt, const ExperimentConfig& cfg) {
  const fs::path out = opt.out.empty() ? cfg.out_dir / "eval" : fs::path(opt.out);
  if (opt.checkpoint.empty()) throw Error(ErrorKind::Config, "--checkpoint is required");
  const StudentNet net = load_checkpoint(opt.checkpoint).student;
  if (opt.dry_run) return 0;
  std::map<std::string, MetricsReport> reports;
  for (const auto& name : kCleanSplits) {
    for (const auto& split : {name, name + "_c"})
      if (fs::is_directory(cfg.data_dir / split)) reports[split] = evaluate(net, load_split(cfg, split));
  }
  if (reports.empty()) throw Error(ErrorKind::Data, "no splits found under " + cfg.data_dir.string());
  fs::create_directories(out);
  emit_report(reports, out / "report.json");
  ordered_json m = manifest_head("eval", cfg);
  m["checkpoint"] = fs::absolute(opt.checkpoint).string();
  for (const auto& [k, r] : reports) m["metrics"][k] = report_json(r);
  write_manifest(m, out, {"report.json", "report.csv"});
  return 0;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config: return 2;
    case ErrorKind::Numeric: return 4;
    default: return 3;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weakly supervised self-training for desk-scale depth adaptation"};
  app.require_subcommand(1);
  Options opt;
  std::string seed_text;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "key = value config file");
    sub->add_option("--checkpoint", opt.checkpoint, "model checkpoint (WSTR1)");
    sub->add_option("--out", opt.out, "output directory");
    sub->add_option("--seed", seed_text, "overrides the config seed");
    sub->add_flag("--force", opt.force, "replace a non-empty output directory");
    sub->add_flag("--dry-run", opt.dry_run, "validate inputs and exit");
  };
  std::map<std::string, int (*)(const Options&, const ExperimentConfig&)> commands{
      {"gen", cmd_gen}, {"pretrain", cmd_pretrain}, {"adapt", cmd_adapt}, {"ablate", cmd_ablate}, {"eval", cmd_eval}};
  const std::map<std::string, std::string> help{{"gen", "write clean and corrupted splits"},
                                                {"pretrain", "train the base model on clean scenes"},
                                                {"adapt", "adapt a checkpoint to the corrupted splits"},
                                                {"ablate", "run an ablation table over seeds"},
                                                {"eval", "score a checkpoint on every split"}};
  for (const auto& [name, fn] : commands) add_common(app.add_subcommand(name, help.at(name)));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    ExperimentConfig cfg = opt.config.empty() ? parse_config("", fs::current_path()) : load_config(opt.config);
    apply_env_overrides(cfg);
    if (!seed_text.empty()) {
      std::uint64_t s = 0;
      const auto [end, ec] = std::from_chars(seed_text.data(), seed_text.data() + seed_text.size(), s);
      if (ec != std::errc{} || end != seed_text.data() + seed_text.size())
        throw Error(ErrorKind::Config, "--seed expects a non-negative integer");
      set_seed(cfg, s);
    }
    for (const auto& [name, fn] : commands) {
      if (!app.got_subcommand(name)) continue;
      const int rc = fn(opt, cfg);
      if (opt.dry_run) std::cout << to_text(cfg);
      return rc;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
