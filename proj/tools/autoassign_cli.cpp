// Command-line front end: gradcheck, gen-data, train, eval, compare,
// dump-weights and sweep, each driven by one config file.

#include "autoassign/experiment.hpp"
#include "autoassign/gradsuite.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace autoassign;

namespace {

constexpr int kOk = 0;
constexpr int kCheckFailed = 1;
constexpr int kUsage = 2;

struct Options {
  std::string config;
  std::string out = "autoassign_out";
  std::optional<std::uint64_t> seed;
  std::vector<std::string> strategies;
  std::optional<int> scene;
  std::string checkpoint;
  std::string param;
  std::vector<std::string> values;
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// Loads the config, applies command-line overrides and records both the
// verbatim file and the effective settings in the output directory.
RunConfig prepare(const Options& opt, const std::string& variant = "") {
  const std::string text = read_file(opt.config);
  RunConfig cfg;
  try {
    cfg = parse_run_config(text);
  } catch (const ConfigError& e) {
    throw UsageError(opt.config + ": " + e.what());
  }
  if (opt.seed) cfg.seed = *opt.seed;
  if (!variant.empty()) {
    try {
      cfg = apply_variant(cfg, variant);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  fs::create_directories(opt.out);
  write_file(fs::path(opt.out) / "config.cfg", text);
  write_file(fs::path(opt.out) / "resolved.cfg", serialize_run_config(cfg));
  return cfg;
}

nlohmann::ordered_json log_record(const TrainLogRecord& r, int num_rows) {
  nlohmann::ordered_json j;
  j["iteration"] = r.iteration;
  j["learning_rate"] = r.learning_rate;
  j["total"] = r.total;
  j["positive"] = r.positive;
  j["negative"] = r.negative;
  j["objectness"] = r.objectness;
  j["objects"] = r.objects;
  j["dropped"] = r.dropped;
  j["grad_norm"] = r.grad_norm;
  nlohmann::ordered_json mu = nlohmann::ordered_json::array();
  nlohmann::ordered_json sigma = nlohmann::ordered_json::array();
  for (int k = 0; k < num_rows; ++k) {
    mu.push_back({r.mu(2 * k), r.mu(2 * k + 1)});
    sigma.push_back({r.sigma(2 * k), r.sigma(2 * k + 1)});
  }
  j["mu"] = mu;
  j["sigma"] = sigma;
  return j;
}

// Trains into `dir`: line-delimited log, checkpoint and probe-scene weights.
ExperimentResult train_into(const RunConfig& cfg, const Datasets& data, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream log(dir / "train_log.jsonl", std::ios::binary);
  if (!log) throw std::runtime_error("cannot write " + (dir / "train_log.jsonl").string());
  const auto logger = [&](const TrainLogRecord& r) {
    log << log_record(r, static_cast<int>(r.mu.size() / 2)).dump() << '\n';
    log.flush();
  };
  ExperimentResult r = run_experiment(cfg, data, logger);
  save_checkpoint(dir.string(), checkpoint_parameters(r.model, r.prior));
  export_scene_weights(cfg, r.model, r.prior, data.test[static_cast<std::size_t>(cfg.probe_scene)],
                       (dir / "probe_weights").string());
  return r;
}

std::string eval_csv(const EvalResult& e) {
  std::string out = "category,ground_truths,detections,ap50\n";
  for (const CategoryEval& c : e.categories) {
    out += std::to_string(c.category) + "," + std::to_string(c.ground_truths) + "," +
           std::to_string(c.detections) + "," + (std::isnan(c.ap) ? std::string("excluded") : fmt("%.6f", c.ap)) +
           "\n";
  }
  out += "mean," + std::to_string(e.ground_truths) + "," + std::to_string(e.detections) + "," +
         fmt("%.6f", e.ap50) + "\n";
  return out;
}

struct Loaded {
  DetectorModel model;
  CenterPrior prior;
};

Loaded load_trained(const RunConfig& cfg, const Options& opt) {
  Loaded l{DetectorModel(cfg.resolved_model()),
           CenterPrior(cfg.scene.num_categories(), cfg.prior_mode, cfg.prior_mu_init, cfg.prior_sigma_init)};
  const std::string dir = opt.checkpoint.empty() ? opt.out : opt.checkpoint;
  load_checkpoint(dir, checkpoint_parameters(l.model, l.prior));
  return l;
}

int cmd_gradcheck(const Options& opt) {
  const RunConfig cfg = prepare(opt);
  const std::vector<GradCase> cases = run_grad_suites(cfg.gradcheck);
  std::string report;
  for (const GradSuiteSummary& s : summarize(cases)) {
    report += "suite " + s.suite + " cases " + std::to_string(s.cases) + " failed " + std::to_string(s.failed) +
              " max_rel_error " + fmt("%.3e", s.max_rel_error) + " worst " + s.worst_case + " seed " +
              std::to_string(s.worst_seed) + " input " + std::to_string(s.worst.input) + " index " +
              std::to_string(s.worst.index) + " analytic " + fmt("%.9e", s.worst.analytic) + " numeric " +
              fmt("%.9e", s.worst.numeric) + "\n";
  }
  bool ok = true;
  for (const GradCase& c : cases) {
    if (c.passed()) continue;
    ok = false;
    report += "FAIL " + c.suite + " " + c.name + " seed " + std::to_string(c.seed) + " max_rel_error " +
              fmt("%.3e", c.report.max_rel_error) + "\n";
  }
  if (cfg.gradcheck.fault_op) report += "sign fault injected into op " + std::string(op_name(*cfg.gradcheck.fault_op)) + "\n";
  report += ok ? "PASS\n" : "FAIL\n";
  write_file(fs::path(opt.out) / "gradcheck_report.txt", report);
  std::cout << report;
  return ok ? kOk : kCheckFailed;
}

int cmd_gen_data(const Options& opt) {
  const RunConfig cfg = prepare(opt);
  const Datasets data = make_datasets(cfg);
  write_dataset((fs::path(opt.out) / "train").string(), data.train);
  write_dataset((fs::path(opt.out) / "test").string(), data.test);
  int dropped = 0;
  for (const SyntheticScene& s : data.train) dropped += s.dropped;
  for (const SyntheticScene& s : data.test) dropped += s.dropped;
  std::cout << "wrote " << data.train.size() << " train and " << data.test.size() << " test scenes to " << opt.out
            << " (" << dropped << " objects dropped)\n";
  return kOk;
}

int cmd_train(const Options& opt) {
  if (opt.strategies.size() > 1) throw UsageError("train takes at most one --strategy");
  const RunConfig cfg = prepare(opt, opt.strategies.empty() ? "" : opt.strategies[0]);
  const Datasets data = make_datasets(cfg);
  const ExperimentResult r = train_into(cfg, data, opt.out);
  std::cout << "trained " << r.log.size() << " iterations\n";
  if (r.log.empty()) return kOk;
  const TrainLogRecord& last = r.log.back();
  std::cout << "final loss " << fmt("%.6f", last.total) << "\n";
  for (int k = 0; k < static_cast<int>(last.mu.size() / 2); ++k) {
    std::cout << "prior row " << k << " mu (" << fmt("%.4f", last.mu(2 * k)) << ", " << fmt("%.4f", last.mu(2 * k + 1))
              << ") sigma (" << fmt("%.4f", last.sigma(2 * k)) << ", " << fmt("%.4f", last.sigma(2 * k + 1)) << ")\n";
  }
  std::cout << "test AP50 " << fmt("%.4f", r.eval.ap50) << "\n";
  return kOk;
}

int cmd_eval(const Options& opt) {
  const RunConfig cfg = prepare(opt);
  const Loaded l = load_trained(cfg, opt);
  const Datasets data = make_datasets(cfg);
  const std::string csv = eval_csv(evaluate(cfg, l.model, data.test));
  write_file(fs::path(opt.out) / "eval.csv", csv);
  std::cout << csv;
  return kOk;
}

int cmd_compare(const Options& opt) {
  if (opt.strategies.empty()) throw UsageError("compare needs at least one --strategy");
  for (const std::string& s : opt.strategies) {
    try {
      apply_variant(RunConfig{}, s);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  const RunConfig base = prepare(opt);
  const Datasets data = make_datasets(base);
  std::string csv = "strategy,ap50";
  for (int k = 0; k < base.scene.num_categories(); ++k) csv += ",ap50_cat" + std::to_string(k);
  csv += "\n";
  for (const std::string& s : opt.strategies) {
    const RunConfig cfg = apply_variant(base, s);
    const fs::path dir = fs::path(opt.out) / s;
    fs::create_directories(dir);
    fs::copy_file(fs::path(opt.out) / "config.cfg", dir / "config.cfg", fs::copy_options::overwrite_existing);
    write_file(dir / "resolved.cfg", serialize_run_config(cfg));
    const ExperimentResult r = train_into(cfg, data, dir);
    csv += s + "," + fmt("%.6f", r.eval.ap50);
    for (const CategoryEval& c : r.eval.categories) csv += "," + (std::isnan(c.ap) ? std::string("excluded") : fmt("%.6f", c.ap));
    csv += "\n";
  }
  write_file(fs::path(opt.out) / "compare.csv", csv);
  std::cout << csv;
  return kOk;
}

int cmd_sweep(const Options& opt) {
  if (opt.strategies.size() > 1) throw UsageError("sweep takes at most one --strategy");
  const RunConfig base = prepare(opt, opt.strategies.empty() ? "" : opt.strategies[0]);
  std::vector<RunConfig> configs;
  for (const std::string& v : opt.values) {
    try {
      configs.push_back(override_run_config(base, opt.param, v));
    } catch (const ConfigError& e) {
      throw UsageError(std::string("--param ") + opt.param + " = " + v + ": " + e.what());
    }
  }
  const Datasets data = make_datasets(base);
  std::string csv = "value,ap50";
  for (int k = 0; k < base.scene.num_categories(); ++k) csv += ",ap50_cat" + std::to_string(k);
  csv += "\n";
  for (std::size_t i = 0; i < configs.size(); ++i) {
    const fs::path dir = fs::path(opt.out) / (opt.param + "=" + opt.values[i]);
    fs::create_directories(dir);
    fs::copy_file(fs::path(opt.out) / "config.cfg", dir / "config.cfg", fs::copy_options::overwrite_existing);
    write_file(dir / "resolved.cfg", serialize_run_config(configs[i]));
    const ExperimentResult r = train_into(configs[i], data, dir);
    csv += opt.values[i] + "," + fmt("%.6f", r.eval.ap50);
    for (const CategoryEval& c : r.eval.categories) csv += "," + (std::isnan(c.ap) ? std::string("excluded") : fmt("%.6f", c.ap));
    csv += "\n";
  }
  write_file(fs::path(opt.out) / "sweep.csv", csv);
  std::cout << csv;
  return kOk;
}

int cmd_dump_weights(const Options& opt) {
  const RunConfig cfg = prepare(opt);
  const int id = opt.scene.value_or(cfg.dump_scene);
  if (id < 0 || id >= cfg.test_scenes) {
    throw UsageError("scene " + std::to_string(id) + " not found (test set has scenes 0.." +
                     std::to_string(cfg.test_scenes - 1) + ")");
  }
  Loaded l = load_trained(cfg, opt);
  const Datasets data = make_datasets(cfg);
  const fs::path dir = fs::path(opt.out) / "weights" / ("scene_" + std::to_string(id));
  fs::remove_all(dir);
  const auto files = export_scene_weights(cfg, l.model, l.prior, data.test[static_cast<std::size_t>(id)], dir.string());
  std::cout << "wrote " << files.size() << " files to " << dir.string() << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learned label assignment for dense detectors on synthetic scenes"};
  app.require_subcommand(1);
  Options opt;
  const auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "Run configuration file")->required();
    sub->add_option("--out", opt.out, "Output directory");
    sub->add_option("--seed", opt.seed, "Override run.seed");
  };
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suites");
  CLI::App* gen_data = app.add_subcommand("gen-data", "Write the train and test scenes");
  CLI::App* train_cmd = app.add_subcommand("train", "Train and write checkpoint, log and probe weights");
  CLI::App* eval_cmd = app.add_subcommand("eval", "AP50 of a checkpoint on the test scenes");
  CLI::App* compare = app.add_subcommand("compare", "Train and evaluate several strategies");
  CLI::App* dump = app.add_subcommand("dump-weights", "Export weight maps of one test scene");
  CLI::App* sweep = app.add_subcommand("sweep", "Train and evaluate once per value of one config key");
  for (CLI::App* sub : {gradcheck, gen_data, train_cmd, eval_cmd, compare, dump, sweep}) common(sub);
  sweep->add_option("--param", opt.param, "Config key to vary, e.g. assign.tau")->required();
  sweep->add_option("--values", opt.values, "Comma-separated values")->required()->delimiter(',');
  for (CLI::App* sub : {train_cmd, compare, sweep}) sub->add_option("--strategy", opt.strategies, "Experiment variant");
  for (CLI::App* sub : {eval_cmd, dump}) {
    sub->add_option("--checkpoint", opt.checkpoint, "Directory holding the checkpoint (default: --out)");
  }
  dump->add_option("--scene", opt.scene, "Test scene id (default: dump.scene)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*gradcheck) return cmd_gradcheck(opt);
    if (*gen_data) return cmd_gen_data(opt);
    if (*train_cmd) return cmd_train(opt);
    if (*eval_cmd) return cmd_eval(opt);
    if (*compare) return cmd_compare(opt);
    if (*dump) return cmd_dump_weights(opt);
    if (*sweep) return cmd_sweep(opt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const TrainingAborted& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return kCheckFailed;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kCheckFailed;
  }
  return kUsage;
}
