// sendvae: command-line driver for the desk-scale Send-VAE lab.
//
//   sendvae gen-data|train-vae|train-flow|eval --config C --out DIR [--seed N] [--resume] [--variant V]
//   sendvae sweep --config SWEEP --out DIR [--seed N] [--variant V]
//   sendvae report --out DIR
//   sendvae plot --out DIR
//
// Exit codes: 0 success, 2 config error, 3 numeric failure, 4 partial sweep.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "sendvae/checkpoint.hpp"
#include "sendvae/orchestrator.hpp"

namespace fs = std::filesystem;
using namespace sendvae;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitPartial = 4;

struct Args {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  bool resume = false;
  bool quiet = false;
};

void apply_thread_cap() {
  const char* env = std::getenv("SENDVAE_NUM_THREADS");
  if (!env || !*env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw ConfigError("SENDVAE_NUM_THREADS must be a positive integer");
  Eigen::setNbThreads(static_cast<int>(n));
}

nlohmann::json load_config(const Args& a) {
  if (a.config.empty()) throw ConfigError("--config is required");
  return read_json(a.config);
}

orch::ExperimentConfig single_config(const Args& a, const nlohmann::json& j) {
  if (orch::is_sweep_config(j)) {
    if (!a.variant) throw ConfigError("--variant is required with a sweep config");
    return orch::experiment_config_from_json(orch::sweep_variant_config(j, *a.variant), a.seed);
  }
  auto cfg = orch::experiment_config_from_json(j, a.seed);
  if (a.variant) cfg.variant = *a.variant;
  return cfg;
}

orch::RunOptions run_options(const Args& a) {
  if (a.out.empty()) throw ConfigError("--out is required");
  orch::RunOptions o;
  o.root = a.out;
  o.run_dir = a.out;
  o.resume = a.resume;
  o.verbose = !a.quiet;
  return o;
}

int run_stage(const Args& a, orch::Stage until) {
  const auto j = load_config(a);
  const auto cfg = single_config(a, j);
  auto o = run_options(a);
  if (orch::is_sweep_config(j)) o.run_dir = o.root / "runs" / cfg.variant;
  o.until = until;
  const auto m = orch::run_experiment(cfg, o);
  std::cout << "manifest: " << (o.run_dir / "manifest.json").string() << "\n";
  if (until == orch::Stage::kEval) std::cout << "metric report: " << (o.run_dir / "metric_report.json").string() << "\n";
  return 0;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p);
  if (!f) throw ConfigError("cannot write " + p.string());
  f << s;
}

int run_report(const Args& a) {
  const auto o = run_options(a);
  const auto r = orch::build_report(orch::find_manifests(o.root), o.root);
  const auto j = orch::to_json(r);
  orch::report_from_json(j);
  write_json(o.root / "report.json", j);
  write_text(o.root / "report.md", orch::report_markdown(r));
  std::cout << orch::report_markdown(r);
  return 0;
}

int run_plot(const Args& a) {
  const auto o = run_options(a);
  const fs::path rp = o.root / "report.json";
  if (!fs::exists(rp)) throw ConfigError("no report.json under " + o.root.string() + "; run `sendvae report` first");
  const auto out = orch::render_plots(orch::report_from_json(read_json(rp)), o.root / "plots");
  for (const auto& p : out.written) std::cout << "wrote " << p.string() << "\n";
  for (const auto& s : out.skipped) std::cerr << "skipped " << s << "\n";
  return 0;
}

int run_sweep(const Args& a) {
  const auto j = load_config(a);
  if (!orch::is_sweep_config(j)) throw ConfigError("sweep needs a config with a \"variants\" list");
  const auto o = run_options(a);
  const auto res = orch::run_sweep(j, o, a.seed, a.variant);
  if (!res.manifests.empty()) {
    run_report(a);
    run_plot(a);
  }
  if (!res.failed.empty()) {
    std::cerr << "partial sweep: " << res.failed.size() << " variant(s) failed\n";
    return kExitPartial;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Send-VAE desk-scale lab"};
  app.require_subcommand(1);
  Args args;
  std::uint64_t seed = 0;
  std::string variant;

  auto common = [&](CLI::App* sub, bool config) {
    if (config) sub->add_option("--config", args.config, "experiment or sweep config (JSON)")->required();
    sub->add_option("--out", args.out, "output directory")->required();
    if (config) {
      sub->add_option("--seed", seed, "override the config seed");
      sub->add_option("--variant", variant, "variant name (sweep configs)");
      sub->add_flag("--resume", args.resume, "continue interrupted training stages from their checkpoints");
    }
    sub->add_flag("-q,--quiet", args.quiet, "suppress progress output");
  };
  struct Cmd {
    const char* name;
    const char* help;
    bool config;
  };
  const Cmd cmds[] = {{"gen-data", "render the train and eval splits", true},
                      {"train-vae", "train the teacher, warm start and VAE variant", true},
                      {"train-flow", "train the latent flow model", true},
                      {"eval", "run the full pipeline and write a MetricReport", true},
                      {"sweep", "run every variant of a sweep config, then report and plot", true},
                      {"report", "collect manifests into report.md and report.json", false},
                      {"plot", "render SVG plots from report.json", false}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& c : cmds) {
    subs[c.name] = app.add_subcommand(c.name, c.help);
    common(subs[c.name], c.config);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    apply_thread_cap();
    for (const auto& [name, sub] : subs)
      if (sub->parsed()) {
        if (sub->count("--seed")) args.seed = seed;
        if (sub->count("--variant")) args.variant = variant;
        if (name == "gen-data") return run_stage(args, orch::Stage::kGenData);
        if (name == "train-vae") return run_stage(args, orch::Stage::kTrainVae);
        if (name == "train-flow") return run_stage(args, orch::Stage::kTrainFlow);
        if (name == "eval") return run_stage(args, orch::Stage::kEval);
        if (name == "sweep") return run_sweep(args);
        if (name == "report") return run_report(args);
        if (name == "plot") return run_plot(args);
      }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const FormatError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const TrainingError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
