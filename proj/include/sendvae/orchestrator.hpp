#pragma once

// Experiment plumbing: one JSON config drives gen-data -> train-vae ->
// train-flow -> eval. Each stage writes into a content-addressed directory
// under <root>/stages and is skipped when its input hash is unchanged and its
// recorded outputs still verify.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sendvae/align.hpp"
#include "sendvae/flow.hpp"
#include "sendvae/metrics.hpp"
#include "sendvae/synthdata.hpp"
#include "sendvae/teacher.hpp"
#include "sendvae/vae.hpp"

namespace sendvae::orch {

inline constexpr int kConfigSchemaVersion = 1;
inline constexpr const char* kCodeVersion = "sendvae-0.1.0";

struct DataSpec {
  synth::DatasetConfig dataset;
  Index train_count = 4096;
  Index eval_count = 1024;
};

struct TeacherSpec {
  teacher::TeacherKind kind = teacher::TeacherKind::kAnalytic;
  teacher::PatchGrid grid;
  int dim = 64;
  std::uint64_t projection_seed = 3;
  teacher::LearnedTeacherConfig learned;
};

struct EvalSpec {
  Index probe_train = 2048;  // rows of the train split used to fit probes
  std::vector<int> gmm_components{4, 8};
  int gmm_iterations = 50;
  Index gfid_samples = 1024;
  flow::SamplerConfig sampler{.n_steps = 100, .mode = flow::SamplerMode::kSde, .cfg_scale = 1.5, .sigma_g = 1.0};
  metrics::ProbeConfig probe;
  metrics::KdeConfig kde;
  TeacherSpec fid_teacher;  // fixed feature extractor for every FID-like metric
};

struct ExperimentConfig {
  std::string variant = "default";
  std::uint64_t seed = 0;
  DataSpec data;
  TeacherSpec teacher;
  vae::VaeConfig vae;
  align::AlignConfig pretrain;  // shared reconstruction-only warm start; steps 0 skips it
  align::AlignConfig align;     // variant fine-tuning
  flow::FlowConfig flow;
  EvalSpec eval;

  void validate() const;
};

// Parses a run config (missing keys take defaults). `seed` overrides the
// top-level seed. Nested training seeds are derived from the top-level seed.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, std::optional<std::uint64_t> seed = {});
nlohmann::json to_json(const ExperimentConfig& cfg);

// Sweep configs hold {"base": {...}, "variants": [{"name", "overrides"}]};
// overrides are merge-patched into the base.
bool is_sweep_config(const nlohmann::json& j);
std::vector<std::string> sweep_variant_names(const nlohmann::json& sweep);
nlohmann::json sweep_variant_config(const nlohmann::json& sweep, const std::string& name);

enum class Stage { kGenData = 0, kTrainVae = 1, kTrainFlow = 2, kEval = 3 };
const char* stage_name(Stage s);

struct RunOptions {
  std::filesystem::path root;      // holds stages/ (shared cache)
  std::filesystem::path run_dir;   // holds manifest.json and the metric report
  Stage until = Stage::kEval;
  bool resume = false;
  bool verbose = true;
};

struct StageRecord {
  std::string inputs_hash;
  std::filesystem::path dir;  // relative to root
  std::map<std::string, std::string> outputs;  // relative file -> sha256
  double wall_clock_s = 0;
  nlohmann::json info = nlohmann::json::object();
};

struct ExperimentManifest {
  std::string variant;
  std::string config_hash;
  std::string code_version = kCodeVersion;
  nlohmann::json seeds = nlohmann::json::object();
  std::map<std::string, StageRecord> stages;
  std::string status = "partial";  // "complete" once every requested stage finished
  std::string failed_stage;
  std::string error;
  std::vector<std::string> executed;  // stages run (not skipped) by the last invocation
  nlohmann::json timestamps = nlohmann::json::object();
};

nlohmann::json to_json(const ExperimentManifest& m);
ExperimentManifest manifest_from_json(const nlohmann::json& j);
// Re-hashes every recorded output; throws DataError on a mismatch.
void verify_manifest(const ExperimentManifest& m, const std::filesystem::path& root);

// Runs the pipeline up to `opts.until`. Stage failures are recorded in the
// written manifest and rethrown.
ExperimentManifest run_experiment(const ExperimentConfig& cfg, const RunOptions& opts);

// Artifacts of a finished stage directory.
synth::LabeledBatch load_split(const std::filesystem::path& stage_dir, const std::string& split);
teacher::Teacher build_teacher(const TeacherSpec& spec, int canvas, const synth::LabeledBatch* train = nullptr,
                               const synth::LabeledBatch* heldout = nullptr);

// Evaluates one VAE (+ optional flow) into a MetricReport.
metrics::MetricReport evaluate(const ExperimentConfig& cfg, const ParamStore<float>& vae_params,
                               const flow::FlowState* flow_state, const synth::LabeledBatch& train,
                               const synth::LabeledBatch& eval, nlohmann::json provenance);

struct SweepResult {
  std::vector<ExperimentManifest> manifests;
  std::vector<std::string> failed;
};

// Runs each variant into <root>/runs/<name>; failures do not stop the sweep.
SweepResult run_sweep(const nlohmann::json& sweep, const RunOptions& opts, std::optional<std::uint64_t> seed,
                      const std::optional<std::string>& only_variant = {});

// ---------------------------------------------------------------- report

struct ReportRow {
  std::string variant;
  metrics::MetricReport metrics;
  std::filesystem::path vae_log, flow_log;
};

struct Report {
  std::vector<ReportRow> rows;
  metrics::Field pearson_top5_gfid, pearson_f1_gfid;
};

// Pearson correlations of the probe metrics with proxy_gfid (null below 3 rows).
void fill_correlations(Report& r);
Report build_report(const std::vector<ExperimentManifest>& manifests, const std::filesystem::path& root);
nlohmann::json to_json(const Report& r);
Report report_from_json(const nlohmann::json& j);
std::string report_markdown(const Report& r);
// Collects manifests from <root>/runs/*/manifest.json, or <root>/manifest.json.
std::vector<ExperimentManifest> find_manifests(const std::filesystem::path& root);

// ---------------------------------------------------------------- plots

struct PlotOutcome {
  std::vector<std::filesystem::path> written;
  std::vector<std::string> skipped;  // "<plot>: <reason>"
  std::optional<double> scatter_r;
};

// Scatter of probe_top5_recall vs proxy_gfid with its least-squares line and
// annotated r, plus one loss-curve plot per training log.
PlotOutcome render_plots(const Report& r, const std::filesystem::path& out_dir);

}  // namespace sendvae::orch
