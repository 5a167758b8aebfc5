#include "sendvae/orchestrator.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "sendvae/checkpoint.hpp"
#include "sendvae/svtf.hpp"

namespace sendvae::orch {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

teacher::TeacherKind teacher_kind_from(const std::string& s) {
  if (s == "analytic") return teacher::TeacherKind::kAnalytic;
  if (s == "learned") return teacher::TeacherKind::kLearned;
  throw ConfigError("unknown teacher kind '" + s + "'");
}

json to_json(const TeacherSpec& t) {
  json j{{"kind", t.kind == teacher::TeacherKind::kAnalytic ? "analytic" : "learned"},
         {"grid", {t.grid.rows, t.grid.cols}},
         {"dim", t.dim},
         {"projection_seed", t.projection_seed}};
  if (t.kind == teacher::TeacherKind::kLearned)
    j["learned"] = {{"depth", t.learned.depth}, {"heads", t.learned.heads}, {"steps", t.learned.steps},
                    {"batch", t.learned.batch}, {"lr", t.learned.lr},       {"seed", t.learned.seed}};
  return j;
}

TeacherSpec teacher_spec_from_json(const json& j) {
  TeacherSpec t;
  t.kind = teacher_kind_from(j.value("kind", std::string("analytic")));
  if (j.contains("grid")) t.grid = {j["grid"].at(0).get<int>(), j["grid"].at(1).get<int>()};
  t.dim = j.value("dim", t.dim);
  t.projection_seed = j.value("projection_seed", t.projection_seed);
  if (j.contains("learned")) {
    const auto& l = j["learned"];
    t.learned.depth = l.value("depth", t.learned.depth);
    t.learned.heads = l.value("heads", t.learned.heads);
    t.learned.steps = l.value("steps", t.learned.steps);
    t.learned.batch = l.value("batch", t.learned.batch);
    t.learned.lr = l.value("lr", t.learned.lr);
    t.learned.seed = l.value("seed", t.learned.seed);
  }
  if (t.dim < 1 || t.grid.rows < 1 || t.grid.rows != t.grid.cols) throw ConfigError("teacher: invalid grid or dim");
  if (t.kind == teacher::TeacherKind::kAnalytic && t.dim < teacher::kDescriptorDim)
    throw ConfigError("analytic teacher dim must be >= " + std::to_string(teacher::kDescriptorDim));
  return t;
}

const char* mode_name(flow::SamplerMode m) { return m == flow::SamplerMode::kOde ? "ode" : "sde"; }

json to_json(const EvalSpec& e) {
  return {{"probe_train", e.probe_train},
          {"gmm_components", e.gmm_components},
          {"gmm_iterations", e.gmm_iterations},
          {"gfid_samples", e.gfid_samples},
          {"sampler",
           {{"n_steps", e.sampler.n_steps},
            {"mode", mode_name(e.sampler.mode)},
            {"cfg_scale", e.sampler.cfg_scale},
            {"sigma_g", e.sampler.sigma_g}}},
          {"probe", {{"l2", e.probe.l2}, {"grad_tol", e.probe.grad_tol}, {"max_iter", e.probe.max_iter}}},
          {"kde", {{"pca_dim", e.kde.pca_dim}, {"max_points", e.kde.max_points}}},
          {"fid_teacher", to_json(e.fid_teacher)}};
}

EvalSpec eval_spec_from_json(const json& j) {
  EvalSpec e;
  e.probe_train = j.value("probe_train", e.probe_train);
  e.gmm_components = j.value("gmm_components", e.gmm_components);
  e.gmm_iterations = j.value("gmm_iterations", e.gmm_iterations);
  e.gfid_samples = j.value("gfid_samples", e.gfid_samples);
  if (j.contains("sampler")) {
    const auto& s = j["sampler"];
    e.sampler.n_steps = s.value("n_steps", e.sampler.n_steps);
    const std::string mode = s.value("mode", std::string(mode_name(e.sampler.mode)));
    if (mode != "ode" && mode != "sde") throw ConfigError("sampler mode must be ode or sde");
    e.sampler.mode = mode == "ode" ? flow::SamplerMode::kOde : flow::SamplerMode::kSde;
    e.sampler.cfg_scale = s.value("cfg_scale", e.sampler.cfg_scale);
    e.sampler.sigma_g = s.value("sigma_g", e.sampler.sigma_g);
  }
  if (j.contains("probe")) {
    e.probe.l2 = j["probe"].value("l2", e.probe.l2);
    e.probe.grad_tol = j["probe"].value("grad_tol", e.probe.grad_tol);
    e.probe.max_iter = j["probe"].value("max_iter", e.probe.max_iter);
  }
  if (j.contains("kde")) {
    e.kde.pca_dim = j["kde"].value("pca_dim", e.kde.pca_dim);
    e.kde.max_points = j["kde"].value("max_points", e.kde.max_points);
  }
  if (j.contains("fid_teacher")) e.fid_teacher = teacher_spec_from_json(j["fid_teacher"]);
  return e;
}

std::string hash_json(const json& j) { return sha256_hex(j.dump()); }

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::map<std::string, std::string> hash_outputs(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), dir).generic_string();
    if (rel == "stage.json") continue;
    out[rel] = sha256_file(e.path());
  }
  return out;
}

json to_json(const StageRecord& s) {
  return {{"inputs_hash", s.inputs_hash},
          {"dir", s.dir.generic_string()},
          {"outputs", s.outputs},
          {"wall_clock_s", s.wall_clock_s},
          {"info", s.info}};
}

StageRecord stage_record_from_json(const json& j) {
  StageRecord s;
  s.inputs_hash = j.at("inputs_hash");
  s.dir = j.at("dir").get<std::string>();
  s.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
  s.wall_clock_s = j.at("wall_clock_s");
  s.info = j.value("info", json::object());
  return s;
}

bool record_verifies(const StageRecord& s, const fs::path& root) {
  for (const auto& [rel, sha] : s.outputs) {
    const fs::path p = root / s.dir / rel;
    if (!fs::exists(p) || sha256_file(p) != sha) return false;
  }
  return !s.outputs.empty();
}

synth::LabeledBatch head_rows(const synth::LabeledBatch& b, Index n) {
  synth::LabeledBatch out;
  out.images = b.images.subset(0, n);
  out.attributes.assign(b.attributes.begin(), b.attributes.begin() + n);
  out.labels.assign(b.labels.begin(), b.labels.begin() + n);
  return out;
}

Eigen::MatrixXd flatten(const Tensor<float>& t) {
  const Index b = t.dim(0);
  return t.as_matrix(b, t.size() / b).cast<double>();
}

Tensor<float> clamp01(Tensor<float> t) {
  t.data = t.data.max(0.0f).min(1.0f);
  return t;
}

void log_line(bool verbose, const std::string& s) {
  if (verbose) std::cerr << "[sendvae] " << s << "\n";
}

}  // namespace

// ---------------------------------------------------------------- config

void ExperimentConfig::validate() const {
  data.dataset.validate();
  vae.validate();
  if (vae.canvas_size != data.dataset.canvas_size) throw ConfigError("vae.canvas_size must equal the dataset canvas");
  if (data.train_count < 64 || data.eval_count < 64) throw ConfigError("data: need at least 64 train and eval images");
  if (eval.probe_train < 64 || eval.probe_train > data.train_count)
    throw ConfigError("eval.probe_train must lie in [64, train_count]");
  if (eval.gfid_samples < 1) throw ConfigError("eval.gfid_samples must be positive");
  if (eval.fid_teacher.kind != teacher::TeacherKind::kAnalytic) throw ConfigError("eval.fid_teacher must be analytic");
  if (data.dataset.canvas_size % teacher.grid.rows != 0) throw ConfigError("teacher grid must divide the canvas");
  pretrain.validate();
  align.validate();
  if (pretrain.uses_mapper()) throw ConfigError("pretrain must not use the alignment loss");
  if (align.uses_mapper() && align.mapper.tokens(vae.latent_size()) != teacher.grid.count())
    throw ConfigError("mapper patch count does not match the teacher grid");
  flow.validate(vae.latent_size());
  for (int k : eval.gmm_components)
    if (k < 1) throw ConfigError("gmm component counts must be positive");
}

ExperimentConfig experiment_config_from_json(const json& j, std::optional<std::uint64_t> seed) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  const int version = j.value("schema_version", kConfigSchemaVersion);
  if (version != kConfigSchemaVersion) throw ConfigError("unsupported config schema_version " + std::to_string(version));
  ExperimentConfig c;
  c.variant = j.value("variant", c.variant);
  c.seed = seed ? *seed : j.value("seed", c.seed);
  if (j.contains("data")) {
    const auto& d = j["data"];
    if (d.contains("dataset")) c.data.dataset = synth::dataset_config_from_json(d["dataset"]);
    c.data.train_count = d.value("train_count", c.data.train_count);
    c.data.eval_count = d.value("eval_count", c.data.eval_count);
  }
  if (j.contains("teacher")) c.teacher = teacher_spec_from_json(j["teacher"]);
  c.vae.canvas_size = c.data.dataset.canvas_size;
  if (j.contains("vae")) c.vae = vae::vae_config_from_json(j["vae"]);
  json pre = j.value("pretrain", json::object());
  pre["lambda_align"] = 0.0;
  if (!pre.contains("steps")) pre["steps"] = 0;
  c.pretrain = align::align_config_from_json(pre);
  if (j.contains("align")) c.align = align::align_config_from_json(j["align"]);
  if (j.contains("flow")) c.flow = flow::flow_config_from_json(j["flow"]);
  if (j.contains("eval")) c.eval = eval_spec_from_json(j["eval"]);

  c.align.mapper.out_dim = c.teacher.dim;
  c.flow.num_classes = c.data.dataset.num_classes();
  c.flow.repa_dim = c.teacher.dim;
  c.pretrain.seed = derive_seed(c.seed, {0x57A6E, 1});
  c.align.seed = derive_seed(c.seed, {0x57A6E, 2});
  c.flow.seed = derive_seed(c.seed, {0x57A6E, 3});
  c.eval.probe.seed = derive_seed(c.seed, {0x57A6E, 4});
  c.eval.kde.seed = derive_seed(c.seed, {0x57A6E, 5});
  if (c.teacher.kind == teacher::TeacherKind::kLearned) {
    c.teacher.learned.grid = c.teacher.grid;
    c.teacher.learned.dim = c.teacher.dim;
    c.teacher.learned.num_classes = c.data.dataset.num_classes();
  }
  c.validate();
  return c;
}

json to_json(const ExperimentConfig& c) {
  return {{"schema_version", kConfigSchemaVersion},
          {"variant", c.variant},
          {"seed", c.seed},
          {"data",
           {{"dataset", synth::to_json(c.data.dataset)},
            {"train_count", c.data.train_count},
            {"eval_count", c.data.eval_count}}},
          {"teacher", to_json(c.teacher)},
          {"vae", vae::to_json(c.vae)},
          {"pretrain", align::to_json(c.pretrain)},
          {"align", align::to_json(c.align)},
          {"flow", flow::to_json(c.flow)},
          {"eval", to_json(c.eval)}};
}

bool is_sweep_config(const json& j) { return j.is_object() && j.contains("variants"); }

std::vector<std::string> sweep_variant_names(const json& sweep) {
  std::vector<std::string> names;
  for (const auto& v : sweep.at("variants")) {
    const std::string n = v.at("name");
    if (n.empty() || n.find('/') != std::string::npos) throw ConfigError("invalid variant name '" + n + "'");
    if (std::find(names.begin(), names.end(), n) != names.end()) throw ConfigError("duplicate variant " + n);
    names.push_back(n);
  }
  if (names.empty()) throw ConfigError("sweep has no variants");
  return names;
}

json sweep_variant_config(const json& sweep, const std::string& name) {
  for (const auto& v : sweep.at("variants")) {
    if (v.at("name") != name) continue;
    json cfg = sweep.value("base", json::object());
    cfg.merge_patch(v.value("overrides", json::object()));
    cfg["variant"] = name;
    return cfg;
  }
  throw ConfigError("sweep has no variant named '" + name + "'");
}

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::kGenData: return "gen-data";
    case Stage::kTrainVae: return "train-vae";
    case Stage::kTrainFlow: return "train-flow";
    case Stage::kEval: return "eval";
  }
  return "?";
}

// ---------------------------------------------------------------- manifest

json to_json(const ExperimentManifest& m) {
  json stages = json::object();
  for (const auto& [k, v] : m.stages) stages[k] = to_json(v);
  return {{"schema_version", 1},   {"variant", m.variant}, {"config_hash", m.config_hash},
          {"code_version", m.code_version}, {"seeds", m.seeds},     {"stages", stages},
          {"status", m.status},    {"failed_stage", m.failed_stage.empty() ? json(nullptr) : json(m.failed_stage)},
          {"error", m.error.empty() ? json(nullptr) : json(m.error)},
          {"executed", m.executed}, {"timestamps", m.timestamps}};
}

ExperimentManifest manifest_from_json(const json& j) {
  ExperimentManifest m;
  m.variant = j.at("variant");
  m.config_hash = j.at("config_hash");
  m.code_version = j.at("code_version");
  m.seeds = j.at("seeds");
  for (const auto& [k, v] : j.at("stages").items()) m.stages[k] = stage_record_from_json(v);
  m.status = j.at("status");
  if (!j.at("failed_stage").is_null()) m.failed_stage = j["failed_stage"];
  if (!j.at("error").is_null()) m.error = j["error"];
  m.executed = j.value("executed", std::vector<std::string>{});
  m.timestamps = j.value("timestamps", json::object());
  return m;
}

void verify_manifest(const ExperimentManifest& m, const fs::path& root) {
  for (const auto& [name, s] : m.stages)
    for (const auto& [rel, sha] : s.outputs) {
      const fs::path p = root / s.dir / rel;
      if (!fs::exists(p)) throw DataError("manifest artifact missing: " + p.string());
      if (sha256_file(p) != sha) throw DataError("manifest artifact hash mismatch: " + p.string());
    }
}

// ---------------------------------------------------------------- artifacts

synth::LabeledBatch load_split(const fs::path& dir, const std::string& split) {
  synth::LabeledBatch b;
  b.images.pixels = svtf::read_as<float>(dir / (split + "_images.svtf"));
  const auto attrs = svtf::read_as<std::uint8_t>(dir / (split + "_attributes.svtf"));
  const auto labels = svtf::read_as<std::uint8_t>(dir / (split + "_labels.svtf"));
  const Index n = b.images.count();
  if (attrs.dim(0) != n || labels.dim(0) != n) throw DataError("split " + split + " has inconsistent row counts");
  const Index a = attrs.dim(1);
  b.attributes.resize(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) {
    auto& bits = b.attributes[static_cast<std::size_t>(i)].bits;
    bits.assign(attrs.ptr() + i * a, attrs.ptr() + (i + 1) * a);
  }
  b.labels.assign(labels.ptr(), labels.ptr() + n);
  return b;
}

namespace {

void save_split(const fs::path& dir, const std::string& split, const synth::LabeledBatch& b) {
  svtf::write(dir / (split + "_images.svtf"), b.images.pixels);
  const Index n = b.images.count();
  const Index a = n ? static_cast<Index>(b.attributes[0].bits.size()) : 0;
  Tensor<std::uint8_t> attrs({n, a}), labels({n});
  for (Index i = 0; i < n; ++i) {
    std::copy(b.attributes[static_cast<std::size_t>(i)].bits.begin(), b.attributes[static_cast<std::size_t>(i)].bits.end(),
              attrs.ptr() + i * a);
    labels.data[i] = static_cast<std::uint8_t>(b.labels[static_cast<std::size_t>(i)]);
  }
  svtf::write(dir / (split + "_attributes.svtf"), attrs);
  svtf::write(dir / (split + "_labels.svtf"), labels);
}

}  // namespace

teacher::Teacher build_teacher(const TeacherSpec& spec, int canvas, const synth::LabeledBatch* train,
                               const synth::LabeledBatch* heldout) {
  if (spec.kind == teacher::TeacherKind::kAnalytic)
    return teacher::Teacher::analytic(canvas, spec.grid, spec.dim, spec.projection_seed);
  if (!train || !heldout) throw ConfigError("the learned teacher needs training data");
  return teacher::pretrain_learned_teacher(*train, *heldout, spec.learned.num_classes, spec.learned);
}

// ---------------------------------------------------------------- evaluation

metrics::MetricReport evaluate(const ExperimentConfig& cfg, const ParamStore<float>& vae_params,
                               const flow::FlowState* flow_state, const synth::LabeledBatch& train,
                               const synth::LabeledBatch& eval, json provenance) {
  using metrics::Field;
  metrics::MetricReport r;
  r.variant = cfg.variant;
  r.provenance = std::move(provenance);
  const auto fid_teacher = build_teacher(cfg.eval.fid_teacher, cfg.vae.canvas_size);
  const auto probe_set = head_rows(train, cfg.eval.probe_train);

  const Tensor<float> mu_train = vae::encode_mean(vae_params, cfg.vae, probe_set.images.pixels);
  const Tensor<float> mu_eval = vae::encode_mean(vae_params, cfg.vae, eval.images.pixels);
  const Eigen::MatrixXd xtr = flatten(mu_train), xev = flatten(mu_eval);
  if (!xtr.allFinite() || !xev.allFinite()) throw NumericError("non-finite latents during evaluation");

  const auto schema = synth::attribute_schema(cfg.data.dataset);
  const auto probe = metrics::fit_linear_probe(xtr, synth::attribute_matrix(probe_set.attributes), cfg.eval.probe);
  const auto ps = metrics::evaluate_probe(probe, xev, synth::attribute_matrix(eval.attributes));
  r.probe_f1 = Field::of(ps.macro_f1);
  r.probe_top5_recall = Field::of(ps.top5_recall);
  r.images_without_positives = ps.images_without_positives;
  for (int c : probe.excluded) r.excluded_attributes.push_back(schema[static_cast<std::size_t>(c)]);

  const auto cls = metrics::fit_linear_probe(xtr, probe_set.labels, cfg.data.dataset.num_classes(), cfg.eval.probe);
  r.class_accuracy = Field::of(metrics::evaluate_probe(cls, xev, eval.labels).accuracy);

  try {
    r.gini = Field::of(metrics::kde_gini(xev, cfg.eval.kde));
  } catch (const DataError& e) {
    r.gini = Field::null(e.what());
  }
  for (int k : cfg.eval.gmm_components) {
    try {
      metrics::GmmConfig gc{.seed = derive_seed(cfg.seed, {0x63A, static_cast<std::uint64_t>(k)})};
      r.gmm_heldout_nll[k] = Field::of(metrics::gmm_em(xtr, k, cfg.eval.gmm_iterations, xev, gc).heldout_nll);
    } catch (const DataError& e) {
      r.gmm_heldout_nll[k] = Field::null(e.what());
    }
  }

  synth::ImageBatch recon;
  recon.pixels = clamp01(vae::decode_latents(vae_params, cfg.vae, mu_eval));
  const auto pix = metrics::pixel_metrics(eval.images.pixels, recon.pixels);
  r.psnr = Field::of(pix.psnr);
  r.ssim = Field::of(pix.ssim);
  const auto fa = teacher::teacher_forward(fid_teacher, eval.images).features;
  const auto fb = teacher::teacher_forward(fid_teacher, recon).features;
  r.perceptual = Field::of(static_cast<double>((fa.data - fb.data).square().mean()));
  if (eval.images.count() >= metrics::kProxyFidMinSamples)
    r.proxy_rfid = Field::of(metrics::proxy_fid(eval.images, recon, fid_teacher));
  else
    r.proxy_rfid = Field::null("fewer than 256 evaluation images");

  if (!flow_state) {
    r.proxy_gfid = Field::null("no flow stage was run");
  } else if (cfg.eval.gfid_samples < metrics::kProxyFidMinSamples) {
    r.proxy_gfid = Field::null("fewer than 256 generated samples requested");
  } else {
    const flow::LatentSpec latent{cfg.vae.d, cfg.vae.latent_size()};
    const Index n = cfg.eval.gfid_samples, chunk = 256;
    synth::ImageBatch gen;
    gen.pixels = Tensor<float>({n, 3, cfg.vae.canvas_size, cfg.vae.canvas_size});
    for (Index s = 0; s < n; s += chunk) {
      const Index m = std::min(chunk, n - s);
      std::vector<int> labels;
      for (Index i = 0; i < m; ++i) labels.push_back(eval.labels[static_cast<std::size_t>((s + i) % eval.images.count())]);
      Rng rng(derive_seed(cfg.seed, {0x6F1D, static_cast<std::uint64_t>(s)}));
      const auto z = flow::sample(*flow_state, cfg.flow, latent, labels, cfg.eval.sampler, rng);
      if (!z.all_finite()) throw NumericError("non-finite generated latents");
      const auto x = clamp01(vae::decode_latents(vae_params, cfg.vae, z));
      std::copy(x.ptr(), x.ptr() + x.size(), gen.pixels.ptr() + s * x.size() / m);
    }
    r.proxy_gfid = Field::of(metrics::proxy_fid(eval.images, gen, fid_teacher));
  }
  r.notes = json::array({"proxy_* metrics use the analytic teacher in place of Inception features",
                         "perceptual is the mean squared teacher-feature distance, standing in for LPIPS",
                         "probe_top5_recall is multi-label recall@5 normalized by the number of true positives"});
  return r;
}

// ---------------------------------------------------------------- pipeline

namespace {

class Runner {
 public:
  Runner(const ExperimentConfig& cfg, const RunOptions& opts) : cfg_(cfg), opts_(opts) {}

  ExperimentManifest run() {
    m_.variant = cfg_.variant;
    m_.config_hash = hash_json(to_json(cfg_));
    m_.seeds = {{"seed", cfg_.seed},
                {"pretrain", cfg_.pretrain.seed},
                {"align", cfg_.align.seed},
                {"flow", cfg_.flow.seed}};
    m_.timestamps["started_at"] = utc_now();
    fs::create_directories(opts_.run_dir);
    std::string current;
    try {
      current = "gen-data";
      gen_data();
      if (opts_.until >= Stage::kTrainVae) {
        current = "teacher";
        teacher_stage();
        current = "pretrain";
        pretrain_stage();
        current = "train-vae";
        train_vae_stage();
      }
      if (opts_.until >= Stage::kTrainFlow) {
        current = "train-flow";
        train_flow_stage();
      }
      if (opts_.until >= Stage::kEval) {
        current = "eval";
        eval_stage();
      }
      m_.status = opts_.until == Stage::kEval ? "complete" : "partial";
      if (m_.status == "partial") m_.failed_stage.clear();
    } catch (const std::exception& e) {
      m_.status = "partial";
      m_.failed_stage = current;
      m_.error = e.what();
      write_manifest();
      throw;
    }
    write_manifest();
    return m_;
  }

 private:
  using Body = std::function<json(const fs::path& dir, bool resume)>;

  // Runs `body` in the content-addressed directory for `inputs` unless a
  // verified record already exists there and no dependency was rebuilt.
  void stage(const std::string& name, const std::vector<std::string>& deps, const json& inputs, const Body& body) {
    json keyed = inputs;
    keyed["stage"] = name;
    keyed["code_version"] = kCodeVersion;
    const std::string h = hash_json(keyed);
    const fs::path rel = fs::path("stages") / (name + "-" + h.substr(0, 16));
    const fs::path dir = opts_.root / rel;
    const fs::path rec_path = dir / "stage.json";
    const bool dep_rebuilt = std::any_of(deps.begin(), deps.end(), [&](const std::string& d) {
      return std::find(m_.executed.begin(), m_.executed.end(), d) != m_.executed.end();
    });
    if (!dep_rebuilt && fs::exists(rec_path)) {
      auto rec = stage_record_from_json(read_json(rec_path));
      if (rec.inputs_hash == h && record_verifies(rec, opts_.root)) {
        log_line(opts_.verbose, name + ": up to date (" + rel.generic_string() + ")");
        m_.stages[name] = rec;
        return;
      }
    }
    const bool resume = opts_.resume && fs::exists(dir);
    if (!resume && fs::exists(dir)) fs::remove_all(dir);
    fs::create_directories(dir);
    fs::remove(rec_path);
    log_line(opts_.verbose, name + ": running" + (resume ? " (resume)" : ""));
    const auto t0 = std::chrono::steady_clock::now();
    json info = body(dir, resume);
    StageRecord rec;
    rec.inputs_hash = h;
    rec.dir = rel;
    rec.outputs = hash_outputs(dir);
    rec.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.info = std::move(info);
    rec.info["inputs"] = inputs;
    write_json(rec_path, to_json(rec));
    m_.stages[name] = rec;
    m_.executed.push_back(name);
  }

  const StageRecord& rec(const std::string& name) const { return m_.stages.at(name); }
  fs::path dir_of(const std::string& name) const { return opts_.root / rec(name).dir; }

  void gen_data() {
    const json inputs{{"dataset", synth::to_json(cfg_.data.dataset)},
                      {"train_count", cfg_.data.train_count},
                      {"eval_count", cfg_.data.eval_count},
                      {"seed", cfg_.seed}};
    stage("gen-data", {}, inputs, [&](const fs::path& dir, bool) {
      const auto train_seed = derive_seed(cfg_.seed, {0xDA7A, 1}), eval_seed = derive_seed(cfg_.seed, {0xDA7A, 2});
      save_split(dir, "train", synth::generate_batch(train_seed, cfg_.data.train_count, cfg_.data.dataset));
      save_split(dir, "eval", synth::generate_batch(eval_seed, cfg_.data.eval_count, cfg_.data.dataset));
      write_json(dir / "dataset_manifest.json",
                 {{"train", synth::dataset_manifest(train_seed, cfg_.data.train_count, cfg_.data.dataset)},
                  {"eval", synth::dataset_manifest(eval_seed, cfg_.data.eval_count, cfg_.data.dataset)}});
      return json::object();
    });
  }

  void ensure_data() {
    if (!train_.images.count()) {
      train_ = load_split(dir_of("gen-data"), "train");
      eval_ = load_split(dir_of("gen-data"), "eval");
    }
  }

  void teacher_stage() {
    const json inputs{{"teacher", to_json(cfg_.teacher)}, {"data", rec("gen-data").inputs_hash}};
    stage("teacher", {"gen-data"}, inputs, [&](const fs::path& dir, bool) {
      ensure_data();
      auto t = build_teacher(cfg_.teacher, cfg_.vae.canvas_size, &train_, &eval_);
      teacher::save_teacher(t, dir / "teacher");
      return json{{"teacher_id", t.id()}, {"pretrain_accuracy", t.pretrain_accuracy()}};
    });
    teacher_ = teacher::load_teacher(dir_of("teacher") / "teacher");
  }

  json vae_inputs(const align::AlignConfig& a) const {
    return {{"data", rec("gen-data").inputs_hash},
            {"teacher", rec("teacher").inputs_hash},
            {"vae", vae::to_json(cfg_.vae)},
            {"align", align::to_json(a)}};
  }

  void train_vae_into(const fs::path& dir, bool resume, const ParamStore<float>* init, const align::AlignConfig& a) {
    ensure_data();
    align::TrainOptions to;
    to.out_dir = dir;
    to.resume = resume;
    to.checkpoint_every = 500;
    const auto t0 = std::chrono::steady_clock::now();
    const int report_every = std::max(1, a.steps / 10);
    to.on_step = [&](const align::LogEntry& e) {
      if ((e.step + 1) % report_every == 0)
        log_line(opts_.verbose, "  step " + std::to_string(e.step + 1) + "/" + std::to_string(a.steps) +
                                    " total " + std::to_string(e.parts.total) + " align " +
                                    std::to_string(e.parts.align) + " (" +
                                    std::to_string(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()) +
                                    " s)");
    };
    auto res = align::train_vae_aligned(init, cfg_.vae, train_.images, teacher_, a, to);
    if (!res.finished) throw TrainingError("VAE training stopped early");
  }

  void pretrain_stage() {
    if (cfg_.pretrain.steps == 0) return;
    stage("pretrain", {"gen-data", "teacher"}, vae_inputs(cfg_.pretrain), [&](const fs::path& dir, bool resume) {
      train_vae_into(dir, resume, nullptr, cfg_.pretrain);
      return json::object();
    });
  }

  ParamStore<float> load_vae(const fs::path& ckpt) const {
    ParamStore<float> ps;
    vae::init_vae(ps, cfg_.vae, 0);
    vae::load_checkpoint(ckpt, ps, nullptr, "vae.");
    return ps;
  }

  void train_vae_stage() {
    json inputs = vae_inputs(cfg_.align);
    inputs["init"] = m_.stages.count("pretrain") ? json(rec("pretrain").inputs_hash) : json(nullptr);
    stage("train-vae", {"gen-data", "teacher", "pretrain"}, inputs, [&](const fs::path& dir, bool resume) {
      std::optional<ParamStore<float>> init;
      if (m_.stages.count("pretrain")) init = load_vae(dir_of("pretrain") / "checkpoint");
      train_vae_into(dir, resume, init ? &*init : nullptr, cfg_.align);
      return json::object();
    });
  }

  void train_flow_stage() {
    json inputs{{"vae", rec("train-vae").inputs_hash}, {"flow", flow::to_json(cfg_.flow)}};
    if (cfg_.flow.repa_enabled) inputs["teacher"] = rec("teacher").inputs_hash;
    stage("train-flow", {"gen-data", "teacher", "train-vae"}, inputs, [&](const fs::path& dir, bool resume) {
      ensure_data();
      const auto ps = load_vae(dir_of("train-vae") / "checkpoint");
      const auto latents = vae::encode_mean(ps, cfg_.vae, train_.images.pixels);
      std::optional<Tensor<float>> feats;
      if (cfg_.flow.repa_enabled) feats = teacher::teacher_forward(teacher_, train_.images).features;
      flow::FlowTrainOptions fo;
      fo.out_dir = dir;
      fo.resume = resume;
      fo.checkpoint_every = 1000;
      const int report_every = std::max(1, cfg_.flow.steps / 10);
      fo.on_step = [&](const flow::FlowLogEntry& e) {
        if ((e.step + 1) % report_every == 0)
          log_line(opts_.verbose, "  step " + std::to_string(e.step + 1) + "/" + std::to_string(cfg_.flow.steps) +
                                      " loss " + std::to_string(e.loss));
      };
      const double sd = std::sqrt(static_cast<double>((latents.data - latents.data.mean()).square().mean()));
      auto res = flow::train_flow(latents, train_.labels, cfg_.flow, feats ? &*feats : nullptr, fo);
      if (!res.finished) throw TrainingError("flow training stopped early");
      return json{{"latent_std", sd}};
    });
  }

  void eval_stage() {
    json inputs{{"vae", rec("train-vae").inputs_hash}, {"eval", to_json(cfg_.eval)}, {"variant", cfg_.variant},
                {"seed", cfg_.seed}};
    if (m_.stages.count("train-flow")) inputs["flow"] = rec("train-flow").inputs_hash;
    stage("eval", {"gen-data", "train-vae", "train-flow"}, inputs, [&](const fs::path& dir, bool) {
      ensure_data();
      const auto ps = load_vae(dir_of("train-vae") / "checkpoint");
      std::optional<flow::FlowState> fs_state;
      if (m_.stages.count("train-flow")) fs_state = flow::load_flow(dir_of("train-flow") / "checkpoint");
      json prov{{"config_hash", m_.config_hash},
                {"seeds", m_.seeds},
                {"vae_checkpoint", sha256_tree(dir_of("train-vae") / "checkpoint")},
                {"teacher", teacher_.id()}};
      if (fs_state) prov["flow_checkpoint"] = sha256_tree(dir_of("train-flow") / "checkpoint");
      auto report = evaluate(cfg_, ps, fs_state ? &*fs_state : nullptr, train_, eval_, prov);
      const json j = metrics::to_json(report);
      metrics::validate_metric_report(j);
      write_json(dir / "metric_report.json", j);
      return json::object();
    });
    fs::copy_file(dir_of("eval") / "metric_report.json", opts_.run_dir / "metric_report.json",
                  fs::copy_options::overwrite_existing);
  }

  void write_manifest() {
    m_.timestamps["finished_at"] = utc_now();
    write_json(opts_.run_dir / "manifest.json", to_json(m_));
  }

  const ExperimentConfig& cfg_;
  const RunOptions& opts_;
  ExperimentManifest m_;
  synth::LabeledBatch train_, eval_;
  teacher::Teacher teacher_;
};

}  // namespace

ExperimentManifest run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  cfg.validate();
  if (opts.root.empty() || opts.run_dir.empty()) throw ConfigError("run_experiment needs an output directory");
  return Runner(cfg, opts).run();
}

SweepResult run_sweep(const json& sweep, const RunOptions& opts, std::optional<std::uint64_t> seed,
                      const std::optional<std::string>& only_variant) {
  const auto names = sweep_variant_names(sweep);
  if (only_variant && std::find(names.begin(), names.end(), *only_variant) == names.end())
    throw ConfigError("sweep has no variant named '" + *only_variant + "'");
  // Parse every variant up front so a config error fails before any training.
  std::vector<ExperimentConfig> cfgs;
  for (const auto& n : names) cfgs.push_back(experiment_config_from_json(sweep_variant_config(sweep, n), seed));
  SweepResult out;
  for (const auto& cfg : cfgs) {
    if (only_variant && cfg.variant != *only_variant) continue;
    RunOptions o = opts;
    o.run_dir = opts.root / "runs" / cfg.variant;
    log_line(opts.verbose, "variant " + cfg.variant);
    try {
      out.manifests.push_back(run_experiment(cfg, o));
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      log_line(true, "variant " + cfg.variant + " failed: " + e.what());
      out.failed.push_back(cfg.variant);
    }
  }
  return out;
}

// ---------------------------------------------------------------- report

std::vector<ExperimentManifest> find_manifests(const fs::path& root) {
  std::vector<ExperimentManifest> out;
  std::vector<fs::path> paths;
  if (fs::exists(root / "runs"))
    for (const auto& e : fs::directory_iterator(root / "runs"))
      if (fs::exists(e.path() / "manifest.json")) paths.push_back(e.path() / "manifest.json");
  std::sort(paths.begin(), paths.end());
  if (paths.empty() && fs::exists(root / "manifest.json")) paths.push_back(root / "manifest.json");
  for (const auto& p : paths) out.push_back(manifest_from_json(read_json(p)));
  return out;
}

namespace {

metrics::Field correlation(const std::vector<ReportRow>& rows, metrics::Field metrics::MetricReport::*probe) {
  std::vector<double> x, y;
  for (const auto& r : rows) {
    const auto& p = r.metrics.*probe;
    if (p.value && r.metrics.proxy_gfid.value) {
      x.push_back(*p.value);
      y.push_back(*r.metrics.proxy_gfid.value);
    }
  }
  if (x.size() < 3) return metrics::Field::null("fewer than 3 variants with both values");
  try {
    return metrics::Field::of(metrics::pearson(x, y));
  } catch (const DomainError& e) {
    return metrics::Field::null(e.what());
  }
}

}  // namespace

void fill_correlations(Report& r) {
  r.pearson_top5_gfid = correlation(r.rows, &metrics::MetricReport::probe_top5_recall);
  r.pearson_f1_gfid = correlation(r.rows, &metrics::MetricReport::probe_f1);
}

Report build_report(const std::vector<ExperimentManifest>& manifests, const fs::path& root) {
  Report r;
  for (const auto& m : manifests) {
    if (m.status != "complete" || !m.stages.count("eval")) continue;
    verify_manifest(m, root);
    ReportRow row;
    row.variant = m.variant;
    row.metrics = metrics::metric_report_from_json(read_json(root / m.stages.at("eval").dir / "metric_report.json"));
    row.vae_log = root / m.stages.at("train-vae").dir / "train_log.jsonl";
    if (m.stages.count("train-flow")) row.flow_log = root / m.stages.at("train-flow").dir / "train_log.jsonl";
    r.rows.push_back(std::move(row));
  }
  if (r.rows.empty()) throw DataError("report needs at least one complete manifest");
  fill_correlations(r);
  return r;
}

json to_json(const Report& r) {
  json rows = json::array();
  for (const auto& row : r.rows)
    rows.push_back({{"variant", row.variant},
                    {"metric_report", metrics::to_json(row.metrics)},
                    {"vae_log", row.vae_log.generic_string()},
                    {"flow_log", row.flow_log.generic_string()}});
  auto corr = [](const metrics::Field& f) { return json{{"value", metrics::to_json(f)}, {"reason", f.reason}}; };
  return {{"schema_version", 1},
          {"rows", rows},
          {"correlation",
           {{"pearson_probe_top5_recall_vs_proxy_gfid", corr(r.pearson_top5_gfid)},
            {"pearson_probe_f1_vs_proxy_gfid", corr(r.pearson_f1_gfid)}}}};
}

Report report_from_json(const json& j) {
  if (j.value("schema_version", 0) != 1) throw DataError("unsupported report schema_version");
  Report r;
  for (const auto& row : j.at("rows")) {
    ReportRow rr;
    rr.variant = row.at("variant");
    rr.metrics = metrics::metric_report_from_json(row.at("metric_report"));
    rr.vae_log = row.value("vae_log", std::string());
    rr.flow_log = row.value("flow_log", std::string());
    r.rows.push_back(std::move(rr));
  }
  auto corr = [](const json& c) {
    if (c.at("value").is_null()) return metrics::Field::null(c.value("reason", std::string("unavailable")));
    return metrics::Field::of(c.at("value").get<double>());
  };
  const auto& c = j.at("correlation");
  r.pearson_top5_gfid = corr(c.at("pearson_probe_top5_recall_vs_proxy_gfid"));
  r.pearson_f1_gfid = corr(c.at("pearson_probe_f1_vs_proxy_gfid"));
  return r;
}

std::string report_markdown(const Report& r) {
  auto cell = [](const metrics::Field& f, int prec = 4) {
    if (!f.value) return std::string("n/a");
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << *f.value;
    return os.str();
  };
  std::set<int> ks;
  for (const auto& row : r.rows)
    for (const auto& [k, v] : row.metrics.gmm_heldout_nll) ks.insert(k);
  std::ostringstream os;
  os << "# Send-VAE lab report\n\n";
  os << "## Semantic disentanglement and generation\n\n";
  os << "| variant | probe F1 | top-5 recall | class acc | Gini |";
  for (int k : ks) os << " GMM NLL K=" << k << " |";
  os << " proxy rFID | proxy gFID | PSNR | SSIM | perceptual |\n|---|---|---|---|---|";
  for (std::size_t i = 0; i < ks.size(); ++i) os << "---|";
  os << "---|---|---|---|---|\n";
  for (const auto& row : r.rows) {
    const auto& m = row.metrics;
    os << "| " << row.variant << " | " << cell(m.probe_f1) << " | " << cell(m.probe_top5_recall) << " | "
       << cell(m.class_accuracy) << " | " << cell(m.gini) << " |";
    for (int k : ks) os << " " << (m.gmm_heldout_nll.count(k) ? cell(m.gmm_heldout_nll.at(k), 2) : "n/a") << " |";
    os << " " << cell(m.proxy_rfid) << " | " << cell(m.proxy_gfid) << " | " << cell(m.psnr, 2) << " | "
       << cell(m.ssim) << " | " << cell(m.perceptual, 6) << " |\n";
  }
  os << "\n## Correlation with proxy gFID\n\n";
  auto corr = [&](const char* name, const metrics::Field& f) {
    os << "- " << name << ": " << (f.value ? cell(f) : "null (" + f.reason + ")") << "\n";
  };
  corr("pearson(probe_top5_recall, proxy_gfid)", r.pearson_top5_gfid);
  corr("pearson(probe_f1, proxy_gfid)", r.pearson_f1_gfid);
  os << "\nproxy_* metrics use the analytic teacher as the feature extractor and are not comparable to Inception FID. "
        "Top-5 recall is multi-label recall@5 normalized by the number of true positives.\n";
  return os.str();
}

// ---------------------------------------------------------------- plots

namespace {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

std::string escape_xml(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

// Minimal SVG canvas mapping data coordinates to a 640x420 frame.
class Svg {
 public:
  Svg(double x0, double x1, double y0, double y1) : x0_(x0), x1_(x1), y0_(y0), y1_(y1) {
    if (x1_ <= x0_) x1_ = x0_ + 1;
    if (y1_ <= y0_) y1_ = y0_ + 1;
    const double px = 0.05 * (x1_ - x0_), py = 0.05 * (y1_ - y0_);
    x0_ -= px, x1_ += px, y0_ -= py, y1_ += py;
    os_ << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"420\" font-family=\"sans-serif\" "
           "font-size=\"12\">\n<rect width=\"640\" height=\"420\" fill=\"white\"/>\n"
        << "<rect x=\"70\" y=\"30\" width=\"540\" height=\"330\" fill=\"none\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
      const double xv = x0_ + (x1_ - x0_) * i / 4, yv = y0_ + (y1_ - y0_) * i / 4;
      os_ << "<text x=\"" << sx(xv) << "\" y=\"378\" text-anchor=\"middle\">" << fmt(xv) << "</text>\n";
      os_ << "<text x=\"64\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\">" << fmt(yv) << "</text>\n";
    }
  }
  double sx(double x) const { return 70 + 540 * (x - x0_) / (x1_ - x0_); }
  double sy(double y) const { return 360 - 330 * (y - y0_) / (y1_ - y0_); }
  void labels(const std::string& title, const std::string& xl, const std::string& yl) {
    os_ << "<text x=\"340\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << escape_xml(title) << "</text>\n"
        << "<text x=\"340\" y=\"405\" text-anchor=\"middle\">" << escape_xml(xl) << "</text>\n"
        << "<text x=\"16\" y=\"195\" text-anchor=\"middle\" transform=\"rotate(-90 16 195)\">" << escape_xml(yl)
        << "</text>\n";
  }
  void point(double x, double y, const std::string& label) {
    os_ << "<circle cx=\"" << sx(x) << "\" cy=\"" << sy(y) << "\" r=\"4\" fill=\"#1f77b4\"/>\n"
        << "<text x=\"" << sx(x) + 6 << "\" y=\"" << sy(y) - 6 << "\">" << escape_xml(label) << "</text>\n";
  }
  void polyline(const std::vector<double>& x, const std::vector<double>& y, const std::string& color) {
    os_ << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < x.size(); ++i) os_ << sx(x[i]) << "," << sy(y[i]) << " ";
    os_ << "\"/>\n";
  }
  void text(double px, double py, const std::string& s, const std::string& color = "black") {
    os_ << "<text x=\"" << px << "\" y=\"" << py << "\" fill=\"" << color << "\">" << escape_xml(s) << "</text>\n";
  }
  void save(const fs::path& p) {
    os_ << "</svg>\n";
    std::ofstream f(p);
    if (!f) throw ConfigError("cannot write " + p.string());
    f << os_.str();
  }

 private:
  double x0_, x1_, y0_, y1_;
  std::ostringstream os_;
};

std::vector<json> read_jsonl(const fs::path& p) {
  std::vector<json> out;
  std::ifstream f(p);
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

void loss_plot(const std::string& title, const std::vector<Series>& series, const fs::path& path) {
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]), x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]), y1 = std::max(y1, s.y[i]);
    }
  Svg svg(x0, x1, y0, y1);
  svg.labels(title, "step", "loss (moving average)");
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  for (std::size_t k = 0; k < series.size(); ++k) {
    svg.polyline(series[k].x, series[k].y, colors[k % 6]);
    svg.text(480, 50 + 16.0 * static_cast<double>(k), series[k].name, colors[k % 6]);
  }
  svg.save(path);
}

// Moving average over `w` entries, thinned to at most 400 points.
Series smoothed(const std::string& name, const std::vector<json>& log, const char* key) {
  Series s{name, {}, {}};
  const std::size_t n = log.size(), w = std::max<std::size_t>(1, n / 50);
  const std::size_t stride = std::max<std::size_t>(1, n / 400);
  double acc = 0;
  for (std::size_t i = 0; i < n; ++i) {
    acc += log[i].at(key).get<double>();
    if (i >= w) acc -= log[i - w].at(key).get<double>();
    if (i + 1 >= w && (i % stride == 0 || i + 1 == n)) {
      s.x.push_back(log[i].at("step").get<double>());
      s.y.push_back(acc / static_cast<double>(w));
    }
  }
  return s;
}

}  // namespace

PlotOutcome render_plots(const Report& r, const fs::path& out_dir) {
  PlotOutcome out;
  fs::create_directories(out_dir);
  std::vector<double> x, y;
  std::vector<std::string> names;
  for (const auto& row : r.rows) {
    if (!row.metrics.probe_top5_recall.value || !row.metrics.proxy_gfid.value) {
      out.skipped.push_back("scatter point " + row.variant + ": probe_top5_recall or proxy_gfid is null");
      continue;
    }
    x.push_back(*row.metrics.probe_top5_recall.value);
    y.push_back(*row.metrics.proxy_gfid.value);
    names.push_back(row.variant);
  }
  if (x.size() < 3) {
    out.skipped.push_back("scatter_top5_vs_gfid: fewer than 3 variants with probe_top5_recall and proxy_gfid");
  } else {
    const auto [xmin, xmax] = std::minmax_element(x.begin(), x.end());
    const auto [ymin, ymax] = std::minmax_element(y.begin(), y.end());
    Svg svg(*xmin, *xmax, *ymin, *ymax);
    svg.labels("Attribute probe vs generation", "probe top-5 recall", "proxy gFID");
    const Eigen::Map<const Eigen::VectorXd> vx(x.data(), static_cast<Index>(x.size())),
        vy(y.data(), static_cast<Index>(y.size()));
    const double mx = vx.mean(), my = vy.mean();
    const double sxx = (vx.array() - mx).square().sum();
    const double slope = sxx > 0 ? ((vx.array() - mx) * (vy.array() - my)).sum() / sxx : 0.0;
    const double icpt = my - slope * mx;
    svg.polyline({*xmin, *xmax}, {icpt + slope * *xmin, icpt + slope * *xmax}, "#d62728");
    for (std::size_t i = 0; i < x.size(); ++i) svg.point(x[i], y[i], names[i]);
    try {
      out.scatter_r = metrics::pearson(x, y);
      svg.text(80, 50, "Pearson r = " + fmt(*out.scatter_r, 4));
    } catch (const DomainError& e) {
      svg.text(80, 50, std::string("Pearson r undefined: ") + e.what());
    }
    const fs::path p = out_dir / "scatter_top5_vs_gfid.svg";
    svg.save(p);
    out.written.push_back(p);
  }

  for (const auto& [kind, key] : {std::pair{"vae", "total"}, std::pair{"flow", "loss"}}) {
    std::vector<Series> series;
    for (const auto& row : r.rows) {
      const fs::path& log = std::string(kind) == "vae" ? row.vae_log : row.flow_log;
      std::vector<json> entries;
      if (!log.empty() && fs::exists(log)) entries = read_jsonl(log);
      if (entries.empty()) {
        out.skipped.push_back(std::string("loss_") + kind + " " + row.variant + ": training log is empty or missing");
        continue;
      }
      series.push_back(smoothed(row.variant, entries, key));
    }
    const std::string file = std::string("loss_") + kind + ".svg";
    if (series.empty()) {
      out.skipped.push_back(file + ": no training logs");
      continue;
    }
    loss_plot(std::string(kind) == "vae" ? "VAE training loss" : "Flow training loss", series, out_dir / file);
    out.written.push_back(out_dir / file);
  }
  json idx{{"written", json::array()}, {"skipped", out.skipped}};
  for (const auto& p : out.written) idx["written"].push_back(p.filename().string());
  if (out.scatter_r) idx["scatter_r"] = *out.scatter_r;
  write_json(out_dir / "plots.json", idx);
  return out;
}

}  // namespace sendvae::orch
