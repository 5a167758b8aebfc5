#include "sendvae/align.hpp"

#include <cmath>
#include <fstream>

#include "sendvae/checkpoint.hpp"
#include "sendvae/core/error.hpp"

namespace sendvae::align {
namespace fs = std::filesystem;

template <typename T>
ad::Var<T> mix_noise(const ad::Var<T>& z, const std::vector<double>& alpha, const Tensor<T>& eps) {
  ad::detail::check_same(z.shape(), eps.shape, "mix_noise");
  const Index B = z.dim(0), per = z.size() / B;
  if (static_cast<Index>(alpha.size()) != B) throw ConfigError("mix_noise: one alpha per sample required");
  Tensor<T> a(z.shape()), noise(z.shape());
  for (Index b = 0; b < B; ++b) {
    const T ab = static_cast<T>(alpha[static_cast<std::size_t>(b)]);
    a.data.segment(b * per, per).setConstant(ab);
    noise.data.segment(b * per, per) = (T(1) - ab) * eps.data.segment(b * per, per);
  }
  return ad::add(ad::mul(ad::constant(std::move(a)), z), ad::constant(std::move(noise)));
}

template <typename T>
NoisyLatent<T> inject_noise(const ad::Var<T>& z, Rng& rng, bool enabled) {
  NoisyLatent<T> out;
  const Index B = z.dim(0);
  if (!enabled) {
    out.z_t = z;
    out.alpha.assign(static_cast<std::size_t>(B), 1.0);
    return out;
  }
  for (Index b = 0; b < B; ++b) out.alpha.push_back(rng.uniform());
  out.epsilon_seed = rng.next_u64();
  Rng eps_rng(out.epsilon_seed);
  Tensor<T> eps(z.shape());
  for (Index i = 0; i < eps.size(); ++i) eps.data[i] = static_cast<T>(eps_rng.normal());
  out.z_t = mix_noise(z, out.alpha, eps);
  return out;
}

template <typename T>
ad::Var<T> alignment_loss(const ad::Var<T>& mapped, const Tensor<T>& teacher_feats) {
  if (mapped.shape() != teacher_feats.shape)
    throw ConfigError("alignment_loss: mapped " + shape_str(mapped.shape()) + " vs teacher " +
                      shape_str(teacher_feats.shape));
  return ad::cosine_alignment_loss(mapped, teacher_feats, T(1e-8));
}

void AlignConfig::validate() const {
  if (!(lambda_align >= 0)) throw ConfigError("lambda_align must be >= 0");
  if (steps < 0 || batch < 1) throw ConfigError("align steps must be >= 0 and batch >= 1");
}

nlohmann::json to_json(const AlignConfig& c) {
  return {{"lambda_align", c.lambda_align},
          {"noise_enabled", c.noise_enabled},
          {"mapper", mapper::to_json(c.mapper)},
          {"weights", vae::to_json(c.weights)},
          {"lr", c.optimizer.lr},
          {"beta1", c.optimizer.beta1},
          {"beta2", c.optimizer.beta2},
          {"weight_decay", c.optimizer.weight_decay},
          {"grad_clip", c.optimizer.grad_clip},
          {"steps", c.steps},
          {"batch", c.batch},
          {"seed", c.seed}};
}

AlignConfig align_config_from_json(const nlohmann::json& j) {
  AlignConfig c;
  c.lambda_align = j.value("lambda_align", c.lambda_align);
  c.noise_enabled = j.value("noise_enabled", c.noise_enabled);
  if (j.contains("mapper")) c.mapper = mapper::mapper_config_from_json(j["mapper"]);
  if (j.contains("weights")) c.weights = vae::loss_weights_from_json(j["weights"]);
  c.optimizer.lr = j.value("lr", c.optimizer.lr);
  c.optimizer.beta1 = j.value("beta1", c.optimizer.beta1);
  c.optimizer.beta2 = j.value("beta2", c.optimizer.beta2);
  c.optimizer.weight_decay = j.value("weight_decay", c.optimizer.weight_decay);
  c.optimizer.grad_clip = j.value("grad_clip", c.optimizer.grad_clip);
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

double total_objective(LossBreakdown& p, const AlignConfig& cfg) {
  const auto& w = cfg.weights;
  p.total = cfg.lambda_align * p.align + w.mse * p.mse + w.perceptual * p.perceptual + w.kl * p.kl +
            (w.gan_enabled ? w.gan * p.gan_g : 0.0);
  return p.total;
}

nlohmann::json to_json(const LogEntry& e) {
  return {{"step", e.step},
          {"mse", e.parts.mse},
          {"perceptual", e.parts.perceptual},
          {"kl", e.parts.kl},
          {"align", e.parts.align},
          {"total", e.parts.total},
          {"alpha_mean", e.alpha_mean},
          {"gan_g", e.parts.gan_g},
          {"gan_d", e.parts.gan_d}};
}

namespace {

LogEntry log_entry_from_json(const nlohmann::json& j) {
  LogEntry e;
  e.step = j.at("step");
  e.parts.mse = j.at("mse");
  e.parts.perceptual = j.at("perceptual");
  e.parts.kl = j.at("kl");
  e.parts.align = j.at("align");
  e.parts.total = j.at("total");
  e.parts.gan_g = j.value("gan_g", 0.0);
  e.parts.gan_d = j.value("gan_d", 0.0);
  e.alpha_mean = j.at("alpha_mean");
  return e;
}

Tensor<float> gather_images(const synth::ImageBatch& data, const std::vector<Index>& rows) {
  const Index per = data.pixels.size() / data.count();
  Shape s = data.pixels.shape;
  s[0] = static_cast<Index>(rows.size());
  Tensor<float> out(s);
  for (std::size_t i = 0; i < rows.size(); ++i)
    out.data.segment(static_cast<Index>(i) * per, per) = data.pixels.data.segment(rows[i] * per, per);
  return out;
}

void write_log(const fs::path& path, const std::vector<LogEntry>& log) {
  std::ofstream f(path, std::ios::trunc);
  for (const auto& e : log) f << to_json(e).dump() << "\n";
}

std::vector<LogEntry> read_log(const fs::path& path) {
  std::vector<LogEntry> log;
  std::ifstream f(path);
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) log.push_back(log_entry_from_json(nlohmann::json::parse(line)));
  return log;
}

}  // namespace

ParamStore<float> make_params(const vae::VaeConfig& vcfg, const AlignConfig& cfg, int teacher_dim) {
  ParamStore<float> ps;
  vae::init_vae(ps, vcfg, cfg.seed);
  if (cfg.uses_mapper()) {
    auto m = cfg.mapper;
    m.out_dim = teacher_dim;
    mapper::init_mapper(ps, m, vcfg.d, vcfg.latent_size(), cfg.seed);
  }
  if (cfg.weights.gan_enabled) vae::init_discriminator(ps, vcfg.base_width, cfg.seed);
  return ps;
}

StepTensors objective_on_batch(const ParamStore<float>& ps, const vae::VaeConfig& vcfg, const Tensor<float>& x,
                               const teacher::Teacher& teacher, const AlignConfig& cfg, Rng& rng) {
  StepTensors st;
  Tensor<float> feats;
  {
    ad::NoGradGuard guard;
    feats = teacher::teacher_forward_var(teacher, ad::constant(x)).value();
  }
  auto enc = vae::encode(ps, vcfg, ad::constant(x));
  auto z = vae::reparameterize(enc.mu, enc.logvar, rng);
  auto x_hat = vae::decode(ps, vcfg, z);
  auto rec = vae::reconstruction_losses(x, x_hat, teacher, &feats);
  auto kl = vae::kl_divergence(enc.mu, enc.logvar);
  const auto& w = cfg.weights;
  std::vector<std::pair<ad::Var<float>, float>> terms{{rec.mse, static_cast<float>(w.mse)},
                                                      {rec.perceptual, static_cast<float>(w.perceptual)},
                                                      {kl, static_cast<float>(w.kl)}};
  st.parts.mse = rec.mse.item();
  st.parts.perceptual = rec.perceptual.item();
  st.parts.kl = kl.item();
  if (cfg.uses_mapper()) {
    auto noisy = inject_noise(z, rng, cfg.noise_enabled);
    auto mapped = mapper::mapper_forward(ps, cfg.mapper, noisy.z_t, feats.dim(1));
    auto al = alignment_loss(mapped, feats);
    terms.emplace_back(al, static_cast<float>(cfg.lambda_align));
    st.parts.align = al.item();
    double s = 0;
    for (double a : noisy.alpha) s += a;
    st.alpha_mean = s / static_cast<double>(noisy.alpha.size());
  }
  if (w.gan_enabled) {
    auto g = vae::adversarial_losses(vae::discriminate(ps, ad::constant(x)), vae::discriminate(ps, x_hat));
    terms.emplace_back(g.gan_g, static_cast<float>(w.gan));
    st.parts.gan_g = g.gan_g.item();
  }
  st.total = ad::weighted_sum(terms);
  total_objective(st.parts, cfg);
  return st;
}

namespace {

// Hinge update of the discriminator on detached reconstructions.
void discriminator_step(ParamStore<float>& ps, AdamW<float>& dopt, const vae::VaeConfig& vcfg, const Tensor<float>& x,
                        Rng& rng, LossBreakdown& parts) {
  Tensor<float> x_hat;
  {
    ad::NoGradGuard guard;
    auto enc = vae::encode(ps, vcfg, ad::constant(x));
    x_hat = vae::decode(ps, vcfg, vae::reparameterize(enc.mu, enc.logvar, rng)).value();
  }
  auto g = vae::adversarial_losses(vae::discriminate(ps, ad::constant(x)), vae::discriminate(ps, ad::constant(x_hat)));
  parts.gan_d = g.gan_d.item();
  ps.zero_grad();
  ad::backward(g.gan_d);
  dopt.step(ps);
}

}  // namespace

TrainResult train_vae_aligned(const ParamStore<float>* init, const vae::VaeConfig& vcfg,
                              const synth::ImageBatch& dataset, const teacher::Teacher& teacher,
                              const AlignConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  vcfg.validate();
  if (dataset.canvas() != vcfg.canvas_size) throw ConfigError("dataset canvas does not match the VAE config");
  if (teacher.canvas() != vcfg.canvas_size) throw ConfigError("teacher canvas does not match the VAE config");
  if (cfg.uses_mapper() && cfg.mapper.tokens(vcfg.latent_size()) != teacher.grid().count())
    throw ConfigError("mapper patch count does not match the teacher patch grid");

  TrainResult res;
  res.params = make_params(vcfg, cfg, teacher.dim());
  if (init) {
    for (const auto& name : res.params.names()) {
      if (name.rfind("vae.", 0) != 0) continue;
      if (!init->contains(name) || init->get(name).shape() != res.params.get(name).shape())
        throw ConfigError("init checkpoint is incompatible with the VAE config at " + name);
    }
    res.params.copy_from(*init, "vae.");
  }

  // Generator and discriminator parameters are updated by separate optimizers.
  std::vector<std::string> disc_names;
  for (const auto& n : res.params.names())
    if (n.rfind("disc.", 0) == 0) disc_names.push_back(n);
  AdamW<float> opt(cfg.optimizer), dopt(cfg.optimizer);

  const fs::path ckpt = opts.out_dir.empty() ? fs::path() : opts.out_dir / "checkpoint";
  const fs::path log_path = opts.out_dir.empty() ? fs::path() : opts.out_dir / "train_log.jsonl";
  std::int64_t start = 0;
  if (opts.resume && !ckpt.empty() && fs::exists(ckpt / "manifest.json")) {
    auto info = vae::read_checkpoint_info(ckpt);
    vae::load_checkpoint(ckpt, res.params, &opt);
    start = info.step;
    res.log = read_log(log_path);
    while (!res.log.empty() && res.log.back().step >= start) res.log.pop_back();
  }
  if (!opts.out_dir.empty()) fs::create_directories(opts.out_dir);

  auto save = [&](std::int64_t step, const fs::path& where) {
    if (where.empty()) return;
    vae::CheckpointInfo info{vcfg, step, cfg.seed, true, {{"align", to_json(cfg)}, {"teacher", teacher.id()}}};
    vae::save_checkpoint(where, res.params, info, &opt);
    write_log(log_path, res.log);
  };

  auto set_trainable = [&](bool generator) {
    for (const auto& n : res.params.names()) {
      const bool is_disc = n.rfind("disc.", 0) == 0;
      res.params.get(n).node->requires_grad = generator ? !is_disc : is_disc;
    }
  };

  const Index n = dataset.count();
  std::int64_t step = start;
  for (; step < cfg.steps; ++step) {
    if (opts.stop_after >= 0 && step - start >= opts.stop_after) break;
    Rng rng(derive_seed(cfg.seed, {0xA11C, static_cast<std::uint64_t>(step)}));
    std::vector<Index> rows;
    for (int i = 0; i < cfg.batch; ++i) rows.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
    const Tensor<float> x = gather_images(dataset, rows);

    if (!disc_names.empty()) set_trainable(true);
    auto st = objective_on_batch(res.params, vcfg, x, teacher, cfg, rng);
    if (!std::isfinite(st.parts.total)) {
      save(step, opts.out_dir.empty() ? fs::path() : opts.out_dir / "last_good");
      throw NumericError("non-finite training loss at step " + std::to_string(step));
    }
    res.params.zero_grad();
    ad::backward(st.total);
    opt.step(res.params);
    if (!disc_names.empty()) {
      set_trainable(false);
      discriminator_step(res.params, dopt, vcfg, x, rng, st.parts);
      set_trainable(true);
    }
    LogEntry e{step, st.parts, st.alpha_mean};
    res.log.push_back(e);
    if (opts.on_step) opts.on_step(e);
    if (opts.checkpoint_every > 0 && (step + 1) % opts.checkpoint_every == 0 && step + 1 < cfg.steps)
      save(step + 1, ckpt);
  }
  res.steps_done = step;
  res.finished = step >= cfg.steps;
  res.params.zero_grad();
  save(step, ckpt);
  return res;
}

template NoisyLatent<float> inject_noise(const ad::Var<float>&, Rng&, bool);
template NoisyLatent<double> inject_noise(const ad::Var<double>&, Rng&, bool);
template ad::Var<float> mix_noise(const ad::Var<float>&, const std::vector<double>&, const Tensor<float>&);
template ad::Var<double> mix_noise(const ad::Var<double>&, const std::vector<double>&, const Tensor<double>&);
template ad::Var<float> alignment_loss(const ad::Var<float>&, const Tensor<float>&);
template ad::Var<double> alignment_loss(const ad::Var<double>&, const Tensor<double>&);

}  // namespace sendvae::align
