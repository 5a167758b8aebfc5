#include "sendvae/flow.hpp"

#include <cmath>
#include <fstream>

#include "sendvae/checkpoint.hpp"
#include "sendvae/core/error.hpp"

namespace sendvae::flow {
namespace fs = std::filesystem;

namespace {
constexpr Index kTimeFeatures = 64;
}

void FlowConfig::validate(int latent_size) const {
  if (patch_size < 1 || latent_size % patch_size != 0) throw ConfigError("flow patch_size must divide the latent grid");
  if (depth < 1) throw ConfigError("flow depth must be >= 1");
  if (heads < 1 || width % heads != 0) throw ConfigError("flow heads must divide width");
  if (repa_enabled && (repa_layer < 0 || repa_layer >= depth)) throw ConfigError("repa_layer must be < depth");
  if (num_classes < 1) throw ConfigError("flow num_classes must be >= 1");
  if (label_dropout < 0 || label_dropout > 1) throw ConfigError("label_dropout must be in [0, 1]");
  if (ema_decay < 0 || ema_decay > 1) throw ConfigError("ema_decay must be in [0, 1]");
}

nlohmann::json to_json(const FlowConfig& c) {
  return {{"depth", c.depth},
          {"width", c.width},
          {"heads", c.heads},
          {"patch_size", c.patch_size},
          {"mlp_ratio", c.mlp_ratio},
          {"num_classes", c.num_classes},
          {"label_dropout", c.label_dropout},
          {"repa_enabled", c.repa_enabled},
          {"repa_layer", c.repa_layer},
          {"repa_weight", c.repa_weight},
          {"repa_dim", c.repa_dim},
          {"ema_decay", c.ema_decay},
          {"steps", c.steps},
          {"batch", c.batch},
          {"lr", c.lr},
          {"grad_clip", c.grad_clip},
          {"seed", c.seed},
          {"sigma_g", c.sigma_g}};
}

FlowConfig flow_config_from_json(const nlohmann::json& j) {
  FlowConfig c;
  c.depth = j.value("depth", c.depth);
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.label_dropout = j.value("label_dropout", c.label_dropout);
  c.repa_enabled = j.value("repa_enabled", c.repa_enabled);
  c.repa_layer = j.value("repa_layer", c.repa_layer);
  c.repa_weight = j.value("repa_weight", c.repa_weight);
  c.repa_dim = j.value("repa_dim", c.repa_dim);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  c.steps = j.value("steps", c.steps);
  c.batch = j.value("batch", c.batch);
  c.lr = j.value("lr", c.lr);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.seed = j.value("seed", c.seed);
  c.sigma_g = j.value("sigma_g", c.sigma_g);
  return c;
}

nlohmann::json to_json(const FlowLogEntry& e) {
  return {{"step", e.step}, {"loss", e.loss}, {"flow", e.flow}, {"repa", e.repa}};
}

template <typename T>
InterpolantSample<T> interpolant_targets(const Tensor<T>& z, const std::vector<double>& t, Rng& rng) {
  const Index B = z.dim(0), per = z.size() / B;
  if (t.size() != 1 && static_cast<Index>(t.size()) != B) throw ConfigError("interpolant_targets: t per sample");
  for (double v : t)
    if (!(v >= 0.0 && v <= 1.0)) throw DomainError("interpolant time must lie in [0, 1]");
  InterpolantSample<T> s;
  s.t.resize(static_cast<std::size_t>(B));
  s.epsilon = Tensor<T>(z.shape);
  for (Index i = 0; i < s.epsilon.size(); ++i) s.epsilon.data[i] = static_cast<T>(rng.normal());
  s.x_t = Tensor<T>(z.shape);
  s.velocity_target = Tensor<T>(z.shape, z.data - s.epsilon.data);
  for (Index b = 0; b < B; ++b) {
    const double tb = t.size() == 1 ? t[0] : t[static_cast<std::size_t>(b)];
    s.t[static_cast<std::size_t>(b)] = tb;
    s.x_t.data.segment(b * per, per) =
        static_cast<T>(tb) * z.data.segment(b * per, per) + static_cast<T>(1 - tb) * s.epsilon.data.segment(b * per, per);
  }
  return s;
}

template <typename T>
void init_flow(ParamStore<T>& ps, const FlowConfig& cfg, LatentSpec latent, std::uint64_t seed) {
  cfg.validate(latent.size);
  Rng rng(derive_seed(seed, {0xF10E}));
  const Index W = cfg.width, p = cfg.patch_size;
  const Index tokens = (latent.size / p) * (latent.size / p);
  const Index out = latent.channels * p * p;
  nn::add_linear(ps, "flow.embed", out, W, rng);
  ps.add("flow.pos", nn::normal_init<T>({tokens, W}, 0.02, rng));
  nn::add_linear(ps, "flow.t1", kTimeFeatures, W, rng);
  nn::add_linear(ps, "flow.t2", W, W, rng);
  ps.add("flow.y", nn::normal_init<T>({Index{cfg.num_classes + 1}, W}, 0.02, rng));
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string b = "flow.block" + std::to_string(l);
    nn::add_attention(ps, b + ".attn", W, rng);
    nn::add_mlp(ps, b + ".mlp", W, W * cfg.mlp_ratio, rng);
    ps.add(b + ".ada.w", Tensor<T>::zeros({W, 6 * W}));
    ps.add(b + ".ada.b", Tensor<T>::zeros({6 * W}));
  }
  ps.add("flow.final.ada.w", Tensor<T>::zeros({W, 2 * W}));
  ps.add("flow.final.ada.b", Tensor<T>::zeros({2 * W}));
  ps.add("flow.final.out.w", Tensor<T>::zeros({W, out}));
  ps.add("flow.final.out.b", Tensor<T>::zeros({out}));
  if (cfg.repa_enabled) {
    nn::add_linear(ps, "flow.repa.p1", W, W, rng);
    nn::add_linear(ps, "flow.repa.p2", W, cfg.repa_dim, rng);
  }
}

namespace {

template <typename T>
Tensor<T> time_features(const std::vector<double>& t) {
  const Index B = static_cast<Index>(t.size()), half = kTimeFeatures / 2;
  Tensor<T> f(Shape{B, kTimeFeatures});
  for (Index b = 0; b < B; ++b)
    for (Index i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double a = 1000.0 * t[static_cast<std::size_t>(b)] * freq;
      f.data[b * kTimeFeatures + i] = static_cast<T>(std::cos(a));
      f.data[b * kTimeFeatures + half + i] = static_cast<T>(std::sin(a));
    }
  return f;
}

// x * (1 + scale) + shift with [B, W] modulation broadcast over tokens.
template <typename T>
ad::Var<T> modulate(const ad::Var<T>& x, const ad::Var<T>& shift, const ad::Var<T>& scale) {
  const Index N = x.dim(1);
  return ad::add(ad::mul(x, ad::add_scalar(ad::expand_tokens(scale, N), T(1))), ad::expand_tokens(shift, N));
}

template <typename T>
ad::Var<T> plain_norm(const ad::Var<T>& x) {
  const Index W = x.shape().back();
  return ad::layer_norm(x, ad::constant(Tensor<T>::constant({W}, T(1))), ad::constant(Tensor<T>::zeros({W})),
                        T(1e-6));
}

}  // namespace

template <typename T>
FlowOutput<T> flow_forward(const ParamStore<T>& ps, const FlowConfig& cfg, const ad::Var<T>& x_t,
                           const std::vector<double>& t, const std::vector<int>& labels, bool want_hidden) {
  const Index B = x_t.dim(0), C = x_t.dim(1), H = x_t.dim(2), W = cfg.width;
  if (static_cast<Index>(t.size()) != B || static_cast<Index>(labels.size()) != B)
    throw ConfigError("flow_forward: one t and one label per sample");
  for (int y : labels)
    if (y < 0 || y > cfg.num_classes) throw ConfigError("flow_forward: label out of range");
  auto h = nn::linear(ps, "flow.embed", nn::patchify(x_t, cfg.patch_size));
  h = ad::add_broadcast_batch(h, ps.get("flow.pos"));
  auto temb = nn::linear(ps, "flow.t2", ad::silu(nn::linear(ps, "flow.t1", ad::constant(time_features<T>(t)))));
  auto c = ad::silu(ad::add(temb, ad::embedding(ps.get("flow.y"), labels)));
  FlowOutput<T> out;
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string b = "flow.block" + std::to_string(l);
    auto mod = nn::linear(ps, b + ".ada", c);
    auto part = [&](int k) { return ad::slice(mod, 1, k * W, W); };
    auto a = nn::attention(ps, b + ".attn", modulate(plain_norm(h), part(0), part(1)), cfg.heads);
    h = ad::add(h, ad::mul(a, ad::expand_tokens(part(2), h.dim(1))));
    auto m = nn::mlp(ps, b + ".mlp", modulate(plain_norm(h), part(3), part(4)));
    h = ad::add(h, ad::mul(m, ad::expand_tokens(part(5), h.dim(1))));
    if (want_hidden && l == cfg.repa_layer) out.hidden = h;
  }
  auto fmod = nn::linear(ps, "flow.final.ada", c);
  auto y = nn::linear(ps, "flow.final.out", modulate(plain_norm(h), ad::slice(fmod, 1, 0, W), ad::slice(fmod, 1, W, W)));
  out.velocity = nn::unpatchify(y, C, H, x_t.dim(3), cfg.patch_size);
  return out;
}

template <typename T>
FlowLossResult<T> flow_loss(const VelocityModel<T>& model, const Tensor<T>& z, const std::vector<int>& labels,
                            double label_dropout, int null_label, Rng& rng) {
  const Index B = z.dim(0);
  std::vector<double> t(static_cast<std::size_t>(B));
  for (auto& v : t) v = rng.uniform();
  FlowLossResult<T> r;
  r.used_labels = labels;
  for (auto& y : r.used_labels)
    if (rng.uniform() < label_dropout) y = null_label;
  r.sample = interpolant_targets(z, t, rng);
  auto v = model(ad::constant(r.sample.x_t), r.sample.t, r.used_labels);
  r.loss = ad::mse(v, r.sample.velocity_target);
  return r;
}

template <typename T>
Tensor<T> pool_tokens(const Tensor<T>& feats, Index grid, Index target_grid) {
  if (grid == target_grid) return feats;
  if (grid % target_grid != 0) throw ConfigError("pool_tokens: grids are not commensurate");
  const Index B = feats.dim(0), D = feats.dim(2), k = grid / target_grid;
  Tensor<T> out(Shape{B, target_grid * target_grid, D});
  const T inv = T(1) / static_cast<T>(k * k);
  for (Index b = 0; b < B; ++b)
    for (Index y = 0; y < grid; ++y)
      for (Index x = 0; x < grid; ++x) {
        const Index src = (b * grid * grid + y * grid + x) * D;
        const Index dst = (b * target_grid * target_grid + (y / k) * target_grid + x / k) * D;
        out.data.segment(dst, D) += inv * feats.data.segment(src, D);
      }
  return out;
}

template <typename T>
ad::Var<T> repa_regularizer(const ParamStore<T>& ps, const ad::Var<T>& hidden, const Tensor<T>& teacher_feats) {
  auto proj = nn::linear(ps, "flow.repa.p2", ad::silu(nn::linear(ps, "flow.repa.p1", hidden)));
  if (proj.dim(1) != teacher_feats.dim(1))
    throw ConfigError("repa_regularizer: " + std::to_string(proj.dim(1)) + " tokens vs " +
                      std::to_string(teacher_feats.dim(1)) + " teacher patches");
  return ad::cosine_alignment_loss(proj, teacher_feats, T(1e-8));
}

template <typename T>
Tensor<T> cfg_velocity(const Tensor<T>& v_cond, const Tensor<T>& v_uncond, double w) {
  if (v_cond.shape != v_uncond.shape) throw ConfigError("cfg_velocity: shape mismatch");
  return Tensor<T>(v_cond.shape, v_uncond.data + static_cast<T>(w) * (v_cond.data - v_uncond.data));
}

template <typename T>
Tensor<T> integrate(const VelocityField<T>& field, Shape shape, const SamplerConfig& cfg, Rng& rng) {
  if (cfg.n_steps < 1) throw DomainError("sampler needs n_steps >= 1");
  Tensor<T> x(std::move(shape));
  for (Index i = 0; i < x.size(); ++i) x.data[i] = static_cast<T>(rng.normal());
  const double dt = 1.0 / cfg.n_steps;
  for (int k = 0; k < cfg.n_steps; ++k) {
    const double t = k * dt;
    Tensor<T> v = field(x, t);
    const bool last = k == cfg.n_steps - 1;
    if (cfg.mode == SamplerMode::kOde || last) {
      x.data += static_cast<T>(dt) * v.data;
      continue;
    }
    const double g = cfg.sigma_g * (1.0 - t);
    // Score from velocity: s = (t v - x) / (1 - t).
    ArrayX<T> score = (static_cast<T>(t) * v.data - x.data) / static_cast<T>(1.0 - t);
    x.data += static_cast<T>(dt) * (v.data + static_cast<T>(0.5 * g * g) * score);
    const T noise = static_cast<T>(g * std::sqrt(dt));
    for (Index i = 0; i < x.size(); ++i) x.data[i] += noise * static_cast<T>(rng.normal());
  }
  return x;
}

Tensor<float> sample(const FlowState& state, const FlowConfig& cfg, LatentSpec latent, const std::vector<int>& labels,
                     const SamplerConfig& scfg, Rng& rng) {
  const Index n = static_cast<Index>(labels.size());
  const bool guided = scfg.cfg_scale != 1.0;
  VelocityField<float> field = [&](const Tensor<float>& x, double t) {
    ad::NoGradGuard guard;
    if (!guided)
      return flow_forward(state.ema, cfg, ad::constant(x), std::vector<double>(static_cast<std::size_t>(n), t), labels)
          .velocity.value();
    Shape s2 = x.shape;
    s2[0] = 2 * n;
    Tensor<float> x2(s2);
    x2.data.head(x.size()) = x.data;
    x2.data.tail(x.size()) = x.data;
    std::vector<int> y2 = labels;
    y2.insert(y2.end(), labels.size(), cfg.num_classes);
    auto v = flow_forward(state.ema, cfg, ad::constant(x2), std::vector<double>(static_cast<std::size_t>(2 * n), t), y2)
                 .velocity.value();
    Tensor<float> vc(x.shape, v.data.head(x.size())), vu(x.shape, v.data.tail(x.size()));
    return cfg_velocity(vc, vu, scfg.cfg_scale);
  };
  return integrate(field, {n, latent.channels, latent.size, latent.size}, scfg, rng);
}

void ema_update(ParamStore<float>& ema, const ParamStore<float>& params, double decay) {
  const float d = static_cast<float>(decay);
  for (const auto& name : ema.names()) {
    auto& e = ema.get(name).mutable_value().data;
    e = d * e + (1.0f - d) * params.get(name).value().data;
  }
}

namespace {

void write_flow_log(const fs::path& path, const std::vector<FlowLogEntry>& log) {
  std::ofstream f(path, std::ios::trunc);
  for (const auto& e : log) f << to_json(e).dump() << "\n";
}

std::vector<FlowLogEntry> read_flow_log(const fs::path& path) {
  std::vector<FlowLogEntry> log;
  std::ifstream f(path);
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    log.push_back({j.at("step"), j.at("loss"), j.at("flow"), j.at("repa")});
  }
  return log;
}

ParamStore<float> frozen_copy(const ParamStore<float>& ps) {
  auto c = ps.cast<float>();
  c.freeze();
  return c;
}

}  // namespace

void save_flow(const fs::path& dir, const FlowState& state, const FlowConfig& cfg, LatentSpec latent,
               const AdamW<float>* opt) {
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  nlohmann::json m;
  m["kind"] = "flow";
  m["config"] = to_json(cfg);
  m["latent"] = {{"channels", latent.channels}, {"size", latent.size}};
  m["step"] = state.step;
  m["seed"] = cfg.seed;
  m["tensors"] = save_params(state.params, tmp / "params");
  m["ema_tensors"] = save_params(state.ema, tmp / "ema");
  m["optimizer_state"] = opt != nullptr;
  if (opt) {
    save_moments<float>(opt->state(), tmp / "optimizer");
    m["optimizer_steps"] = opt->steps();
  }
  write_json(tmp / "manifest.json", m);
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

FlowState load_flow(const fs::path& dir, FlowConfig* cfg_out, LatentSpec* latent_out, AdamW<float>* opt) {
  auto m = read_json(dir / "manifest.json");
  if (m.value("kind", "") != "flow") throw ConfigError(dir.string() + " is not a flow checkpoint");
  const FlowConfig cfg = flow_config_from_json(m.at("config"));
  const LatentSpec latent{m.at("latent").at("channels"), m.at("latent").at("size")};
  FlowState st;
  init_flow(st.params, cfg, latent, cfg.seed);
  load_params(st.params, dir / "params", m.at("tensors"));
  st.ema = frozen_copy(st.params);
  load_params(st.ema, dir / "ema", m.at("ema_tensors"));
  st.step = m.at("step");
  if (opt && m.value("optimizer_state", false)) {
    load_moments(*opt, st.params, dir / "optimizer");
    opt->set_steps(m.value("optimizer_steps", std::int64_t{0}));
  }
  if (cfg_out) *cfg_out = cfg;
  if (latent_out) *latent_out = latent;
  return st;
}

FlowTrainResult train_flow(const Tensor<float>& latents, const std::vector<int>& labels, const FlowConfig& cfg,
                           const Tensor<float>* teacher_feats, const FlowTrainOptions& opts) {
  if (latents.ndim() != 4 || latents.dim(2) != latents.dim(3)) throw ConfigError("train_flow: latents must be [M, C, h, h]");
  const LatentSpec latent{static_cast<int>(latents.dim(1)), static_cast<int>(latents.dim(2))};
  cfg.validate(latent.size);
  const Index M = latents.dim(0), per = latents.size() / M;
  if (static_cast<Index>(labels.size()) != M) throw ConfigError("train_flow: one label per latent");
  if (!latents.all_finite()) throw NumericError("train_flow: non-finite latents");
  const Index token_grid = latent.size / cfg.patch_size;
  Index feat_grid = 0;
  if (cfg.repa_enabled) {
    if (!teacher_feats || teacher_feats->dim(0) != M) throw ConfigError("REPA needs teacher features per latent");
    feat_grid = static_cast<Index>(std::llround(std::sqrt(static_cast<double>(teacher_feats->dim(1)))));
    if (teacher_feats->dim(2) != cfg.repa_dim) throw ConfigError("repa_dim must equal the teacher feature dim");
  }

  FlowTrainResult res;
  init_flow(res.state.params, cfg, latent, cfg.seed);
  res.state.ema = frozen_copy(res.state.params);
  AdamW<float> opt({.lr = cfg.lr, .weight_decay = 0.0, .grad_clip = cfg.grad_clip});

  const fs::path ckpt = opts.out_dir.empty() ? fs::path() : opts.out_dir / "checkpoint";
  const fs::path log_path = opts.out_dir.empty() ? fs::path() : opts.out_dir / "train_log.jsonl";
  if (opts.resume && !ckpt.empty() && fs::exists(ckpt / "manifest.json")) {
    res.state = load_flow(ckpt, nullptr, nullptr, &opt);
    res.log = read_flow_log(log_path);
    while (!res.log.empty() && res.log.back().step >= res.state.step) res.log.pop_back();
  }
  if (!opts.out_dir.empty()) fs::create_directories(opts.out_dir);
  auto save = [&](const fs::path& where) {
    if (where.empty()) return;
    save_flow(where, res.state, cfg, latent, &opt);
    write_flow_log(log_path, res.log);
  };

  VelocityModel<float> model;
  ad::Var<float> hidden;
  model = [&](const ad::Var<float>& x, const std::vector<double>& t, const std::vector<int>& y) {
    auto o = flow_forward(res.state.params, cfg, x, t, y, cfg.repa_enabled);
    hidden = o.hidden;
    return o.velocity;
  };

  const std::int64_t start = res.state.step;
  std::int64_t step = start;
  for (; step < cfg.steps; ++step) {
    if (opts.stop_after >= 0 && step - start >= opts.stop_after) break;
    Rng rng(derive_seed(cfg.seed, {0xF1A7, static_cast<std::uint64_t>(step)}));
    std::vector<Index> rows;
    std::vector<int> ys;
    Tensor<float> z(Shape{cfg.batch, latent.channels, latent.size, latent.size});
    for (int i = 0; i < cfg.batch; ++i) {
      const Index r = static_cast<Index>(rng.below(static_cast<std::uint64_t>(M)));
      rows.push_back(r);
      ys.push_back(labels[static_cast<std::size_t>(r)]);
      z.data.segment(i * per, per) = latents.data.segment(r * per, per);
    }
    auto fl = flow_loss(model, z, ys, cfg.label_dropout, cfg.num_classes, rng);
    FlowLogEntry e{step, 0, fl.loss.item(), 0};
    ad::Var<float> total = fl.loss;
    if (cfg.repa_enabled) {
      const Index N = teacher_feats->dim(1), D = teacher_feats->dim(2);
      Tensor<float> f(Shape{cfg.batch, N, D});
      for (int i = 0; i < cfg.batch; ++i)
        f.data.segment(i * N * D, N * D) = teacher_feats->data.segment(rows[static_cast<std::size_t>(i)] * N * D, N * D);
      auto rp = repa_regularizer(res.state.params, hidden, pool_tokens(f, feat_grid, token_grid));
      e.repa = rp.item();
      total = ad::weighted_sum<float>({{fl.loss, 1.0f}, {rp, static_cast<float>(cfg.repa_weight)}});
    }
    e.loss = total.item();
    if (!std::isfinite(e.loss)) {
      save(opts.out_dir.empty() ? fs::path() : opts.out_dir / "last_good");
      throw NumericError("non-finite flow loss at step " + std::to_string(step));
    }
    res.state.params.zero_grad();
    ad::backward(total);
    opt.step(res.state.params);
    ema_update(res.state.ema, res.state.params, cfg.ema_decay);
    res.state.step = step + 1;
    res.log.push_back(e);
    if (opts.on_step) opts.on_step(e);
    if (opts.checkpoint_every > 0 && (step + 1) % opts.checkpoint_every == 0 && step + 1 < cfg.steps) save(ckpt);
  }
  res.finished = step >= cfg.steps;
  res.state.params.zero_grad();
  save(ckpt);
  return res;
}

#define SENDVAE_INSTANTIATE(T)                                                                                        \
  template InterpolantSample<T> interpolant_targets(const Tensor<T>&, const std::vector<double>&, Rng&);             \
  template void init_flow(ParamStore<T>&, const FlowConfig&, LatentSpec, std::uint64_t);                             \
  template FlowOutput<T> flow_forward(const ParamStore<T>&, const FlowConfig&, const ad::Var<T>&,                    \
                                      const std::vector<double>&, const std::vector<int>&, bool);                    \
  template FlowLossResult<T> flow_loss(const VelocityModel<T>&, const Tensor<T>&, const std::vector<int>&, double,   \
                                       int, Rng&);                                                                   \
  template Tensor<T> pool_tokens(const Tensor<T>&, Index, Index);                                                    \
  template ad::Var<T> repa_regularizer(const ParamStore<T>&, const ad::Var<T>&, const Tensor<T>&);                   \
  template Tensor<T> cfg_velocity(const Tensor<T>&, const Tensor<T>&, double);                                       \
  template Tensor<T> integrate(const VelocityField<T>&, Shape, const SamplerConfig&, Rng&);

SENDVAE_INSTANTIATE(float)
SENDVAE_INSTANTIATE(double)
#undef SENDVAE_INSTANTIATE

}  // namespace sendvae::flow
