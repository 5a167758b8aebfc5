#include "sendvae/vae.hpp"

#include <cmath>

#include "sendvae/checkpoint.hpp"
#include "sendvae/core/error.hpp"

namespace sendvae::vae {
namespace fs = std::filesystem;

void VaeConfig::validate() const {
  if (f < 1 || (f & (f - 1)) != 0) throw ConfigError("vae f must be a power of two, got " + std::to_string(f));
  if (canvas_size % f != 0) throw ConfigError("canvas size must be divisible by f");
  if (d < 1) throw ConfigError("vae d must be >= 1");
  if (base_width < 1) throw ConfigError("vae base_width must be >= 1");
}

int VaeConfig::levels() const {
  int l = 0;
  while ((1 << l) < f) ++l;
  return l;
}

nlohmann::json to_json(const VaeConfig& cfg) {
  return {{"f", cfg.f}, {"d", cfg.d}, {"base_width", cfg.base_width}, {"canvas_size", cfg.canvas_size}};
}

VaeConfig vae_config_from_json(const nlohmann::json& j) {
  VaeConfig c;
  c.f = j.value("f", c.f);
  c.d = j.value("d", c.d);
  c.base_width = j.value("base_width", c.base_width);
  c.canvas_size = j.value("canvas_size", c.canvas_size);
  c.validate();
  return c;
}

nlohmann::json to_json(const LossWeights& w) {
  return {{"mse", w.mse}, {"perceptual", w.perceptual}, {"kl", w.kl}, {"gan", w.gan}, {"gan_enabled", w.gan_enabled}};
}

LossWeights loss_weights_from_json(const nlohmann::json& j) {
  LossWeights w;
  w.mse = j.value("mse", w.mse);
  w.perceptual = j.value("perceptual", w.perceptual);
  w.kl = j.value("kl", w.kl);
  w.gan = j.value("gan", w.gan);
  w.gan_enabled = j.value("gan_enabled", w.gan_enabled);
  return w;
}

namespace {

Index width_at(const VaeConfig& cfg, int level) {
  return level == 0 ? cfg.base_width : 2 * cfg.base_width;
}

template <typename T>
void check_finite(const ad::Var<T>& v, const char* what) {
  if (!v.value().all_finite()) throw NumericError(std::string("non-finite activations in ") + what);
}

}  // namespace

template <typename T>
void init_vae(ParamStore<T>& ps, const VaeConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, {0xAE01}));
  const int L = cfg.levels();
  const Index top = width_at(cfg, L);
  nn::add_conv(ps, "vae.enc.in", 3, cfg.base_width, 3, rng);
  for (int l = 0; l < L; ++l) nn::add_conv(ps, "vae.enc.down" + std::to_string(l), width_at(cfg, l), width_at(cfg, l + 1), 3, rng);
  nn::add_conv(ps, "vae.enc.mid", top, top, 3, rng);
  nn::add_conv(ps, "vae.enc.out", top, 2 * cfg.d, 1, rng);
  nn::add_conv(ps, "vae.dec.in", cfg.d, top, 3, rng);
  nn::add_conv(ps, "vae.dec.mid", top, top, 3, rng);
  for (int l = L - 1; l >= 0; --l) nn::add_conv(ps, "vae.dec.up" + std::to_string(l), width_at(cfg, l + 1), width_at(cfg, l), 3, rng);
  nn::add_conv(ps, "vae.dec.out", cfg.base_width, 3, 3, rng);
}

template <typename T>
EncoderOutput<T> encode(const ParamStore<T>& ps, const VaeConfig& cfg, const ad::Var<T>& x) {
  if (x.shape().size() != 4 || x.dim(1) != 3 || x.dim(2) != cfg.canvas_size || x.dim(3) != cfg.canvas_size)
    throw ConfigError("encode: expected [B, 3, " + std::to_string(cfg.canvas_size) + ", " +
                      std::to_string(cfg.canvas_size) + "], got " + shape_str(x.shape()));
  auto h = ad::silu(nn::conv(ps, "vae.enc.in", x));
  for (int l = 0; l < cfg.levels(); ++l) h = ad::silu(nn::conv(ps, "vae.enc.down" + std::to_string(l), h, 2));
  h = ad::silu(nn::conv(ps, "vae.enc.mid", h));
  auto out = nn::conv(ps, "vae.enc.out", h);
  EncoderOutput<T> e{ad::slice(out, 1, 0, cfg.d),
                     ad::clamp(ad::slice(out, 1, cfg.d, cfg.d), T(kLogvarMin), T(kLogvarMax))};
  check_finite(e.mu, "encoder");
  check_finite(e.logvar, "encoder");
  return e;
}

template <typename T>
ad::Var<T> reparameterize(const ad::Var<T>& mu, const ad::Var<T>& logvar, const Tensor<T>& eps) {
  ad::detail::check_same(mu.shape(), eps.shape, "reparameterize");
  auto std_dev = ad::exp(ad::scale(logvar, T(0.5)));
  return ad::add(mu, ad::mul(std_dev, ad::constant(eps)));
}

template <typename T>
ad::Var<T> reparameterize(const ad::Var<T>& mu, const ad::Var<T>& logvar, Rng& rng) {
  Tensor<T> eps(mu.shape());
  for (Index i = 0; i < eps.size(); ++i) eps.data[i] = static_cast<T>(rng.normal());
  return reparameterize(mu, logvar, eps);
}

template <typename T>
ad::Var<T> decode(const ParamStore<T>& ps, const VaeConfig& cfg, const ad::Var<T>& z) {
  const Index s = cfg.latent_size();
  if (z.shape().size() != 4 || z.dim(1) != cfg.d || z.dim(2) != s || z.dim(3) != s)
    throw ConfigError("decode: expected latent [B, " + std::to_string(cfg.d) + ", " + std::to_string(s) + ", " +
                      std::to_string(s) + "], got " + shape_str(z.shape()));
  auto h = ad::silu(nn::conv(ps, "vae.dec.in", z));
  h = ad::silu(nn::conv(ps, "vae.dec.mid", h));
  for (int l = cfg.levels() - 1; l >= 0; --l)
    h = ad::silu(nn::conv(ps, "vae.dec.up" + std::to_string(l), ad::upsample2x(h)));
  auto out = ad::sigmoid(nn::conv(ps, "vae.dec.out", h));
  check_finite(out, "decoder");
  return out;
}

template <typename T>
ad::Var<T> kl_divergence(const ad::Var<T>& mu, const ad::Var<T>& logvar) {
  ad::detail::check_same(mu.shape(), logvar.shape(), "kl_divergence");
  const Index B = mu.dim(0);
  auto terms = ad::sub(ad::add(ad::square(mu), ad::exp(logvar)), ad::add_scalar(logvar, T(1)));
  return ad::scale(ad::sum(terms), T(0.5) / static_cast<T>(B));
}

template <typename T>
Reconstruction<T> reconstruction_losses(const Tensor<T>& x, const ad::Var<T>& x_hat, const teacher::Teacher& teacher,
                                        const Tensor<T>* x_features) {
  ad::detail::check_same(x.shape, x_hat.shape(), "reconstruction_losses");
  Reconstruction<T> r;
  r.mse = ad::mse(x_hat, x);
  Tensor<T> target;
  if (x_features) {
    target = *x_features;
  } else {
    ad::NoGradGuard guard;
    target = teacher::teacher_forward_var(teacher, ad::constant(x)).value();
  }
  r.perceptual = ad::mse(teacher::teacher_forward_var(teacher, x_hat), target);
  return r;
}

template <typename T>
void init_discriminator(ParamStore<T>& ps, int base_width, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0xD15C}));
  nn::add_conv(ps, "disc.c0", 3, base_width, 3, rng);
  nn::add_conv(ps, "disc.c1", base_width, 2 * base_width, 3, rng);
  nn::add_conv(ps, "disc.out", 2 * base_width, 1, 1, rng);
}

template <typename T>
ad::Var<T> discriminate(const ParamStore<T>& ps, const ad::Var<T>& x) {
  auto h = ad::silu(nn::conv(ps, "disc.c0", x, 2));
  h = ad::silu(nn::conv(ps, "disc.c1", h, 2));
  return nn::conv(ps, "disc.out", h);
}

template <typename T>
Adversarial<T> adversarial_losses(const ad::Var<T>& d_real, const ad::Var<T>& d_fake) {
  Adversarial<T> a;
  auto real_term = ad::mean(ad::relu(ad::add_scalar(ad::scale(d_real, T(-1)), T(1))));
  auto fake_term = ad::mean(ad::relu(ad::add_scalar(d_fake, T(1))));
  a.gan_d = ad::add(real_term, fake_term);
  a.gan_g = ad::scale(ad::mean(d_fake), T(-1));
  return a;
}

namespace {

template <typename Fn>
Tensor<float> chunked(const Tensor<float>& in, Index chunk, Fn&& fn) {
  const Index B = in.dim(0), per = in.size() / std::max<Index>(B, 1);
  Tensor<float> out;
  Index per_out = 0;
  for (Index b0 = 0; b0 < B; b0 += chunk) {
    const Index n = std::min(chunk, B - b0);
    Shape s = in.shape;
    s[0] = n;
    Tensor<float> part(s, in.data.segment(b0 * per, n * per));
    Tensor<float> y = fn(part);
    if (b0 == 0) {
      Shape os = y.shape;
      os[0] = B;
      out = Tensor<float>(os);
      per_out = y.size() / n;
    }
    out.data.segment(b0 * per_out, n * per_out) = y.data;
  }
  return out;
}

}  // namespace

Tensor<float> encode_mean(const ParamStore<float>& ps, const VaeConfig& cfg, const Tensor<float>& images, Index chunk) {
  ad::NoGradGuard guard;
  return chunked(images, chunk, [&](const Tensor<float>& x) { return encode(ps, cfg, ad::constant(x)).mu.value(); });
}

Tensor<float> decode_latents(const ParamStore<float>& ps, const VaeConfig& cfg, const Tensor<float>& z, Index chunk) {
  ad::NoGradGuard guard;
  return chunked(z, chunk, [&](const Tensor<float>& x) { return decode(ps, cfg, ad::constant(x)).value(); });
}

void save_checkpoint(const fs::path& dir, const ParamStore<float>& ps, const CheckpointInfo& info,
                     const AdamW<float>* opt) {
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  nlohmann::json m;
  m["kind"] = "vae";
  m["config"] = to_json(info.config);
  m["step"] = info.step;
  m["seed"] = info.seed;
  m["optimizer_state"] = opt != nullptr;
  m["tensors"] = save_params(ps, tmp / "params");
  if (opt) {
    save_moments<float>(opt->state(), tmp / "optimizer");
    m["optimizer_steps"] = opt->steps();
  }
  if (!info.extra.is_null()) m["extra"] = info.extra;
  write_json(tmp / "manifest.json", m);
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

CheckpointInfo read_checkpoint_info(const fs::path& dir) {
  auto m = read_json(dir / "manifest.json");
  CheckpointInfo info;
  info.config = vae_config_from_json(m.at("config"));
  info.step = m.value("step", std::int64_t{0});
  info.seed = m.value("seed", std::uint64_t{0});
  info.optimizer_state = m.value("optimizer_state", false);
  if (m.contains("extra")) info.extra = m["extra"];
  return info;
}

void load_checkpoint(const fs::path& dir, ParamStore<float>& ps, AdamW<float>* opt, const std::string& prefix) {
  auto m = read_json(dir / "manifest.json");
  nlohmann::json index = nlohmann::json::array();
  for (const auto& e : m.at("tensors")) {
    const std::string name = e.at("name");
    if (name.rfind(prefix, 0) == 0 && ps.contains(name)) index.push_back(e);
  }
  for (const auto& name : ps.names()) {
    if (name.rfind(prefix, 0) != 0) continue;
    bool found = false;
    for (const auto& e : index) found |= e.at("name") == name;
    if (!found) throw ConfigError("checkpoint " + dir.string() + " lacks parameter " + name);
  }
  load_params(ps, dir / "params", index);
  if (opt && m.value("optimizer_state", false)) {
    load_moments(*opt, ps, dir / "optimizer");
    opt->set_steps(m.value("optimizer_steps", std::int64_t{0}));
  }
}

#define SENDVAE_INSTANTIATE(T)                                                                                   \
  template void init_vae(ParamStore<T>&, const VaeConfig&, std::uint64_t);                                      \
  template EncoderOutput<T> encode(const ParamStore<T>&, const VaeConfig&, const ad::Var<T>&);                  \
  template ad::Var<T> reparameterize(const ad::Var<T>&, const ad::Var<T>&, const Tensor<T>&);                   \
  template ad::Var<T> reparameterize(const ad::Var<T>&, const ad::Var<T>&, Rng&);                               \
  template ad::Var<T> decode(const ParamStore<T>&, const VaeConfig&, const ad::Var<T>&);                        \
  template ad::Var<T> kl_divergence(const ad::Var<T>&, const ad::Var<T>&);                                      \
  template Reconstruction<T> reconstruction_losses(const Tensor<T>&, const ad::Var<T>&, const teacher::Teacher&, \
                                                   const Tensor<T>*);                                           \
  template void init_discriminator(ParamStore<T>&, int, std::uint64_t);                                         \
  template ad::Var<T> discriminate(const ParamStore<T>&, const ad::Var<T>&);                                    \
  template Adversarial<T> adversarial_losses(const ad::Var<T>&, const ad::Var<T>&);

SENDVAE_INSTANTIATE(float)
SENDVAE_INSTANTIATE(double)
#undef SENDVAE_INSTANTIATE

}  // namespace sendvae::vae
