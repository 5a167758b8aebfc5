#pragma once

// Convolutional VAE with downsampling factor f (a power of two) and d latent
// channels, plus the non-adversarial and the hinge-adversarial loss terms.
// Parameters live under the "vae." namespace; the optional patch
// discriminator under "disc.".

#include <cstdint>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "sendvae/core/nn.hpp"
#include "sendvae/teacher.hpp"

namespace sendvae::vae {

struct VaeConfig {
  int f = 4;
  int d = 4;
  int base_width = 16;
  int canvas_size = 32;

  void validate() const;
  int latent_size() const { return canvas_size / f; }
  int levels() const;
  Shape latent_shape(Index batch) const { return {batch, d, latent_size(), latent_size()}; }
};

nlohmann::json to_json(const VaeConfig& cfg);
VaeConfig vae_config_from_json(const nlohmann::json& j);

struct LossWeights {
  double mse = 1.0;
  double perceptual = 0.5;
  double kl = 1e-4;
  double gan = 0.1;
  bool gan_enabled = false;
};

nlohmann::json to_json(const LossWeights& w);
LossWeights loss_weights_from_json(const nlohmann::json& j);

inline constexpr double kLogvarMin = -30.0;
inline constexpr double kLogvarMax = 20.0;

template <typename T>
struct EncoderOutput {
  ad::Var<T> mu;      // [B, d, h, w]
  ad::Var<T> logvar;  // [B, d, h, w], clamped
};

template <typename T>
void init_vae(ParamStore<T>& ps, const VaeConfig& cfg, std::uint64_t seed);

template <typename T>
EncoderOutput<T> encode(const ParamStore<T>& ps, const VaeConfig& cfg, const ad::Var<T>& x);

// z = mu + exp(0.5 logvar) * eps with eps supplied ([B, d, h, w]).
template <typename T>
ad::Var<T> reparameterize(const ad::Var<T>& mu, const ad::Var<T>& logvar, const Tensor<T>& eps);
template <typename T>
ad::Var<T> reparameterize(const ad::Var<T>& mu, const ad::Var<T>& logvar, Rng& rng);

template <typename T>
ad::Var<T> decode(const ParamStore<T>& ps, const VaeConfig& cfg, const ad::Var<T>& z);

// Batch mean of 0.5 * sum(mu^2 + exp(logvar) - 1 - logvar).
template <typename T>
ad::Var<T> kl_divergence(const ad::Var<T>& mu, const ad::Var<T>& logvar);

template <typename T>
struct Reconstruction {
  ad::Var<T> mse;
  ad::Var<T> perceptual;
};

// Perceptual term: mean squared distance between teacher patch features of x
// and x_hat (LPIPS proxy). `x_features` may be passed to skip recomputing f(x).
template <typename T>
Reconstruction<T> reconstruction_losses(const Tensor<T>& x, const ad::Var<T>& x_hat, const teacher::Teacher& teacher,
                                        const Tensor<T>* x_features = nullptr);

template <typename T>
void init_discriminator(ParamStore<T>& ps, int base_width, std::uint64_t seed);

// Patch logits [B, 1, S/4, S/4].
template <typename T>
ad::Var<T> discriminate(const ParamStore<T>& ps, const ad::Var<T>& x);

template <typename T>
struct Adversarial {
  ad::Var<T> gan_g;
  ad::Var<T> gan_d;
};

// Hinge losses from discriminator logits on real and reconstructed images.
template <typename T>
Adversarial<T> adversarial_losses(const ad::Var<T>& d_real, const ad::Var<T>& d_fake);

// Deterministic forward passes used by evaluation (mu only, no sampling).
Tensor<float> encode_mean(const ParamStore<float>& ps, const VaeConfig& cfg, const Tensor<float>& images,
                          Index chunk = 256);
Tensor<float> decode_latents(const ParamStore<float>& ps, const VaeConfig& cfg, const Tensor<float>& z,
                             Index chunk = 256);

struct CheckpointInfo {
  VaeConfig config;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  bool optimizer_state = false;
  nlohmann::json extra;
};

// Writes every parameter in `ps` (vae., mapper., disc. namespaces alike).
void save_checkpoint(const std::filesystem::path& dir, const ParamStore<float>& ps, const CheckpointInfo& info,
                     const AdamW<float>* opt = nullptr);
CheckpointInfo read_checkpoint_info(const std::filesystem::path& dir);
// Loads tensors under `prefix` that exist in the checkpoint into `ps`.
void load_checkpoint(const std::filesystem::path& dir, ParamStore<float>& ps, AdamW<float>* opt = nullptr,
                     const std::string& prefix = "");

}  // namespace sendvae::vae
