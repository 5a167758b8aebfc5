#pragma once

// Noise injection, patch-wise cosine alignment, the combined objective and the
// joint VAE + mapper fine-tuning loop.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "sendvae/mapper.hpp"
#include "sendvae/synthdata.hpp"
#include "sendvae/teacher.hpp"
#include "sendvae/vae.hpp"

namespace sendvae::align {

template <typename T>
struct NoisyLatent {
  ad::Var<T> z_t;
  std::vector<double> alpha;  // per sample
  std::uint64_t epsilon_seed = 0;
};

// z_t = (1 - alpha) * eps + alpha * z with per-sample alpha ~ U(0, 1); identity
// with alpha = 1 when disabled.
template <typename T>
NoisyLatent<T> inject_noise(const ad::Var<T>& z, Rng& rng, bool enabled);

// Same mixing with caller-supplied alpha (one per sample) and eps.
template <typename T>
ad::Var<T> mix_noise(const ad::Var<T>& z, const std::vector<double>& alpha, const Tensor<T>& eps);

// Mean over batch and patches of 1 - cos(mapped[n], teacher[n]). Mapped norms
// are floored at 1e-8; a zero-norm teacher patch raises DataError.
template <typename T>
ad::Var<T> alignment_loss(const ad::Var<T>& mapped, const Tensor<T>& teacher_feats);

struct LossBreakdown {
  double mse = 0;
  double perceptual = 0;
  double kl = 0;
  double gan_g = 0;
  double gan_d = 0;
  double align = 0;
  double total = 0;
};

struct AlignConfig {
  double lambda_align = 1.0;
  bool noise_enabled = true;
  mapper::MapperConfig mapper;
  vae::LossWeights weights;
  AdamWConfig optimizer{.lr = 3e-4, .weight_decay = 0.0, .grad_clip = 1.0};
  int steps = 5000;
  int batch = 64;
  std::uint64_t seed = 0;

  void validate() const;
  bool uses_mapper() const { return lambda_align > 0; }
};

nlohmann::json to_json(const AlignConfig& cfg);
AlignConfig align_config_from_json(const nlohmann::json& j);

// Fills parts.total with the configured weighted sum and returns it.
double total_objective(LossBreakdown& parts, const AlignConfig& cfg);

struct LogEntry {
  std::int64_t step = 0;
  LossBreakdown parts;
  double alpha_mean = 1.0;
};

nlohmann::json to_json(const LogEntry& e);

struct TrainOptions {
  std::filesystem::path out_dir;  // checkpoint + log; empty keeps everything in memory
  int checkpoint_every = 0;       // 0: only the final checkpoint
  bool resume = false;
  int stop_after = -1;            // stop (with a checkpoint) after this many steps; for resume tests
  std::function<void(const LogEntry&)> on_step;
};

struct TrainResult {
  ParamStore<float> params;
  std::vector<LogEntry> log;
  std::int64_t steps_done = 0;
  bool finished = false;
};

// Fine-tunes theta (vae.) and phi (mapper.) jointly. `init` supplies starting
// vae. parameters (nullptr: fresh init from cfg.seed). Deterministic given the
// seed; per-step randomness is derived from (seed, step) so resume is exact.
TrainResult train_vae_aligned(const ParamStore<float>* init, const vae::VaeConfig& vcfg,
                              const synth::ImageBatch& dataset, const teacher::Teacher& teacher,
                              const AlignConfig& cfg, const TrainOptions& opts = {});

// Fresh parameter store for the VAE (plus mapper and discriminator when configured).
ParamStore<float> make_params(const vae::VaeConfig& vcfg, const AlignConfig& cfg, int teacher_dim);

// One optimization objective evaluation on a batch; exposed for tests.
struct StepTensors {
  ad::Var<float> total;
  LossBreakdown parts;
  double alpha_mean = 1.0;
};
StepTensors objective_on_batch(const ParamStore<float>& ps, const vae::VaeConfig& vcfg, const Tensor<float>& x,
                               const teacher::Teacher& teacher, const AlignConfig& cfg, Rng& rng);

}  // namespace sendvae::align
