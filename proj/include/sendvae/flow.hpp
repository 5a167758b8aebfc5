#pragma once

// Class-conditional stochastic-interpolant transformer on VAE latents:
// x_t = t z + (1 - t) eps, velocity target z - eps. Blocks are pre-norm
// transformer layers with adaLN-zero conditioning on a time + class embedding;
// class index `num_classes` is the null (unconditional) label.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include <nlohmann/json.hpp>

#include "sendvae/core/nn.hpp"

namespace sendvae::flow {

struct FlowConfig {
  int depth = 6;
  int width = 256;
  int heads = 8;
  int patch_size = 1;
  int mlp_ratio = 4;
  int num_classes = 12;
  double label_dropout = 0.1;
  bool repa_enabled = false;
  int repa_layer = 2;
  double repa_weight = 0.5;
  int repa_dim = 64;
  double ema_decay = 0.9999;
  int steps = 20000;
  int batch = 64;
  double lr = 1e-4;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  double sigma_g = 1.0;

  void validate(int latent_size) const;
};

nlohmann::json to_json(const FlowConfig& cfg);
FlowConfig flow_config_from_json(const nlohmann::json& j);

struct LatentSpec {
  int channels = 4;
  int size = 8;
};

template <typename T>
struct InterpolantSample {
  Tensor<T> x_t;
  std::vector<double> t;
  Tensor<T> velocity_target;
  Tensor<T> epsilon;
};

// One t per sample (or a single t broadcast over the batch). t outside [0, 1]
// raises DomainError.
template <typename T>
InterpolantSample<T> interpolant_targets(const Tensor<T>& z, const std::vector<double>& t, Rng& rng);

template <typename T>
void init_flow(ParamStore<T>& ps, const FlowConfig& cfg, LatentSpec latent, std::uint64_t seed);

template <typename T>
struct FlowOutput {
  ad::Var<T> velocity;  // latent-shaped
  ad::Var<T> hidden;    // [B, N, width] after block repa_layer (empty when not requested)
};

template <typename T>
FlowOutput<T> flow_forward(const ParamStore<T>& ps, const FlowConfig& cfg, const ad::Var<T>& x_t,
                           const std::vector<double>& t, const std::vector<int>& labels, bool want_hidden = false);

// Any velocity model: (x_t, t per sample, labels) -> velocity.
template <typename T>
using VelocityModel = std::function<ad::Var<T>(const ad::Var<T>&, const std::vector<double>&, const std::vector<int>&)>;

template <typename T>
struct FlowLossResult {
  ad::Var<T> loss;
  std::vector<int> used_labels;  // after label dropout
  InterpolantSample<T> sample;
};

// Mean squared error between model velocity and z - eps with t ~ U(0, 1) per
// sample and labels replaced by `null_label` with probability `label_dropout`.
template <typename T>
FlowLossResult<T> flow_loss(const VelocityModel<T>& model, const Tensor<T>& z, const std::vector<int>& labels,
                            double label_dropout, int null_label, Rng& rng);

// Patch-wise (1 - cos) between projected hidden states and teacher features of
// the clean image. Teacher features are average-pooled to the flow token grid
// when the flow patch is coarser than the teacher grid.
template <typename T>
ad::Var<T> repa_regularizer(const ParamStore<T>& ps, const ad::Var<T>& hidden, const Tensor<T>& teacher_feats);

template <typename T>
Tensor<T> pool_tokens(const Tensor<T>& feats, Index grid, Index target_grid);

template <typename T>
Tensor<T> cfg_velocity(const Tensor<T>& v_cond, const Tensor<T>& v_uncond, double w);

enum class SamplerMode { kOde, kSde };

struct SamplerConfig {
  int n_steps = 250;
  SamplerMode mode = SamplerMode::kSde;
  double cfg_scale = 2.5;
  double sigma_g = 1.0;
};

// Velocity field evaluated on a whole batch at a single time t.
template <typename T>
using VelocityField = std::function<Tensor<T>(const Tensor<T>& x, double t)>;

// Integrates t: 0 -> 1 from x_0 = eps (drawn from rng). SDE steps use the
// velocity-derived score and g(t) = sigma_g (1 - t); the final step is
// deterministic.
template <typename T>
Tensor<T> integrate(const VelocityField<T>& field, Shape shape, const SamplerConfig& cfg, Rng& rng);

struct FlowState {
  ParamStore<float> params;
  ParamStore<float> ema;
  std::int64_t step = 0;
};

// Samples n latents for the given labels from the EMA parameters, with CFG
// against the null label.
Tensor<float> sample(const FlowState& state, const FlowConfig& cfg, LatentSpec latent, const std::vector<int>& labels,
                     const SamplerConfig& scfg, Rng& rng);

void ema_update(ParamStore<float>& ema, const ParamStore<float>& params, double decay);

struct FlowLogEntry {
  std::int64_t step = 0;
  double loss = 0;
  double flow = 0;
  double repa = 0;
};

struct FlowTrainOptions {
  std::filesystem::path out_dir;
  int checkpoint_every = 0;
  bool resume = false;
  int stop_after = -1;
  std::function<void(const FlowLogEntry&)> on_step;
};

struct FlowTrainResult {
  FlowState state;
  std::vector<FlowLogEntry> log;
  bool finished = false;
};

// latents [M, C, h, w]; `teacher_feats` ([M, N, D]) is required when REPA is on.
FlowTrainResult train_flow(const Tensor<float>& latents, const std::vector<int>& labels, const FlowConfig& cfg,
                           const Tensor<float>* teacher_feats = nullptr, const FlowTrainOptions& opts = {});

void save_flow(const std::filesystem::path& dir, const FlowState& state, const FlowConfig& cfg, LatentSpec latent,
               const AdamW<float>* opt = nullptr);
FlowState load_flow(const std::filesystem::path& dir, FlowConfig* cfg = nullptr, LatentSpec* latent = nullptr,
                    AdamW<float>* opt = nullptr);

nlohmann::json to_json(const FlowLogEntry& e);

}  // namespace sendvae::flow
