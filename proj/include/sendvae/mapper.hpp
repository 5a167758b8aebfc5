#pragma once

// Mapper h_phi: latent patches -> teacher feature space. Patch embedding with a
// learned positional table, `depth` pre-norm encoder layers, then a two-layer
// GELU projector. Parameters live under the "mapper." namespace.

#include <cstdint>

#include <nlohmann/json.hpp>

#include "sendvae/core/nn.hpp"

namespace sendvae::mapper {

struct MapperConfig {
  int patch_size = 1;
  int depth = 1;
  int heads = 12;
  int hidden_dim = 96;
  int out_dim = 64;
  int mlp_ratio = 4;

  void validate(int latent_size) const;
  Index tokens(int latent_size) const {
    const Index g = latent_size / patch_size;
    return g * g;
  }
};

nlohmann::json to_json(const MapperConfig& cfg);
MapperConfig mapper_config_from_json(const nlohmann::json& j);

template <typename T>
void init_mapper(ParamStore<T>& ps, const MapperConfig& cfg, int latent_channels, int latent_size, std::uint64_t seed);

// z_t: [B, d, h, w] -> [B, N, out_dim]. `expected_tokens` (teacher N) is
// checked when positive.
template <typename T>
ad::Var<T> mapper_forward(const ParamStore<T>& ps, const MapperConfig& cfg, const ad::Var<T>& z_t,
                          Index expected_tokens = 0);

}  // namespace sendvae::mapper
