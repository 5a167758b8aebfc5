#include "sendvae/mapper.hpp"

#include "sendvae/core/error.hpp"

namespace sendvae::mapper {

void MapperConfig::validate(int latent_size) const {
  if (patch_size < 1 || latent_size % patch_size != 0)
    throw ConfigError("mapper patch_size must divide the latent grid");
  if (depth < 0) throw ConfigError("mapper depth must be >= 0");
  if (heads < 1 || hidden_dim % heads != 0) throw ConfigError("mapper heads must divide hidden_dim");
  if (out_dim < 1) throw ConfigError("mapper out_dim must be >= 1");
}

nlohmann::json to_json(const MapperConfig& cfg) {
  return {{"patch_size", cfg.patch_size}, {"depth", cfg.depth},     {"heads", cfg.heads},
          {"hidden_dim", cfg.hidden_dim}, {"out_dim", cfg.out_dim}, {"mlp_ratio", cfg.mlp_ratio}};
}

MapperConfig mapper_config_from_json(const nlohmann::json& j) {
  MapperConfig c;
  c.patch_size = j.value("patch_size", c.patch_size);
  c.depth = j.value("depth", c.depth);
  c.heads = j.value("heads", c.heads);
  c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
  c.out_dim = j.value("out_dim", c.out_dim);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  return c;
}

template <typename T>
void init_mapper(ParamStore<T>& ps, const MapperConfig& cfg, int latent_channels, int latent_size, std::uint64_t seed) {
  cfg.validate(latent_size);
  Rng rng(derive_seed(seed, {0x3A99}));
  const Index in = static_cast<Index>(latent_channels) * cfg.patch_size * cfg.patch_size;
  nn::add_linear(ps, "mapper.embed", in, cfg.hidden_dim, rng);
  ps.add("mapper.pos", nn::normal_init<T>({cfg.tokens(latent_size), cfg.hidden_dim}, 0.02, rng));
  for (int l = 0; l < cfg.depth; ++l)
    nn::add_encoder_layer(ps, "mapper.block" + std::to_string(l), cfg.hidden_dim, cfg.mlp_ratio, rng);
  nn::add_linear(ps, "mapper.proj1", cfg.hidden_dim, cfg.hidden_dim, rng);
  nn::add_linear(ps, "mapper.proj2", cfg.hidden_dim, cfg.out_dim, rng);
}

template <typename T>
ad::Var<T> mapper_forward(const ParamStore<T>& ps, const MapperConfig& cfg, const ad::Var<T>& z_t,
                          Index expected_tokens) {
  const int latent_size = static_cast<int>(z_t.dim(2));
  cfg.validate(latent_size);
  const Index N = cfg.tokens(latent_size);
  if (expected_tokens > 0 && N != expected_tokens)
    throw ConfigError("mapper produces " + std::to_string(N) + " patches but the teacher has " +
                      std::to_string(expected_tokens));
  const auto& pos = ps.get("mapper.pos");
  if (pos.dim(0) != N) throw ConfigError("mapper positional table does not match the latent grid");
  auto h = nn::linear(ps, "mapper.embed", nn::patchify(z_t, cfg.patch_size));
  h = ad::add_broadcast_batch(h, pos);
  for (int l = 0; l < cfg.depth; ++l) h = nn::encoder_layer(ps, "mapper.block" + std::to_string(l), h, cfg.heads);
  return nn::linear(ps, "mapper.proj2", ad::gelu(nn::linear(ps, "mapper.proj1", h)));
}

template void init_mapper(ParamStore<float>&, const MapperConfig&, int, int, std::uint64_t);
template void init_mapper(ParamStore<double>&, const MapperConfig&, int, int, std::uint64_t);
template ad::Var<float> mapper_forward(const ParamStore<float>&, const MapperConfig&, const ad::Var<float>&, Index);
template ad::Var<double> mapper_forward(const ParamStore<double>&, const MapperConfig&, const ad::Var<double>&, Index);

}  // namespace sendvae::mapper
