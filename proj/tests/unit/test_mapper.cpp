#include "doctest.h"
#include "gradcheck.hpp"
#include "sendvae/mapper.hpp"

using namespace sendvae;
using mapper::MapperConfig;

namespace {

template <typename T>
Tensor<T> gaussian(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<T> t(std::move(s));
  for (Index i = 0; i < t.size(); ++i) t.data[i] = static_cast<T>(rng.normal());
  return t;
}

}  // namespace

TEST_CASE("one layer, 12 heads, hidden 96 maps an 8x8x4 latent to 64 patches") {
  MapperConfig cfg;
  ParamStore<float> ps;
  mapper::init_mapper(ps, cfg, 4, 8, 1);
  auto out = mapper::mapper_forward(ps, cfg, ad::constant(gaussian<float>({3, 4, 8, 8}, 2)), 64);
  CHECK(out.shape() == Shape{3, 64, 64});
  CHECK(out.value().all_finite());
  CHECK_THROWS_AS(mapper::mapper_forward(ps, cfg, ad::constant(gaussian<float>({1, 4, 8, 8}, 2)), 16), ConfigError);

  MapperConfig p2 = cfg;
  p2.patch_size = 2;
  p2.out_dim = 32;
  ParamStore<float> ps2;
  mapper::init_mapper(ps2, p2, 4, 8, 1);
  CHECK(mapper::mapper_forward(ps2, p2, ad::constant(gaussian<float>({2, 4, 8, 8}, 3)), 16).shape() == Shape{2, 16, 32});
  CHECK_THROWS_AS((MapperConfig{.patch_size = 3}.validate(8)), ConfigError);
  CHECK_THROWS_AS((MapperConfig{.heads = 5}.validate(8)), ConfigError);
}

TEST_CASE("depth 0 is patch embedding plus projector") {
  MapperConfig cfg{.depth = 0, .heads = 4, .hidden_dim = 8, .out_dim = 5};
  ParamStore<double> ps;
  mapper::init_mapper(ps, cfg, 2, 2, 4);
  for (const auto& n : ps.names()) CHECK(n.find("block") == std::string::npos);
  auto z = gaussian<double>({1, 2, 2, 2}, 5);
  auto out = mapper::mapper_forward(ps, cfg, ad::constant(z)).value();
  // Recompute token by token: gelu(W1 (E x + b + pos) + b1) W2 + b2.
  auto M = [&](const std::string& n) {
    const auto& t = ps.get(n).value();
    return Eigen::MatrixXd(t.as_matrix(t.dim(0), t.size() / t.dim(0)));
  };
  auto V = [&](const std::string& n) { return Eigen::VectorXd(ps.get(n).value().data.matrix()); };
  auto gelu = [](double x) { return 0.5 * x * (1 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x))); };
  for (Index n = 0; n < 4; ++n) {
    Eigen::VectorXd tok(2);
    tok << z.data[n], z.data[4 + n];
    Eigen::VectorXd h = M("mapper.embed.w").transpose() * tok + V("mapper.embed.b") + M("mapper.pos").row(n).transpose();
    Eigen::VectorXd a = (M("mapper.proj1.w").transpose() * h + V("mapper.proj1.b")).unaryExpr(gelu);
    Eigen::VectorXd y = M("mapper.proj2.w").transpose() * a + V("mapper.proj2.b");
    for (Index k = 0; k < 5; ++k) CHECK(out.data[n * 5 + k] == doctest::Approx(y[k]).epsilon(1e-12));
  }
}

TEST_CASE("mapper gradients match finite differences on a toy grid") {
  MapperConfig cfg{.depth = 1, .heads = 2, .hidden_dim = 4, .out_dim = 3, .mlp_ratio = 2};
  ParamStore<double> ps;
  mapper::init_mapper(ps, cfg, 2, 2, 6);
  auto z = ad::Var<double>(gaussian<double>({2, 2, 2, 2}, 7), true);
  const auto target = gaussian<double>({2, 4, 3}, 8);
  auto loss = [&] { return ad::mse(mapper::mapper_forward(ps, cfg, z), target); };
  for (const char* p : {"mapper.embed.w", "mapper.pos", "mapper.block0.attn.qkv.w", "mapper.block0.mlp.fc1.w",
                        "mapper.block0.ln1.g", "mapper.proj2.w"})
    CHECK_MESSAGE(testing::grad_rel_error(loss, ps.get(p)) <= 1e-4, p);
  CHECK(testing::grad_rel_error(loss, z) <= 1e-4);
}

TEST_CASE("parameter count grows with depth") {
  Index prev = 0;
  for (int depth = 0; depth <= 3; ++depth) {
    ParamStore<float> ps;
    mapper::init_mapper(ps, MapperConfig{.depth = depth}, 4, 8, 1);
    CHECK(ps.count() > prev);
    prev = ps.count();
  }
}

TEST_CASE("mapper is not patch-permutation invariant") {
  MapperConfig cfg{.depth = 1, .heads = 4, .hidden_dim = 16, .out_dim = 8};
  ParamStore<double> ps;
  mapper::init_mapper(ps, cfg, 2, 4, 13);
  auto z = gaussian<double>({1, 2, 4, 4}, 14);
  // Swap spatial positions 0 and 5 in every channel.
  auto zp = z;
  for (Index c = 0; c < 2; ++c) std::swap(zp.data[c * 16 + 0], zp.data[c * 16 + 5]);
  auto a = mapper::mapper_forward(ps, cfg, ad::constant(z)).value();
  auto b = mapper::mapper_forward(ps, cfg, ad::constant(zp)).value();
  // Undo the permutation on the outputs; equality would mean permutation equivariance.
  auto bp = b;
  bp.data.segment(0, 8) = b.data.segment(5 * 8, 8);
  bp.data.segment(5 * 8, 8) = b.data.segment(0, 8);
  CHECK((a.data - bp.data).abs().maxCoeff() > 1e-6);
}
