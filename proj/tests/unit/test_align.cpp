#include <algorithm>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "gradcheck.hpp"
#include "sendvae/align.hpp"

using namespace sendvae;

namespace {

Tensor<double> gaussian(Shape s, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  Tensor<double> t(std::move(s));
  for (Index i = 0; i < t.size(); ++i) t.data[i] = scale * rng.normal();
  return t;
}

// Kolmogorov-Smirnov statistic of a sample against a continuous CDF.
template <typename Cdf>
double ks_statistic(std::vector<double> x, Cdf cdf) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = cdf(x[i]);
    d = std::max({d, (static_cast<double>(i) + 1) / n - f, f - static_cast<double>(i) / n});
  }
  return d;
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }
// Critical value at significance 0.01 for large n.
double ks_critical_01(std::size_t n) { return 1.628 / std::sqrt(static_cast<double>(n)); }

struct Fixture {
  vae::VaeConfig vcfg{.f = 4, .d = 4, .base_width = 8, .canvas_size = 32};
  teacher::Teacher teacher = teacher::Teacher::analytic(32, {8, 8}, 64, 3);
  synth::LabeledBatch data = synth::generate_batch(31, 256, {});
  align::AlignConfig cfg = [] {
    align::AlignConfig c;
    c.mapper = {.depth = 1, .heads = 4, .hidden_dim = 32};
    c.batch = 8;
    c.steps = 20;
    c.seed = 5;
    c.optimizer.lr = 1e-3;
    return c;
  }();
};

}  // namespace

TEST_CASE("noise injection endpoints and moments") {
  SUBCASE("disabled or alpha 1 is the identity") {
    auto z = ad::constant(gaussian({3, 2, 2, 2}, 1));
    Rng rng(2);
    auto off = align::inject_noise(z, rng, false);
    CHECK((off.z_t.value().data - z.value().data).abs().maxCoeff() == 0.0);
    CHECK(std::all_of(off.alpha.begin(), off.alpha.end(), [](double a) { return a == 1.0; }));
    auto one = align::mix_noise(z, {1.0, 1.0, 1.0}, gaussian({3, 2, 2, 2}, 3));
    CHECK((one.value().data - z.value().data).abs().maxCoeff() == 0.0);
  }
  SUBCASE("alpha 0 gives standard normal noise") {
    auto z = ad::constant(Tensor<double>::constant({10000, 1, 1, 1}, 5.0));
    Rng rng(4);
    Tensor<double> eps(Shape{10000, 1, 1, 1});
    for (Index i = 0; i < eps.size(); ++i) eps.data[i] = rng.normal();
    auto zt = align::mix_noise(z, std::vector<double>(10000, 0.0), eps).value();
    std::vector<double> v(zt.data.data(), zt.data.data() + zt.size());
    CHECK(ks_statistic(v, normal_cdf) < ks_critical_01(v.size()));
  }
  SUBCASE("mean at alpha 0.3 and z 1") {
    const int n = 100000;
    auto z = ad::constant(Tensor<double>::constant({n, 1, 1, 1}, 1.0));
    Rng rng(5);
    Tensor<double> eps(Shape{n, 1, 1, 1});
    for (Index i = 0; i < eps.size(); ++i) eps.data[i] = rng.normal();
    const double m = align::mix_noise(z, std::vector<double>(n, 0.3), eps).value().data.mean();
    CHECK(std::abs(m - 0.3) <= 3 * 0.7 / std::sqrt(n));
  }
  SUBCASE("sampled alpha is uniform and eps standard normal") {
    auto z = ad::constant(Tensor<double>(Shape{10000, 1, 1, 1}));
    Rng rng(6);
    auto nl = align::inject_noise(z, rng, true);
    CHECK(ks_statistic(nl.alpha, [](double a) { return std::clamp(a, 0.0, 1.0); }) < ks_critical_01(nl.alpha.size()));
    // With z = 0, z_t = (1 - alpha) eps; dividing recovers eps exactly.
    std::vector<double> eps;
    for (Index i = 0; i < 10000; ++i)
      if (nl.alpha[static_cast<std::size_t>(i)] < 0.999) eps.push_back(nl.z_t.value().data[i] / (1 - nl.alpha[static_cast<std::size_t>(i)]));
    CHECK(ks_statistic(eps, normal_cdf) < ks_critical_01(eps.size()));
    Rng again(6);
    auto nl2 = align::inject_noise(z, again, true);
    CHECK(nl2.epsilon_seed == nl.epsilon_seed);
    CHECK((nl2.z_t.value().data - nl.z_t.value().data).abs().maxCoeff() == 0.0);
  }
}

TEST_CASE("alignment loss values") {
  auto t = gaussian({2, 3, 4}, 7);
  CHECK(align::alignment_loss(ad::constant(t), t).item() == doctest::Approx(0.0).epsilon(1e-15));
  Tensor<double> neg(t.shape, -t.data);
  CHECK(align::alignment_loss(ad::constant(neg), t).item() == doctest::Approx(2.0).epsilon(1e-15));
  Tensor<double> a(Shape{1, 1, 2}), b(Shape{1, 1, 2});
  a.data << 1, 0;
  b.data << 0, 1;
  CHECK(align::alignment_loss(ad::constant(a), b).item() == doctest::Approx(1.0));

  auto m = gaussian({2, 3, 4}, 8);
  double brute = 0;
  for (Index r = 0; r < 6; ++r) {
    double dot = 0, nm = 0, nt = 0;
    for (Index k = 0; k < 4; ++k) {
      dot += m.data[r * 4 + k] * t.data[r * 4 + k];
      nm += m.data[r * 4 + k] * m.data[r * 4 + k];
      nt += t.data[r * 4 + k] * t.data[r * 4 + k];
    }
    brute += 1 - dot / std::sqrt(nm * nt);
  }
  CHECK(align::alignment_loss(ad::constant(m), t).item() == doctest::Approx(brute / 6).epsilon(1e-14));

  Tensor<double> zero_t(Shape{1, 2, 2});
  zero_t.data << 1, 1, 0, 0;
  CHECK_THROWS_AS(align::alignment_loss(ad::constant(gaussian({1, 2, 2}, 9)), zero_t), DataError);
  // Zero mapped patch hits the norm floor: cos = 0.
  Tensor<double> zero_m(Shape{1, 1, 2});
  CHECK(align::alignment_loss(ad::constant(zero_m), b).item() == doctest::Approx(1.0));
  CHECK_THROWS_AS(align::alignment_loss(ad::constant(gaussian({1, 2, 3}, 1)), t), ConfigError);
}

TEST_CASE("alignment loss range, scale invariance and gradient") {
  for (int trial = 0; trial < 50; ++trial) {
    auto m = gaussian({2, 5, 6}, 100 + trial), t = gaussian({2, 5, 6}, 200 + trial);
    const double l = align::alignment_loss(ad::constant(m), t).item();
    CHECK(l >= 0.0);
    CHECK(l <= 2.0);
    for (double c : {1e-3, 0.7, 13.0}) {
      Tensor<double> mc(m.shape, c * m.data);
      CHECK(align::alignment_loss(ad::constant(mc), t).item() == doctest::Approx(l).epsilon(1e-12));
    }
  }
  auto mapped = ad::Var<double>(gaussian({2, 3, 4}, 10), true);
  const auto t = gaussian({2, 3, 4}, 11);
  auto loss = [&] { return align::alignment_loss(mapped, t); };
  CHECK(testing::grad_rel_error(loss, mapped) <= 1e-4);
}

TEST_CASE("total objective is the weighted sum of its parts") {
  align::AlignConfig cfg;
  CHECK(cfg.lambda_align == 1.0);
  align::LossBreakdown p{.mse = 0.03, .perceptual = 0.2, .kl = 41.0, .gan_g = 0.7, .align = 0.55};
  const auto& w = cfg.weights;
  const double hand = 1.0 * 0.55 + w.mse * 0.03 + w.perceptual * 0.2 + w.kl * 41.0;
  CHECK(std::abs(align::total_objective(p, cfg) - hand) <= 1e-12);
  CHECK(std::abs(p.total - hand) <= 1e-12);
  cfg.lambda_align = 0;
  CHECK(std::abs(align::total_objective(p, cfg) - (hand - 0.55)) <= 1e-12);
  cfg.weights.gan_enabled = true;
  CHECK(std::abs(align::total_objective(p, cfg) - (hand - 0.55 + w.gan * 0.7)) <= 1e-12);
  cfg.lambda_align = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("batch objective matches the logged breakdown") {
  Fixture fx;
  auto ps = align::make_params(fx.vcfg, fx.cfg, fx.teacher.dim());
  CHECK(ps.contains("mapper.proj2.w"));
  CHECK(ps.get("mapper.proj2.w").dim(1) == 64);
  Rng rng(3);
  auto st = align::objective_on_batch(ps, fx.vcfg, fx.data.images.subset(0, 4).pixels, fx.teacher, fx.cfg, rng);
  CHECK(st.total.item() == doctest::Approx(st.parts.total).epsilon(1e-5));
  CHECK(st.parts.align > 0);
  CHECK(st.alpha_mean > 0);
  CHECK(st.alpha_mean < 1);

  auto no_align = fx.cfg;
  no_align.lambda_align = 0;
  auto ps0 = align::make_params(fx.vcfg, no_align, fx.teacher.dim());
  for (const auto& n : ps0.names()) CHECK(n.rfind("vae.", 0) == 0);
}

TEST_CASE("training smoke run lowers the loss") {
  Fixture fx;
  fx.cfg.steps = 500;
  auto res = align::train_vae_aligned(nullptr, fx.vcfg, fx.data.images, fx.teacher, fx.cfg);
  REQUIRE(res.log.size() == 500);
  auto smooth = [&](std::size_t end) {
    double s = 0;
    for (std::size_t i = end - 25; i < end; ++i) s += res.log[i].parts.total;
    return s / 25;
  };
  CHECK(smooth(500) < smooth(50));
  CHECK(res.finished);
}

TEST_CASE("training is deterministic and resumes exactly") {
  namespace fs = std::filesystem;
  Fixture fx;
  const auto checksum_before = fx.teacher.checksum();
  const fs::path a = fs::temp_directory_path() / "sendvae_align_a", b = fs::temp_directory_path() / "sendvae_align_b";
  fs::remove_all(a);
  fs::remove_all(b);
  auto r1 = align::train_vae_aligned(nullptr, fx.vcfg, fx.data.images, fx.teacher, fx.cfg, {.out_dir = a});
  auto r2 = align::train_vae_aligned(nullptr, fx.vcfg, fx.data.images, fx.teacher, fx.cfg);
  CHECK(r1.params.checksum() == r2.params.checksum());

  auto part = align::train_vae_aligned(nullptr, fx.vcfg, fx.data.images, fx.teacher, fx.cfg, {.out_dir = b, .stop_after = 8});
  CHECK_FALSE(part.finished);
  CHECK(part.steps_done == 8);
  auto rest = align::train_vae_aligned(nullptr, fx.vcfg, fx.data.images, fx.teacher, fx.cfg, {.out_dir = b, .resume = true});
  CHECK(rest.finished);
  CHECK(rest.params.checksum() == r1.params.checksum());
  REQUIRE(rest.log.size() == r1.log.size());
  CHECK(rest.log.back().parts.total == r1.log.back().parts.total);
  CHECK(fx.teacher.checksum() == checksum_before);

  // Log lines carry the documented keys.
  std::ifstream f(a / "train_log.jsonl");
  std::string line;
  std::getline(f, line);
  auto j = nlohmann::json::parse(line);
  for (const char* k : {"step", "mse", "perceptual", "kl", "align", "total", "alpha_mean"}) CHECK(j.contains(k));

  auto wrong = fx.vcfg;
  wrong.base_width = 4;
  ParamStore<float> init;
  vae::init_vae(init, wrong, 1);
  CHECK_THROWS_AS(align::train_vae_aligned(&init, fx.vcfg, fx.data.images, fx.teacher, fx.cfg), ConfigError);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("optional adversarial branch trains the discriminator separately") {
  Fixture fx;
  fx.cfg.weights.gan_enabled = true;
  fx.cfg.steps = 3;
  auto res = align::train_vae_aligned(nullptr, fx.vcfg, fx.data.images, fx.teacher, fx.cfg);
  CHECK(res.params.contains("disc.out.w"));
  CHECK(res.log.back().parts.gan_d > 0);
}
