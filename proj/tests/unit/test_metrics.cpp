#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "sendvae/core/rng.hpp"
#include "sendvae/metrics.hpp"

using namespace sendvae;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd normal_matrix(Index r, Index c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  MatrixXd m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

MatrixXd bernoulli_labels(Index n, const std::vector<double>& p, std::uint64_t seed) {
  Rng rng(seed);
  MatrixXd y(n, static_cast<Index>(p.size()));
  for (Index i = 0; i < n; ++i)
    for (std::size_t a = 0; a < p.size(); ++a) y(i, static_cast<Index>(a)) = rng.uniform() < p[a] ? 1.0 : 0.0;
  return y;
}

// Macro-F1 of the constant majority-class predictor at the held-out priors.
double prior_baseline_f1(const MatrixXd& y) {
  double s = 0;
  for (Index a = 0; a < y.cols(); ++a) {
    const double p = y.col(a).mean();
    s += p > 0.5 ? 2 * p / (1 + p) : 0.0;
  }
  return s / static_cast<double>(y.cols());
}

MatrixXd spd(Index d, std::uint64_t seed) {
  MatrixXd a = normal_matrix(d, d, seed);
  return a * a.transpose() + 0.1 * MatrixXd::Identity(d, d);
}

double ssim_brute(const Tensor<float>& x, const Tensor<float>& y) {
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  double sum = 0;
  long count = 0;
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < C; ++c)
      for (Index i = 0; i + 8 <= H; ++i)
        for (Index j = 0; j + 8 <= W; ++j) {
          double mx = 0, my = 0;
          for (Index u = 0; u < 8; ++u)
            for (Index v = 0; v < 8; ++v) {
              const Index k = ((b * C + c) * H + i + u) * W + j + v;
              mx += x.data[k];
              my += y.data[k];
            }
          mx /= 64;
          my /= 64;
          double vx = 0, vy = 0, cxy = 0;
          for (Index u = 0; u < 8; ++u)
            for (Index v = 0; v < 8; ++v) {
              const Index k = ((b * C + c) * H + i + u) * W + j + v;
              vx += (x.data[k] - mx) * (x.data[k] - mx);
              vy += (y.data[k] - my) * (y.data[k] - my);
              cxy += (x.data[k] - mx) * (y.data[k] - my);
            }
          vx /= 64;
          vy /= 64;
          cxy /= 64;
          const double c1 = 1e-4, c2 = 9e-4;
          sum += (2 * mx * my + c1) * (2 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
          ++count;
        }
  return sum / static_cast<double>(count);
}

}  // namespace

TEST_CASE("probe separates linearly embedded labels") {
  const std::vector<double> p{0.2, 0.3, 0.5, 0.7, 0.4, 0.15, 0.6, 0.35};
  const MatrixXd embed = normal_matrix(8, 48, 1);
  auto make = [&](Index n, std::uint64_t seed, MatrixXd& y) {
    y = bernoulli_labels(n, p, seed);
    return MatrixXd(y * embed + normal_matrix(n, 48, seed + 100, 0.01));
  };
  MatrixXd ytr, yte;
  const MatrixXd xtr = make(2000, 2, ytr), xte = make(500, 3, yte);
  auto model = metrics::fit_linear_probe(xtr, ytr);
  auto s = metrics::evaluate_probe(model, xte, yte);
  CHECK(s.macro_f1 >= 0.99);
  CHECK(model.weights.rows() == 8);
  CHECK(model.weights.cols() == 48);
  CHECK(model.excluded.empty());

  auto again = metrics::fit_linear_probe(xtr, ytr);
  CHECK((again.weights - model.weights).cwiseAbs().maxCoeff() == 0.0);
  CHECK((again.bias - model.bias).cwiseAbs().maxCoeff() == 0.0);

  // The decision function is affine in the input.
  const MatrixXd basis = MatrixXd::Identity(3, 48) * 2.0;
  const MatrixXd s0 = model.scores(MatrixXd::Zero(1, 48));
  const MatrixXd sb = model.scores(basis);
  const MatrixXd sm = model.scores(basis.colwise().sum());
  CHECK((sm - (sb.colwise().sum() - 2 * s0)).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("probe on shuffled labels sits at the prior baseline") {
  const std::vector<double> p{0.1, 0.2, 0.3, 0.7, 0.8, 0.25};
  const MatrixXd embed = normal_matrix(6, 32, 4);
  MatrixXd ytr = bernoulli_labels(3000, p, 5), yte = bernoulli_labels(1000, p, 6);
  MatrixXd xtr = ytr * embed + normal_matrix(3000, 32, 7, 0.1);
  MatrixXd xte = yte * embed + normal_matrix(1000, 32, 8, 0.1);
  // Permute label rows so features carry no information about them.
  std::vector<Index> perm(3000);
  std::iota(perm.begin(), perm.end(), Index{0});
  Rng rng(9);
  for (Index i = 2999; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[rng.below(static_cast<std::uint64_t>(i + 1))]);
  MatrixXd shuffled(3000, 6);
  for (Index i = 0; i < 3000; ++i) shuffled.row(i) = ytr.row(perm[static_cast<std::size_t>(i)]);
  std::vector<Index> perm_te(1000);
  std::iota(perm_te.begin(), perm_te.end(), Index{0});
  for (Index i = 999; i > 0; --i) std::swap(perm_te[static_cast<std::size_t>(i)], perm_te[rng.below(static_cast<std::uint64_t>(i + 1))]);
  MatrixXd yte_s(1000, 6);
  for (Index i = 0; i < 1000; ++i) yte_s.row(i) = yte.row(perm_te[static_cast<std::size_t>(i)]);
  auto model = metrics::fit_linear_probe(xtr, shuffled);
  auto s = metrics::evaluate_probe(model, xte, yte_s);
  CHECK(std::abs(s.macro_f1 - prior_baseline_f1(yte_s)) <= 0.1);
}

TEST_CASE("probe excludes degenerate attributes and counts empty images") {
  MatrixXd x = normal_matrix(200, 4, 10);
  MatrixXd y = MatrixXd::Zero(200, 3);
  for (Index i = 0; i < 200; ++i) y(i, 0) = x(i, 0) > 0;
  y.col(2).setOnes();
  auto m = metrics::fit_linear_probe(x, y);
  CHECK(m.excluded == std::vector<int>{1, 2});
  CHECK(m.included == std::vector<int>{0});
  auto s = metrics::evaluate_probe(m, x, y);
  CHECK(s.images_without_positives == static_cast<int>(200 - y.col(0).sum()));
  CHECK(s.top5_recall == 1.0);
}

TEST_CASE("hand-built F1 and top-5 recall") {
  // 4 images x 6 attributes.
  MatrixXd truth(4, 6), pred(4, 6), scores(4, 6);
  truth << 1, 1, 0, 0, 0, 0,  //
      0, 1, 1, 0, 0, 0,       //
      1, 0, 0, 0, 0, 1,       //
      0, 0, 0, 0, 0, 0;
  pred << 1, 0, 0, 0, 0, 0,  //
      0, 1, 1, 1, 0, 0,      //
      1, 0, 0, 0, 0, 0,      //
      0, 0, 0, 0, 1, 0;
  scores << 0.9, 0.8, 0.1, 0.2, 0.3, 0.4,  //
      0.0, 0.5, 0.6, 0.7, 0.8, 0.9,        //
      0.9, 0.1, 0.2, 0.3, 0.4, 0.0,        //
      0.1, 0.2, 0.3, 0.4, 0.5, 0.6;
  const std::vector<int> cols{0, 1, 2, 3, 4, 5};
  // Per-column (tp, fp, fn): c0 (2,0,0) c1 (1,0,1) c2 (1,0,0) c3 (0,1,0) c4 (0,1,0) c5 (0,0,1).
  const double f1 = (1.0 + 2.0 / 3.0 + 1.0 + 0 + 0 + 0) / 6.0;
  CHECK(metrics::macro_f1(pred, truth, cols) == doctest::Approx(f1).epsilon(1e-15));
  // Image 0: {0,1} both in top 5 -> 1. Image 1: top5 excludes col 0 only -> 1.
  // Image 2: top5 excludes col 5 -> 1/2. Image 3 has no positives.
  int skipped = -1;
  CHECK(metrics::top_k_recall(scores, truth, cols, 5, &skipped) == doctest::Approx(2.5 / 3.0).epsilon(1e-15));
  CHECK(skipped == 1);
  CHECK(metrics::top_k_recall(scores, truth, cols, 1) == doctest::Approx((1.0 / 2 + 0 + 1.0 / 2) / 3.0).epsilon(1e-15));
  CHECK(metrics::macro_f1(truth, truth, cols) == 1.0);
}

TEST_CASE("multiclass probe") {
  const Index n = 900;
  std::vector<int> y(n);
  MatrixXd centers = normal_matrix(3, 10, 11, 3.0);
  MatrixXd x = normal_matrix(n, 10, 12, 0.5);
  for (Index i = 0; i < n; ++i) {
    y[static_cast<std::size_t>(i)] = static_cast<int>(i % 3);
    x.row(i) += centers.row(i % 3);
  }
  auto m = metrics::fit_linear_probe(x, y, 3);
  auto s = metrics::evaluate_probe(m, x, y);
  CHECK(s.accuracy >= 0.99);
  CHECK(s.top5_recall == 1.0);
  CHECK_THROWS_AS(metrics::fit_linear_probe(x, std::vector<int>(n, 5), 3), ConfigError);
}

TEST_CASE("Gini coefficient") {
  CHECK(metrics::gini(VectorXd::Constant(10, 3.0)) == 0.0);
  VectorXd two(2);
  two << 0, 1;
  CHECK(metrics::gini(two) == 0.5);
  Rng rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    VectorXd d(50);
    for (Index i = 0; i < 50; ++i) d[i] = rng.uniform() * (trial % 2 ? 1.0 : rng.uniform());
    const double g = metrics::gini(d);
    CHECK(g >= 0.0);
    CHECK(g < 1.0);
    CHECK(metrics::gini(VectorXd(7.5 * d)) == doctest::Approx(g).epsilon(1e-12));
  }
  CHECK_THROWS_AS(metrics::gini(VectorXd::Zero(4)), DataError);
}

TEST_CASE("KDE Gini ranks mixed-scale sets above uniform ones") {
  Rng rng(14);
  MatrixXd uniform(1000, 3), clustered(1000, 3);
  for (Index i = 0; i < 1000; ++i)
    for (Index j = 0; j < 3; ++j) {
      uniform(i, j) = rng.uniform(-1, 1);
      clustered(i, j) = (i < 500 ? 0.05 : 1.0) * rng.normal();
    }
  const double gu = metrics::kde_gini(uniform), gc = metrics::kde_gini(clustered);
  CHECK(gc > gu);
  CHECK(metrics::kde_densities(uniform).size() == 1000);
  CHECK(metrics::kde_gini(normal_matrix(3000, 16, 15)) == metrics::kde_gini(normal_matrix(3000, 16, 15)));
  CHECK_THROWS_AS(metrics::kde_gini(MatrixXd::Ones(100, 3)), DataError);
  CHECK_THROWS_AS(metrics::kde_gini(normal_matrix(10, 3, 1)), DataError);
}

TEST_CASE("GMM EM") {
  SUBCASE("K = 1 equals the sample MLE") {
    MatrixXd x = normal_matrix(500, 3, 16, 2.0);
    x.col(1).array() += 4.0;
    auto g = metrics::gmm_em(x, 1, 3, MatrixXd());
    const VectorXd mean = x.colwise().mean();
    const VectorXd var = (x.rowwise() - mean.transpose()).array().square().colwise().mean();
    CHECK((g.means.row(0).transpose() - mean).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK((g.variances.row(0).transpose() - var).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK(g.weights[0] == doctest::Approx(1.0));
  }
  SUBCASE("two clusters at +-5") {
    MatrixXd x = normal_matrix(2000, 2, 17);
    for (Index i = 0; i < 2000; ++i) x.row(i).array() += i % 2 ? 5.0 : -5.0;
    MatrixXd held = normal_matrix(400, 2, 18);
    for (Index i = 0; i < 400; ++i) held.row(i).array() += i % 2 ? 5.0 : -5.0;
    auto g = metrics::gmm_em(x, 2, 50, held, {.seed = 3});
    Index lo = g.means(0, 0) < g.means(1, 0) ? 0 : 1;
    CHECK((g.means.row(lo).array() + 5.0).abs().maxCoeff() <= 0.1);
    CHECK((g.means.row(1 - lo).array() - 5.0).abs().maxCoeff() <= 0.1);
    CHECK(g.reseeds == 0);
    // Held-out NLL of a unit-variance 2-D Gaussian mixture: about log(2 pi) + 1 + log 2.
    CHECK(g.heldout_nll == doctest::Approx(std::log(2 * M_PI) + 1 + std::log(2.0)).epsilon(0.05));
  }
  SUBCASE("log-likelihood trace is non-decreasing") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
      MatrixXd x = normal_matrix(600, 4, 40 + seed);
      for (Index i = 0; i < 600; ++i) x(i, static_cast<Index>(i % 4)) += 3.0 * static_cast<double>(i % 3);
      auto g = metrics::gmm_em(x, 3 + static_cast<int>(seed % 3), 40, MatrixXd(), {.seed = seed});
      for (std::size_t k = 1; k < g.loglik_trace.size(); ++k) CHECK(g.loglik_trace[k] >= g.loglik_trace[k - 1] - 1e-9);
    }
  }
  CHECK_THROWS_AS(metrics::gmm_em(normal_matrix(15, 2, 1), 2, 5, MatrixXd()), DataError);
  CHECK_THROWS_AS(metrics::gmm_em(normal_matrix(15, 2, 1), 0, 5, MatrixXd()), ConfigError);
}

TEST_CASE("Frechet distance closed forms") {
  const VectorXd mu = normal_matrix(4, 1, 20).col(0);
  const MatrixXd c = spd(4, 21);
  CHECK(metrics::frechet_distance<double>(mu, c, mu, c) <= 1e-8);
  VectorXd delta(4);
  delta << 0.5, -1, 2, 0;
  CHECK(metrics::frechet_distance<double>(mu, c, VectorXd(mu + delta), c) == doctest::Approx(delta.squaredNorm()).epsilon(1e-8));

  // 2-D: tr sqrt(M) = sqrt(tr M + 2 sqrt(det M)) for the SPD matrix M similar to C1 C2.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const MatrixXd a = spd(2, 100 + seed), b = spd(2, 200 + seed);
    const VectorXd m1 = normal_matrix(2, 1, 300 + seed).col(0), m2 = normal_matrix(2, 1, 400 + seed).col(0);
    using L = long double;
    auto el = [](const MatrixXd& m, int i, int j) { return static_cast<L>(m(i, j)); };
    const L tr_ab = el(a, 0, 0) * el(b, 0, 0) + el(a, 0, 1) * el(b, 1, 0) + el(a, 1, 0) * el(b, 0, 1) + el(a, 1, 1) * el(b, 1, 1);
    const L det_a = el(a, 0, 0) * el(a, 1, 1) - el(a, 0, 1) * el(a, 1, 0);
    const L det_b = el(b, 0, 0) * el(b, 1, 1) - el(b, 0, 1) * el(b, 1, 0);
    const L tr_sqrt = std::sqrt(tr_ab + 2 * std::sqrt(det_a * det_b));
    const L dm = (static_cast<L>(m1[0]) - m2[0]) * (static_cast<L>(m1[0]) - m2[0]) +
                 (static_cast<L>(m1[1]) - m2[1]) * (static_cast<L>(m1[1]) - m2[1]);
    const L want = dm + el(a, 0, 0) + el(a, 1, 1) + el(b, 0, 0) + el(b, 1, 1) - 2 * tr_sqrt;
    CHECK(std::abs(metrics::frechet_distance<double>(m1, a, m2, b) - static_cast<double>(want)) <= 1e-8);
  }
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const MatrixXd a = spd(6, 500 + seed), b = spd(6, 600 + seed);
    const VectorXd m1 = normal_matrix(6, 1, 700 + seed).col(0), m2 = normal_matrix(6, 1, 800 + seed).col(0);
    const double ab = metrics::frechet_distance<double>(m1, a, m2, b), ba = metrics::frechet_distance<double>(m2, b, m1, a);
    CHECK(std::abs(ab - ba) <= 1e-8);
    CHECK(ab >= 0.0);
  }
  MatrixXd bad = MatrixXd::Identity(2, 2);
  bad(1, 1) = -1e-3;
  CHECK_THROWS_AS(metrics::frechet_distance<double>(VectorXd::Zero(2), bad, VectorXd::Zero(2), MatrixXd::Identity(2, 2)),
                  NumericError);
  MatrixXd tiny = MatrixXd::Identity(2, 2);
  tiny(1, 1) = -1e-10;
  CHECK(metrics::frechet_distance<double>(VectorXd::Zero(2), tiny, VectorXd::Zero(2), tiny) >= 0.0);
}

TEST_CASE("proxy FID separates a hue shift from a resplit") {
  // A cyclic shift leaves the uniform hue marginal unchanged, so shift with saturation.
  auto teacher = teacher::Teacher::analytic(32, {8, 8}, 64, 3);
  synth::DatasetConfig cfg;
  auto a = synth::generate_batch(50, 1024, cfg).images;
  auto b = synth::generate_batch(51, 1024, cfg).images;
  synth::ImageBatch shifted = b;
  for (Index i = 0; i < shifted.count(); ++i) {
    auto& scene = shifted.scenes[static_cast<std::size_t>(i)];
    for (auto& o : scene.objects) o.hue_bucket = std::min(o.hue_bucket + 4, cfg.hue_buckets - 1);
    synth::render_scene(scene, cfg, shifted.pixels.ptr() + i * 3 * 32 * 32);
  }
  const double split = metrics::proxy_fid(a, b, teacher), shift = metrics::proxy_fid(a, shifted, teacher);
  CHECK(split < 0.05 * shift);
  CHECK(metrics::proxy_fid(a, a, teacher) <= 1e-8);
  CHECK_THROWS_AS(metrics::proxy_fid(a.subset(0, 100), b, teacher), DataError);
  const auto pooled = metrics::pooled_teacher_features(teacher, a.subset(0, 3));
  CHECK(pooled.rows() == 3);
  CHECK(pooled.cols() == 64);
}

TEST_CASE("proxy FID on Gaussian features with a known shift") {
  const Index n = 4096, d = 8;
  MatrixXd fa = normal_matrix(n, d, 60), fb = normal_matrix(n, d, 61);
  VectorXd delta = VectorXd::Zero(d);
  delta.head(4).setConstant(1.0);
  fb.rowwise() += delta.transpose();
  CHECK(metrics::proxy_fid_features(fa, fb) == doctest::Approx(delta.squaredNorm()).epsilon(0.1));
  auto g = metrics::fit_gaussian(fa);
  CHECK((g.cov - MatrixXd::Identity(d, d)).cwiseAbs().maxCoeff() < 0.1);
}

TEST_CASE("pixel metrics") {
  auto x = synth::generate_batch(70, 3, {}).images.pixels;
  auto same = metrics::pixel_metrics(x, x);
  CHECK(same.psnr == 100.0);
  CHECK(same.ssim == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(metrics::psnr_from_mse(0.01) == doctest::Approx(20.0).epsilon(1e-14));

  auto gray = Tensor<float>::constant({1, 3, 16, 16}, 0.5f), lifted = Tensor<float>::constant({1, 3, 16, 16}, 0.6f);
  auto pm = metrics::pixel_metrics(gray, lifted);
  CHECK(pm.psnr == doctest::Approx(20.0).epsilon(1e-5));
  // Constant windows: the variance and covariance terms cancel.
  const double c1 = 1e-4, m1 = 0.5, m2 = static_cast<double>(0.6f);
  CHECK(pm.ssim == doctest::Approx((2 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1)).epsilon(1e-6));

  Rng rng(71);
  Tensor<float> noisy(x.shape);
  for (Index i = 0; i < x.size(); ++i) noisy.data[i] = std::clamp(x.data[i] + 0.1f * static_cast<float>(rng.normal()), 0.0f, 1.0f);
  CHECK(metrics::pixel_metrics(x, noisy).ssim == doctest::Approx(ssim_brute(x, noisy)).epsilon(1e-9));
  CHECK_THROWS_AS(metrics::pixel_metrics(x, gray), ConfigError);
}

TEST_CASE("Pearson correlation") {
  std::vector<double> x{0.3, 1.2, -0.7, 2.5, 0.0, 4.1};
  std::vector<double> y, z;
  for (double v : x) {
    y.push_back(2 * v + 1);
    z.push_back(-v);
  }
  CHECK(metrics::pearson(x, y) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(metrics::pearson(x, z) == doctest::Approx(-1.0).epsilon(1e-15));
  for (double a : {-1e3, -2.5, -1e-3, 1e-3, 0.7, 1e4}) {
    std::vector<double> w;
    for (double v : x) w.push_back(a * v + 3.0);
    CHECK(std::abs(metrics::pearson(x, w) - (a > 0 ? 1.0 : -1.0)) <= 1e-12);
  }
  // Recomputed from four published (F1, gFID) rows.
  const double r = metrics::pearson({0.0786, 0.1094, 0.1177, 0.1385}, {17.43, 11.40, 8.96, 7.57});
  CHECK(r >= -1.0);
  CHECK(r <= -0.9);
  CHECK(r == doctest::Approx(-0.9756515411465546).epsilon(1e-12));
  CHECK_THROWS_AS(metrics::pearson({1, 1, 1}, {1, 2, 3}), DomainError);
  CHECK_THROWS_AS(metrics::pearson({1, 2}, {1, 2}), DomainError);
}

TEST_CASE("metric report schema") {
  metrics::MetricReport r;
  r.variant = "baseline";
  r.probe_f1 = metrics::Field::of(0.4);
  r.probe_top5_recall = metrics::Field::of(0.5);
  r.class_accuracy = metrics::Field::null("no class probe requested");
  r.gini = metrics::Field::of(0.3);
  r.gmm_heldout_nll[4] = metrics::Field::of(12.5);
  r.gmm_heldout_nll[8] = metrics::Field::null("too few points");
  r.proxy_rfid = metrics::Field::of(1.5);
  r.proxy_gfid = metrics::Field::of(3.0);
  r.psnr = metrics::Field::of(25.0);
  r.ssim = metrics::Field::of(0.8);
  r.perceptual = metrics::Field::of(0.01);
  r.excluded_attributes = {"size_small"};
  r.provenance = {{"seed", 1}};
  auto j = metrics::to_json(r);
  CHECK_NOTHROW(metrics::validate_metric_report(j));
  auto back = metrics::metric_report_from_json(nlohmann::json::parse(j.dump()));
  CHECK(metrics::to_json(back) == j);
  CHECK_FALSE(back.class_accuracy.value.has_value());
  CHECK(back.gmm_heldout_nll.at(8).reason == "too few points");

  auto missing_reason = j;
  missing_reason["null_reasons"].erase("class_accuracy");
  CHECK_THROWS_AS(metrics::validate_metric_report(missing_reason), DataError);
  auto bad_number = j;
  bad_number["metrics"]["gini"] = "high";
  CHECK_THROWS_AS(metrics::validate_metric_report(bad_number), DataError);
  auto nan = j;
  nan["metrics"]["psnr"] = std::nan("");
  CHECK_THROWS_AS(metrics::validate_metric_report(nan), DataError);
  auto version = j;
  version["schema_version"] = 99;
  CHECK_THROWS_AS(metrics::validate_metric_report(version), DataError);
}

TEST_CASE("analytic teacher features are linearly decodable per patch") {
  synth::DatasetConfig cfg;
  const teacher::PatchGrid grid{4, 4};
  auto tr = synth::generate_batch(80, 2000, cfg), te = synth::generate_batch(81, 500, cfg);
  auto flat = [&](const synth::ImageBatch& b) {
    auto f = teacher::analytic_teacher_features(b, grid, 21, 5).features;
    return MatrixXd(f.as_matrix(f.dim(0), f.size() / f.dim(0)).cast<double>());
  };
  metrics::ProbeConfig pc;
  pc.max_iter = 2000;
  auto model = metrics::fit_linear_probe(flat(tr.images), synth::attribute_matrix(tr.attributes), pc);
  auto s = metrics::evaluate_probe(model, flat(te.images), synth::attribute_matrix(te.attributes));
  CHECK(s.macro_f1 >= 0.95);
}
