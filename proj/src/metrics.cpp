#include "sendvae/metrics.hpp"

#include <algorithm>
#include <numeric>

#include "sendvae/core/rng.hpp"

namespace sendvae::metrics {
namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

constexpr double kLog2Pi = 1.8378770664093453;

struct Standardizer {
  VectorXd mean, stddev;
};

Standardizer fit_standardizer(const MatrixXd& x) {
  Standardizer s;
  s.mean = x.colwise().mean().transpose();
  s.stddev = ((x.rowwise() - s.mean.transpose()).array().square().colwise().mean()).sqrt().transpose();
  for (Index j = 0; j < s.stddev.size(); ++j)
    if (!(s.stddev[j] > 1e-12)) s.stddev[j] = 1.0;
  return s;
}

MatrixXd standardize(const MatrixXd& x, const VectorXd& mean, const VectorXd& stddev) {
  return (x.rowwise() - mean.transpose()).array().rowwise() / stddev.transpose().array();
}

// Largest eigenvalue of A^T A / n for A = [x, 1], by power iteration.
double smoothness(const MatrixXd& xs, std::uint64_t seed) {
  const Index n = xs.rows(), f = xs.cols();
  Rng rng(derive_seed(seed, {0x9A0B}));
  VectorXd v(f + 1);
  for (Index i = 0; i <= f; ++i) v[i] = 1.0 + 0.1 * rng.uniform();
  v.normalize();
  double lambda = 0;
  for (int it = 0; it < 200; ++it) {
    VectorXd av = xs * v.head(f) + VectorXd::Constant(n, v[f]);
    VectorXd w(f + 1);
    w.head(f) = xs.transpose() * av;
    w[f] = av.sum();
    w /= static_cast<double>(n);
    const double next = w.norm();
    if (next == 0) return 1.0;
    v = w / next;
    if (std::abs(next - lambda) < 1e-10 * next) {
      lambda = next;
      break;
    }
    lambda = next;
  }
  return lambda;
}

MatrixXd sigmoid(const MatrixXd& z) {
  return z.unaryExpr([](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); });
}

MatrixXd softmax_rows(const MatrixXd& z) {
  MatrixXd p = z.colwise() - z.rowwise().maxCoeff();
  p = p.array().exp();
  p.array().colwise() /= p.rowwise().sum().array();
  return p;
}

// Full-batch accelerated gradient descent with gradient-based restart on a
// convex logistic objective; `probs` maps logits to probabilities.
template <typename Probs>
void fit_logistic(const MatrixXd& xs, const MatrixXd& y, double curvature, const ProbeConfig& cfg, Probs probs,
                  ProbeModel& m) {
  const Index n = xs.rows(), f = xs.cols(), k = y.cols();
  const double step = 1.0 / (1.05 * curvature * smoothness(xs, cfg.seed) + cfg.l2);
  MatrixXd w = MatrixXd::Zero(k, f), w_prev = w;
  VectorXd b = VectorXd::Zero(k), b_prev = b;
  double t = 1.0;
  auto gradient = [&](const MatrixXd& wv, const VectorXd& bv, MatrixXd& gw, VectorXd& gb) {
    MatrixXd z = (xs * wv.transpose()).rowwise() + bv.transpose();
    MatrixXd r = probs(z) - y;
    gw = r.transpose() * xs / static_cast<double>(n) + cfg.l2 * wv;
    gb = r.colwise().sum().transpose() / static_cast<double>(n);
  };
  MatrixXd gw;
  VectorXd gb;
  int it = 0;
  for (; it < cfg.max_iter; ++it) {
    gradient(w, b, gw, gb);
    m.grad_norm = std::sqrt(gw.squaredNorm() + gb.squaredNorm());
    if (m.grad_norm < cfg.grad_tol) break;
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    const double beta = (t - 1.0) / t_next;
    MatrixXd yw = w + beta * (w - w_prev);
    VectorXd yb = b + beta * (b - b_prev);
    MatrixXd gyw;
    VectorXd gyb;
    gradient(yw, yb, gyw, gyb);
    w_prev = w;
    b_prev = b;
    w = yw - step * gyw;
    b = yb - step * gyb;
    t = t_next;
    // Restart momentum when the step opposes the gradient at the extrapolated point.
    if ((gyw.cwiseProduct(w - w_prev)).sum() + gyb.dot(b - b_prev) > 0) t = 1.0;
  }
  m.iterations = it;
  m.weights = w;
  m.bias = b;
}

}  // namespace

MatrixXd ProbeModel::scores(const MatrixXd& x) const {
  return (standardize(x, mean, stddev) * weights.transpose()).rowwise() + bias.transpose();
}

ProbeModel fit_linear_probe(const MatrixXd& x, const MatrixXd& labels, const ProbeConfig& cfg) {
  if (x.rows() != labels.rows()) throw ConfigError("fit_linear_probe: row count mismatch");
  ProbeModel m;
  m.task = ProbeTask::kAttributeMultilabel;
  auto st = fit_standardizer(x);
  m.mean = st.mean;
  m.stddev = st.stddev;
  for (Index a = 0; a < labels.cols(); ++a) {
    const double s = labels.col(a).sum();
    if (s <= 0 || s >= static_cast<double>(labels.rows())) m.excluded.push_back(static_cast<int>(a));
    else m.included.push_back(static_cast<int>(a));
  }
  MatrixXd y(labels.rows(), static_cast<Index>(m.included.size()));
  for (std::size_t i = 0; i < m.included.size(); ++i) y.col(static_cast<Index>(i)) = labels.col(m.included[i]);
  fit_logistic(standardize(x, m.mean, m.stddev), y, 0.25, cfg, [](const MatrixXd& z) { return sigmoid(z); }, m);
  return m;
}

ProbeModel fit_linear_probe(const MatrixXd& x, const std::vector<int>& labels, int num_classes, const ProbeConfig& cfg) {
  if (x.rows() != static_cast<Index>(labels.size())) throw ConfigError("fit_linear_probe: row count mismatch");
  ProbeModel m;
  m.task = ProbeTask::kClassMulticlass;
  auto st = fit_standardizer(x);
  m.mean = st.mean;
  m.stddev = st.stddev;
  MatrixXd y = MatrixXd::Zero(x.rows(), num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) throw ConfigError("fit_linear_probe: label out of range");
    y(static_cast<Index>(i), labels[i]) = 1;
  }
  for (int c = 0; c < num_classes; ++c) m.included.push_back(c);
  fit_logistic(standardize(x, m.mean, m.stddev), y, 0.5, cfg, [](const MatrixXd& z) { return softmax_rows(z); }, m);
  return m;
}

double macro_f1(const MatrixXd& predicted, const MatrixXd& truth, const std::vector<int>& columns) {
  if (columns.empty()) return 0;
  double sum = 0;
  for (int c : columns) {
    double tp = 0, fp = 0, fn = 0;
    for (Index i = 0; i < truth.rows(); ++i) {
      const bool p = predicted(i, c) > 0.5, t = truth(i, c) > 0.5;
      tp += p && t;
      fp += p && !t;
      fn += !p && t;
    }
    sum += (tp + fp + fn) == 0 ? 1.0 : 2 * tp / (2 * tp + fp + fn);
  }
  return sum / static_cast<double>(columns.size());
}

double top_k_recall(const MatrixXd& scores, const MatrixXd& truth, const std::vector<int>& columns, int k,
                    int* skipped) {
  double sum = 0;
  int counted = 0, missing = 0;
  std::vector<int> order(columns.size());
  for (Index i = 0; i < truth.rows(); ++i) {
    double positives = 0;
    for (int c : columns) positives += truth(i, c) > 0.5;
    if (positives == 0) {
      ++missing;
      continue;
    }
    std::iota(order.begin(), order.end(), 0);
    const auto kk = static_cast<std::ptrdiff_t>(std::min<std::size_t>(static_cast<std::size_t>(k), order.size()));
    std::partial_sort(order.begin(), order.begin() + kk, order.end(), [&](int a, int b) {
      const double sa = scores(i, a), sb = scores(i, b);
      return sa != sb ? sa > sb : a < b;
    });
    double hit = 0;
    for (std::ptrdiff_t j = 0; j < kk; ++j) hit += truth(i, columns[static_cast<std::size_t>(order[static_cast<std::size_t>(j)])]) > 0.5;
    sum += hit / positives;
    ++counted;
  }
  if (skipped) *skipped = missing;
  return counted ? sum / counted : 0.0;
}

ProbeScores evaluate_probe(const ProbeModel& model, const MatrixXd& x, const MatrixXd& labels) {
  if (model.task != ProbeTask::kAttributeMultilabel) throw ConfigError("evaluate_probe: multilabel model expected");
  const MatrixXd s = model.scores(x);
  // Scores are indexed by output; lay them out by label column.
  MatrixXd by_col = MatrixXd::Constant(x.rows(), labels.cols(), -1e300);
  MatrixXd pred = MatrixXd::Zero(x.rows(), labels.cols());
  for (std::size_t o = 0; o < model.included.size(); ++o) {
    by_col.col(model.included[o]) = s.col(static_cast<Index>(o));
    pred.col(model.included[o]) = (s.col(static_cast<Index>(o)).array() > 0).cast<double>().matrix();
  }
  ProbeScores r;
  r.macro_f1 = macro_f1(pred, labels, model.included);
  r.top5_recall = top_k_recall(by_col, labels, model.included, 5, &r.images_without_positives);
  double exact = 0;
  for (Index i = 0; i < x.rows(); ++i) {
    bool all = true;
    for (int c : model.included) all &= (pred(i, c) > 0.5) == (labels(i, c) > 0.5);
    exact += all;
  }
  r.accuracy = exact / static_cast<double>(std::max<Index>(1, x.rows()));
  return r;
}

ProbeScores evaluate_probe(const ProbeModel& model, const MatrixXd& x, const std::vector<int>& labels) {
  if (model.task != ProbeTask::kClassMulticlass) throw ConfigError("evaluate_probe: multiclass model expected");
  const MatrixXd s = model.scores(x);
  const Index C = s.cols();
  MatrixXd truth = MatrixXd::Zero(x.rows(), C), pred = MatrixXd::Zero(x.rows(), C);
  double correct = 0;
  for (Index i = 0; i < x.rows(); ++i) {
    Index best;
    s.row(i).maxCoeff(&best);
    truth(i, labels[static_cast<std::size_t>(i)]) = 1;
    pred(i, best) = 1;
    correct += best == labels[static_cast<std::size_t>(i)];
  }
  ProbeScores r;
  r.accuracy = correct / static_cast<double>(std::max<Index>(1, x.rows()));
  r.macro_f1 = macro_f1(pred, truth, model.included);
  r.top5_recall = top_k_recall(s, truth, model.included, 5, &r.images_without_positives);
  return r;
}

double gini(const VectorXd& values) {
  const Index n = values.size();
  if (n == 0) throw DataError("gini: empty input");
  if ((values.array() < 0).any()) throw DataError("gini: negative density value");
  const double mean = values.mean();
  if (!(mean > 0)) throw DataError("gini: zero mean density (degenerate input)");
  std::vector<double> v(values.data(), values.data() + n);
  std::sort(v.begin(), v.end());
  // sum_ij |v_i - v_j| = 2 sum_i (2i - n + 1) v_(i) over the ascending order.
  double acc = 0;
  for (Index i = 0; i < n; ++i) acc += static_cast<double>(2 * i - n + 1) * v[static_cast<std::size_t>(i)];
  return 2 * acc / (2.0 * static_cast<double>(n) * static_cast<double>(n) * mean);
}

namespace {

// Log densities; returns an empty vector when every bandwidth is zero.
VectorXd kde_log_densities(const MatrixXd& points, const KdeConfig& cfg) {
  if (points.rows() < 64) throw DataError("kde_gini needs at least 64 vectors, got " + std::to_string(points.rows()));
  MatrixXd x = points;
  if (x.rows() > cfg.max_points) {
    std::vector<Index> idx(static_cast<std::size_t>(x.rows()));
    std::iota(idx.begin(), idx.end(), Index{0});
    Rng rng(derive_seed(cfg.seed, {0x6D1}));
    for (Index i = 0; i < cfg.max_points; ++i)
      std::swap(idx[static_cast<std::size_t>(i)],
                idx[static_cast<std::size_t>(i + static_cast<Index>(rng.below(static_cast<std::uint64_t>(x.rows() - i))))]);
    MatrixXd sub(cfg.max_points, x.cols());
    for (Index i = 0; i < cfg.max_points; ++i) sub.row(i) = points.row(idx[static_cast<std::size_t>(i)]);
    x = std::move(sub);
  }
  x = x.rowwise() - x.colwise().mean();
  if (cfg.pca_dim > 0 && x.cols() > cfg.pca_dim) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(x.transpose() * x / static_cast<double>(x.rows()));
    x = x * es.eigenvectors().rightCols(cfg.pca_dim);
  }
  const Index n = x.rows();
  const double factor = std::pow(static_cast<double>(n), -1.0 / (static_cast<double>(x.cols()) + 4.0));
  VectorXd sd = (x.array().square().colwise().sum() / static_cast<double>(n - 1)).sqrt().transpose();
  std::vector<Index> keep;
  for (Index j = 0; j < sd.size(); ++j)
    if (sd[j] > 1e-12 * std::max(1.0, sd.maxCoeff())) keep.push_back(j);
  if (keep.empty()) return {};
  MatrixXd y(n, static_cast<Index>(keep.size()));
  double log_norm = 0;
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const double h = sd[keep[k]] * factor;
    y.col(static_cast<Index>(k)) = x.col(keep[k]) / h;
    log_norm += std::log(h) + 0.5 * kLog2Pi;
  }
  VectorXd sq = y.rowwise().squaredNorm();
  MatrixXd d2 = (-2.0 * y * y.transpose()).colwise() + sq;
  d2.rowwise() += sq.transpose();
  VectorXd out(n);
  for (Index i = 0; i < n; ++i) {
    const double mx = (-0.5 * d2.row(i).array()).maxCoeff();
    const double s = (-0.5 * d2.row(i).array() - mx).exp().sum();
    out[i] = mx + std::log(s / static_cast<double>(n)) - log_norm;
  }
  return out;
}

}  // namespace

VectorXd kde_densities(const MatrixXd& points, const KdeConfig& cfg) {
  VectorXd l = kde_log_densities(points, cfg);
  if (l.size() == 0) throw DataError("kde_gini: all points identical (zero bandwidth)");
  return l.array().exp();
}

double kde_gini(const MatrixXd& points, const KdeConfig& cfg) {
  VectorXd l = kde_log_densities(points, cfg);
  if (l.size() == 0) throw DataError("kde_gini: all points identical (zero bandwidth)");
  // Gini is scale invariant, so normalize by the peak before exponentiating.
  return gini((l.array() - l.maxCoeff()).exp().matrix());
}

namespace {

MatrixXd component_logp(const GmmResult& g, const MatrixXd& x) {
  const Index K = g.means.rows();
  MatrixXd lp(x.rows(), K);
  for (Index k = 0; k < K; ++k) {
    const Eigen::RowVectorXd inv = g.variances.row(k).cwiseInverse();
    const double c = std::log(g.weights[k]) - 0.5 * (g.variances.row(k).array().log().sum() + kLog2Pi * x.cols());
    lp.col(k) = ((x.rowwise() - g.means.row(k)).array().square().rowwise() * inv.array()).rowwise().sum() * -0.5 + c;
  }
  return lp;
}

VectorXd row_logsumexp(const MatrixXd& lp) {
  VectorXd mx = lp.rowwise().maxCoeff();
  return mx.array() + ((lp.colwise() - mx).array().exp().rowwise().sum()).log();
}

}  // namespace

double gmm_mean_loglik(const GmmResult& g, const MatrixXd& points) {
  return row_logsumexp(component_logp(g, points)).mean();
}

GmmResult gmm_em(const MatrixXd& x, int K, int iterations, const MatrixXd& heldout, const GmmConfig& cfg) {
  if (K < 1) throw ConfigError("gmm_em: K must be >= 1");
  const Index n = x.rows(), F = x.cols();
  if (n < 10 * K) throw DataError("gmm_em: need at least 10*K points");
  Rng rng(derive_seed(cfg.seed, {0x63A}));
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const Eigen::RowVectorXd global_var =
      ((x.rowwise() - mu).array().square().colwise().sum() / static_cast<double>(n)).max(cfg.var_floor);

  GmmResult g;
  g.means.resize(K, F);
  g.variances = global_var.replicate(K, 1);
  g.weights = VectorXd::Constant(K, 1.0 / K);
  // k-means++ seeding.
  g.means.row(0) = x.row(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
  VectorXd d2 = (x.rowwise() - g.means.row(0)).rowwise().squaredNorm();
  for (int k = 1; k < K; ++k) {
    const double total = d2.sum();
    Index pick = 0;
    if (total > 0) {
      double u = rng.uniform() * total, acc = 0;
      for (Index i = 0; i < n; ++i) {
        acc += d2[i];
        pick = i;
        if (acc >= u) break;
      }
    } else {
      pick = static_cast<Index>(rng.below(static_cast<std::uint64_t>(n)));
    }
    g.means.row(k) = x.row(pick);
    d2 = d2.cwiseMin((x.rowwise() - g.means.row(k)).rowwise().squaredNorm());
  }

  for (int it = 0; it < iterations; ++it) {
    MatrixXd lp = component_logp(g, x);
    VectorXd ll = row_logsumexp(lp);
    g.loglik_trace.push_back(ll.mean());
    MatrixXd r = (lp.colwise() - ll).array().exp();
    VectorXd nk = r.colwise().sum().transpose();
    for (Index k = 0; k < K; ++k) {
      if (nk[k] < 1e-10 * static_cast<double>(n)) {
        Index worst;
        ll.minCoeff(&worst);
        g.means.row(k) = x.row(worst);
        g.variances.row(k) = global_var;
        g.weights[k] = 1.0 / static_cast<double>(n);
        ++g.reseeds;
        continue;
      }
      g.means.row(k) = r.col(k).transpose() * x / nk[k];
      g.variances.row(k) =
          ((r.col(k).transpose() * (x.rowwise() - g.means.row(k)).array().square().matrix()) / nk[k]).array().max(cfg.var_floor);
      g.weights[k] = nk[k] / static_cast<double>(n);
    }
    g.weights /= g.weights.sum();
  }
  g.heldout_nll = heldout.rows() > 0 ? -gmm_mean_loglik(g, heldout) : 0.0;
  return g;
}

Gaussian fit_gaussian(const MatrixXd& rows) {
  if (rows.rows() < 2) throw DataError("fit_gaussian: need at least two samples");
  Gaussian g;
  g.mean = rows.colwise().mean().transpose();
  MatrixXd c = rows.rowwise() - g.mean.transpose();
  g.cov = c.transpose() * c / static_cast<double>(rows.rows() - 1);
  return g;
}

MatrixXd pooled_teacher_features(const teacher::Teacher& teacher, const synth::ImageBatch& images) {
  const Index B = images.count();
  MatrixXd out(B, teacher.dim());
  constexpr Index kChunk = 512;
  for (Index b0 = 0; b0 < B; b0 += kChunk) {
    const Index m = std::min(kChunk, B - b0);
    auto f = teacher::teacher_forward(teacher, images.subset(b0, b0 + m));
    const Index N = f.patches(), D = f.dim();
    for (Index i = 0; i < m; ++i)
      out.row(b0 + i) = f.features.data.segment(i * N * D, N * D).template cast<double>().reshaped(D, N).rowwise().mean().transpose();
  }
  return out;
}

double proxy_fid_features(const MatrixXd& fa, const MatrixXd& fb) {
  if (fa.rows() < kProxyFidMinSamples || fb.rows() < kProxyFidMinSamples)
    throw DataError("proxy_fid needs at least " + std::to_string(kProxyFidMinSamples) + " samples per side, got " +
                    std::to_string(fa.rows()) + " and " + std::to_string(fb.rows()));
  auto ga = fit_gaussian(fa), gb = fit_gaussian(fb);
  return frechet_distance<double>(ga.mean, ga.cov, gb.mean, gb.cov);
}

double proxy_fid(const synth::ImageBatch& a, const synth::ImageBatch& b, const teacher::Teacher& teacher) {
  if (a.count() < kProxyFidMinSamples || b.count() < kProxyFidMinSamples)
    throw DataError("proxy_fid needs at least " + std::to_string(kProxyFidMinSamples) + " images per side");
  return proxy_fid_features(pooled_teacher_features(teacher, a), pooled_teacher_features(teacher, b));
}

double psnr_from_mse(double mse) { return mse < 1e-10 ? 100.0 : std::min(100.0, 10.0 * std::log10(1.0 / mse)); }

PixelScores pixel_metrics(const Tensor<float>& x, const Tensor<float>& x_hat) {
  if (x.shape != x_hat.shape || x.ndim() != 4) throw ConfigError("pixel_metrics: shapes must match [B, C, H, W]");
  const Index B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  constexpr Index kWin = 8;
  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  if (H < kWin || W < kWin) throw ConfigError("pixel_metrics: image smaller than the SSIM window");
  const Index per = C * H * W;
  double psnr_sum = 0, ssim_sum = 0;
  long windows = 0;
  // Summed-area tables for the five window moments.
  std::vector<double> sa[5];
  for (auto& s : sa) s.assign(static_cast<std::size_t>((H + 1) * (W + 1)), 0.0);
  for (Index b = 0; b < B; ++b) {
    const double mse = (x.data.segment(b * per, per) - x_hat.data.segment(b * per, per)).template cast<double>().square().mean();
    psnr_sum += psnr_from_mse(mse);
    for (Index c = 0; c < C; ++c) {
      const float* p = x.ptr() + b * per + c * H * W;
      const float* q = x_hat.ptr() + b * per + c * H * W;
      for (Index i = 0; i < H; ++i)
        for (Index j = 0; j < W; ++j) {
          const double u = p[i * W + j], v = q[i * W + j];
          const double vals[5] = {u, v, u * u, v * v, u * v};
          const auto at = [&](Index r, Index s) { return static_cast<std::size_t>(r * (W + 1) + s); };
          for (int k = 0; k < 5; ++k)
            sa[k][at(i + 1, j + 1)] = vals[k] + sa[k][at(i, j + 1)] + sa[k][at(i + 1, j)] - sa[k][at(i, j)];
        }
      const double inv = 1.0 / (kWin * kWin);
      for (Index i = 0; i + kWin <= H; ++i)
        for (Index j = 0; j + kWin <= W; ++j) {
          double m[5];
          for (int k = 0; k < 5; ++k) {
            const auto& s = sa[k];
            const auto at = [&](Index r, Index t) { return s[static_cast<std::size_t>(r * (W + 1) + t)]; };
            m[k] = (at(i + kWin, j + kWin) - at(i, j + kWin) - at(i + kWin, j) + at(i, j)) * inv;
          }
          const double vx = m[2] - m[0] * m[0], vy = m[3] - m[1] * m[1], cxy = m[4] - m[0] * m[1];
          ssim_sum += ((2 * m[0] * m[1] + C1) * (2 * cxy + C2)) / ((m[0] * m[0] + m[1] * m[1] + C1) * (vx + vy + C2));
          ++windows;
        }
    }
  }
  return {psnr_sum / static_cast<double>(B), ssim_sum / static_cast<double>(windows)};
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ConfigError("pearson: series lengths differ");
  if (x.size() < 3) throw DomainError("pearson: need at least 3 points");
  const auto n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n, my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) throw DomainError("pearson: undefined correlation for a constant series");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// ---------------------------------------------------------------- report

namespace {

const char* const kMetricFields[] = {"probe_f1", "probe_top5_recall", "class_accuracy", "gini",      "proxy_rfid",
                                     "proxy_gfid", "psnr",           "ssim",           "perceptual"};

std::vector<std::pair<const char*, const Field*>> fields_of(const MetricReport& r) {
  return {{"probe_f1", &r.probe_f1},     {"probe_top5_recall", &r.probe_top5_recall},
          {"class_accuracy", &r.class_accuracy}, {"gini", &r.gini},
          {"proxy_rfid", &r.proxy_rfid}, {"proxy_gfid", &r.proxy_gfid},
          {"psnr", &r.psnr},             {"ssim", &r.ssim},
          {"perceptual", &r.perceptual}};
}

Field field_from(const nlohmann::json& metrics, const nlohmann::json& reasons, const std::string& key) {
  if (metrics.contains(key) && metrics[key].is_number()) return Field::of(metrics[key].get<double>());
  return Field::null(reasons.value(key, "missing"));
}

}  // namespace

nlohmann::json to_json(const Field& f) {
  return f.value ? nlohmann::json(*f.value) : nlohmann::json(nullptr);
}

nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j;
  j["schema_version"] = kReportSchemaVersion;
  j["variant"] = r.variant;
  nlohmann::json metrics = nlohmann::json::object(), reasons = nlohmann::json::object();
  for (const auto& [name, f] : fields_of(r)) {
    metrics[name] = to_json(*f);
    if (!f->value) reasons[name] = f->reason.empty() ? "not computed" : f->reason;
  }
  nlohmann::json gmm = nlohmann::json::object();
  for (const auto& [k, f] : r.gmm_heldout_nll) {
    gmm[std::to_string(k)] = to_json(f);
    if (!f.value) reasons["gmm_heldout_nll." + std::to_string(k)] = f.reason.empty() ? "not computed" : f.reason;
  }
  j["metrics"] = metrics;
  j["gmm_heldout_nll"] = gmm;
  j["null_reasons"] = reasons;
  j["excluded_attributes"] = r.excluded_attributes;
  j["images_without_positives"] = r.images_without_positives;
  j["definitions"] = {
      {"probe_top5_recall", "multi-label recall@5: |top-5 scored attributes ∩ true positives| / |true positives|, "
                            "averaged over images with at least one positive"},
      {"proxy", "proxy_rfid, proxy_gfid and perceptual use the frozen teacher as feature network; not comparable "
                "to Inception-based values"}};
  j["provenance"] = r.provenance;
  j["notes"] = r.notes;
  return j;
}

void validate_metric_report(const nlohmann::json& j) {
  auto fail = [](const std::string& why) { throw DataError("metric report: " + why); };
  if (!j.is_object()) fail("not an object");
  if (j.value("schema_version", -1) != kReportSchemaVersion) fail("unsupported schema_version");
  if (!j.contains("variant") || !j["variant"].is_string()) fail("variant must be a string");
  for (const char* key : {"metrics", "gmm_heldout_nll", "null_reasons", "provenance"})
    if (!j.contains(key) || !j[key].is_object()) fail(std::string(key) + " must be an object");
  if (!j.contains("excluded_attributes") || !j["excluded_attributes"].is_array()) fail("excluded_attributes must be an array");
  const auto& reasons = j["null_reasons"];
  auto check = [&](const nlohmann::json& v, const std::string& name) {
    if (v.is_null()) {
      if (!reasons.contains(name) || !reasons[name].is_string() || reasons[name].get<std::string>().empty())
        fail(name + " is null without a reason");
    } else if (!v.is_number() || !std::isfinite(v.get<double>())) {
      fail(name + " must be a finite number or null");
    }
  };
  for (const char* key : kMetricFields) {
    if (!j["metrics"].contains(key)) fail(std::string("missing metric ") + key);
    check(j["metrics"][key], key);
  }
  for (const auto& [k, v] : j["gmm_heldout_nll"].items()) check(v, "gmm_heldout_nll." + k);
}

MetricReport metric_report_from_json(const nlohmann::json& j) {
  validate_metric_report(j);
  MetricReport r;
  r.variant = j["variant"];
  const auto& m = j["metrics"];
  const auto& reasons = j["null_reasons"];
  r.probe_f1 = field_from(m, reasons, "probe_f1");
  r.probe_top5_recall = field_from(m, reasons, "probe_top5_recall");
  r.class_accuracy = field_from(m, reasons, "class_accuracy");
  r.gini = field_from(m, reasons, "gini");
  r.proxy_rfid = field_from(m, reasons, "proxy_rfid");
  r.proxy_gfid = field_from(m, reasons, "proxy_gfid");
  r.psnr = field_from(m, reasons, "psnr");
  r.ssim = field_from(m, reasons, "ssim");
  r.perceptual = field_from(m, reasons, "perceptual");
  for (const auto& [k, v] : j["gmm_heldout_nll"].items())
    r.gmm_heldout_nll[std::stoi(k)] =
        v.is_number() ? Field::of(v.get<double>()) : Field::null(reasons.value("gmm_heldout_nll." + k, "missing"));
  r.excluded_attributes = j["excluded_attributes"].get<std::vector<std::string>>();
  r.images_without_positives = j.value("images_without_positives", 0);
  r.provenance = j["provenance"];
  if (j.contains("notes")) r.notes = j["notes"];
  return r;
}

}  // namespace sendvae::metrics
