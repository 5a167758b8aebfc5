#pragma once

// Latent-space evaluation: linear probes, KDE-Gini uniformity, diagonal GMM
// discrimination, Frechet distance and its teacher-featured proxy FID, pixel
// metrics, Pearson correlation, and the MetricReport container.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "sendvae/core/error.hpp"
#include "sendvae/core/tensor.hpp"
#include "sendvae/synthdata.hpp"
#include "sendvae/teacher.hpp"

namespace sendvae::metrics {

// ---------------------------------------------------------------- probes

enum class ProbeTask { kAttributeMultilabel, kClassMulticlass };

struct ProbeConfig {
  double l2 = 1e-4;
  double grad_tol = 1e-5;
  int max_iter = 5000;
  std::uint64_t seed = 0;
};

struct ProbeModel {
  ProbeTask task = ProbeTask::kAttributeMultilabel;
  Eigen::MatrixXd weights;  // outputs x features, on standardized inputs
  Eigen::VectorXd bias;
  Eigen::VectorXd mean, stddev;
  std::vector<int> included;  // output index -> label column (multilabel)
  std::vector<int> excluded;  // degenerate label columns
  int iterations = 0;
  double grad_norm = 0;

  // Affine decision scores [B, outputs].
  Eigen::MatrixXd scores(const Eigen::MatrixXd& x) const;
};

// Rows of x are samples; labels is [B, A] with 0/1 entries.
ProbeModel fit_linear_probe(const Eigen::MatrixXd& x, const Eigen::MatrixXd& labels, const ProbeConfig& cfg = {});
ProbeModel fit_linear_probe(const Eigen::MatrixXd& x, const std::vector<int>& labels, int num_classes,
                            const ProbeConfig& cfg = {});

struct ProbeScores {
  double macro_f1 = 0;
  double top5_recall = 0;
  double accuracy = 0;
  int images_without_positives = 0;
};

ProbeScores evaluate_probe(const ProbeModel& model, const Eigen::MatrixXd& x, const Eigen::MatrixXd& labels);
ProbeScores evaluate_probe(const ProbeModel& model, const Eigen::MatrixXd& x, const std::vector<int>& labels);

// Macro-F1 of 0/1 predictions against 0/1 truth over the given columns.
double macro_f1(const Eigen::MatrixXd& predicted, const Eigen::MatrixXd& truth, const std::vector<int>& columns);
// Mean over images of |top-k scored columns ∩ positives| / |positives|.
double top_k_recall(const Eigen::MatrixXd& scores, const Eigen::MatrixXd& truth, const std::vector<int>& columns,
                    int k, int* skipped = nullptr);

// ---------------------------------------------------------------- uniformity

// Sum_ij |d_i - d_j| / (2 n^2 mean(d)).
double gini(const Eigen::VectorXd& values);

struct KdeConfig {
  int pca_dim = 8;  // 0 keeps the full dimension
  int max_points = 1024;
  std::uint64_t seed = 0;
};

// Gaussian KDE densities (Scott bandwidth) at each point, after optional PCA.
Eigen::VectorXd kde_densities(const Eigen::MatrixXd& points, const KdeConfig& cfg = {});
double kde_gini(const Eigen::MatrixXd& points, const KdeConfig& cfg = {});

// ---------------------------------------------------------------- discrimination

struct GmmConfig {
  std::uint64_t seed = 0;
  double var_floor = 1e-6;
};

struct GmmResult {
  Eigen::MatrixXd means;      // K x F
  Eigen::MatrixXd variances;  // K x F
  Eigen::VectorXd weights;
  std::vector<double> loglik_trace;  // mean training log-likelihood before each M-step
  double heldout_nll = 0;
  int reseeds = 0;
};

GmmResult gmm_em(const Eigen::MatrixXd& points, int K, int iterations, const Eigen::MatrixXd& heldout,
                 const GmmConfig& cfg = {});
// Mean log-likelihood of rows under a fitted mixture.
double gmm_mean_loglik(const GmmResult& g, const Eigen::MatrixXd& points);

// ---------------------------------------------------------------- Frechet

// ||mu1 - mu2||^2 + tr(C1 + C2 - 2 (C1 C2)^{1/2}), with the trace of the matrix
// square root taken from the eigenvalues of the symmetrized S1 C2 S1, S1 = C1^{1/2}.
template <typename Scalar>
Scalar frechet_distance(const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& mu1,
                        const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& cov1,
                        const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>& mu2,
                        const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>& cov2) {
  using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  if (mu1.size() != mu2.size() || cov1.rows() != mu1.size() || cov2.rows() != mu2.size() || cov1.cols() != cov1.rows() ||
      cov2.cols() != cov2.rows())
    throw ConfigError("frechet_distance: dimension mismatch");
  const Scalar tol = Scalar(1e-8);
  auto clamped = [tol](Eigen::Matrix<Scalar, Eigen::Dynamic, 1> ev) {
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
      if (ev[i] < -tol) throw NumericError("frechet_distance: invalid covariance (eigenvalue below -1e-8)");
      if (ev[i] < Scalar(0)) ev[i] = Scalar(0);
    }
    return ev;
  };
  const Mat c1 = (cov1 + cov1.transpose()) / Scalar(2);
  const Mat c2 = (cov2 + cov2.transpose()) / Scalar(2);
  Eigen::SelfAdjointEigenSolver<Mat> e1(c1);
  const auto l1 = clamped(e1.eigenvalues());
  const Mat s1 = e1.eigenvectors() * l1.cwiseSqrt().asDiagonal() * e1.eigenvectors().transpose();
  clamped(Eigen::SelfAdjointEigenSolver<Mat>(c2, Eigen::EigenvaluesOnly).eigenvalues());
  Mat m = s1 * c2 * s1;
  m = (m + m.transpose()) / Scalar(2);
  const auto lm = clamped(Eigen::SelfAdjointEigenSolver<Mat>(m, Eigen::EigenvaluesOnly).eigenvalues());
  const Scalar tr_sqrt = lm.cwiseSqrt().sum();
  const Scalar d = (mu1 - mu2).squaredNorm() + c1.trace() + c2.trace() - Scalar(2) * tr_sqrt;
  return d < Scalar(0) ? Scalar(0) : d;
}

struct Gaussian {
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // unbiased (n - 1)
};

Gaussian fit_gaussian(const Eigen::MatrixXd& rows);

inline constexpr Index kProxyFidMinSamples = 256;

// Mean-pooled teacher features per image: [B, D].
Eigen::MatrixXd pooled_teacher_features(const teacher::Teacher& teacher, const synth::ImageBatch& images);
double proxy_fid(const synth::ImageBatch& a, const synth::ImageBatch& b, const teacher::Teacher& teacher);
double proxy_fid_features(const Eigen::MatrixXd& fa, const Eigen::MatrixXd& fb);

// ---------------------------------------------------------------- pixels

struct PixelScores {
  double psnr = 0;
  double ssim = 0;
};

// x, x_hat: [B, C, H, W] in [0, 1]. SSIM uses 8x8 uniform windows at stride 1.
PixelScores pixel_metrics(const Tensor<float>& x, const Tensor<float>& x_hat);
double psnr_from_mse(double mse);

// ---------------------------------------------------------------- correlation

double pearson(const std::vector<double>& x, const std::vector<double>& y);

// ---------------------------------------------------------------- report

inline constexpr int kReportSchemaVersion = 1;

// Value or an explicit null with a reason.
struct Field {
  std::optional<double> value;
  std::string reason;

  static Field of(double v) { return {v, ""}; }
  static Field null(std::string why) { return {std::nullopt, std::move(why)}; }
};

struct MetricReport {
  std::string variant;
  Field probe_f1, probe_top5_recall, class_accuracy, gini;
  std::map<int, Field> gmm_heldout_nll;
  Field proxy_rfid, proxy_gfid, psnr, ssim, perceptual;
  std::vector<std::string> excluded_attributes;
  int images_without_positives = 0;
  nlohmann::json provenance = nlohmann::json::object();
  nlohmann::json notes = nlohmann::json::array();
};

nlohmann::json to_json(const Field& f);
nlohmann::json to_json(const MetricReport& r);
MetricReport metric_report_from_json(const nlohmann::json& j);
// Throws DataError naming the first violation.
void validate_metric_report(const nlohmann::json& j);

}  // namespace sendvae::metrics
