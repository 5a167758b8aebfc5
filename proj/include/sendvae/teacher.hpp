#pragma once

// Frozen patch-level feature extractors y = f(x) in R^{N x D}.
//
// The analytic teacher computes a 21-dim descriptor per patch from a
// quadrant-local segmentation of the image and projects it through a fixed
// D x 21 matrix with orthonormal columns. The learned teacher is a small patch
// transformer pretrained as a classifier and then frozen.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include "sendvae/core/nn.hpp"
#include "sendvae/synthdata.hpp"

namespace sendvae::teacher {

inline constexpr int kDescriptorDim = 21;
inline constexpr int kTeacherHueBins = 8;

struct PatchGrid {
  int rows = 8;
  int cols = 8;
  int count() const { return rows * cols; }
  bool operator==(const PatchGrid&) const = default;
};

struct PatchFeatureMap {
  Tensor<float> features;  // [B, N, D], patches row-major from the top-left
  PatchGrid grid;
  std::string teacher_id;

  Index batch() const { return features.dim(0); }
  Index patches() const { return features.dim(1); }
  Index dim() const { return features.dim(2); }
};

// Pixel-level analysis of one image shared by all descriptor coordinates.
struct ObjectComponent {
  int area = 0;
  int min_x = 0, max_x = 0, min_y = 0, max_y = 0;
  int shape = 0;         // 0 circle, 1 square, 2 triangle
  int stripe_level = 0;  // 0 solid .. 3 finest
  int hue_bucket = 0;    // majority bucket over component pixels
};

struct ImageAnalysis {
  int size = 0;
  std::vector<int> component;  // per pixel, -1 for background
  std::vector<int> hue_bin;    // per pixel, -1 for background
  std::vector<ObjectComponent> objects;
};

ImageAnalysis analyze_image(const float* chw, int size);

// [B, N, 21] raw descriptors:
// [mean RGB (3) | hue histogram (8) | stripe bands (4) | shape occupancy (3) | presence (1) | patch centre (2)].
Tensor<double> raw_descriptors(const synth::ImageBatch& images, PatchGrid grid);

// D x 21 matrix with orthonormal columns (thin QR of a seeded Gaussian draw).
Eigen::MatrixXd projection_matrix(int dim, std::uint64_t seed);

PatchFeatureMap analytic_teacher_features(const synth::ImageBatch& images, PatchGrid grid, int dim,
                                          std::uint64_t projection_seed);

enum class TeacherKind { kAnalytic, kLearned };

struct LearnedTeacherConfig {
  PatchGrid grid;
  int dim = 64;
  int depth = 1;
  int heads = 4;
  int steps = 400;
  int batch = 64;
  double lr = 1e-3;
  std::uint64_t seed = 7;
  int num_classes = 12;
};

class Teacher {
 public:
  TeacherKind kind() const { return kind_; }
  int dim() const { return dim_; }
  PatchGrid grid() const { return grid_; }
  int canvas() const { return canvas_; }
  std::uint64_t projection_seed() const { return projection_seed_; }
  const std::string& id() const { return id_; }
  const Eigen::MatrixXd& projection() const { return projection_; }
  const ParamStore<float>& learned_params() const { return *learned_; }
  const LearnedTeacherConfig& learned_config() const { return learned_cfg_; }
  double pretrain_accuracy() const { return pretrain_accuracy_; }

  // Parameter checksum (projection bytes for analytic, weights for learned).
  std::uint64_t checksum() const;

  static Teacher analytic(int canvas, PatchGrid grid, int dim, std::uint64_t projection_seed);
  static Teacher learned(int canvas, const LearnedTeacherConfig& cfg, ParamStore<float> frozen_params,
                         double accuracy);

 private:
  TeacherKind kind_ = TeacherKind::kAnalytic;
  int dim_ = 64;
  int canvas_ = 32;
  PatchGrid grid_;
  std::uint64_t projection_seed_ = 0;
  std::string id_;
  Eigen::MatrixXd projection_;
  std::shared_ptr<const ParamStore<float>> learned_;
  LearnedTeacherConfig learned_cfg_;
  double pretrain_accuracy_ = 0;
};

// Trains the patch transformer plus a linear class head on pooled features,
// freezes it and reports held-out accuracy of the head. Throws TrainingError
// when held-out accuracy is below twice chance.
Teacher pretrain_learned_teacher(const synth::LabeledBatch& train, const synth::LabeledBatch& heldout,
                                 int num_classes, const LearnedTeacherConfig& cfg);

PatchFeatureMap teacher_forward(const Teacher& teacher, const synth::ImageBatch& images);

// Differentiable with respect to `images` ([B, 3, S, S]); teacher parameters
// never receive gradients. For the analytic teacher only the mean-RGB
// coordinates depend smoothly on pixels; the rest are piecewise constant.
template <typename T>
ad::Var<T> teacher_forward_var(const Teacher& teacher, const ad::Var<T>& images);

// Patch tokens of [B, 3, S, S] images: [B, N, 3 * p * p].
template <typename T>
ad::Var<T> patchify_images(const ad::Var<T>& images, PatchGrid grid);

void save_teacher(const Teacher& teacher, const std::filesystem::path& dir);
Teacher load_teacher(const std::filesystem::path& dir);

}  // namespace sendvae::teacher
