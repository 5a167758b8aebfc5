#pragma once

// Procedural attribute-labelled scenes: up to three flat shapes, each in its
// own canvas quadrant so objects never overlap or occlude each other.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sendvae/core/tensor.hpp"

namespace sendvae::synth {

enum ShapeId : int { kCircle = 0, kSquare = 1, kTriangle = 2 };

inline constexpr int kNumShapes = 3;
inline constexpr int kNumStripeLevels = 4;
inline constexpr int kNumSizes = 3;
inline constexpr int kNumQuadrants = 4;

struct DatasetConfig {
  int canvas_size = 32;
  int hue_buckets = 8;
  int max_objects = 3;
  int hue_groups = 4;  // class label = shape * hue_groups + hue group of the largest object

  void validate() const;
  int num_attributes() const { return kNumShapes + hue_buckets + kNumStripeLevels + kNumSizes + kNumQuadrants; }
  int num_classes() const { return kNumShapes * hue_groups; }
};

struct SceneObject {
  int shape = 0;
  int hue_bucket = 0;
  int stripe_level = 0;
  int size = 0;
  int quadrant = 0;
  double jitter_x = 0;  // centre offset in units of canvas/32 pixels, in [-0.75, 0.75]
  double jitter_y = 0;
};

struct SceneSpec {
  std::vector<SceneObject> objects;
  int canvas_size = 32;
  std::uint64_t seed = 0;
};

struct ImageBatch {
  Tensor<float> pixels;  // [B, 3, H, W], values in [0, 1]
  std::vector<SceneSpec> scenes;

  Index count() const { return pixels.shape.empty() ? 0 : pixels.dim(0); }
  int canvas() const { return static_cast<int>(pixels.dim(2)); }
  ImageBatch subset(Index begin, Index end) const;
  ImageBatch gather(const std::vector<Index>& rows) const;
};

struct AttributeVector {
  std::vector<std::uint8_t> bits;
};

struct LabeledBatch {
  ImageBatch images;
  std::vector<AttributeVector> attributes;
  std::vector<int> labels;
};

// Geometry shared by the renderer and the teacher.
double object_radius(int size, int canvas);
double stripe_half_period(int level, int canvas);  // 0 for solid
void hue_bucket_rgb(int bucket, int buckets, double value, double rgb[3]);
void quadrant_center(const SceneObject& obj, int canvas, double& cx, double& cy);

std::vector<std::string> attribute_schema(const DatasetConfig& cfg);

SceneSpec sample_scene(std::uint64_t seed, const DatasetConfig& cfg);

// Writes a [3, H, W] image into `out`, which must hold 3*H*W floats.
void render_scene(const SceneSpec& scene, const DatasetConfig& cfg, float* out);

// Largest by size index, ties broken by list order.
int largest_object(const SceneSpec& scene);

AttributeVector scene_attributes(const SceneSpec& scene, const DatasetConfig& cfg);
int class_label(const SceneSpec& scene, const DatasetConfig& cfg);

LabeledBatch generate_batch(std::uint64_t seed, Index count, const DatasetConfig& cfg);

// [B, A] 0/1 matrix of a list of attribute vectors.
Eigen::MatrixXd attribute_matrix(const std::vector<AttributeVector>& attrs);

nlohmann::json dataset_manifest(std::uint64_t seed, Index count, const DatasetConfig& cfg);
DatasetConfig dataset_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DatasetConfig& cfg);

}  // namespace sendvae::synth
