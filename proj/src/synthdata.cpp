#include "sendvae/synthdata.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "sendvae/core/rng.hpp"

namespace sendvae::synth {
namespace {

constexpr double kBackground = 0.45;
constexpr double kSaturation = 0.85;
constexpr double kBright = 0.95;
constexpr double kDarkFactor = 0.55;

// Signed containment test in object-local coordinates (pixels).
bool inside(int shape, double dx, double dy, double r) {
  switch (shape) {
    case kCircle: return dx * dx + dy * dy <= r * r;
    case kSquare: return std::abs(dx) <= r && std::abs(dy) <= r;
    default: {
      // Apex (0, -r), base corners (+-r, r).
      if (dy < -r || dy > r) return false;
      const double half_width = 0.5 * (dy + r);
      return std::abs(dx) <= half_width;
    }
  }
}

}  // namespace

void DatasetConfig::validate() const {
  if (canvas_size != 32 && canvas_size != 64)
    throw ConfigError("canvas_size must be 32 or 64, got " + std::to_string(canvas_size));
  if (hue_buckets < 2 || hue_buckets > 16) throw ConfigError("hue_buckets must be in [2, 16]");
  if (max_objects < 1 || max_objects > 3) throw ConfigError("max_objects must be in [1, 3]");
  if (hue_groups < 1 || hue_buckets % hue_groups != 0)
    throw ConfigError("hue_groups must divide hue_buckets");
}

double object_radius(int size, int canvas) {
  static constexpr std::array<double, kNumSizes> kFrac{0.25, 0.34, 0.43};
  return kFrac[static_cast<std::size_t>(size)] * canvas / 2.0;
}

double stripe_half_period(int level, int canvas) {
  static constexpr std::array<double, kNumStripeLevels> kHalf{0, 3, 2, 1};
  return kHalf[static_cast<std::size_t>(level)] * canvas / 32.0;
}

void hue_bucket_rgb(int bucket, int buckets, double value, double rgb[3]) {
  const double h = (bucket + 0.5) / buckets * 6.0;
  const double c = value * kSaturation;
  const double x = c * (1 - std::abs(std::fmod(h, 2.0) - 1));
  const double m = value - c;
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(h)) {
    case 0: r = c, g = x; break;
    case 1: r = x, g = c; break;
    case 2: g = c, b = x; break;
    case 3: g = x, b = c; break;
    case 4: r = x, b = c; break;
    default: r = c, b = x; break;
  }
  rgb[0] = r + m;
  rgb[1] = g + m;
  rgb[2] = b + m;
}

void quadrant_center(const SceneObject& obj, int canvas, double& cx, double& cy) {
  const double q = canvas / 2.0;
  cx = q / 2 + (obj.quadrant % 2) * q + obj.jitter_x * canvas / 32.0;
  cy = q / 2 + (obj.quadrant / 2) * q + obj.jitter_y * canvas / 32.0;
}

std::vector<std::string> attribute_schema(const DatasetConfig& cfg) {
  std::vector<std::string> names{"shape_circle", "shape_square", "shape_triangle"};
  for (int b = 0; b < cfg.hue_buckets; ++b) names.push_back("hue_bucket_" + std::to_string(b));
  for (int s = 0; s < kNumStripeLevels; ++s) names.push_back("stripe_level_" + std::to_string(s));
  for (const char* s : {"size_small", "size_medium", "size_large"}) names.emplace_back(s);
  for (const char* q : {"quadrant_top_left", "quadrant_top_right", "quadrant_bottom_left", "quadrant_bottom_right"})
    names.emplace_back(q);
  return names;
}

SceneSpec sample_scene(std::uint64_t seed, const DatasetConfig& cfg) {
  Rng rng(seed);
  SceneSpec scene;
  scene.canvas_size = cfg.canvas_size;
  scene.seed = seed;
  const int count = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.max_objects)));
  std::array<int, 4> quads{0, 1, 2, 3};
  for (int i = 3; i > 0; --i) std::swap(quads[i], quads[rng.below(static_cast<std::uint64_t>(i + 1))]);
  for (int i = 0; i < count; ++i) {
    SceneObject o;
    o.shape = static_cast<int>(rng.below(kNumShapes));
    o.hue_bucket = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.hue_buckets)));
    o.stripe_level = static_cast<int>(rng.below(kNumStripeLevels));
    o.size = static_cast<int>(rng.below(kNumSizes));
    o.quadrant = quads[static_cast<std::size_t>(i)];
    o.jitter_x = rng.uniform(-0.75, 0.75);
    o.jitter_y = rng.uniform(-0.75, 0.75);
    scene.objects.push_back(o);
  }
  return scene;
}

void render_scene(const SceneSpec& scene, const DatasetConfig& cfg, float* out) {
  const int S = scene.canvas_size;
  struct Prepared {
    SceneObject obj;
    double cx, cy, r, half;
    double bright[3], dark[3];
  };
  std::vector<Prepared> objs;
  for (const auto& o : scene.objects) {
    Prepared p{o, 0, 0, object_radius(o.size, S), stripe_half_period(o.stripe_level, S), {}, {}};
    quadrant_center(o, S, p.cx, p.cy);
    hue_bucket_rgb(o.hue_bucket, cfg.hue_buckets, kBright, p.bright);
    hue_bucket_rgb(o.hue_bucket, cfg.hue_buckets, kBright * kDarkFactor, p.dark);
    objs.push_back(p);
  }
  const double half_canvas = S / 2.0;
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      double acc[3] = {0, 0, 0};
      // 2x2 supersampling.
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) {
          const double px = x + 0.25 + 0.5 * sx, py = y + 0.25 + 0.5 * sy;
          const int quad = (px >= half_canvas ? 1 : 0) + (py >= half_canvas ? 2 : 0);
          const double* color = nullptr;
          for (const auto& p : objs) {
            if (p.obj.quadrant != quad || !inside(p.obj.shape, px - p.cx, py - p.cy, p.r)) continue;
            const bool dark = p.half > 0 && (static_cast<long>(std::floor(px / p.half)) % 2 == 1);
            color = dark ? p.dark : p.bright;
          }
          for (int c = 0; c < 3; ++c) acc[c] += color ? color[c] : kBackground;
        }
      for (int c = 0; c < 3; ++c) out[(c * S + y) * S + x] = static_cast<float>(std::clamp(acc[c] / 4.0, 0.0, 1.0));
    }
}

int largest_object(const SceneSpec& scene) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(scene.objects.size()); ++i)
    if (scene.objects[i].size > scene.objects[best].size) best = i;
  return best;
}

AttributeVector scene_attributes(const SceneSpec& scene, const DatasetConfig& cfg) {
  AttributeVector a;
  a.bits.assign(static_cast<std::size_t>(cfg.num_attributes()), 0);
  const int hue0 = kNumShapes, stripe0 = hue0 + cfg.hue_buckets, size0 = stripe0 + kNumStripeLevels,
            quad0 = size0 + kNumSizes;
  for (const auto& o : scene.objects) {
    a.bits[o.shape] = 1;
    a.bits[hue0 + o.hue_bucket] = 1;
    a.bits[stripe0 + o.stripe_level] = 1;
    a.bits[size0 + o.size] = 1;
    a.bits[quad0 + o.quadrant] = 1;
  }
  return a;
}

int class_label(const SceneSpec& scene, const DatasetConfig& cfg) {
  const auto& o = scene.objects[static_cast<std::size_t>(largest_object(scene))];
  const int group = o.hue_bucket / (cfg.hue_buckets / cfg.hue_groups);
  return o.shape * cfg.hue_groups + group;
}

LabeledBatch generate_batch(std::uint64_t seed, Index count, const DatasetConfig& cfg) {
  cfg.validate();
  if (count < 1) throw ConfigError("count must be >= 1");
  const int S = cfg.canvas_size;
  LabeledBatch out;
  out.images.pixels = Tensor<float>(Shape{count, 3, S, S});
  for (Index i = 0; i < count; ++i) {
    auto scene = sample_scene(derive_seed(seed, {static_cast<std::uint64_t>(i)}), cfg);
    render_scene(scene, cfg, out.images.pixels.ptr() + i * 3 * S * S);
    out.attributes.push_back(scene_attributes(scene, cfg));
    out.labels.push_back(class_label(scene, cfg));
    out.images.scenes.push_back(std::move(scene));
  }
  return out;
}

ImageBatch ImageBatch::subset(Index begin, Index end) const {
  std::vector<Index> rows;
  for (Index i = begin; i < end; ++i) rows.push_back(i);
  return gather(rows);
}

ImageBatch ImageBatch::gather(const std::vector<Index>& rows) const {
  const Index per = pixels.size() / std::max<Index>(count(), 1);
  Shape s = pixels.shape;
  s[0] = static_cast<Index>(rows.size());
  ImageBatch out;
  out.pixels = Tensor<float>(s);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.pixels.data.segment(static_cast<Index>(i) * per, per) = pixels.data.segment(rows[i] * per, per);
    if (!scenes.empty()) out.scenes.push_back(scenes[static_cast<std::size_t>(rows[i])]);
  }
  return out;
}

Eigen::MatrixXd attribute_matrix(const std::vector<AttributeVector>& attrs) {
  if (attrs.empty()) return {};
  Eigen::MatrixXd m(static_cast<Index>(attrs.size()), static_cast<Index>(attrs[0].bits.size()));
  for (std::size_t i = 0; i < attrs.size(); ++i)
    for (std::size_t j = 0; j < attrs[i].bits.size(); ++j) m(static_cast<Index>(i), static_cast<Index>(j)) = attrs[i].bits[j];
  return m;
}

nlohmann::json to_json(const DatasetConfig& cfg) {
  return {{"canvas_size", cfg.canvas_size},
          {"hue_buckets", cfg.hue_buckets},
          {"max_objects", cfg.max_objects},
          {"hue_groups", cfg.hue_groups}};
}

DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  DatasetConfig c;
  c.canvas_size = j.value("canvas_size", c.canvas_size);
  c.hue_buckets = j.value("hue_buckets", c.hue_buckets);
  c.max_objects = j.value("max_objects", c.max_objects);
  c.hue_groups = j.value("hue_groups", c.hue_groups);
  c.validate();
  return c;
}

nlohmann::json dataset_manifest(std::uint64_t seed, Index count, const DatasetConfig& cfg) {
  return {{"seed", seed}, {"count", count}, {"canvas_size", cfg.canvas_size}, {"schema", attribute_schema(cfg)},
          {"config", to_json(cfg)}};
}

}  // namespace sendvae::synth
