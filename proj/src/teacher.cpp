#include "sendvae/teacher.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>

#include "sendvae/checkpoint.hpp"

namespace sendvae::teacher {
namespace fs = std::filesystem;

namespace {

constexpr double kSaturationThreshold = 0.3;
constexpr double kDarkRatio = 0.75;
constexpr int kMinComponentArea = 3;

struct Hsv {
  double h, s, v;
};

Hsv to_hsv(double r, double g, double b) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double d = mx - mn;
  Hsv out{0, mx > 0 ? d / mx : 0, mx};
  if (d <= 0) return out;
  double h;
  if (mx == r) h = std::fmod((g - b) / d, 6.0);
  else if (mx == g) h = (b - r) / d + 2.0;
  else h = (r - g) / d + 4.0;
  if (h < 0) h += 6.0;
  out.h = h * 60.0;
  return out;
}

// `corners` counts filled bounding-box corner pixels; `top` is the share of
// off-midline pixels lying above the bounding-box midline.
int classify_shape(double fill, int corners, double top) {
  if (fill >= 0.945 || corners >= 3) return 1;
  if (top < 0.4) return 2;
  return 0;
}

int classify_stripes(const ImageAnalysis& a, const std::vector<double>& value, int comp) {
  const int S = a.size;
  const auto& obj = a.objects[static_cast<std::size_t>(comp)];
  double vmax = 0;
  for (int y = obj.min_y; y <= obj.max_y; ++y)
    for (int x = obj.min_x; x <= obj.max_x; ++x)
      if (a.component[y * S + x] == comp) vmax = std::max(vmax, value[y * S + x]);
  auto core = [&](int x, int y) {
    if (x <= 0 || y <= 0 || x >= S - 1 || y >= S - 1) return false;
    const int i = y * S + x;
    return a.component[i] == comp && a.component[i - 1] == comp && a.component[i + 1] == comp &&
           a.component[i - S] == comp && a.component[i + S] == comp;
  };
  bool any_dark = false, any_bright = false;
  int max_run = 0;
  for (int y = obj.min_y; y <= obj.max_y; ++y) {
    int run = 0, prev = -1;
    for (int x = obj.min_x; x <= obj.max_x + 1; ++x) {
      const bool in = x <= obj.max_x && core(x, y);
      if (!in) {
        max_run = std::max(max_run, run);
        run = 0;
        prev = -1;
        continue;
      }
      const int cls = value[y * S + x] < kDarkRatio * vmax ? 1 : 0;
      (cls ? any_dark : any_bright) = true;
      if (cls == prev) {
        ++run;
      } else {
        max_run = std::max(max_run, run);
        run = 1;
        prev = cls;
      }
    }
  }
  if (!any_dark || !any_bright) return 0;
  const double half = static_cast<double>(max_run) / (S / 32.0);
  if (half >= 2.5) return 1;
  if (half >= 1.5) return 2;
  return 3;
}

// Mean RGB per patch: [B, 3, S, S] -> [B, N, 3].
template <typename T>
ad::Var<T> patch_mean_rgb(const ad::Var<T>& images, PatchGrid grid) {
  const Index B = images.dim(0), S = images.dim(2);
  const Index ph = S / grid.rows, pw = S / grid.cols, N = grid.count();
  const T inv = T(1) / static_cast<T>(ph * pw);
  Tensor<T> out(Shape{B, N, 3});
  const auto& x = images.value().data;
  for (Index b = 0; b < B; ++b)
    for (Index c = 0; c < 3; ++c)
      for (Index y = 0; y < S; ++y)
        for (Index xx = 0; xx < S; ++xx) {
          const Index n = (y / ph) * grid.cols + xx / pw;
          out.data[(b * N + n) * 3 + c] += x[((b * 3 + c) * S + y) * S + xx] * inv;
        }
  return ad::detail::make_result<T>(std::move(out), {images}, [=](ad::Node<T>& self) {
    auto& g = ad::detail::pgrad(self, 0);
    for (Index b = 0; b < B; ++b)
      for (Index c = 0; c < 3; ++c)
        for (Index y = 0; y < S; ++y)
          for (Index xx = 0; xx < S; ++xx) {
            const Index n = (y / ph) * grid.cols + xx / pw;
            g[((b * 3 + c) * S + y) * S + xx] += self.grad[(b * N + n) * 3 + c] * inv;
          }
  });
}

void check_grid(int canvas, PatchGrid grid) {
  if (grid.rows < 1 || grid.cols < 1 || canvas % grid.rows != 0 || canvas % grid.cols != 0)
    throw ConfigError("patch grid " + std::to_string(grid.rows) + "x" + std::to_string(grid.cols) +
                      " does not divide canvas " + std::to_string(canvas));
}

template <typename T>
ad::Var<T> learned_forward(const ParamStore<T>& ps, const LearnedTeacherConfig& cfg, const ad::Var<T>& images) {
  auto h = nn::linear(ps, "teacher.embed", patchify_images(images, cfg.grid));
  h = ad::add_broadcast_batch(h, ps.get("teacher.pos"));
  for (int l = 0; l < cfg.depth; ++l) h = nn::encoder_layer(ps, "teacher.block" + std::to_string(l), h, cfg.heads);
  return nn::layer_norm(ps, "teacher.ln_f", h);
}

nlohmann::json learned_config_json(const LearnedTeacherConfig& c) {
  return {{"grid", {c.grid.rows, c.grid.cols}}, {"dim", c.dim},     {"depth", c.depth}, {"heads", c.heads},
          {"steps", c.steps},                   {"batch", c.batch}, {"lr", c.lr},       {"seed", c.seed},
          {"num_classes", c.num_classes}};
}

}  // namespace

ImageAnalysis analyze_image(const float* chw, int S) {
  ImageAnalysis a;
  a.size = S;
  const int P = S * S;
  a.component.assign(static_cast<std::size_t>(P), -1);
  a.hue_bin.assign(static_cast<std::size_t>(P), -1);
  std::vector<double> value(static_cast<std::size_t>(P));
  for (int i = 0; i < P; ++i) {
    const Hsv hsv = to_hsv(chw[i], chw[P + i], chw[2 * P + i]);
    value[i] = hsv.v;
    if (hsv.s > kSaturationThreshold)
      a.hue_bin[i] = std::min(kTeacherHueBins - 1, static_cast<int>(hsv.h / 360.0 * kTeacherHueBins));
  }
  // Components are searched within a quadrant; objects never straddle quadrants.
  const int half = S / 2;
  std::vector<int> assigned(static_cast<std::size_t>(P), -2);
  for (int start = 0; start < P; ++start) {
    if (a.hue_bin[start] < 0 || assigned[start] != -2) continue;
    const int qx = (start % S) / half, qy = (start / S) / half;
    std::vector<int> members;
    std::deque<int> queue{start};
    assigned[start] = -1;
    while (!queue.empty()) {
      const int p = queue.front();
      queue.pop_front();
      members.push_back(p);
      const int px = p % S, py = p / S;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int nx = px + dx, ny = py + dy;
          if ((dx == 0 && dy == 0) || nx < 0 || ny < 0 || nx >= S || ny >= S) continue;
          if (nx / half != qx || ny / half != qy) continue;
          const int q = ny * S + nx;
          if (a.hue_bin[q] < 0 || assigned[q] != -2) continue;
          assigned[q] = -1;
          queue.push_back(q);
        }
    }
    if (static_cast<int>(members.size()) < kMinComponentArea) continue;
    ObjectComponent obj;
    obj.area = static_cast<int>(members.size());
    obj.min_x = obj.min_y = S;
    obj.max_x = obj.max_y = -1;
    std::array<int, kTeacherHueBins> votes{};
    const int id = static_cast<int>(a.objects.size());
    for (int p : members) {
      a.component[p] = id;
      obj.min_x = std::min(obj.min_x, p % S);
      obj.max_x = std::max(obj.max_x, p % S);
      obj.min_y = std::min(obj.min_y, p / S);
      obj.max_y = std::max(obj.max_y, p / S);
      ++votes[static_cast<std::size_t>(a.hue_bin[p])];
    }
    obj.hue_bucket = static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
    int top = 0, bottom = 0;
    for (int p : members) {
      top += 2 * (p / S) < obj.min_y + obj.max_y;
      bottom += 2 * (p / S) > obj.min_y + obj.max_y;
    }
    const double box = static_cast<double>((obj.max_x - obj.min_x + 1) * (obj.max_y - obj.min_y + 1));
    int corners = 0;
    for (int cy : {obj.min_y, obj.max_y})
      for (int cx : {obj.min_x, obj.max_x}) corners += a.component[cy * S + cx] == id;
    obj.shape = classify_shape(obj.area / box, corners, top / static_cast<double>(std::max(1, top + bottom)));
    a.objects.push_back(obj);
  }
  for (int c = 0; c < static_cast<int>(a.objects.size()); ++c)
    a.objects[static_cast<std::size_t>(c)].stripe_level = classify_stripes(a, value, c);
  return a;
}

Tensor<double> raw_descriptors(const synth::ImageBatch& images, PatchGrid grid) {
  const int S = images.canvas();
  check_grid(S, grid);
  const Index B = images.count(), N = grid.count();
  const int ph = S / grid.rows, pw = S / grid.cols;
  const double inv = 1.0 / (ph * pw);
  Tensor<double> out(Shape{B, N, kDescriptorDim});
  const Index per = 3 * S * S;
  for (Index b = 0; b < B; ++b) {
    const float* img = images.pixels.ptr() + b * per;
    const ImageAnalysis a = analyze_image(img, S);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const Index n = (y / ph) * grid.cols + x / pw;
        double* d = out.ptr() + (b * N + n) * kDescriptorDim;
        const int i = y * S + x;
        for (int c = 0; c < 3; ++c) d[c] += img[c * S * S + i] * inv;
        if (a.hue_bin[i] >= 0) {
          d[3 + a.hue_bin[i]] += inv;
          d[18] += inv;
        }
        if (a.component[i] >= 0) {
          const auto& o = a.objects[static_cast<std::size_t>(a.component[i])];
          d[11 + o.stripe_level] += inv;
          d[15 + o.shape] += inv;
        }
      }
    for (Index n = 0; n < N; ++n) {
      double* d = out.ptr() + (b * N + n) * kDescriptorDim;
      d[19] = ((n % grid.cols) + 0.5) / grid.cols;
      d[20] = ((n / grid.cols) + 0.5) / grid.rows;
    }
  }
  return out;
}

Eigen::MatrixXd projection_matrix(int dim, std::uint64_t seed) {
  if (dim < kDescriptorDim) throw ConfigError("teacher dim must be >= 21, got " + std::to_string(dim));
  Rng rng(derive_seed(seed, {0x7E4C'0001ULL}));
  Eigen::MatrixXd g(dim, kDescriptorDim);
  for (Index j = 0; j < g.cols(); ++j)
    for (Index i = 0; i < g.rows(); ++i) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  return qr.householderQ() * Eigen::MatrixXd::Identity(dim, kDescriptorDim);
}

PatchFeatureMap analytic_teacher_features(const synth::ImageBatch& images, PatchGrid grid, int dim,
                                          std::uint64_t projection_seed) {
  return teacher_forward(Teacher::analytic(images.canvas(), grid, dim, projection_seed), images);
}

std::uint64_t Teacher::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ b[i]) * 1099511628211ULL;
  };
  mix(projection_.data(), static_cast<std::size_t>(projection_.size()) * sizeof(double));
  if (learned_) h ^= learned_->checksum();
  return h;
}

Teacher Teacher::analytic(int canvas, PatchGrid grid, int dim, std::uint64_t projection_seed) {
  check_grid(canvas, grid);
  Teacher t;
  t.kind_ = TeacherKind::kAnalytic;
  t.dim_ = dim;
  t.canvas_ = canvas;
  t.grid_ = grid;
  t.projection_seed_ = projection_seed;
  t.projection_ = projection_matrix(dim, projection_seed);
  t.id_ = "analytic-d" + std::to_string(dim) + "-s" + std::to_string(projection_seed);
  return t;
}

Teacher Teacher::learned(int canvas, const LearnedTeacherConfig& cfg, ParamStore<float> frozen_params,
                         double accuracy) {
  check_grid(canvas, cfg.grid);
  frozen_params.freeze();
  Teacher t;
  t.kind_ = TeacherKind::kLearned;
  t.dim_ = cfg.dim;
  t.canvas_ = canvas;
  t.grid_ = cfg.grid;
  t.learned_cfg_ = cfg;
  t.learned_ = std::make_shared<const ParamStore<float>>(std::move(frozen_params));
  t.pretrain_accuracy_ = accuracy;
  t.id_ = "learned-d" + std::to_string(cfg.dim) + "-s" + std::to_string(cfg.seed);
  return t;
}

template <typename T>
ad::Var<T> patchify_images(const ad::Var<T>& images, PatchGrid grid) {
  const Index B = images.dim(0), S = images.dim(2);
  const Index ph = S / grid.rows, pw = S / grid.cols;
  auto x = ad::reshape(images, {B, 3, grid.rows, ph, grid.cols, pw});
  x = ad::permute(x, {0, 2, 4, 1, 3, 5});
  return ad::reshape(x, {B, Index{grid.count()}, 3 * ph * pw});
}

Teacher pretrain_learned_teacher(const synth::LabeledBatch& train, const synth::LabeledBatch& heldout,
                                 int num_classes, const LearnedTeacherConfig& cfg) {
  const int S = train.images.canvas();
  check_grid(S, cfg.grid);
  const Index patch_dim = 3 * (S / cfg.grid.rows) * (S / cfg.grid.cols);
  Rng init(derive_seed(cfg.seed, {1}));
  ParamStore<float> ps;
  nn::add_linear(ps, "teacher.embed", patch_dim, cfg.dim, init);
  ps.add("teacher.pos", nn::normal_init<float>({Index{cfg.grid.count()}, cfg.dim}, 0.02, init));
  for (int l = 0; l < cfg.depth; ++l) nn::add_encoder_layer(ps, "teacher.block" + std::to_string(l), cfg.dim, 4, init);
  nn::add_layer_norm(ps, "teacher.ln_f", cfg.dim);
  nn::add_linear(ps, "teacher.head", cfg.dim, num_classes, init);

  AdamW<float> opt({.lr = cfg.lr, .weight_decay = 1e-4});
  const Index n = train.images.count();
  for (int step = 0; step < cfg.steps; ++step) {
    Rng rng(derive_seed(cfg.seed, {2, static_cast<std::uint64_t>(step)}));
    std::vector<Index> rows;
    std::vector<int> labels;
    for (int i = 0; i < cfg.batch; ++i) {
      rows.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(n))));
      labels.push_back(train.labels[static_cast<std::size_t>(rows.back())]);
    }
    ad::Var<float> x(train.images.gather(rows).pixels);
    auto feats = learned_forward(ps, cfg, x);
    auto loss = ad::cross_entropy(nn::linear(ps, "teacher.head", ad::mean_tokens(feats)), labels);
    ps.zero_grad();
    ad::backward(loss);
    opt.step(ps);
  }

  Index correct = 0;
  {
    ad::NoGradGuard guard;
    const Index m = heldout.images.count();
    for (Index start = 0; start < m; start += 256) {
      const Index end = std::min(m, start + 256);
      ad::Var<float> x(heldout.images.subset(start, end).pixels);
      auto logits = nn::linear(ps, "teacher.head", ad::mean_tokens(learned_forward(ps, cfg, x)));
      const auto L = logits.value().as_matrix(end - start, num_classes);
      for (Index i = 0; i < end - start; ++i) {
        Index arg;
        L.row(i).maxCoeff(&arg);
        correct += (arg == heldout.labels[static_cast<std::size_t>(start + i)]);
      }
    }
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(heldout.images.count());
  if (acc < 2.0 / num_classes)
    throw TrainingError("learned teacher did not converge: held-out accuracy " + std::to_string(acc));
  LearnedTeacherConfig stored = cfg;
  stored.num_classes = num_classes;
  return Teacher::learned(S, stored, std::move(ps), acc);
}

PatchFeatureMap teacher_forward(const Teacher& teacher, const synth::ImageBatch& images) {
  if (images.canvas() != teacher.canvas())
    throw ConfigError("teacher expects canvas " + std::to_string(teacher.canvas()) + ", got " +
                      std::to_string(images.canvas()));
  PatchFeatureMap out;
  out.grid = teacher.grid();
  out.teacher_id = teacher.id();
  const Index B = images.count(), N = teacher.grid().count(), D = teacher.dim();
  if (teacher.kind() == TeacherKind::kAnalytic) {
    const auto desc = raw_descriptors(images, teacher.grid());
    const Eigen::MatrixXd f = desc.as_matrix(B * N, kDescriptorDim) * teacher.projection().transpose();
    out.features = Tensor<float>(Shape{B, N, D});
    out.features.as_matrix(B * N, D) = f.cast<float>();
    return out;
  }
  ad::NoGradGuard guard;
  out.features = Tensor<float>(Shape{B, N, D});
  for (Index start = 0; start < B; start += 256) {
    const Index end = std::min(B, start + 256);
    ad::Var<float> x(images.subset(start, end).pixels);
    auto f = learned_forward(teacher.learned_params(), teacher.learned_config(), x);
    out.features.data.segment(start * N * D, (end - start) * N * D) = f.value().data;
  }
  return out;
}

template <typename T>
ad::Var<T> teacher_forward_var(const Teacher& teacher, const ad::Var<T>& images) {
  if (images.shape().size() != 4 || images.dim(2) != teacher.canvas())
    throw ConfigError("teacher expects [B, 3, " + std::to_string(teacher.canvas()) + ", ...] images, got " +
                      shape_str(images.shape()));
  const Index B = images.dim(0), N = teacher.grid().count(), D = teacher.dim();
  if (teacher.kind() == TeacherKind::kLearned) {
    if constexpr (std::is_same_v<T, float>) {
      return learned_forward(teacher.learned_params(), teacher.learned_config(), images);
    } else {
      auto ps = teacher.learned_params().template cast<T>();
      return learned_forward(ps, teacher.learned_config(), images);
    }
  }
  synth::ImageBatch snapshot;
  snapshot.pixels = images.value().template cast<float>();
  auto desc = raw_descriptors(snapshot, teacher.grid());
  auto dm = desc.as_matrix(B * N, kDescriptorDim);
  dm.leftCols(3).setZero();
  Tensor<T> rest(Shape{B, N, D});
  rest.as_matrix(B * N, D) = (dm * teacher.projection().transpose()).template cast<T>();
  Tensor<T> q_rgb(Shape{3, D});
  q_rgb.as_matrix(3, D) = teacher.projection().leftCols(3).transpose().template cast<T>();
  auto rgb = ad::matmul_last(patch_mean_rgb(images, teacher.grid()), ad::constant(std::move(q_rgb)));
  return ad::add(rgb, ad::constant(std::move(rest)));
}

void save_teacher(const Teacher& teacher, const fs::path& dir) {
  fs::create_directories(dir);
  nlohmann::json m{{"kind", teacher.kind() == TeacherKind::kAnalytic ? "analytic" : "learned"},
                   {"D", teacher.dim()},
                   {"grid", {teacher.grid().rows, teacher.grid().cols}},
                   {"canvas", teacher.canvas()},
                   {"projection_seed", teacher.projection_seed()}};
  if (teacher.kind() == TeacherKind::kLearned) {
    m["config"] = learned_config_json(teacher.learned_config());
    m["pretrain_accuracy"] = teacher.pretrain_accuracy();
    m["tensors"] = save_params(teacher.learned_params(), dir);
  }
  m["config-hash"] = sha256_hex(m.value("config", nlohmann::json::object()).dump() + m["kind"].dump() +
                                m["D"].dump() + m["grid"].dump());
  write_json(dir / "manifest.json", m);
}

Teacher load_teacher(const fs::path& dir) {
  const auto m = read_json(dir / "manifest.json");
  const PatchGrid grid{m.at("grid")[0].get<int>(), m.at("grid")[1].get<int>()};
  const int canvas = m.at("canvas");
  if (m.at("kind") == "analytic") return Teacher::analytic(canvas, grid, m.at("D"), m.at("projection_seed"));
  LearnedTeacherConfig cfg;
  const auto& c = m.at("config");
  cfg.grid = grid;
  cfg.dim = c.at("dim");
  cfg.depth = c.at("depth");
  cfg.heads = c.at("heads");
  cfg.steps = c.at("steps");
  cfg.batch = c.at("batch");
  cfg.lr = c.at("lr");
  cfg.seed = c.at("seed");
  cfg.num_classes = c.at("num_classes");
  Rng init(0);
  ParamStore<float> ps;
  const Index patch_dim = 3 * (canvas / grid.rows) * (canvas / grid.cols);
  nn::add_linear(ps, "teacher.embed", patch_dim, cfg.dim, init);
  ps.add("teacher.pos", Tensor<float>::zeros({Index{grid.count()}, cfg.dim}));
  for (int l = 0; l < cfg.depth; ++l) nn::add_encoder_layer(ps, "teacher.block" + std::to_string(l), cfg.dim, 4, init);
  nn::add_layer_norm(ps, "teacher.ln_f", cfg.dim);
  nn::add_linear(ps, "teacher.head", cfg.dim, cfg.num_classes, init);
  load_params(ps, dir, m.at("tensors"));
  return Teacher::learned(canvas, cfg, std::move(ps), m.value("pretrain_accuracy", 0.0));
}

template ad::Var<float> teacher_forward_var(const Teacher&, const ad::Var<float>&);
template ad::Var<double> teacher_forward_var(const Teacher&, const ad::Var<double>&);
template ad::Var<float> patchify_images(const ad::Var<float>&, PatchGrid);
template ad::Var<double> patchify_images(const ad::Var<double>&, PatchGrid);

}  // namespace sendvae::teacher
