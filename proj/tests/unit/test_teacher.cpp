#include <chrono>
#include <cstring>
#include <filesystem>

#include "doctest.h"
#include "sendvae/core/error.hpp"
#include "sendvae/teacher.hpp"

using namespace sendvae;
using teacher::PatchGrid;

namespace {

synth::ImageBatch render(const synth::SceneSpec& scene) {
  synth::ImageBatch b;
  b.pixels = Tensor<float>(Shape{1, 3, scene.canvas_size, scene.canvas_size});
  synth::render_scene(scene, {}, b.pixels.ptr());
  b.scenes.push_back(scene);
  return b;
}

const teacher::Teacher& small_learned() {
  static const teacher::Teacher t = [] {
    synth::DatasetConfig cfg;
    auto train = synth::generate_batch(11, 3000, cfg);
    auto held = synth::generate_batch(12, 600, cfg);
    teacher::LearnedTeacherConfig tc;
    tc.dim = 32;
    tc.heads = 4;
    tc.steps = 600;
    tc.lr = 2e-3;
    return teacher::pretrain_learned_teacher(train, held, cfg.num_classes(), tc);
  }();
  return t;
}

}  // namespace

TEST_CASE("analytic features have the stated shape") {
  auto b = synth::generate_batch(0, 4, {});
  auto f = teacher::analytic_teacher_features(b.images, {8, 8}, 64, 3);
  CHECK(f.features.shape == Shape{4, 64, 64});
  CHECK(f.patches() == 64);
  CHECK(f.features.all_finite());
}

TEST_CASE("projection columns are orthonormal") {
  for (int d : {21, 32, 64}) {
    Eigen::MatrixXd q = teacher::projection_matrix(d, 42);
    CHECK(q.rows() == d);
    CHECK(q.cols() == 21);
    const double err = (q.transpose() * q - Eigen::MatrixXd::Identity(21, 21)).cwiseAbs().maxCoeff();
    CHECK(err <= 1e-6);
  }
  CHECK_THROWS_AS(teacher::projection_matrix(20, 0), ConfigError);
  CHECK((teacher::projection_matrix(64, 5) - teacher::projection_matrix(64, 5)).norm() == 0.0);
}

TEST_CASE("indivisible grid is a configuration error") {
  auto b = synth::generate_batch(0, 2, {});
  CHECK_THROWS_AS(teacher::analytic_teacher_features(b.images, {5, 5}, 64, 0), ConfigError);
  CHECK_THROWS_AS(teacher::analytic_teacher_features(b.images, {8, 8}, 16, 0), ConfigError);
}

TEST_CASE("a hue change moves only colour coordinates of object patches") {
  synth::SceneSpec a;
  a.canvas_size = 32;
  a.objects.push_back({synth::kSquare, 2, 0, 1, 0, 0.3, -0.2});
  a.objects.push_back({synth::kCircle, 5, 2, 2, 3, 0.0, 0.4});
  auto b = a;
  b.objects[0].hue_bucket = 6;

  const PatchGrid grid{8, 8};
  auto da = teacher::raw_descriptors(render(a), grid);
  auto db = teacher::raw_descriptors(render(b), grid);
  auto ia = teacher::analyze_image(render(a).pixels.ptr(), 32);

  int changed_patches = 0;
  for (int n = 0; n < 64; ++n) {
    const int px0 = (n % 8) * 4, py0 = (n / 8) * 4;
    bool covers = false;
    for (int y = py0; y < py0 + 4; ++y)
      for (int x = px0; x < px0 + 4; ++x) covers |= ia.component[y * 32 + x] == 0;
    double hue_diff = 0;
    for (int k = 0; k < 21; ++k) {
      const double diff = std::abs(da.data[n * 21 + k] - db.data[n * 21 + k]);
      if (k >= 3 && k < 11) hue_diff += diff;
      if (k >= 11) CHECK(diff == 0.0);
      if (!covers) CHECK(diff == 0.0);
    }
    if (covers) {
      CHECK(hue_diff > 0);
      ++changed_patches;
    }
  }
  CHECK(changed_patches > 0);
}

TEST_CASE("descriptor hue histogram matches object hues") {
  auto batch = synth::generate_batch(8, 50, {});
  auto d = teacher::raw_descriptors(batch.images, {8, 8});
  for (Index i = 0; i < 50; ++i) {
    Eigen::VectorXd hist = Eigen::VectorXd::Zero(8);
    for (int n = 0; n < 64; ++n)
      for (int k = 0; k < 8; ++k) hist[k] += d.data[(i * 64 + n) * 21 + 3 + k];
    for (const auto& o : batch.images.scenes[static_cast<std::size_t>(i)].objects) CHECK(hist[o.hue_bucket] > 0);
  }
}

TEST_CASE("analysis recovers object attributes") {
  auto batch = synth::generate_batch(21, 500, {});
  int total = 0, shape_ok = 0, hue_ok = 0, stripe_ok = 0;
  for (Index i = 0; i < 500; ++i) {
    auto a = teacher::analyze_image(batch.images.pixels.ptr() + i * 3 * 32 * 32, 32);
    const auto& sc = batch.images.scenes[static_cast<std::size_t>(i)];
    REQUIRE(a.objects.size() == sc.objects.size());
    for (const auto& o : sc.objects)
      for (const auto& c : a.objects) {
        const int q = ((c.min_x + c.max_x) / 2 >= 16 ? 1 : 0) + ((c.min_y + c.max_y) / 2 >= 16 ? 2 : 0);
        if (q != o.quadrant) continue;
        ++total;
        shape_ok += c.shape == o.shape;
        hue_ok += c.hue_bucket == o.hue_bucket;
        stripe_ok += c.stripe_level == o.stripe_level;
      }
  }
  CHECK(total > 900);
  CHECK(shape_ok >= 0.995 * total);
  CHECK(hue_ok == total);
  CHECK(stripe_ok >= 0.995 * total);
}

TEST_CASE("feature norms are finite and positive on non-blank patches") {
  auto t = teacher::Teacher::analytic(32, {8, 8}, 64, 1);
  for (std::uint64_t s = 0; s < 100; ++s) {
    auto batch = synth::generate_batch(1000 + s, 4, {});
    auto raw = teacher::raw_descriptors(batch.images, {8, 8});
    auto f = teacher::teacher_forward(t, batch.images);
    for (Index bn = 0; bn < 4 * 64; ++bn) {
      const double presence = raw.data[bn * 21 + 18];
      const double norm = f.features.data.segment(bn * 64, 64).matrix().norm();
      CHECK(std::isfinite(norm));
      if (presence > 0) CHECK(norm > 0);
    }
  }
}

TEST_CASE("teacher forward is deterministic and size checked") {
  auto batch = synth::generate_batch(5, 8, {});
  auto t = teacher::Teacher::analytic(32, {8, 8}, 64, 1);
  auto f1 = teacher::teacher_forward(t, batch.images);
  auto f2 = teacher::teacher_forward(t, batch.images);
  CHECK((f1.features.data == f2.features.data).all());
  CHECK(f1.patches() == 64);

  synth::DatasetConfig big;
  big.canvas_size = 64;
  auto other = synth::generate_batch(5, 2, big);
  CHECK_THROWS_AS(teacher::teacher_forward(t, other.images), ConfigError);
}

TEST_CASE("differentiable analytic path matches the direct features") {
  auto batch = synth::generate_batch(6, 3, {});
  auto t = teacher::Teacher::analytic(32, {8, 8}, 32, 9);
  auto direct = teacher::teacher_forward(t, batch.images);
  ad::Var<double> x(batch.images.pixels.cast<double>(), true);
  auto via = teacher::teacher_forward_var(t, x);
  CHECK(via.shape() == direct.features.shape);
  CHECK((via.value().data - direct.features.data.cast<double>()).abs().maxCoeff() < 1e-5);
}

TEST_CASE("learned teacher pretrains above the readout floor") {
  const auto& t = small_learned();
  MESSAGE("held-out accuracy " << t.pretrain_accuracy());
  CHECK(t.pretrain_accuracy() >= 0.5);
  CHECK(t.kind() == teacher::TeacherKind::kLearned);
  CHECK(t.learned_params().frozen());

  auto batch = synth::generate_batch(77, 16, {});
  auto f1 = teacher::teacher_forward(t, batch.images);
  auto f2 = teacher::teacher_forward(t, batch.images);
  CHECK(f1.features.shape == Shape{16, 64, 32});
  CHECK((f1.features.data == f2.features.data).all());
}

TEST_CASE("learned teacher parameters receive no gradient") {
  const auto& t = small_learned();
  const auto before = t.checksum();
  auto batch = synth::generate_batch(78, 4, {});
  ad::Var<float> x(batch.images.pixels, true);
  auto y = teacher::teacher_forward_var(t, x);
  ad::backward(ad::mean(ad::square(y)));
  CHECK(x.grad().size() == x.size());
  for (const auto& name : t.learned_params().names()) CHECK(t.learned_params().get(name).grad().size() == 0);
  CHECK(t.checksum() == before);
}

TEST_CASE("pretraining that cannot learn raises a training error") {
  synth::DatasetConfig cfg;
  auto train = synth::generate_batch(1, 200, cfg);
  auto held = synth::generate_batch(2, 200, cfg);
  teacher::LearnedTeacherConfig tc;
  tc.dim = 16;
  tc.steps = 1;
  tc.lr = 1e-9;
  CHECK_THROWS_AS(teacher::pretrain_learned_teacher(train, held, cfg.num_classes(), tc), TrainingError);
}

TEST_CASE("teacher save and load round trip") {
  auto dir = std::filesystem::temp_directory_path() / "sendvae_teacher_test";
  std::filesystem::remove_all(dir);
  auto batch = synth::generate_batch(79, 4, {});
  {
    auto t = teacher::Teacher::analytic(32, {8, 8}, 64, 13);
    teacher::save_teacher(t, dir / "a");
    auto back = teacher::load_teacher(dir / "a");
    CHECK(back.checksum() == t.checksum());
    CHECK((teacher::teacher_forward(back, batch.images).features.data ==
           teacher::teacher_forward(t, batch.images).features.data)
              .all());
  }
  {
    const auto& t = small_learned();
    teacher::save_teacher(t, dir / "l");
    auto back = teacher::load_teacher(dir / "l");
    CHECK(back.checksum() == t.checksum());
    CHECK(back.kind() == teacher::TeacherKind::kLearned);
    CHECK((teacher::teacher_forward(back, batch.images).features.data ==
           teacher::teacher_forward(t, batch.images).features.data)
              .all());
  }
  std::filesystem::remove_all(dir);
}
