#include <fstream>

#include "doctest.h"
#include "sendvae/checkpoint.hpp"
#include "sendvae/orchestrator.hpp"

using namespace sendvae;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("sendvae_orch_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

json tiny_config(int steps) {
  json j = json::parse(R"({
    "schema_version": 1, "variant": "tiny", "seed": 3,
    "data": {"train_count": 256, "eval_count": 256},
    "teacher": {"kind": "analytic", "grid": [8, 8], "dim": 24},
    "vae": {"f": 4, "d": 4, "base_width": 4, "canvas_size": 32},
    "align": {"lambda_align": 1.0, "batch": 8, "lr": 1e-3, "mapper": {"depth": 1, "heads": 2, "hidden_dim": 16}},
    "flow": {"depth": 1, "width": 16, "heads": 2, "patch_size": 2, "batch": 16, "lr": 1e-3, "ema_decay": 0.9},
    "eval": {"probe_train": 256, "gmm_components": [2], "gmm_iterations": 5, "gfid_samples": 256,
             "sampler": {"n_steps": 4, "mode": "ode", "cfg_scale": 1.0}, "probe": {"max_iter": 100}}
  })");
  j["align"]["steps"] = steps;
  j["flow"]["steps"] = steps;
  return j;
}

orch::RunOptions options(const fs::path& dir) {
  orch::RunOptions o;
  o.root = dir;
  o.run_dir = dir;
  o.verbose = false;
  return o;
}

json strip_run_fields(json m) {
  m.erase("timestamps");
  m.erase("executed");
  return m;
}

orch::ReportRow fake_row(const std::string& name, double top5, std::optional<double> gfid) {
  orch::ReportRow r;
  r.variant = name;
  r.metrics.variant = name;
  r.metrics.probe_f1 = metrics::Field::of(top5 / 2);
  r.metrics.probe_top5_recall = metrics::Field::of(top5);
  r.metrics.proxy_gfid = gfid ? metrics::Field::of(*gfid) : metrics::Field::null("no flow stage was run");
  for (auto* f : {&r.metrics.class_accuracy, &r.metrics.gini, &r.metrics.proxy_rfid, &r.metrics.psnr,
                  &r.metrics.ssim, &r.metrics.perceptual})
    *f = metrics::Field::of(0.5);
  return r;
}

}  // namespace

TEST_CASE("config parsing derives seeds and rejects inconsistent settings") {
  auto c = orch::experiment_config_from_json(tiny_config(10));
  CHECK(c.seed == 3);
  CHECK(c.align.mapper.out_dim == 24);
  CHECK(c.flow.num_classes == c.data.dataset.num_classes());
  CHECK(c.flow.repa_dim == 24);
  CHECK(c.pretrain.steps == 0);
  auto c9 = orch::experiment_config_from_json(tiny_config(10), 9);
  CHECK(c9.seed == 9);
  CHECK(c9.align.seed != c.align.seed);
  CHECK(orch::to_json(orch::experiment_config_from_json(orch::to_json(c))) == orch::to_json(c));

  auto bad = tiny_config(10);
  bad["schema_version"] = 2;
  CHECK_THROWS_AS(orch::experiment_config_from_json(bad), ConfigError);
  bad = tiny_config(10);
  bad["align"]["mapper"]["patch_size"] = 2;
  CHECK_THROWS_AS(orch::experiment_config_from_json(bad), ConfigError);
  bad = tiny_config(10);
  bad["pretrain"] = {{"steps", 5}, {"lambda_align", 1.0}};
  CHECK(orch::experiment_config_from_json(bad).pretrain.lambda_align == 0.0);
  bad = tiny_config(10);
  bad["eval"]["probe_train"] = 1000;
  CHECK_THROWS_AS(orch::experiment_config_from_json(bad), ConfigError);
  bad = tiny_config(10);
  bad["teacher"]["kind"] = "dino";
  CHECK_THROWS_AS(orch::experiment_config_from_json(bad), ConfigError);
}

TEST_CASE("sweep configs merge-patch variant overrides") {
  json sweep{{"base", tiny_config(10)},
             {"variants",
              {{{"name", "d0"}, {"overrides", {{"align", {{"mapper", {{"depth", 0}}}}}}}},
               {{"name", "d2"}, {"overrides", {{"align", {{"mapper", {{"depth", 2}}}}}}}}}}};
  CHECK(orch::is_sweep_config(sweep));
  CHECK_FALSE(orch::is_sweep_config(tiny_config(10)));
  CHECK(orch::sweep_variant_names(sweep) == std::vector<std::string>{"d0", "d2"});
  auto c = orch::experiment_config_from_json(orch::sweep_variant_config(sweep, "d2"));
  CHECK(c.align.mapper.depth == 2);
  CHECK(c.align.mapper.heads == 2);
  CHECK(c.variant == "d2");
  CHECK_THROWS_AS(orch::sweep_variant_config(sweep, "d7"), ConfigError);
  sweep["variants"].push_back({{"name", "d0"}});
  CHECK_THROWS_AS(orch::sweep_variant_names(sweep), ConfigError);
}

TEST_CASE("minimal run completes, reruns are skipped and stages are isolated") {
  // Subcases re-enter the test case; train once and let later passes hit the stage cache.
  static const fs::path dir = fresh_dir("smoke");
  const auto cfg = orch::experiment_config_from_json(tiny_config(200));
  const auto m = orch::run_experiment(cfg, options(dir));
  CHECK(m.status == "complete");
  for (const char* s : {"gen-data", "teacher", "train-vae", "train-flow", "eval"}) {
    REQUIRE(m.stages.count(s));
    CHECK_FALSE(m.stages.at(s).outputs.empty());
    CHECK(m.stages.at(s).inputs_hash.size() == 64);
  }
  CHECK(m.stages.count("pretrain") == 0);
  CHECK_NOTHROW(orch::verify_manifest(m, dir));
  CHECK(fs::exists(dir / "metric_report.json"));
  const auto first = read_json(dir / "manifest.json");
  const auto report_bytes = sha256_file(dir / "metric_report.json");
  auto report = read_json(dir / "metric_report.json");
  CHECK_NOTHROW(metrics::validate_metric_report(report));
  CHECK(report["metrics"]["proxy_gfid"].is_number());

  SUBCASE("rerun skips every stage") {
    const auto again = orch::run_experiment(cfg, options(dir));
    CHECK(again.executed.empty());
    CHECK(strip_run_fields(read_json(dir / "manifest.json")) == strip_run_fields(first));
    CHECK(sha256_file(dir / "metric_report.json") == report_bytes);
  }
  SUBCASE("deleting the flow checkpoint reruns only flow and eval") {
    fs::remove_all(dir / m.stages.at("train-flow").dir / "checkpoint");
    const auto again = orch::run_experiment(cfg, options(dir));
    CHECK(again.executed == std::vector<std::string>{"train-flow", "eval"});
    CHECK(sha256_file(dir / "metric_report.json") == report_bytes);
  }
  SUBCASE("a tampered artifact fails verification and is rebuilt") {
    const fs::path victim = dir / m.stages.at("gen-data").dir / "eval_labels.svtf";
    {
      std::ofstream f(victim, std::ios::app | std::ios::binary);
      f << 'x';
    }
    CHECK_THROWS_AS(orch::verify_manifest(m, dir), DataError);
    const auto again = orch::run_experiment(cfg, options(dir));
    CHECK(again.executed == std::vector<std::string>{"gen-data", "teacher", "train-vae", "train-flow", "eval"});
    CHECK(sha256_file(dir / "metric_report.json") == report_bytes);
    CHECK_NOTHROW(orch::verify_manifest(again, dir));
  }
  SUBCASE("changing the flow config leaves the VAE stages untouched") {
    auto j = tiny_config(200);
    j["flow"]["steps"] = 20;
    const auto again = orch::run_experiment(orch::experiment_config_from_json(j), options(dir));
    CHECK(again.executed == std::vector<std::string>{"train-flow", "eval"});
  }
}

TEST_CASE("stage failure marks the manifest partial") {
  const auto dir = fresh_dir("fail");
  auto j = tiny_config(30);
  j["flow"]["lr"] = 1e30;
  const auto cfg = orch::experiment_config_from_json(j);
  CHECK_THROWS_AS(orch::run_experiment(cfg, options(dir)), NumericError);
  const auto m = orch::manifest_from_json(read_json(dir / "manifest.json"));
  CHECK(m.status == "partial");
  CHECK(m.failed_stage == "train-flow");
  CHECK_FALSE(m.error.empty());
  CHECK(m.stages.count("train-vae") == 1);
  CHECK(orch::find_manifests(dir).size() == 1);
  CHECK_THROWS_AS(orch::build_report(orch::find_manifests(dir), dir), DataError);
  fs::remove_all(dir);
}

TEST_CASE("stopping early records a partial manifest") {
  const auto dir = fresh_dir("until");
  auto o = options(dir);
  o.until = orch::Stage::kTrainVae;
  const auto m = orch::run_experiment(orch::experiment_config_from_json(tiny_config(5)), o);
  CHECK(m.status == "partial");
  CHECK(m.failed_stage.empty());
  CHECK(m.stages.count("train-flow") == 0);
  fs::remove_all(dir);
}

TEST_CASE("depth sweep yields one child manifest and report row per depth") {
  const auto dir = fresh_dir("sweep");
  json sweep{{"base", tiny_config(20)}, {"variants", json::array()}};
  for (int d : {0, 1, 2})
    sweep["variants"].push_back(
        {{"name", "depth" + std::to_string(d)}, {"overrides", {{"align", {{"mapper", {{"depth", d}}}}}}}});
  const auto res = orch::run_sweep(sweep, options(dir), std::nullopt);
  CHECK(res.failed.empty());
  REQUIRE(res.manifests.size() == 3);
  // Data and teacher stages are shared across variants.
  CHECK(res.manifests[1].stages.at("gen-data").dir == res.manifests[0].stages.at("gen-data").dir);
  CHECK(res.manifests[1].stages.at("train-vae").dir != res.manifests[0].stages.at("train-vae").dir);
  for (const char* v : {"depth0", "depth1", "depth2"}) CHECK(fs::exists(dir / "runs" / v / "manifest.json"));

  const auto report = orch::build_report(orch::find_manifests(dir), dir);
  REQUIRE(report.rows.size() == 3);
  CHECK(report.rows[2].variant == "depth2");
  CHECK(report.pearson_top5_gfid.value.has_value());
  const auto j = orch::to_json(report);
  CHECK(orch::to_json(orch::report_from_json(json::parse(j.dump()))) == j);
  const auto md = orch::report_markdown(report);
  CHECK(md.find("| depth1 |") != std::string::npos);

  const auto plots = orch::render_plots(report, dir / "plots");
  CHECK(plots.written.size() == 3);
  CHECK(fs::exists(dir / "plots" / "loss_vae.svg"));

  const auto only = orch::run_sweep(sweep, options(dir), std::nullopt, std::string("depth1"));
  CHECK(only.manifests.size() == 1);
  CHECK(only.manifests[0].executed.empty());
  CHECK_THROWS_AS(orch::run_sweep(sweep, options(dir), std::nullopt, std::string("depth9")), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("report correlation needs three variants") {
  orch::Report two;
  two.rows = {fake_row("a", 0.2, 3.0), fake_row("b", 0.4, 2.0)};
  orch::fill_correlations(two);
  CHECK_FALSE(two.pearson_top5_gfid.value.has_value());
  CHECK(two.pearson_top5_gfid.reason.find("fewer than 3") != std::string::npos);
  const auto back = orch::report_from_json(json::parse(orch::to_json(two).dump()));
  CHECK_FALSE(back.pearson_top5_gfid.value.has_value());
  CHECK(back.pearson_top5_gfid.reason == two.pearson_top5_gfid.reason);
  CHECK(orch::report_markdown(back).find("null (fewer than 3") != std::string::npos);

  two.rows.push_back(fake_row("c", 0.5, 1.5));
  orch::fill_correlations(two);
  REQUIRE(two.pearson_top5_gfid.value.has_value());
  CHECK(*two.pearson_top5_gfid.value == doctest::Approx(metrics::pearson({0.2, 0.4, 0.5}, {3.0, 2.0, 1.5})));
}

TEST_CASE("scatter plot annotates the Pearson r of its points") {
  const auto dir = fresh_dir("plots");
  orch::Report r;
  r.rows = {fake_row("a", 0.30, 9.0), fake_row("b", 0.35, 8.1), fake_row("c", 0.41, 6.2), fake_row("d", 0.44, 6.5),
            fake_row("e", 0.5, std::nullopt)};
  r.rows[0].vae_log = dir / "empty.jsonl";
  std::ofstream(dir / "empty.jsonl").close();
  const auto out = orch::render_plots(r, dir / "plots");
  REQUIRE(out.scatter_r.has_value());
  CHECK(*out.scatter_r == doctest::Approx(metrics::pearson({0.30, 0.35, 0.41, 0.44}, {9.0, 8.1, 6.2, 6.5})).epsilon(1e-15));
  std::ifstream f(dir / "plots" / "scatter_top5_vs_gfid.svg");
  const std::string svg((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  std::ostringstream want;
  want << std::setprecision(4) << *out.scatter_r;
  CHECK(svg.find("Pearson r = " + want.str()) != std::string::npos);
  bool skipped_point = false, skipped_loss = false;
  for (const auto& s : out.skipped) {
    skipped_point |= s.find("scatter point e") != std::string::npos;
    skipped_loss |= s.find("loss_vae a: training log is empty") != std::string::npos;
  }
  CHECK(skipped_point);
  CHECK(skipped_loss);
  CHECK(read_json(dir / "plots" / "plots.json")["skipped"].size() == out.skipped.size());

  orch::Report small;
  small.rows = {fake_row("a", 0.3, 9.0), fake_row("b", 0.4, 8.0)};
  const auto none = orch::render_plots(small, dir / "small");
  CHECK(none.written.empty());
  CHECK_FALSE(none.scatter_r.has_value());
  fs::remove_all(dir);
}
