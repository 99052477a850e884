#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "oracles.hpp"
#include "uslseg/errors.hpp"
#include "uslseg/pipeline.hpp"

using namespace uslseg;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Smallest settings that still exercise every stage.
PipelineConfig smoke_config(const fs::path& data, const fs::path& out) {
  PipelineConfig c = toy_config(data.string(), out.string());
  c.contrastive.methods = {ContrastiveMethod::moco_v1, ContrastiveMethod::moco_v2};
  c.contrastive.epochs = 1;
  c.contrastive.batch = 4;
  c.contrastive.queue = 16;
  c.contrastive.base_width = 8;
  c.ccam.epochs = 2;
  c.ccam.batch = 4;
  c.ccam.proj_channels = 16;
  c.um.far_fraction = 1.0;
  c.um.alpha = 100;
  c.seg.epochs_per_iteration = 10;
  c.seg.n_iterations = 1;
  c.seg.export_iteration = 1;
  c.seg.batch = 2;
  c.seg.lr = 0.2;
  c.seg.base_width = 8;
  return c;
}

struct Fixture {
  fs::path root = oracle::temp_dir("pipeline");
  fs::path data = root / "data";
  Fixture() {
    SyntheticOptions so;
    so.count = 8;
    write_synthetic_suite(data, so);
  }
  ~Fixture() { fs::remove_all(root); }
};

}  // namespace

TEST_CASE("cache root precedence") {
  PipelineConfig c;
  c.output_dir = "runs/p";
  RunOptions opt;
  ::unsetenv("USLSEG_CACHE");
  CHECK(cache_root(c, opt) == fs::path("runs/p") / "cache");
  ::setenv("USLSEG_CACHE", "/tmp/env_cache", 1);
  CHECK(cache_root(c, opt) == fs::path("/tmp/env_cache"));
  opt.cache_root = "/tmp/explicit";
  CHECK(cache_root(c, opt) == fs::path("/tmp/explicit"));
  ::unsetenv("USLSEG_CACHE");
}

TEST_CASE("stage names round-trip") {
  for (auto s : {Stage::pretrain, Stage::ccam, Stage::labels, Stage::train, Stage::refine, Stage::infer, Stage::evaluate,
                 Stage::all})
    CHECK(parse_stage(to_string(s)) == s);
  CHECK_THROWS(parse_stage("deploy"));
}

TEST_CASE("overlay colours disagreements and keeps agreement") {
  Tensor img(1, 3, 4, 4, 0.5f);
  Mask pred(4, 4), gt(4, 4);
  pred.at(0, 0) = 1;  // over-segmented
  gt.at(1, 1) = 1;    // under-segmented
  pred.at(2, 2) = gt.at(2, 2) = 1;
  const Tensor o = overlay(pred, gt, img);
  CHECK(o.at(0, 0, 0, 0) > o.at(0, 1, 0, 0));
  CHECK(o.at(0, 0, 0, 0) > o.at(0, 2, 0, 0));
  CHECK(o.at(0, 1, 1, 1) > o.at(0, 0, 1, 1));
  CHECK(o.at(0, 1, 1, 1) > o.at(0, 2, 1, 1));
  for (int ch = 0; ch < 3; ++ch) {
    CHECK(o.at(0, ch, 3, 3) == 0.5f);
    CHECK(o.at(0, ch, 2, 2) == 0.5f);
  }
  CHECK_THROWS_AS(overlay(Mask(4, 4), Mask(4, 5), img), ShapeError);
}

TEST_CASE("naive CAM is the normalised channel mean") {
  Tensor f(1, 2, 2, 2);
  f.data = {0, 1, 2, 3, 0, 1, 2, 3};
  const auto cam = naive_cam(f);
  REQUIRE(cam.values.rows == 224);
  float lo = 1e9f, hi = -1e9f;
  for (float v : cam.values.data) lo = std::min(lo, v), hi = std::max(hi, v);
  CHECK(lo == doctest::Approx(0.0f));
  CHECK(hi == doctest::Approx(255.0f));
  CHECK(cam.values.at(0, 0) < cam.values.at(223, 223));
}

TEST_CASE("centrality filter keeps the central region only") {
  FloatMap s(224, 224, 0.0f);
  for (int r = 90; r < 130; ++r)
    for (int c = 90; c < 130; ++c) s.at(r, c) = 0.9f;
  for (int r = 0; r < 30; ++r)
    for (int c = 0; c < 30; ++c) s.at(r, c) = 0.9f;
  const auto m = centrality_filter(s, {});
  REQUIRE(m.has_value());
  CHECK(m->at(100, 100) == 1);
  CHECK(m->at(5, 5) == 0);
  CHECK_FALSE(centrality_filter(FloatMap(224, 224, 0.0f), {}).has_value());
}

TEST_CASE("threshold sweep drops grid values outside the open lower half") {
  FloatMap s(224, 224, 0.1f);
  Mask gt(224, 224);
  for (int r = 80; r < 144; ++r)
    for (int c = 80; c < 144; ++c) {
      s.at(r, c) = 0.9f;
      gt.at(r, c) = 1;
    }
  const auto rows = threshold_sweep({s}, {gt}, {0.0, 0.2, 0.3, 0.5, 0.7}, {});
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].x == 0.2);
  CHECK(rows[0].naive_x_acc == doctest::Approx(1.0));
  CHECK(rows[0].naive_1mx_acc == doctest::Approx(1.0));
  CHECK(rows[0].um_acc == doctest::Approx(1.0));
  const auto csv = sweep_csv(rows);
  CHECK(csv.rfind("x,naive_x_acc,naive_1mx_acc,um_acc\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);
}

TEST_CASE("labels without CAMs is a missing prerequisite") {
  Fixture fx;
  auto c = smoke_config(fx.data, fx.root / "out");
  RunOptions opt;
  opt.cache_root = fx.root / "cache";
  CHECK_THROWS_AS(run(Stage::labels, c, opt), MissingPrerequisite);
  CHECK_THROWS_AS(run(Stage::ccam, c, opt), MissingPrerequisite);
  CHECK_THROWS_AS(run(Stage::evaluate, c, opt), MissingPrerequisite);
}

TEST_CASE("run all produces every artifact and reuses them on a rerun") {
  Fixture fx;
  const fs::path out = fx.root / "out";
  auto c = smoke_config(fx.data, out);
  RunOptions opt;
  opt.cache_root = fx.root / "cache";
  std::ostringstream log;
  opt.log = &log;
  const auto res = run(Stage::all, c, opt);
  REQUIRE(res.stages.size() == 8);
  CHECK(res.stages.back().stage == "all");
  for (const auto& rec : res.stages) {
    CHECK_FALSE(rec.reused);
    CHECK_FALSE(rec.skipped);
    for (const auto& [name, path] : rec.artifacts) CHECK_MESSAGE(fs::exists(path), name);
  }
  REQUIRE(res.report.has_value());
  CHECK(res.report->per_image.size() == 8);
  CHECK(fs::exists(out / "metrics.csv"));
  CHECK(fs::exists(out / "table.txt"));
  CHECK(fs::exists(out / "iterations.csv"));
  CHECK(fs::exists(out / "threshold_sweep.csv"));
  const std::string snapshot = slurp(out / "config.txt");
  for (const char* key : {"lo = ", "hi = ", "alpha = "}) CHECK(snapshot.find(key) != std::string::npos);
  CHECK(parse_config(snapshot) == c);

  const auto metrics_before = slurp(out / "metrics.csv");
  const auto again = run(Stage::all, c, opt);
  for (std::size_t i = 0; i < 6; ++i) CHECK(again.stages[i].reused);
  CHECK(slurp(out / "metrics.csv") == metrics_before);
  const auto manifest = nlohmann::json::parse(std::ifstream(out / "manifest.json"));
  CHECK(manifest["runs"].size() == 2);
  CHECK(manifest["runs"][0]["stages"].size() == 8);
  CHECK(manifest["runs"][1]["config"]["um"]["alpha"] == 100.0);

  // A single downstream stage run reuses the cached upstream work.
  const auto only = run(Stage::evaluate, c, opt);
  REQUIRE(only.stages.size() == 1);
  CHECK(only.report.has_value());
}

TEST_CASE("CAM variants skip the network stages") {
  Fixture fx;
  RunOptions opt;
  opt.cache_root = fx.root / "cache";
  for (auto v : {Variant::baseline, Variant::model2}) {
    auto c = apply_preset(smoke_config(fx.data, fx.root / ("out_" + to_string(v))), v);
    const auto res = run(Stage::all, c, opt);
    REQUIRE(res.stages.size() == 8);
    CHECK(res.stages[3].skipped);
    CHECK(res.stages[4].skipped);
    REQUIRE(res.report.has_value());
    CHECK(res.report->averages.acc > 0.0);
  }
}
