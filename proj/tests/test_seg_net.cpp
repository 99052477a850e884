#include <doctest.h>

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <random>

#include "oracles.hpp"
#include "uslseg/errors.hpp"
#include "uslseg/metrics.hpp"
#include "uslseg/seg_net.hpp"

using namespace uslseg;
using namespace uslseg::seg;

namespace {

SegConfig tiny() { return {{8, {1, 1, 1}, 1, 4}, 32}; }

FloatMap grid(int rows, int cols, std::vector<float> v) {
  FloatMap m(rows, cols);
  m.data = std::move(v);
  return m;
}

// Masked BCE written out per pixel.
double loss_oracle(const FloatMap& p, const FloatMap& l) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double li = l.data[i], pi = std::clamp<double>(p.data[i], 1e-7, 1 - 1e-7);
    if (li == 0.5) continue;
    den += 1;
    num += (li - 0.5) * (li - 0.5) * -(li * std::log(pi) + (1 - li) * std::log(1 - pi));
  }
  return den == 0 ? 0.0 : num / den;
}

FloatMap random_label(std::mt19937_64& rng, int rows, int cols) {
  std::uniform_int_distribution<int> d(0, 2);
  FloatMap l(rows, cols);
  for (auto& v : l.data) v = 0.5f * d(rng);
  return l;
}

FloatMap random_prob(std::mt19937_64& rng, int rows, int cols) {
  std::uniform_real_distribution<float> u(0.05f, 0.95f);
  FloatMap p(rows, cols);
  for (auto& v : p.data) v = u(rng);
  return p;
}

um::TriLabel label_from_gt(const Mask& gt) {
  um::TriLabel l{FloatMap(gt.rows, gt.cols), false};
  for (std::size_t i = 0; i < gt.size(); ++i) l.values.data[i] = gt.data[i];
  return l;
}

double mean_dice(const std::vector<Prediction>& preds, const std::vector<ImageSample>& data) {
  double s = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    s += metrics::compute_metrics(metrics::confusion(infer(preds[i]), *data[i].gt_mask)).dic;
  return s / static_cast<double>(data.size());
}

std::vector<ImageSample> suite(int n) {
  SyntheticOptions so;
  so.count = n;
  return make_synthetic_suite(so);
}

}  // namespace

TEST_CASE("decoder shape contract at full width") {
  SegModel model({{64, {1, 1, 1}, 1, 4}, 256}, 1);
  const Tensor out = model.forward(Tensor(1, 3, 224, 224, 0.4f));
  const auto& s = model.shapes();
  CHECK(s.stage2 == std::array<int, 4>{1, 256, 56, 56});
  CHECK(s.stage3 == std::array<int, 4>{1, 512, 28, 28});
  CHECK(s.stage4 == std::array<int, 4>{1, 1024, 14, 14});
  CHECK(s.merged == std::array<int, 4>{1, 256, 56, 56});
  CHECK(s.logits == std::array<int, 4>{1, 1, 56, 56});
  CHECK(s.output == std::array<int, 4>{1, 1, 224, 224});
  CHECK(out.shape == std::array<int, 4>{1, 1, 224, 224});
}

TEST_CASE("forward is bounded, deterministic in eval mode and checks its input") {
  SegModel model(tiny(), 2);
  std::mt19937_64 rng(2);
  Tensor img(2, 3, 224, 224);
  for (auto& v : img.data) v = std::uniform_real_distribution<float>(0, 1)(rng);
  const Tensor a = model.forward(img), b = model.forward(img);
  CHECK(a.data == b.data);
  for (float v : a.data) {
    CHECK(v >= 0.0f);
    CHECK(v <= 1.0f);
  }
  CHECK_THROWS_AS(model.forward(Tensor(1, 3, 200, 224)), ShapeError);
  CHECK_THROWS_AS(model.forward(Tensor(1, 1, 224, 224)), ShapeError);
}

TEST_CASE("usl loss worked examples") {
  const FloatMap l = grid(2, 2, {1, 0, 0.5f, 0.5f});
  const FloatMap p = grid(2, 2, {0.8f, 0.2f, 0.9f, 0.1f});
  CHECK(std::abs(usl_loss(p, l) - 0.25 * (-2 * std::log(0.8)) / 2) < 1e-6);
  CHECK(std::abs(usl_loss(p, l) - 0.05579) < 1e-4);
  CHECK(usl_loss(p, FloatMap(2, 2, 0.5f)) == 0.0);
  FloatMap big(224, 224, 1.0f);
  for (int i = 0; i < 30; ++i) big.data[i * 97] = 0.5f;
  CHECK(usl_denominator(big) == doctest::Approx(50146));
  FloatMap perfect(4, 4, 1.0f);
  CHECK(usl_loss(FloatMap(4, 4, 1.0f - 1e-6f), perfect) < 1e-5);
}

TEST_CASE("usl loss matches the per-pixel oracle and ignores uncertain pixels") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const FloatMap l = random_label(rng, 8, 8);
    FloatMap p = random_prob(rng, 8, 8);
    const double base = usl_loss(p, l);
    CHECK(base == doctest::Approx(loss_oracle(p, l)).epsilon(1e-9));
    for (std::size_t i = 0; i < p.size(); ++i)
      if (l.data[i] == 0.5f) p.data[i] = std::uniform_real_distribution<float>(0, 1)(rng);
    CHECK(usl_loss(p, l) == base);
  }
}

TEST_CASE("usl loss gradient matches central differences") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const FloatMap l = random_label(rng, 8, 8);
    FloatMap p = random_prob(rng, 8, 8);
    const FloatMap g = usl_loss_grad(p, l);
    for (std::size_t i = 0; i < p.size(); ++i) {
      // central differences on the double-precision oracle
      auto at = [&](double v) {
        FloatMap q = p;
        double num = 0, den = usl_denominator(l);
        for (std::size_t j = 0; j < q.size(); ++j) {
          const double lj = l.data[j], pj = j == i ? v : q.data[j];
          num += (lj - 0.5) * (lj - 0.5) * -(lj * std::log(pj) + (1 - lj) * std::log(1 - pj));
        }
        return num / den;
      };
      const double h = 1e-4;
      const double fd = (at(p.data[i] + h) - at(p.data[i] - h)) / (2 * h);
      if (fd == 0.0) {
        CHECK(g.data[i] == 0.0f);
      } else {
        CHECK(std::abs(g.data[i] - fd) / std::abs(fd) < 1e-3);
      }
    }
  }
}

TEST_CASE("usl loss on logits agrees with the probability form") {
  std::mt19937_64 rng(5);
  const FloatMap l = random_label(rng, 8, 8);
  FloatMap z(8, 8);
  for (auto& v : z.data) v = std::normal_distribution<float>(0, 2)(rng);
  FloatMap p = z;
  for (auto& v : p.data) v = 1.0f / (1.0f + std::exp(-v));
  FloatMap gz;
  const double lz = usl_loss_logits(z, l, &gz);
  CHECK(lz == doctest::Approx(usl_loss(p, l)).epsilon(1e-5));
  const FloatMap gp = usl_loss_grad(p, l);
  for (std::size_t i = 0; i < z.size(); ++i)
    CHECK(gz.data[i] == doctest::Approx(gp.data[i] * p.data[i] * (1 - p.data[i])).epsilon(1e-4).scale(1e-6));
}

TEST_CASE("inference examples and antitone thresholds") {
  CHECK(infer(FloatMap(4, 4, 0.7f)).data == std::vector<std::uint8_t>(16, 1));
  CHECK(infer(FloatMap(1, 1, 0.5f)).data[0] == 1);
  std::mt19937_64 rng(6);
  const FloatMap p = random_prob(rng, 32, 32);
  const Mask m3 = infer(p, 0.3), m5 = infer(p, 0.5), m7 = infer(p, 0.7);
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(m7.data[i] <= m5.data[i]);
    CHECK(m5.data[i] <= m3.data[i]);
  }
  CHECK_THROWS_AS(infer(p, 0.0), InvalidThreshold);
  CHECK_THROWS_AS(infer(p, 1.0), InvalidThreshold);
  um::TriLabel l{grid(1, 3, {1, 0.5f, 0}), false};
  CHECK(label_to_mask(l).data == std::vector<std::uint8_t>{1, 0, 0});
}

TEST_CASE("training needs at least one usable label") {
  SegModel model(tiny(), 7);
  const auto data = suite(2);
  std::vector<um::TriLabel> labels(2, um::TriLabel{FloatMap(224, 224, 0.0f), true});
  SegTrainOptions opt;
  opt.epochs = 1;
  CHECK_THROWS_AS(train_iteration(model, data, labels, opt), NoTrainableSamples);
}

TEST_CASE("the first loss equals the zero-logit value") {
  SegModel model(tiny(), 8);
  const auto data = suite(4);
  std::vector<um::TriLabel> labels;
  for (const auto& s : data) labels.push_back(label_from_gt(*s.gt_mask));
  labels[1].excluded = true;
  SegTrainOptions opt;
  opt.epochs = 1;
  opt.batch_size = 3;
  opt.lr = 0.0;
  const auto rep = train_iteration(model, data, labels, opt);
  REQUIRE_FALSE(rep.loss_trace.empty());
  CHECK(rep.loss_trace[0] == doctest::Approx(0.25 * std::log(2.0)).epsilon(1e-5));
  CHECK(rep.excluded_count == 1);
  CHECK(rep.predictions.size() == 4);
}

TEST_CASE("training on 20 synthetic images improves Dice") {
  const auto data = suite(20);
  SegModel model({{16, {1, 1, 1}, 1, 4}, 32}, 9);
  const double before = mean_dice(predict_all(model, data), data);
  std::vector<um::TriLabel> labels;
  for (const auto& s : data) labels.push_back(label_from_gt(*s.gt_mask));
  SegTrainOptions opt;
  opt.epochs = 15;
  opt.batch_size = 4;
  opt.lr = 0.1;
  opt.seed = 1;
  const auto rep = train_iteration(model, data, labels, opt);
  for (double l : rep.loss_trace) CHECK(std::isfinite(l));
  const double after = mean_dice(rep.predictions, data);
  CHECK(after > before);
  CHECK(after > 0.6);
}

TEST_CASE("refinement schedule validation") {
  CHECK_NOTHROW(RefinementSchedule{}.validate());
  CHECK_THROWS_AS((RefinementSchedule{2, 10, 3}.validate()), ConfigError);
  CHECK_THROWS_AS((RefinementSchedule{-1, 10, 0}.validate()), ConfigError);
  CHECK_THROWS_AS((RefinementSchedule{2, 0, 1}.validate()), ConfigError);
}

TEST_CASE("refinement with zero extra iterations trains once") {
  const auto data = suite(4);
  std::vector<um::TriLabel> labels;
  for (const auto& s : data) labels.push_back(label_from_gt(*s.gt_mask));
  SegModel model(tiny(), 10);
  SegTrainOptions opt;
  opt.batch_size = 4;
  const auto dir = oracle::temp_dir("refine0");
  int calls = 0;
  const auto res = refine(model, data, labels, {0, 1, 0}, opt, {}, dir, "fp",
                          [&](const IterationRecord&, const std::vector<um::TriLabel>& l,
                              const std::vector<Prediction>& p) {
                            ++calls;
                            CHECK(l.size() == 4);
                            CHECK(p.size() == 4);
                          });
  CHECK(res.iterations.size() == 1);
  CHECK(res.exported == 0);
  CHECK(calls == 1);
  CHECK(res.predictions.size() == 4);
  CHECK(res.next_labels.size() == 4);
  const auto meta = nlohmann::json::parse(std::ifstream(res.iterations[0].metadata));
  for (const char* key : {"iteration", "epochs", "loss_trace", "excluded_count", "seed", "fingerprint"})
    CHECK(meta.contains(key));
  CHECK(std::filesystem::exists(dir / "iter_0" / "model.bin"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("refinement resumes from checkpoints") {
  const auto data = suite(4);
  std::vector<um::TriLabel> labels;
  for (const auto& s : data) labels.push_back(label_from_gt(*s.gt_mask));
  SegTrainOptions opt;
  opt.batch_size = 2;
  opt.lr = 0.2;
  opt.seed = 4;
  const auto a = oracle::temp_dir("resume_a"), b = oracle::temp_dir("resume_b");

  SegModel first(tiny(), 11);
  refine(first, data, labels, {1, 40, 1}, opt, {}, a, "fp");
  SegModel resumed(tiny(), 11);
  const auto r = refine(resumed, data, labels, {2, 40, 2}, opt, {}, a, "fp");
  CHECK(r.iterations[0].resumed);
  CHECK(r.iterations[1].resumed);
  CHECK_FALSE(r.iterations[2].resumed);

  SegModel fresh(tiny(), 11);
  const auto f = refine(fresh, data, labels, {2, 40, 2}, opt, {}, b, "fp");
  REQUIRE(f.predictions.size() == r.predictions.size());
  for (std::size_t i = 0; i < f.predictions.size(); ++i) CHECK(f.predictions[i] == r.predictions[i]);
  CHECK(f.iterations[2].loss_trace == r.iterations[2].loss_trace);

  SegModel other(tiny(), 11);
  const auto g = refine(other, data, labels, {0, 40, 0}, opt, {}, a, "different");
  CHECK_FALSE(g.iterations[0].resumed);
  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
}
