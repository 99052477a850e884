#include <doctest.h>

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <random>

#include "oracles.hpp"
#include "uslseg/contrastive.hpp"
#include "uslseg/errors.hpp"

using namespace uslseg;
using namespace uslseg::contrastive;

namespace {

std::vector<float> unit(std::mt19937_64& rng, int d) {
  std::normal_distribution<float> n(0, 1);
  std::vector<float> v(d);
  double s = 0;
  for (auto& x : v) {
    x = n(rng);
    s += x * x;
  }
  for (auto& x : v) x = static_cast<float>(x / std::sqrt(s));
  return v;
}

// Direct softmax cross-entropy with the positive at index 0.
double nce_oracle(const std::vector<double>& sims, double tau) {
  double mx = -1e300;
  for (double s : sims) mx = std::max(mx, s / tau);
  double z = 0;
  for (double s : sims) z += std::exp(s / tau - mx);
  return -(sims[0] / tau - mx - std::log(z));
}

double dotp(const std::vector<float>& a, const std::vector<float>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

EncoderConfig tiny_encoder() { return {{8, {1, 1, 1, 1}, 1, 5}, {4, 5}}; }

}  // namespace

TEST_CASE("encoder emits the concatenated stage-4 and stage-5 map") {
  Encoder enc({{64, {1, 1, 1, 1}, 1, 5}, {4, 5}}, 1);
  const auto f = enc.encode(Tensor(1, 3, 224, 224, 0.5f), "moco_v2");
  CHECK(f.values.shape == std::array<int, 4>{1, 3072, 14, 14});
  CHECK(f.method == "moco_v2");
  CHECK(f.stages == std::vector<int>{4, 5});
  EncoderConfig last{{64, {1, 1, 1, 1}, 1, 5}, {5}};
  CHECK(last.feature_channels() == 2048);
  CHECK_THROWS_AS(enc.encode(Tensor(1, 3, 128, 128)), ShapeError);
  CHECK_THROWS_AS(enc.encode(Tensor(2, 3, 224, 224)), ShapeError);
}

TEST_CASE("encoding is deterministic in eval mode") {
  Encoder enc(tiny_encoder(), 3);
  std::mt19937_64 rng(2);
  Tensor img(1, 3, 224, 224);
  for (auto& v : img.data) v = std::uniform_real_distribution<float>(0, 1)(rng);
  CHECK(enc.encode(img).values.data == enc.encode(img).values.data);
}

TEST_CASE("info_nce examples") {
  std::mt19937_64 rng(3);
  const auto q = unit(rng, 16);
  for (int k : {1, 15, 255}) {
    std::vector<std::vector<float>> store(k, q);
    std::vector<std::span<const float>> negs(store.begin(), store.end());
    CHECK(info_nce(q, q, negs, 0.07) == doctest::Approx(std::log(k + 1.0)).epsilon(1e-6));
  }
  const std::vector<float> e0{1, 0}, e1{0, 1};
  const double tiny = info_nce(e0, e0, {std::span<const float>(e1)}, 0.07);
  CHECK(tiny == doctest::Approx(std::log1p(std::exp(-1 / 0.07))).epsilon(1e-3));
  CHECK(tiny > 6.1e-7);
  CHECK(tiny < 6.3e-7);
  CHECK_THROWS_AS(info_nce(e0, e0, {std::span<const float>(e1)}, 0.0), DegenerateInput);
  CHECK_THROWS_AS(info_nce(e0, e0, {}, 0.07), DegenerateInput);
}

TEST_CASE("info_nce matches the softmax oracle and is shift invariant") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const auto q = unit(rng, 32), kp = unit(rng, 32);
    std::vector<std::vector<float>> store;
    for (int i = 0; i < 15; ++i) store.push_back(unit(rng, 32));
    std::vector<std::span<const float>> negs(store.begin(), store.end());
    std::vector<double> sims{dotp(q, kp)};
    for (const auto& k : store) sims.push_back(dotp(q, k));
    const double loss = info_nce(q, kp, negs, 0.07);
    CHECK(loss == doctest::Approx(nce_oracle(sims, 0.07)).epsilon(1e-6));
    CHECK(loss >= 0.0);
    CHECK(info_nce_from_logits(sims, 0.07) == doctest::Approx(loss).epsilon(1e-9));
    std::vector<double> shifted = sims;
    for (auto& s : shifted) s += 0.37;
    CHECK(info_nce_from_logits(shifted, 0.07) == doctest::Approx(loss).epsilon(1e-9));
  }
}

TEST_CASE("info_nce gradients match central differences") {
  std::mt19937_64 rng(5);
  auto q = unit(rng, 8), kp = unit(rng, 8);
  std::vector<std::vector<float>> store{unit(rng, 8), unit(rng, 8), unit(rng, 8)};
  auto spans = [&] { return std::vector<std::span<const float>>(store.begin(), store.end()); };
  const double tau = 0.2;
  const auto res = info_nce_with_grad(q, kp, spans(), tau);
  CHECK(res.loss == doctest::Approx(info_nce(q, kp, spans(), tau)));
  const double h = 1e-3;
  auto fd = [&](std::vector<float>& v, std::size_t i) {
    const float keep = v[i];
    v[i] = keep + h;
    const double up = info_nce(q, kp, spans(), tau);
    v[i] = keep - h;
    const double dn = info_nce(q, kp, spans(), tau);
    v[i] = keep;
    return (up - dn) / (2 * h);
  };
  for (std::size_t i = 0; i < q.size(); ++i) {
    CHECK(res.grad_q[i] == doctest::Approx(fd(q, i)).epsilon(1e-2).scale(1e-2));
    CHECK(res.grad_positive[i] == doctest::Approx(fd(kp, i)).epsilon(1e-2).scale(1e-2));
    CHECK(res.grad_negatives[1][i] == doctest::Approx(fd(store[1], i)).epsilon(1e-2).scale(1e-2));
  }
  CHECK(info_nce_with_grad(q, kp, spans(), tau, false).grad_negatives.empty());
}

TEST_CASE("momentum update arithmetic") {
  std::vector<float> key{0.0f, 2.0f}, query{1.0f, 4.0f};
  momentum_update(key, query, 0.999);
  CHECK(key[0] == doctest::Approx(0.001));
  CHECK(key[1] == doctest::Approx(2.002));
  std::vector<float> fixed{0.3f};
  momentum_update(fixed, std::vector<float>{9.0f}, 1.0);
  CHECK(fixed[0] == 0.3f);
  momentum_update(fixed, std::vector<float>{9.0f}, 0.0);
  CHECK(fixed[0] == 9.0f);
  // n updates towards a fixed query follow the closed form
  std::vector<float> k{0.0f};
  for (int i = 0; i < 50; ++i) momentum_update(k, std::vector<float>{1.0f}, 0.9);
  CHECK(k[0] == doctest::Approx(1.0 - std::pow(0.9, 50)).epsilon(1e-5));
}

TEST_CASE("state momentum update copies the query at m = 0") {
  ContrastiveOptions opt;
  opt.momentum = 0.0;
  opt.queue_capacity = 16;
  ContrastiveState state(ContrastiveMethod::moco_v1, tiny_encoder(), opt);
  REQUIRE(state.key);
  REQUIRE(state.queue.has_value());
  CHECK(state.query_head->kind() == HeadKind::fc);
  auto& qp = state.query.backbone().params().front()->value;
  qp[0] += 1.0f;
  momentum_update(state);
  CHECK(state.key->backbone().params().front()->value == qp);

  ContrastiveState sim(ContrastiveMethod::simclr, tiny_encoder(), opt);
  CHECK_FALSE(sim.key);
  CHECK_FALSE(sim.queue.has_value());
  CHECK(sim.query_head->kind() == HeadKind::mlp);
  CHECK_THROWS_AS(momentum_update(sim), InvalidMethod);
}

TEST_CASE("key queue evicts oldest first and never exceeds capacity") {
  KeyQueue q(3);
  for (int i = 0; i < 7; ++i) {
    q.push({static_cast<float>(i)});
    CHECK(q.size() <= 3);
  }
  REQUIRE(q.size() == 3);
  CHECK(q.keys().front()[0] == 4.0f);
  CHECK(q.keys().back()[0] == 6.0f);
}

TEST_CASE("heads follow the method") {
  CHECK(head_for(ContrastiveMethod::moco_v1) == HeadKind::fc);
  CHECK(head_for(ContrastiveMethod::moco_v2) == HeadKind::mlp);
  CHECK(head_for(ContrastiveMethod::simclr) == HeadKind::mlp);
  nn::Rng rng(1);
  ProjectionHead head(HeadKind::mlp, 32, 16, rng);
  CHECK(head.forward(Tensor(2, 32, 1, 1, 0.1f)).shape == std::array<int, 4>{2, 16, 1, 1});
}

TEST_CASE("simclr training on 8 images records two steps") {
  SyntheticOptions so;
  so.count = 8;
  const auto data = make_synthetic_suite(so);
  ContrastiveOptions opt;
  opt.epochs = 1;
  opt.batch_size = 4;
  opt.seed = 3;
  const auto dir = oracle::temp_dir("simclr");
  const auto ckpt = train_contrastive(ContrastiveMethod::simclr, data, tiny_encoder(), opt, dir);
  REQUIRE(ckpt.loss_trace.size() == 2);
  for (double l : ckpt.loss_trace) CHECK(std::isfinite(l));
  const auto back = read_checkpoint(ckpt.metadata);
  CHECK(back.method == ContrastiveMethod::simclr);
  CHECK(back.encoder == tiny_encoder());
  CHECK(back.loss_trace == ckpt.loss_trace);
  Encoder loaded = load_encoder(back);
  CHECK(loaded.backbone().params().front()->value.size() > 0);
  std::filesystem::remove_all(dir);
}

TEST_CASE("the first simclr loss is close to the uniform-logit value") {
  SyntheticOptions so;
  so.count = 16;
  const auto data = make_synthetic_suite(so);
  ContrastiveOptions opt;
  opt.epochs = 1;
  opt.batch_size = 16;
  const auto dir = oracle::temp_dir("simclr16");
  const auto ckpt = train_contrastive(ContrastiveMethod::simclr, data, tiny_encoder(), opt, dir);
  const double uniform = std::log(2.0 * opt.batch_size - 1);
  CHECK(std::abs(ckpt.loss_trace[0] - uniform) / uniform < 0.10);
  std::filesystem::remove_all(dir);
}

TEST_CASE("moco_v1 metadata records the fc head and queue size") {
  SyntheticOptions so;
  so.count = 4;
  const auto data = make_synthetic_suite(so);
  ContrastiveOptions opt;
  opt.epochs = 1;
  opt.batch_size = 4;
  opt.queue_capacity = 32;
  const auto dir = oracle::temp_dir("mocov1");
  const auto ckpt = train_contrastive(ContrastiveMethod::moco_v1, data, tiny_encoder(), opt, dir);
  const auto meta = nlohmann::json::parse(std::ifstream(ckpt.metadata));
  CHECK(meta["head"] == "fc");
  CHECK(meta["K"] == 32);
  CHECK(meta["method"] == "moco_v1");
  CHECK(meta["loss_trace"].size() == 1);
  std::filesystem::remove_all(dir);
}

TEST_CASE("fusion concatenates in method order") {
  auto map = [](const std::string& m, int c, float v) { return FeatureMap{Tensor(1, c, 2, 2, v), m, {4, 5}}; };
  const auto fused = fuse_features({map("moco_v2", 3, 2.0f), map("simclr", 1, 0.0f), map("moco_v1", 2, 1.0f)});
  REQUIRE(fused.channels() == 6);
  CHECK(fused.values.at(0, 0, 0, 0) == 0.0f);
  CHECK(fused.values.at(0, 1, 1, 1) == 1.0f);
  CHECK(fused.values.at(0, 5, 0, 1) == 2.0f);
  const auto big = fuse_features({map("simclr", 3072, 0), map("moco_v1", 3072, 0), map("moco_v2", 3072, 0)});
  CHECK(big.channels() == 9216);
  CHECK_THROWS_AS(fuse_features({FeatureMap{Tensor(1, 2, 2, 2), "simclr", {}}, FeatureMap{Tensor(1, 2, 3, 3), "moco_v1", {}}}),
                  ShapeError);
}
