#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "uslseg/errors.hpp"
#include "uslseg/uncertainty.hpp"

using namespace uslseg;
using namespace uslseg::um;

namespace {

oracle::PixelSet as_set(const Region& r) {
  oracle::PixelSet s;
  for (const auto& p : r.pixels) s.insert({p.row, p.col});
  return s;
}

std::vector<int> as_grid(const Mask& m) { return {m.data.begin(), m.data.end()}; }

void fill_rect(FloatMap& s, int r0, int c0, int h, int w, float v) {
  for (int r = r0; r < r0 + h; ++r)
    for (int c = c0; c < c0 + w; ++c) s.at(r, c) = v;
}

}  // namespace

TEST_CASE("tri-threshold buckets and boundary values") {
  FloatMap s(1, 5);
  s.data = {0.2f, 0.5f, 0.7f, 0.35f, 0.65f};
  const auto t = tri_threshold(s);
  CHECK(t.background.data == std::vector<std::uint8_t>{1, 0, 0, 0, 0});
  CHECK(t.uncertain.data == std::vector<std::uint8_t>{0, 1, 0, 1, 1});
  CHECK(t.high.data == std::vector<std::uint8_t>{0, 0, 1, 0, 0});
  const auto zero = tri_threshold(FloatMap(224, 224, 0.0f));
  CHECK(std::all_of(zero.background.data.begin(), zero.background.data.end(), [](auto v) { return v == 1; }));
}

TEST_CASE("tri-threshold partitions every pixel") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0, 1);
  FloatMap s(224, 224);
  for (auto& v : s.data) v = u(rng);
  const auto t = tri_threshold(s);
  for (std::size_t i = 0; i < s.size(); ++i) CHECK(t.background.data[i] + t.uncertain.data[i] + t.high.data[i] == 1);
}

TEST_CASE("invalid thresholds are rejected") {
  CHECK_THROWS_AS(validate_thresholds(0.7, 0.3), InvalidThresholds);
  CHECK_THROWS_AS(validate_thresholds(0.5, 0.5), InvalidThresholds);
  CHECK_THROWS_AS(validate_thresholds(-0.1, 0.5), InvalidThresholds);
  CHECK_THROWS_AS(tri_threshold(FloatMap(2, 2), 0.4, 1.2), InvalidThresholds);
  CHECK_NOTHROW(validate_thresholds(0.0, 1.0));
}

TEST_CASE("connected components on small examples") {
  CHECK(connected_components(Mask(224, 224)).empty());
  Mask diag(224, 224);
  diag.at(10, 10) = 1;
  diag.at(11, 11) = 1;
  CHECK(connected_components(diag, Connectivity::four).size() == 2);
  CHECK(connected_components(diag, Connectivity::eight).size() == 1);

  Mask ell(224, 224);
  for (int r = 50; r < 80; ++r)
    for (int c = 50; c < 60; ++c) ell.at(r, c) = 1;  // 300 px vertical bar
  for (int r = 70; r < 80; ++r)
    for (int c = 60; c < 90; ++c) ell.at(r, c) = 1;  // 300 px foot
  const auto regions = connected_components(ell);
  REQUIRE(regions.size() == 1);
  CHECK(regions[0].size() == 600);
  CHECK(regions[0].first() == Point{50, 50});
}

TEST_CASE("connected components agree with the flood-fill oracle") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> density(0.05, 0.5);
  for (int trial = 0; trial < 60; ++trial) {
    std::bernoulli_distribution b(density(rng));
    Mask m(40, 48);
    for (auto& v : m.data) v = b(rng);
    for (auto conn : {Connectivity::four, Connectivity::eight}) {
      const auto got = connected_components(m, conn);
      const auto want = oracle::components(as_grid(m), m.rows, m.cols, static_cast<int>(conn));
      REQUIRE(got.size() == want.size());
      for (std::size_t k = 0; k < got.size(); ++k) {
        CHECK(as_set(got[k]) == want[k]);
        CHECK(std::is_sorted(got[k].pixels.begin(), got[k].pixels.end()));
      }
    }
  }
}

TEST_CASE("centrality weight examples") {
  CHECK(centrality_weight(Region{{{112, 112}}, 0}, 224, 224) == 0.0);
  CHECK(centrality_weight(Region{{{0, 0}}, 0}, 224, 224) == doctest::Approx(112 * std::sqrt(2.0)).epsilon(1e-12));
  CHECK(std::abs(centrality_weight(Region{{{0, 0}}, 0}, 224, 224) - 158.3919) < 1e-4);
  CHECK(centrality_weight(Region{{{0, 0}, {112, 112}}, 0}, 224, 224) == doctest::Approx(112 * std::sqrt(2.0)));
  CHECK(scaled_alpha(500, 64, 64) == doctest::Approx(500.0 * 4096 / 50176));
}

TEST_CASE("pseudo label worked examples") {
  FloatMap blob(224, 224, 0.0f);
  fill_rect(blob, 102, 102, 20, 20, 0.9f);  // 400 px
  const auto small = make_pseudo_label(blob);
  CHECK(small.excluded);
  CHECK(small.values.at(112, 112) == 0.0f);

  CHECK(make_pseudo_label(FloatMap(224, 224, 0.0f)).excluded);

  FloatMap s(224, 224, 0.0f);
  for (int r = 0; r < 224; ++r)
    for (int c = 0; c < 224; ++c) {
      const double d = std::hypot(r - 112.0, c - 112.0);
      if (d > 60 && d < 64) s.at(r, c) = 0.5f;
    }
  fill_rect(s, 92, 92, 40, 20, 0.9f);  // central 800 px
  fill_rect(s, 0, 0, 20, 30, 0.9f);    // corner 600 px
  const auto label = make_pseudo_label(s);
  CHECK_FALSE(label.excluded);
  CHECK(label.values.at(100, 100) == 1.0f);
  CHECK(label.values.at(5, 5) == 0.5f);
  CHECK(label.values.at(112, 112 + 62) == 0.5f);
  CHECK(label.values.at(200, 30) == 0.0f);
  const auto ref = oracle::pseudo_label(s.data, 224, 224);
  CHECK(label.values.data == ref.values);
}

TEST_CASE("a lone corner region is too far from the centre") {
  FloatMap s(224, 224, 0.0f);
  fill_rect(s, 0, 0, 30, 30, 0.9f);
  const auto label = make_pseudo_label(s);
  CHECK(label.excluded);
  CHECK(label.values.at(3, 3) == 0.5f);
  UmConfig lax;
  lax.far_fraction = 1.0;
  CHECK(make_pseudo_label(s, lax).values.at(3, 3) == 1.0f);
}

TEST_CASE("pseudo labels agree with the brute-force oracle") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 150; ++trial) {
    const FloatMap s = oracle::random_saliency(rng, 64, 64);
    for (int conn : {4, 8}) {
      UmConfig cfg;
      cfg.connectivity = static_cast<Connectivity>(conn);
      const auto got = make_pseudo_label(s, cfg);
      const auto want = oracle::pseudo_label(s.data, 64, 64, 0.35, 0.65, 500, 0.40, conn);
      CHECK(got.excluded == want.excluded);
      CHECK(got.values.data == want.values);
    }
  }
}

TEST_CASE("pseudo label values and foreground connectivity") {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const auto label = make_pseudo_label(oracle::random_saliency(rng, 96, 96));
    Mask fg(96, 96);
    for (std::size_t i = 0; i < label.values.size(); ++i) {
      const float v = label.values.data[i];
      CHECK((v == 0.0f || v == 0.5f || v == 1.0f));
      fg.data[i] = v == 1.0f;
    }
    CHECK(connected_components(fg).size() <= 1);
    if (label.excluded) CHECK(connected_components(fg).empty());
  }
}

TEST_CASE("foreground selection ignores survivor order") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const FloatMap s = oracle::random_saliency(rng, 224, 224);
    auto regions = connected_components(tri_threshold(s).high);
    if (regions.size() < 2) continue;
    const int picked = select_foreground(regions, {});
    REQUIRE(picked >= 0);
    const auto chosen = regions[picked].pixels;
    for (int k = 0; k < 5; ++k) {
      std::shuffle(regions.begin(), regions.end(), rng);
      CHECK(regions[select_foreground(regions, {})].pixels == chosen);
    }
  }
  CHECK(select_foreground({}, {}) == -1);
}

TEST_CASE("equal weights prefer the larger region") {
  Region small{{{112, 100}}, 12.0};
  Region large{{{112, 124}, {100, 112}}, 24.0};
  CHECK(select_foreground({small, large}, {}) == 1);
  UmConfig sum;
  sum.weight_mode = WeightMode::sum;
  CHECK(select_foreground({small, large}, sum) == 0);
  UmConfig mx;
  mx.comparator = Comparator::max;
  Region far{{{0, 0}}, 158.39};
  CHECK(select_foreground({small, far}, mx) == 1);
}

TEST_CASE("shrinking every high region below alpha always excludes") {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> pos(0, 200), side(1, 21);
  for (int trial = 0; trial < 40; ++trial) {
    FloatMap s(224, 224, 0.0f);
    for (int k = 0; k < 4; ++k) {
      const int h = side(rng), w = std::min(side(rng), 499 / h);
      fill_rect(s, pos(rng), pos(rng), h, w, 0.9f);
    }
    // separate rectangles may touch; keep only maps where every region is small
    const auto regions = connected_components(tri_threshold(s).high);
    if (std::any_of(regions.begin(), regions.end(), [](const Region& r) { return r.size() >= 500; })) continue;
    CHECK(make_pseudo_label(s).excluded);
  }
}

TEST_CASE("tri-labels round-trip through PNG") {
  const auto dir = oracle::temp_dir("trilabel");
  std::mt19937_64 rng(7);
  TriLabel label;
  do {
    label = make_pseudo_label(oracle::random_saliency(rng, 224, 224));
  } while (label.excluded);
  write_trilabel_png(dir / "l.png", label);
  const auto back = read_trilabel_png(dir / "l.png");
  CHECK(back.values == label.values);
  const auto gray = read_gray(dir / "l.png");
  for (auto v : gray.data) CHECK((v == 0 || v == 128 || v == 255));
  std::filesystem::remove_all(dir);
}
