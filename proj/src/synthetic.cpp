#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include "uslseg/dataset.hpp"

namespace uslseg {

namespace {

using SynthRng = std::mt19937_64;

double uni(SynthRng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// Smooth random field in roughly [-1, 1] built from a few oriented sinusoids.
struct SmoothField {
  std::array<double, 4> fx{}, fy{}, phase{}, amp{};

  SmoothField(SynthRng& rng, double max_freq) {
    for (int i = 0; i < 4; ++i) {
      const double angle = uni(rng, 0, 2 * std::numbers::pi);
      const double f = uni(rng, 0.3, 1.0) * max_freq;
      fx[i] = f * std::cos(angle);
      fy[i] = f * std::sin(angle);
      phase[i] = uni(rng, 0, 2 * std::numbers::pi);
      amp[i] = uni(rng, 0.5, 1.0);
    }
  }

  double operator()(double y, double x) const {
    double s = 0, norm = 0;
    for (int i = 0; i < 4; ++i) {
      s += amp[i] * std::sin(fx[i] * x + fy[i] * y + phase[i]);
      norm += amp[i];
    }
    return s / norm;
  }
};

ImageSample make_one(int index, const SyntheticOptions& opt) {
  SynthRng rng(opt.seed * 1000003ull + static_cast<std::uint64_t>(index) * 7919ull);
  std::normal_distribution<double> noise(0.0, 1.0);
  const int S = kImageSize;
  const double c0 = S / 2.0;

  const std::array<double, 3> skin{uni(rng, 0.80, 0.92), uni(rng, 0.60, 0.72), uni(rng, 0.50, 0.62)};
  const std::array<double, 3> lesion{uni(rng, 0.32, 0.50), uni(rng, 0.20, 0.32), uni(rng, 0.14, 0.24)};
  const SmoothField shade(rng, 0.03);
  const SmoothField texture(rng, 0.25);

  const double cy = c0 + uni(rng, -22, 22), cx = c0 + uni(rng, -22, 22);
  const double a = uni(rng, 32, 60), b = uni(rng, 32, 60);
  const double theta = uni(rng, 0, std::numbers::pi);
  const double ct = std::cos(theta), st = std::sin(theta);
  const SmoothField wobble(rng, 3.0);

  const bool corners = uni(rng, 0, 1) < opt.dark_corner_probability;
  const double corner_r0 = uni(rng, 0.80, 0.88), corner_strength = uni(rng, 0.70, 0.90);
  const double half_diag = std::sqrt(2.0) * c0;

  ImageSample s;
  char name[32];
  std::snprintf(name, sizeof(name), "synth_%03d", index);
  s.id = name;
  s.pixels = Tensor(1, 3, S, S);
  Mask gt(S, S);
  for (int y = 0; y < S; ++y) {
    for (int x = 0; x < S; ++x) {
      const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
      const double u = (dx * ct + dy * st) / a, v = (-dx * st + dy * ct) / b;
      const double ang = std::atan2(v, u);
      const double rho = std::sqrt(u * u + v * v) * (1.0 + 0.06 * wobble(std::cos(ang) * 10, std::sin(ang) * 10));
      const bool inside = rho <= 1.0;
      gt.at(y, x) = inside ? 1 : 0;
      const double edge = std::clamp((1.0 - rho) * std::min(a, b) / 3.0 + 0.5, 0.0, 1.0);
      const double sh = 1.0 + 0.05 * shade(y, x);
      const double tex = 1.0 + 0.12 * texture(y, x);
      for (int c = 0; c < 3; ++c) {
        double val = skin[c] * sh * (1 - edge) + lesion[c] * tex * edge;
        val += 0.015 * noise(rng);
        s.pixels.at(0, c, y, x) = static_cast<float>(val);
      }
      if (corners) {
        const double r = std::sqrt((y + 0.5 - c0) * (y + 0.5 - c0) + (x + 0.5 - c0) * (x + 0.5 - c0)) / half_diag;
        const double t = std::clamp((r - corner_r0) / 0.08, 0.0, 1.0);
        const double dark = corner_strength * t * t * (3 - 2 * t);
        for (int c = 0; c < 3; ++c) s.pixels.at(0, c, y, x) *= static_cast<float>(1.0 - dark);
      }
    }
  }

  if (uni(rng, 0, 1) < opt.hair_probability) {
    const int hairs = std::uniform_int_distribution<int>(1, 4)(rng);
    for (int hcount = 0; hcount < hairs; ++hcount) {
      const double y0 = uni(rng, 0, S), x0 = uni(rng, 0, S);
      const double y2 = uni(rng, 0, S), x2 = uni(rng, 0, S);
      const double y1 = uni(rng, 0, S), x1 = uni(rng, 0, S);
      const double thick = uni(rng, 0.6, 1.4);
      const double shade_hair = uni(rng, 0.08, 0.2);
      for (int step = 0; step <= 600; ++step) {
        const double t = step / 600.0;
        const double py = (1 - t) * (1 - t) * y0 + 2 * (1 - t) * t * y1 + t * t * y2;
        const double px = (1 - t) * (1 - t) * x0 + 2 * (1 - t) * t * x1 + t * t * x2;
        for (int yy = static_cast<int>(py - 2); yy <= static_cast<int>(py + 2); ++yy)
          for (int xx = static_cast<int>(px - 2); xx <= static_cast<int>(px + 2); ++xx) {
            if (yy < 0 || yy >= S || xx < 0 || xx >= S) continue;
            const double d = std::hypot(yy + 0.5 - py, xx + 0.5 - px);
            if (d > thick) continue;
            for (int c = 0; c < 3; ++c) {
              float& p = s.pixels.at(0, c, yy, xx);
              p = static_cast<float>(std::min<double>(p, shade_hair));
            }
          }
      }
    }
  }

  quantize_8bit(s.pixels);
  s.gt_mask = std::move(gt);
  return s;
}

}  // namespace

std::vector<ImageSample> make_synthetic_suite(const SyntheticOptions& options) {
  std::vector<ImageSample> out;
  out.reserve(options.count);
  for (int i = 0; i < options.count; ++i) out.push_back(make_one(i, options));
  return out;
}

void write_synthetic_suite(const std::filesystem::path& dir, const SyntheticOptions& options) {
  for (const auto& s : make_synthetic_suite(options)) {
    write_rgb_png(dir / "images" / (s.id + ".png"), s.pixels);
    write_mask_png(dir / "masks" / (s.id + ".png"), *s.gt_mask);
  }
}

}  // namespace uslseg
