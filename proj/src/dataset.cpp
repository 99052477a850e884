#include "uslseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <random>

#include "uslseg/errors.hpp"

namespace uslseg {

namespace fs = std::filesystem;

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }
std::string to_string(Layout l) { return l == Layout::isic ? "isic" : "ph2"; }
std::string to_string(ContrastiveMethod m) {
  switch (m) {
    case ContrastiveMethod::simclr: return "simclr";
    case ContrastiveMethod::moco_v1: return "moco_v1";
    case ContrastiveMethod::moco_v2: return "moco_v2";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw ConfigError("split", "expected train|test, got '" + s + "'");
}

Layout parse_layout(const std::string& s) {
  if (s == "isic") return Layout::isic;
  if (s == "ph2") return Layout::ph2;
  throw ConfigError("layout", "expected isic|ph2, got '" + s + "'");
}

ContrastiveMethod parse_method(const std::string& s) {
  if (s == "simclr") return ContrastiveMethod::simclr;
  if (s == "moco_v1") return ContrastiveMethod::moco_v1;
  if (s == "moco_v2") return ContrastiveMethod::moco_v2;
  throw ConfigError("method", "expected simclr|moco_v1|moco_v2, got '" + s + "'");
}

namespace {

bool is_image_file(const fs::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp";
}

std::vector<fs::path> image_files(const fs::path& dir) {
  std::vector<fs::path> files;
  if (!fs::is_directory(dir)) return files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

std::optional<fs::path> find_with_stem(const fs::path& dir, const std::vector<std::string>& stems) {
  if (!fs::is_directory(dir)) return std::nullopt;
  for (const auto& stem : stems)
    for (const char* ext : {".png", ".bmp", ".jpg", ".jpeg"}) {
      fs::path p = dir / (stem + ext);
      if (fs::is_regular_file(p)) return p;
    }
  return std::nullopt;
}

struct Entry {
  std::string id;
  fs::path image;
  std::optional<fs::path> mask;
};

std::vector<Entry> scan(const fs::path& root, Layout layout) {
  std::vector<Entry> entries;
  if (layout == Layout::isic) {
    const fs::path images = fs::is_directory(root / "images") ? root / "images" : root;
    const fs::path masks = root / "masks";
    for (const auto& f : image_files(images)) {
      const std::string stem = f.stem().string();
      entries.push_back({stem, f, find_with_stem(masks, {stem + "_segmentation", stem})});
    }
  } else {
    std::vector<fs::path> dirs;
    for (const auto& e : fs::directory_iterator(root))
      if (e.is_directory()) dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
      const std::string id = d.filename().string();
      auto img = find_with_stem(d / (id + "_Dermoscopic_Image"), {id});
      if (!img) continue;
      entries.push_back({id, *img, find_with_stem(d / (id + "_lesion"), {id + "_lesion"})});
    }
  }
  return entries;
}

ImageSample load_entry(const Entry& e, Split split) {
  ImageSample s;
  s.id = e.id;
  s.split = split;
  s.pixels = resize_bilinear(read_rgb(e.image), kImageSize, kImageSize);
  quantize_8bit(s.pixels);
  if (e.mask) {
    Mask m = read_mask(*e.mask);
    s.gt_mask = resize_nearest(m, kImageSize, kImageSize);
  }
  return s;
}

}  // namespace

std::vector<ImageSample> load_dataset(const fs::path& root, Layout layout, Split split, const LoadOptions& options) {
  if (!fs::is_directory(root)) throw EmptyDataset("dataset root '" + root.string() + "' is not a directory");
  std::vector<ImageSample> out;
  for (const auto& e : scan(root, layout)) {
    try {
      out.push_back(load_entry(e, split));
    } catch (const DecodeError& err) {
      if (!options.skip_bad) throw DecodeError(e.id, err.what());
      std::cerr << "warning: skipping " << e.id << ": " << err.what() << "\n";
    }
  }
  if (out.empty()) throw EmptyDataset("no images found under '" + root.string() + "'");
  return out;
}

fs::path save_sample_cache(const std::vector<ImageSample>& samples, const fs::path& dir) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& s : samples) {
    const fs::path img = fs::path("images") / (s.id + ".png");
    write_rgb_png(dir / img, s.pixels);
    nlohmann::json rec{{"id", s.id}, {"path", img.string()}, {"split", to_string(s.split)}, {"has_mask", s.gt_mask.has_value()}};
    if (s.gt_mask) {
      const fs::path mask = fs::path("masks") / (s.id + ".png");
      write_mask_png(dir / mask, *s.gt_mask);
      rec["mask_path"] = mask.string();
    }
    records.push_back(std::move(rec));
  }
  const fs::path manifest = dir / "manifest.json";
  std::ofstream(manifest) << nlohmann::json{{"samples", records}}.dump(2) << "\n";
  return manifest;
}

// ------------------------------------------------------------------ augmentation

AugmentationSpec AugmentationSpec::canonical(ContrastiveMethod method, std::uint64_t seed) {
  AugmentationSpec spec;
  spec.method = method;
  spec.seed = seed;
  spec.ops.emplace_back(RandomResizedCrop{});
  if (method == ContrastiveMethod::moco_v1) {
    spec.ops.emplace_back(Grayscale{});
    spec.ops.emplace_back(ColorJitter{1.0, 0.4, 0.4, 0.4, 0.1});
  } else {
    spec.ops.emplace_back(ColorJitter{});
    spec.ops.emplace_back(Grayscale{});
    spec.ops.emplace_back(GaussianBlur{});
  }
  spec.ops.emplace_back(HorizontalFlip{});
  return spec;
}

bool AugmentationSpec::has_blur() const {
  return std::any_of(ops.begin(), ops.end(), [](const AugOp& op) { return std::holds_alternative<GaussianBlur>(op); });
}

namespace {

using AugRng = std::mt19937_64;

double uniform(AugRng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
bool coin(AugRng& rng, double p) { return uniform(rng, 0.0, 1.0) < p; }

float sample_bilinear(const float* plane, int h, int w, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const auto fy = static_cast<float>(y - y0), fx = static_cast<float>(x - x0);
  const float top = plane[y0 * w + x0] + (plane[y0 * w + x1] - plane[y0 * w + x0]) * fx;
  const float bot = plane[y1 * w + x0] + (plane[y1 * w + x1] - plane[y1 * w + x0]) * fx;
  return top + (bot - top) * fy;
}

void apply(const RandomResizedCrop& op, Tensor& img, AugRng& rng) {
  const int H = img.h(), W = img.w();
  const double area = static_cast<double>(H) * W;
  int ch = H, cw = W, top = 0, left = 0;
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double target = area * uniform(rng, op.scale_min, op.scale_max);
    const double ratio = std::exp(uniform(rng, std::log(op.ratio_min), std::log(op.ratio_max)));
    const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (w > 0 && h > 0 && w <= W && h <= H) {
      top = std::uniform_int_distribution<int>(0, H - h)(rng);
      left = std::uniform_int_distribution<int>(0, W - w)(rng);
      ch = h;
      cw = w;
      found = true;
    }
  }
  Tensor out(1, 3, H, W);
  for (int c = 0; c < 3; ++c) {
    const float* src = img.channel(0, c);
    for (int y = 0; y < H; ++y) {
      const double sy = top + (y + 0.5) * ch / H - 0.5;
      for (int x = 0; x < W; ++x) {
        const double sx = left + (x + 0.5) * cw / W - 0.5;
        out.at(0, c, y, x) = sample_bilinear(src, H, W, std::max(sy, static_cast<double>(top)), std::max(sx, static_cast<double>(left)));
      }
    }
  }
  img = std::move(out);
}

void apply(const HorizontalFlip& op, Tensor& img, AugRng& rng) {
  if (!coin(rng, op.p)) return;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.h(); ++y) std::reverse(&img.at(0, c, y, 0), &img.at(0, c, y, 0) + img.w());
}

float luma(float r, float g, float b) { return 0.299f * r + 0.587f * g + 0.114f * b; }

void rgb_to_hsv(float r, float g, float b, float& h, float& s, float& v) {
  const float mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const float d = mx - mn;
  v = mx;
  s = mx > 0 ? d / mx : 0.0f;
  if (d <= 0) {
    h = 0;
  } else if (mx == r) {
    h = std::fmod((g - b) / d, 6.0f) / 6.0f;
  } else if (mx == g) {
    h = ((b - r) / d + 2.0f) / 6.0f;
  } else {
    h = ((r - g) / d + 4.0f) / 6.0f;
  }
  if (h < 0) h += 1.0f;
}

void hsv_to_rgb(float h, float s, float v, float& r, float& g, float& b) {
  const float hh = h * 6.0f;
  const int i = static_cast<int>(std::floor(hh)) % 6;
  const float f = hh - std::floor(hh);
  const float p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

void apply(const ColorJitter& op, Tensor& img, AugRng& rng) {
  if (!coin(rng, op.p)) return;
  const auto bright = static_cast<float>(uniform(rng, 1 - op.brightness, 1 + op.brightness));
  const auto contrast = static_cast<float>(uniform(rng, 1 - op.contrast, 1 + op.contrast));
  const auto sat = static_cast<float>(uniform(rng, 1 - op.saturation, 1 + op.saturation));
  const auto hue = static_cast<float>(uniform(rng, -op.hue, op.hue));
  const std::size_t n = img.plane();
  float* r = img.channel(0, 0);
  float* g = img.channel(0, 1);
  float* b = img.channel(0, 2);
  for (auto& v : img.data) v = std::clamp(v * bright, 0.0f, 1.0f);
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += luma(r[i], g[i], b[i]);
  const auto m = static_cast<float>(mean / n);
  for (auto& v : img.data) v = std::clamp((v - m) * contrast + m, 0.0f, 1.0f);
  for (std::size_t i = 0; i < n; ++i) {
    const float y = luma(r[i], g[i], b[i]);
    r[i] = std::clamp((r[i] - y) * sat + y, 0.0f, 1.0f);
    g[i] = std::clamp((g[i] - y) * sat + y, 0.0f, 1.0f);
    b[i] = std::clamp((b[i] - y) * sat + y, 0.0f, 1.0f);
  }
  if (hue != 0.0f) {
    for (std::size_t i = 0; i < n; ++i) {
      float h, s, v;
      rgb_to_hsv(r[i], g[i], b[i], h, s, v);
      h = std::fmod(h + hue + 1.0f, 1.0f);
      hsv_to_rgb(h, s, v, r[i], g[i], b[i]);
    }
  }
}

void apply(const Grayscale& op, Tensor& img, AugRng& rng) {
  if (!coin(rng, op.p)) return;
  float* r = img.channel(0, 0);
  float* g = img.channel(0, 1);
  float* b = img.channel(0, 2);
  for (std::size_t i = 0; i < img.plane(); ++i) r[i] = g[i] = b[i] = luma(r[i], g[i], b[i]);
}

void apply(const GaussianBlur& op, Tensor& img, AugRng& rng) {
  if (!coin(rng, op.p)) return;
  const double sigma = uniform(rng, op.sigma_min, op.sigma_max);
  const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<float> k(2 * radius + 1);
  double sum = 0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma)));
  for (auto& v : k) v = static_cast<float>(v / sum);
  const int H = img.h(), W = img.w();
  std::vector<float> tmp(img.plane());
  for (int c = 0; c < 3; ++c) {
    float* p = img.channel(0, c);
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * p[y * W + std::clamp(x + i, 0, W - 1)];
        tmp[y * W + x] = acc;
      }
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        float acc = 0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[std::clamp(y + i, 0, H - 1) * W + x];
        p[y * W + x] = std::clamp(acc, 0.0f, 1.0f);
      }
  }
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

Tensor make_view(const Tensor& src, const AugmentationSpec& spec, AugRng& rng) {
  Tensor img = src;
  for (const auto& op : spec.ops) std::visit([&](const auto& o) { apply(o, img, rng); }, op);
  return img;
}

}  // namespace

std::pair<Tensor, Tensor> augment_two_views(const ImageSample& sample, const AugmentationSpec& spec) {
  if (sample.pixels.n() != 1 || sample.pixels.c() != 3) throw ShapeError("augment: expected 1x3xHxW image");
  const std::uint64_t h = fnv1a(sample.id);
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(h >> 32)};
  AugRng rng(seq);
  Tensor q = make_view(sample.pixels, spec, rng);
  Tensor k = make_view(sample.pixels, spec, rng);
  return {std::move(q), std::move(k)};
}

}  // namespace uslseg
