#include "uslseg/ccam.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>

#include "uslseg/errors.hpp"

namespace uslseg::ccam {

namespace fs = std::filesystem;

ActivationMap complement(const ActivationMap& m) {
  ActivationMap out = m;
  for (auto& v : out.values.data) v = 1.0f - v;
  return out;
}

Cam to_cam(const ActivationMap& m) {
  Cam c{resize_bilinear(m.values, kImageSize, kImageSize)};
  for (auto& v : c.values.data) v = std::clamp(v * 255.0f, 0.0f, 255.0f);
  return c;
}

double interpolate_at(const FloatMap& m, double y, double x, int out_rows, int out_cols) {
  auto coord = [](double u, int in, int out) {
    const double s = std::max(0.0, u * in / out - 0.5);
    const int lo = std::min(static_cast<int>(std::floor(s)), in - 1);
    return std::tuple{lo, std::min(lo + 1, in - 1), s - lo};
  };
  const auto [y0, y1, fy] = coord(y, m.rows, out_rows);
  const auto [x0, x1, fx] = coord(x, m.cols, out_cols);
  const double top = m.at(y0, x0) * (1 - fx) + m.at(y0, x1) * fx;
  const double bot = m.at(y1, x0) * (1 - fx) + m.at(y1, x1) * fx;
  return top * (1 - fy) + bot * fy;
}

ClassVectors disentangle(const Tensor& features, const ActivationMap& m) {
  if (features.n() != 1) throw ShapeError("disentangle expects a single feature map, got " + features.shape_str());
  const std::size_t n = features.plane();
  if (m.values.size() != n)
    throw ShapeError("disentangle: map has " + std::to_string(m.values.size()) + " positions, features have " +
                     std::to_string(n));
  ClassVectors cv{std::vector<float>(features.c()), std::vector<float>(features.c())};
  for (int d = 0; d < features.c(); ++d) {
    const float* f = features.channel(0, d);
    double bg = 0, fg = 0;
    for (std::size_t i = 0; i < n; ++i) {
      bg += static_cast<double>(f[i]) * m.values.data[i];
      fg += static_cast<double>(f[i]) * (1.0 - m.values.data[i]);
    }
    cv.bg[d] = static_cast<float>(bg);
    cv.fg[d] = static_cast<float>(fg);
  }
  return cv;
}

Polarity calibrate_polarity(const std::vector<ActivationMap>& background_maps) {
  double map_area = 0, comp_area = 0;
  for (const auto& m : background_maps) {
    std::size_t above = 0, below = 0;
    for (float v : m.values.data) {
      above += v > 0.5f;
      below += (1.0f - v) > 0.5f;
    }
    map_area += static_cast<double>(above) / m.values.size();
    comp_area += static_cast<double>(below) / m.values.size();
  }
  return map_area < comp_area ? Polarity::map_is_foreground : Polarity::complement_is_foreground;
}

ActivationMap select_foreground(const ActivationMap& background_map, Polarity polarity) {
  return polarity == Polarity::map_is_foreground ? background_map : complement(background_map);
}

// ---------------------------------------------------------------- objective

namespace {

constexpr double kLogEps = 1e-4;

double norm(const std::vector<float>& a) {
  double s = 0;
  for (float v : a) s += static_cast<double>(v) * v;
  return std::max(std::sqrt(s), 1e-8);
}

// Adds coef * d cos(a,b) / da to ga and the symmetric term to gb.
void cos_grad(const std::vector<float>& a, const std::vector<float>& b, double cosv, double na, double nb, double coef,
              std::vector<float>& ga, std::vector<float>& gb) {
  for (std::size_t k = 0; k < a.size(); ++k) {
    ga[k] += static_cast<float>(coef * (b[k] / (na * nb) - cosv * a[k] / (na * na)));
    gb[k] += static_cast<float>(coef * (a[k] / (na * nb) - cosv * b[k] / (nb * nb)));
  }
}

double cosine(const std::vector<float>& a, const std::vector<float>& b, double na, double nb) {
  double s = 0;
  for (std::size_t k = 0; k < a.size(); ++k) s += static_cast<double>(a[k]) * b[k];
  return s / (na * nb);
}

}  // namespace

CcamLossResult disentangle_loss(const std::vector<ClassVectors>& batch, const CcamLossWeights& weights) {
  const std::size_t b = batch.size();
  CcamLossResult r;
  if (b == 0) return r;
  const std::size_t d = batch.front().fg.size();
  r.grad_fg.assign(b, std::vector<float>(d, 0.0f));
  r.grad_bg.assign(b, std::vector<float>(d, 0.0f));
  std::vector<double> nf(b), nbg(b);
  for (std::size_t i = 0; i < b; ++i) {
    nf[i] = norm(batch[i].fg);
    nbg[i] = norm(batch[i].bg);
  }
  if (b > 1) {
    const double pairs = static_cast<double>(b * (b - 1));
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < b; ++j) {
        if (i == j) continue;
        const double cf = cosine(batch[i].fg, batch[j].fg, nf[i], nf[j]);
        r.loss += weights.fg_pull * -std::log(std::max(cf, 0.0) + kLogEps) / pairs;
        if (cf > 0) cos_grad(batch[i].fg, batch[j].fg, cf, nf[i], nf[j], -weights.fg_pull / ((cf + kLogEps) * pairs),
                             r.grad_fg[i], r.grad_fg[j]);
        const double cb = cosine(batch[i].bg, batch[j].bg, nbg[i], nbg[j]);
        r.loss += weights.bg_pull * -std::log(std::max(cb, 0.0) + kLogEps) / pairs;
        if (cb > 0) cos_grad(batch[i].bg, batch[j].bg, cb, nbg[i], nbg[j], -weights.bg_pull / ((cb + kLogEps) * pairs),
                             r.grad_bg[i], r.grad_bg[j]);
      }
  }
  const double cross = static_cast<double>(b * b);
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < b; ++j) {
      const double c = std::min(cosine(batch[i].fg, batch[j].bg, nf[i], nbg[j]), 1.0);
      r.loss += weights.push * -std::log(1.0 - c + kLogEps) / cross;
      cos_grad(batch[i].fg, batch[j].bg, c, nf[i], nbg[j], weights.push / ((1.0 - c + kLogEps) * cross), r.grad_fg[i],
               r.grad_bg[j]);
    }
  return r;
}

// ---------------------------------------------------------------- head

CcamHead::CcamHead(int in_channels, int proj_channels, std::uint64_t seed)
    : in_channels_(in_channels), mean_(in_channels, 0.0f), inv_std_(in_channels, 1.0f) {
  nn::Rng rng(seed);
  proj_conv_ = nn::Conv2d("ccam.proj", in_channels, proj_channels, 1, 1, 0, true, rng);
  mask_conv_ = nn::Conv2d("ccam.mask", proj_channels, 1, 1, 1, 0, true, rng);
  // Keep initial logits moderate so M starts away from saturation.
  for (auto& w : mask_conv_.weight().value) w *= 0.1f;
}

void CcamHead::set_input_stats(std::vector<float> mean, std::vector<float> inv_std) {
  if (mean.size() != static_cast<std::size_t>(in_channels_) || inv_std.size() != mean.size())
    throw ShapeError("ccam head: input statistics have the wrong width");
  mean_ = std::move(mean);
  inv_std_ = std::move(inv_std);
}

Tensor CcamHead::standardize(const Tensor& f) const {
  if (f.c() != in_channels_)
    throw ShapeError("ccam head expects " + std::to_string(in_channels_) + " channels, got " + f.shape_str());
  Tensor out = f;
  for (int i = 0; i < f.n(); ++i)
    for (int c = 0; c < f.c(); ++c) {
      float* p = out.channel(i, c);
      for (std::size_t j = 0; j < f.plane(); ++j) p[j] = (p[j] - mean_[c]) * inv_std_[c];
    }
  return out;
}

Tensor CcamHead::forward(const Tensor& features) {
  projected_ = relu_.forward(proj_conv_.forward(standardize(features)));
  map_ = nn::sigmoid(mask_conv_.forward(projected_));
  return map_;
}

void CcamHead::backward(const Tensor& grad_projected, const Tensor& grad_map) {
  Tensor dlogit = grad_map;
  for (std::size_t i = 0; i < dlogit.size(); ++i) dlogit.data[i] *= map_.data[i] * (1.0f - map_.data[i]);
  Tensor dp = mask_conv_.backward(dlogit);
  nn::add_inplace(dp, grad_projected);
  proj_conv_.backward(relu_.backward(dp), false);
}

ActivationMap CcamHead::background_head(const Tensor& features) {
  if (features.n() != 1) throw ShapeError("background_head expects one feature map");
  return {tensor_plane(forward(features))};
}

void CcamHead::collect_params(std::vector<nn::Param*>& out) {
  proj_conv_.collect_params(out);
  mask_conv_.collect_params(out);
}

void CcamHead::collect_buffers(std::vector<nn::Buffer>& out) {
  out.push_back({"ccam.input_mean", &mean_});
  out.push_back({"ccam.input_inv_std", &inv_std_});
}

// ---------------------------------------------------------------- training

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9e3779b97f4a7c15ull + b + 0x632be59bd9b4e019ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

CcamResult train_ccam(const std::vector<Tensor>& features, const CcamOptions& options, const fs::path& out_dir) {
  if (features.empty()) throw EmptyDataset("ccam training needs at least one feature map");
  const int d = features.front().c();
  const std::size_t plane = features.front().plane();
  for (const auto& f : features)
    if (f.n() != 1 || f.c() != d || f.plane() != plane) throw ShapeError("ccam: feature maps differ in shape");

  CcamHead head(d, options.proj_channels, options.seed);
  {
    std::vector<double> sum(d, 0.0), sq(d, 0.0);
    for (const auto& f : features)
      for (int c = 0; c < d; ++c) {
        const float* p = f.channel(0, c);
        for (std::size_t j = 0; j < plane; ++j) {
          sum[c] += p[j];
          sq[c] += static_cast<double>(p[j]) * p[j];
        }
      }
    const double count = static_cast<double>(features.size() * plane);
    std::vector<float> mean(d), inv(d);
    for (int c = 0; c < d; ++c) {
      const double m = sum[c] / count;
      const double var = std::max(sq[c] / count - m * m, 0.0);
      mean[c] = static_cast<float>(m);
      inv[c] = static_cast<float>(1.0 / std::sqrt(var + 1e-6));
    }
    head.set_input_stats(std::move(mean), std::move(inv));
  }

  nn::Sgd sgd(head.params(), {options.lr, options.sgd_momentum, options.weight_decay});
  const int n = static_cast<int>(features.size());
  const int bsz = std::max(1, options.batch_size);
  const int per_epoch = std::max(1, n / bsz);
  const long total = static_cast<long>(per_epoch) * options.epochs;
  CcamResult result;
  long step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    nn::Rng rng(mix(options.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    for (int s = 0; s < per_epoch; ++s) {
      // the final short batch is folded into the last full one
      const int begin = s * bsz;
      const int end = (s == per_epoch - 1) ? n : begin + bsz;
      std::vector<Tensor> items;
      for (int k = begin; k < end; ++k) items.push_back(features[order[k]]);
      const Tensor x = stack(items);
      const Tensor m = head.forward(x);
      const Tensor& p = head.projected();
      const int b = x.n();
      const int pc = p.c();
      std::vector<ClassVectors> vecs(b);
      for (int i = 0; i < b; ++i) {
        const Tensor pi = take_sample(p, i);
        vecs[i] = disentangle(pi, ActivationMap{tensor_plane(m, i)});
      }
      auto lr = disentangle_loss(vecs, options.weights);
      Tensor dp(b, pc, p.h(), p.w());
      Tensor dm(b, 1, m.h(), m.w());
      const double sep_scale = 4.0 * options.weights.separation / static_cast<double>(m.size());
      double sep = 0.0;
      for (int i = 0; i < b; ++i) {
        const float* mi = m.channel(i, 0);
        float* dmi = dm.channel(i, 0);
        for (int c = 0; c < pc; ++c) {
          const float* pic = p.channel(i, c);
          float* dpic = dp.channel(i, c);
          const float gf = lr.grad_fg[i][c], gb = lr.grad_bg[i][c];
          for (std::size_t j = 0; j < plane; ++j) {
            dpic[j] = gf * (1.0f - mi[j]) + gb * mi[j];
            dmi[j] += pic[j] * (gb - gf);
          }
        }
        for (std::size_t j = 0; j < plane; ++j) {
          sep += sep_scale * mi[j] * (1.0f - mi[j]);
          dmi[j] += static_cast<float>(sep_scale * (1.0 - 2.0 * mi[j]));
        }
      }
      const double loss = lr.loss + sep;
      if (!std::isfinite(loss)) throw NonFiniteLoss("ccam", step);
      sgd.zero_grad();
      head.backward(dp, dm);
      sgd.step(nn::cosine_lr(options.lr, step, total));
      result.loss_trace.push_back(loss);
      ++step;
    }
  }

  std::vector<ActivationMap> maps;
  maps.reserve(features.size());
  for (const auto& f : features) maps.push_back(head.background_head(f));
  result.polarity = calibrate_polarity(maps);
  for (const auto& m : maps) result.cams.push_back(to_cam(select_foreground(m, result.polarity)));

  fs::create_directories(out_dir);
  result.weights = out_dir / "ccam_head.bin";
  result.metadata = out_dir / "ccam_head.json";
  nn::save_weights(head, result.weights);
  nlohmann::json meta{{"in_channels", d},
                      {"proj_channels", options.proj_channels},
                      {"polarity", result.polarity == Polarity::map_is_foreground ? "map" : "complement"},
                      {"epochs", options.epochs},
                      {"batch_size", options.batch_size},
                      {"seed", options.seed},
                      {"loss_weights",
                       {{"fg_pull", options.weights.fg_pull},
                        {"bg_pull", options.weights.bg_pull},
                        {"push", options.weights.push},
                        {"separation", options.weights.separation}}},
                      {"loss_trace", result.loss_trace},
                      {"weights", result.weights.filename().string()}};
  std::ofstream(result.metadata) << meta.dump(2) << "\n";
  return result;
}

std::vector<Cam> apply_ccam(const fs::path& metadata, const std::vector<Tensor>& features) {
  std::ifstream in(metadata);
  if (!in) throw Error("cannot read ccam metadata " + metadata.string());
  const auto j = nlohmann::json::parse(in);
  CcamHead head(j.at("in_channels").get<int>(), j.at("proj_channels").get<int>(), 0);
  nn::load_weights(head, metadata.parent_path() / j.at("weights").get<std::string>());
  const Polarity polarity =
      j.at("polarity").get<std::string>() == "map" ? Polarity::map_is_foreground : Polarity::complement_is_foreground;
  std::vector<Cam> cams;
  cams.reserve(features.size());
  for (const auto& f : features) cams.push_back(to_cam(select_foreground(head.background_head(f), polarity)));
  return cams;
}

void write_cam_png(const fs::path& path, const Cam& cam) {
  Grid<std::uint8_t> g(cam.values.rows, cam.values.cols);
  for (std::size_t i = 0; i < g.size(); ++i)
    g.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(cam.values.data[i], 0.0f, 255.0f)));
  write_gray_png(path, g);
}

Cam read_cam_png(const fs::path& path) {
  const auto g = read_gray(path);
  Cam c{FloatMap(g.rows, g.cols)};
  for (std::size_t i = 0; i < g.size(); ++i) c.values.data[i] = g.data[i];
  return c;
}

FloatMap cam_to_saliency(const Cam& cam) {
  FloatMap s = cam.values;
  for (auto& v : s.data) v = std::clamp(v / 255.0f, 0.0f, 1.0f);
  return s;
}

}  // namespace uslseg::ccam
