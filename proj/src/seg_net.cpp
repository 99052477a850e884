#include "uslseg/seg_net.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>

#include "uslseg/errors.hpp"

namespace uslseg::seg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kProbClamp = 1e-7;
constexpr double kDenGuard = 1e-6;

std::array<int, 4> shape_of(const Tensor& t) { return t.shape; }

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9e3779b97f4a7c15ull + b + 0x2545f4914f6cdd1dull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

// ---------------------------------------------------------------- model

SegModel::SegModel(const SegConfig& config, std::uint64_t seed)
    : config_(config), rng_(seed), encoder_([&] {
        if (config.backbone.last_stage != 4) throw ShapeError("segmentation encoder must end at stage 4");
        return config.backbone;
      }(), rng_) {
  for (int k = 0; k < 3; ++k)
    lateral_[k] = nn::Conv2d("decoder.lateral" + std::to_string(k + 2), config_.backbone.stage_channels(k + 2),
                             config_.merge_channels, 1, 1, 0, false, rng_);
  merge_bn_ = nn::BatchNorm2d("decoder.merge_bn", config_.merge_channels);
  classifier_ = nn::Conv2d("decoder.classifier", config_.merge_channels, 1, 1, 1, 0, true, rng_);
  // start from p = 0.5 everywhere
  std::fill(classifier_.weight().value.begin(), classifier_.weight().value.end(), 0.0f);
  std::fill(classifier_.bias().value.begin(), classifier_.bias().value.end(), 0.0f);
}

Tensor SegModel::forward_logits(const Tensor& images, bool train) {
  if (images.c() != 3 || images.h() != kImageSize || images.w() != kImageSize || images.n() < 1)
    throw ShapeError("segmentation input must be N x 3 x 224 x 224, got " + images.shape_str());
  auto outs = encoder_.forward(images, train);
  shapes_.stage2 = shape_of(outs[0]);
  shapes_.stage3 = shape_of(outs[1]);
  shapes_.stage4 = shape_of(outs[2]);
  merge_h_ = outs[0].h();
  merge_w_ = outs[0].w();
  // A 1x1 convolution commutes with bilinear resampling, so each stage is
  // projected at its own resolution before being upsampled and summed.
  Tensor merged;
  for (int k = 0; k < 3; ++k) {
    stage_hw_[k] = {outs[k].h(), outs[k].w()};
    Tensor lat = lateral_[k].forward(outs[k]);
    if (lat.h() != merge_h_ || lat.w() != merge_w_) lat = nn::upsample_bilinear(lat, merge_h_, merge_w_);
    if (k == 0) {
      merged = std::move(lat);
    } else {
      nn::add_inplace(merged, lat);
    }
  }
  shapes_.merged = shape_of(merged);
  Tensor h = merge_relu_.forward(merge_bn_.forward(merged, train));
  Tensor logits = classifier_.forward(h);
  shapes_.logits = shape_of(logits);
  Tensor full = nn::upsample_bilinear(logits, images.h(), images.w());
  shapes_.output = shape_of(full);
  return full;
}

Tensor SegModel::forward(const Tensor& images, bool train) { return nn::sigmoid(forward_logits(images, train)); }

void SegModel::backward(const Tensor& grad_logits) {
  Tensor g = nn::upsample_bilinear_backward(grad_logits, merge_h_, merge_w_);
  g = classifier_.backward(g);
  g = merge_bn_.backward(merge_relu_.backward(g));
  std::vector<Tensor> grads(3);
  for (int k = 0; k < 3; ++k) {
    const auto [h, w] = stage_hw_[k];
    const Tensor gk = (h == merge_h_ && w == merge_w_) ? g : nn::upsample_bilinear_backward(g, h, w);
    grads[k] = lateral_[k].backward(gk);
  }
  encoder_.backward(grads);
}

void SegModel::load_encoder(const fs::path& weights) { nn::load_weights(encoder_, weights); }

void SegModel::collect_params(std::vector<nn::Param*>& out) {
  encoder_.collect_params(out);
  for (auto& l : lateral_) l.collect_params(out);
  merge_bn_.collect_params(out);
  classifier_.collect_params(out);
}

void SegModel::collect_buffers(std::vector<nn::Buffer>& out) {
  encoder_.collect_buffers(out);
  merge_bn_.collect_buffers(out);
}

Prediction predict(SegModel& model, const Tensor& image) {
  if (image.n() != 1) throw ShapeError("predict expects a single image, got " + image.shape_str());
  return tensor_plane(model.forward(image, false));
}

std::vector<Prediction> predict_all(SegModel& model, const std::vector<ImageSample>& samples, int batch_size) {
  std::vector<Prediction> out;
  out.reserve(samples.size());
  const std::size_t b = static_cast<std::size_t>(std::max(1, batch_size));
  for (std::size_t start = 0; start < samples.size(); start += b) {
    std::vector<Tensor> items;
    for (std::size_t i = start; i < std::min(samples.size(), start + b); ++i) items.push_back(samples[i].pixels);
    const Tensor p = model.forward(stack(items), false);
    for (int i = 0; i < p.n(); ++i) out.push_back(tensor_plane(p, i));
  }
  return out;
}

// ---------------------------------------------------------------- loss

double usl_denominator(const FloatMap& label) {
  double s = 0;
  for (float l : label.data) s += (1.0 - l) * l;
  return std::max(static_cast<double>(label.size()) - 4.0 * s, kDenGuard);
}

namespace {

void check_pair(const FloatMap& a, const FloatMap& label) {
  if (!a.same_shape(label))
    throw ShapeError("usl_loss: prediction " + std::to_string(a.rows) + "x" + std::to_string(a.cols) + " vs label " +
                     std::to_string(label.rows) + "x" + std::to_string(label.cols));
}

bool has_certain(const FloatMap& label) {
  return std::any_of(label.data.begin(), label.data.end(), [](float l) { return l != 0.5f; });
}

}  // namespace

double usl_loss(const Prediction& p, const FloatMap& label) {
  check_pair(p, label);
  if (!has_certain(label)) return 0.0;
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double l = label.data[i];
    const double w = (l - 0.5) * (l - 0.5);
    if (w == 0.0) continue;
    const double q = std::clamp(static_cast<double>(p.data[i]), kProbClamp, 1.0 - kProbClamp);
    s += w * -(l * std::log(q) + (1.0 - l) * std::log(1.0 - q));
  }
  return s / usl_denominator(label);
}

FloatMap usl_loss_grad(const Prediction& p, const FloatMap& label) {
  check_pair(p, label);
  FloatMap g(p.rows, p.cols, 0.0f);
  if (!has_certain(label)) return g;
  const double den = usl_denominator(label);
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double l = label.data[i];
    const double w = (l - 0.5) * (l - 0.5);
    const double raw = p.data[i];
    if (w == 0.0 || raw < kProbClamp || raw > 1.0 - kProbClamp) continue;
    g.data[i] = static_cast<float>(w * (-(l / raw) + (1.0 - l) / (1.0 - raw)) / den);
  }
  return g;
}

double usl_loss_logits(const FloatMap& z, const FloatMap& label, FloatMap* grad_z) {
  check_pair(z, label);
  if (grad_z) *grad_z = FloatMap(z.rows, z.cols, 0.0f);
  if (!has_certain(label)) return 0.0;
  const double den = usl_denominator(label);
  double s = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double l = label.data[i];
    const double w = (l - 0.5) * (l - 0.5);
    if (w == 0.0) continue;
    const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(z.data[i])));
    const double q = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
    s += w * -(l * std::log(q) + (1.0 - l) * std::log(1.0 - q));
    if (grad_z) grad_z->data[i] = static_cast<float>(w * (p - l) / den);
  }
  return s / den;
}

// ---------------------------------------------------------------- inference

Mask infer(const Prediction& p, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw InvalidThreshold("inference threshold must lie in (0,1), got " + std::to_string(threshold));
  Mask m(p.rows, p.cols, 0);
  for (std::size_t i = 0; i < p.size(); ++i) m.data[i] = p.data[i] >= threshold ? 1 : 0;
  return m;
}

Mask infer(SegModel& model, const Tensor& image, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw InvalidThreshold("inference threshold must lie in (0,1), got " + std::to_string(threshold));
  return infer(predict(model, image), threshold);
}

Mask label_to_mask(const um::TriLabel& label) {
  Mask m(label.values.rows, label.values.cols, 0);
  if (label.excluded) return m;
  for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = label.values.data[i] == 1.0f ? 1 : 0;
  return m;
}

// ---------------------------------------------------------------- training

namespace {

void flip_image(Tensor& t) {
  for (int c = 0; c < t.c(); ++c) {
    float* p = t.channel(0, c);
    for (int r = 0; r < t.h(); ++r) std::reverse(p + static_cast<std::size_t>(r) * t.w(), p + static_cast<std::size_t>(r + 1) * t.w());
  }
}

void flip_map(FloatMap& m) {
  for (int r = 0; r < m.rows; ++r)
    std::reverse(m.data.begin() + static_cast<std::ptrdiff_t>(r) * m.cols,
                 m.data.begin() + static_cast<std::ptrdiff_t>(r + 1) * m.cols);
}

}  // namespace

TrainReport train_iteration(SegModel& model, const std::vector<ImageSample>& samples,
                            const std::vector<um::TriLabel>& labels, const SegTrainOptions& options) {
  if (samples.size() != labels.size())
    throw ShapeError("train_iteration: " + std::to_string(samples.size()) + " samples but " +
                     std::to_string(labels.size()) + " labels");
  TrainReport report;
  std::vector<int> trainable;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].excluded) {
      ++report.excluded_count;
    } else {
      if (!labels[i].values.same_shape(FloatMap(kImageSize, kImageSize)))
        throw ShapeError("label for '" + samples[i].id + "' is not 224x224");
      trainable.push_back(static_cast<int>(i));
    }
  }
  if (trainable.empty()) throw NoTrainableSamples("every pseudo-label is excluded");

  nn::Sgd sgd(model.params(), {options.lr, options.momentum, options.weight_decay});
  const int n = static_cast<int>(trainable.size());
  const int bsz = std::max(1, std::min(options.batch_size, n));
  const int per_epoch = std::max(1, n / bsz);
  const long total = static_cast<long>(per_epoch) * options.epochs;
  nn::Rng rng(mix(options.seed, 0x5e9));
  std::bernoulli_distribution coin(0.5);
  long step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::vector<int> order = trainable;
    std::shuffle(order.begin(), order.end(), rng);
    for (int s = 0; s < per_epoch; ++s) {
      const int begin = s * bsz;
      const int end = (s == per_epoch - 1) ? n : begin + bsz;
      std::vector<Tensor> images;
      std::vector<FloatMap> targets;
      for (int k = begin; k < end; ++k) {
        Tensor img = samples[order[k]].pixels;
        FloatMap lab = labels[order[k]].values;
        if (options.flip && coin(rng)) {
          flip_image(img);
          flip_map(lab);
        }
        images.push_back(std::move(img));
        targets.push_back(std::move(lab));
      }
      const Tensor logits = model.forward_logits(stack(images), true);
      const int b = logits.n();
      Tensor grad(b, 1, logits.h(), logits.w());
      double loss = 0;
      for (int i = 0; i < b; ++i) {
        FloatMap gz;
        loss += usl_loss_logits(tensor_plane(logits, i), targets[i], &gz) / b;
        float* dst = grad.channel(i, 0);
        for (std::size_t j = 0; j < gz.size(); ++j) dst[j] = gz.data[j] / static_cast<float>(b);
      }
      if (!std::isfinite(loss)) throw NonFiniteLoss("segmentation", step);
      sgd.zero_grad();
      model.backward(grad);
      sgd.step(nn::poly_lr(options.lr, step, total, options.poly_power));
      report.loss_trace.push_back(loss);
      ++step;
    }
  }
  report.predictions = predict_all(model, samples, options.batch_size);
  return report;
}

// ---------------------------------------------------------------- refinement

void RefinementSchedule::validate() const {
  if (n_iterations < 0) throw ConfigError("seg.n_iterations", "must be >= 0");
  if (epochs_per_iteration < 1) throw ConfigError("seg.epochs_per_iteration", "must be >= 1");
  if (export_iteration < 0 || export_iteration > n_iterations)
    throw ConfigError("seg.export_iteration", "must lie in [0, n_iterations]");
}

namespace {

std::vector<um::TriLabel> relabel(const std::vector<Prediction>& predictions, const um::UmConfig& cfg) {
  std::vector<um::TriLabel> out;
  out.reserve(predictions.size());
  for (const auto& p : predictions) out.push_back(um::make_pseudo_label(p, cfg));
  return out;
}

bool matches(const fs::path& meta_path, const fs::path& weights, const std::string& fingerprint, int epochs,
             std::uint64_t seed, int iteration) {
  if (!fs::exists(meta_path) || !fs::exists(weights)) return false;
  try {
    std::ifstream in(meta_path);
    const json j = json::parse(in);
    return j.at("fingerprint").get<std::string>() == fingerprint && j.at("epochs").get<int>() == epochs &&
           j.at("seed").get<std::uint64_t>() == seed && j.at("iteration").get<int>() == iteration;
  } catch (const std::exception&) {
    return false;
  }
}

}  // namespace

RefineResult refine(SegModel& model, const std::vector<ImageSample>& samples, const std::vector<um::TriLabel>& initial,
                    const RefinementSchedule& schedule, const SegTrainOptions& options, const um::UmConfig& um_config,
                    const fs::path& out_dir, const std::string& fingerprint, const IterationCallback& on_iteration) {
  schedule.validate();
  RefineResult result;
  result.exported = schedule.export_iteration;
  std::vector<um::TriLabel> labels = initial;
  for (int it = 0; it <= schedule.n_iterations; ++it) {
    const fs::path dir = out_dir / ("iter_" + std::to_string(it));
    fs::create_directories(dir);
    IterationRecord rec;
    rec.iteration = it;
    rec.epochs = schedule.epochs_per_iteration;
    rec.checkpoint = dir / "model.bin";
    rec.metadata = dir / "iteration.json";
    SegTrainOptions opt = options;
    opt.epochs = schedule.epochs_per_iteration;
    opt.seed = mix(options.seed, static_cast<std::uint64_t>(it) + 1);

    std::vector<Prediction> predictions;
    if (matches(rec.metadata, rec.checkpoint, fingerprint, rec.epochs, options.seed, it)) {
      nn::load_weights(model, rec.checkpoint);
      std::ifstream in(rec.metadata);
      const json j = json::parse(in);
      rec.loss_trace = j.at("loss_trace").get<std::vector<double>>();
      rec.excluded_count = j.at("excluded_count").get<int>();
      rec.resumed = true;
      predictions = predict_all(model, samples, options.batch_size);
    } else {
      TrainReport rep = train_iteration(model, samples, labels, opt);
      rec.loss_trace = std::move(rep.loss_trace);
      rec.excluded_count = rep.excluded_count;
      predictions = std::move(rep.predictions);
      nn::save_weights(model, rec.checkpoint);
      const json meta{{"iteration", it},
                      {"epochs", rec.epochs},
                      {"loss_trace", rec.loss_trace},
                      {"excluded_count", rec.excluded_count},
                      {"seed", options.seed},
                      {"fingerprint", fingerprint}};
      std::ofstream(rec.metadata) << meta.dump(2) << "\n";
    }
    if (on_iteration) on_iteration(rec, labels, predictions);
    if (it == schedule.export_iteration) result.predictions = predictions;
    labels = relabel(predictions, um_config);
    result.iterations.push_back(std::move(rec));
  }
  result.next_labels = std::move(labels);
  if (schedule.export_iteration != schedule.n_iterations)
    nn::load_weights(model, result.iterations[schedule.export_iteration].checkpoint);
  return result;
}

}  // namespace uslseg::seg
