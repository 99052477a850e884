#include "uslseg/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <random>

#include "uslseg/errors.hpp"

namespace uslseg::contrastive {

namespace fs = std::filesystem;
using nlohmann::json;

int EncoderConfig::feature_channels() const {
  int d = 0;
  for (int s : feature_stages) d += backbone.stage_channels(s);
  return d;
}

Encoder::Encoder(const EncoderConfig& config, std::uint64_t seed) : config_(config) {
  if (config_.feature_stages.empty()) throw ShapeError("encoder needs at least one feature stage");
  for (int s : config_.feature_stages)
    if (s < 2 || s > config_.backbone.last_stage) throw ShapeError("feature stage " + std::to_string(s) + " is not built");
  nn::Rng rng(seed);
  backbone_ = std::make_unique<nn::ResNet>(config_.backbone, rng);
}

FeatureMap Encoder::encode(const Tensor& image, const std::string& method) {
  if (image.n() != 1 || image.c() != 3 || image.h() != kImageSize || image.w() != kImageSize)
    throw ShapeError("encode expects a 1x3x224x224 image, got " + image.shape_str());
  auto outs = backbone_->forward(image, false);
  std::vector<const Tensor*> parts;
  for (int s : config_.feature_stages) parts.push_back(&outs[s - 2]);
  FeatureMap fm{concat_channels(parts), method, config_.feature_stages};
  return fm;
}

// ---------------------------------------------------------------- InfoNCE

namespace {

double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("info_nce: vector length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return s;
}

void check_tau(double tau) {
  if (!(tau > 0.0)) throw DegenerateInput("temperature must be positive, got " + std::to_string(tau));
}

// Softmax of logits / tau; returns log-sum-exp and fills probabilities.
double softmax(std::span<const double> sims, double tau, std::vector<double>& prob) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double s : sims) mx = std::max(mx, s / tau);
  double z = 0.0;
  prob.resize(sims.size());
  for (std::size_t i = 0; i < sims.size(); ++i) z += prob[i] = std::exp(sims[i] / tau - mx);
  for (auto& p : prob) p /= z;
  return mx + std::log(z);
}

}  // namespace

double info_nce_from_logits(std::span<const double> similarities, double tau) {
  check_tau(tau);
  if (similarities.size() < 2) throw DegenerateInput("info_nce needs at least one negative");
  std::vector<double> prob;
  const double lse = softmax(similarities, tau, prob);
  return lse - similarities[0] / tau;
}

double info_nce(std::span<const float> q, std::span<const float> positive,
                const std::vector<std::span<const float>>& negatives, double tau) {
  check_tau(tau);
  if (negatives.empty()) throw DegenerateInput("info_nce needs at least one negative");
  std::vector<double> sims;
  sims.reserve(negatives.size() + 1);
  sims.push_back(dot(q, positive));
  for (const auto& k : negatives) sims.push_back(dot(q, k));
  return info_nce_from_logits(sims, tau);
}

InfoNceResult info_nce_with_grad(std::span<const float> q, std::span<const float> positive,
                                 const std::vector<std::span<const float>>& negatives, double tau,
                                 bool negatives_grad) {
  check_tau(tau);
  if (negatives.empty()) throw DegenerateInput("info_nce needs at least one negative");
  std::vector<double> sims;
  sims.reserve(negatives.size() + 1);
  sims.push_back(dot(q, positive));
  for (const auto& k : negatives) sims.push_back(dot(q, k));
  std::vector<double> prob;
  const double lse = softmax(sims, tau, prob);

  InfoNceResult r;
  r.loss = lse - sims[0] / tau;
  const std::size_t d = q.size();
  std::vector<double> gq(d, 0.0);
  const double c0 = (prob[0] - 1.0) / tau;
  for (std::size_t j = 0; j < d; ++j) gq[j] += c0 * positive[j];
  for (std::size_t i = 0; i < negatives.size(); ++i) {
    const double ci = prob[i + 1] / tau;
    for (std::size_t j = 0; j < d; ++j) gq[j] += ci * negatives[i][j];
  }
  r.grad_q.assign(gq.begin(), gq.end());
  r.grad_positive.resize(d);
  for (std::size_t j = 0; j < d; ++j) r.grad_positive[j] = static_cast<float>(c0 * q[j]);
  if (negatives_grad) {
    r.grad_negatives.resize(negatives.size());
    for (std::size_t i = 0; i < negatives.size(); ++i) {
      const double ci = prob[i + 1] / tau;
      auto& g = r.grad_negatives[i];
      g.resize(d);
      for (std::size_t j = 0; j < d; ++j) g[j] = static_cast<float>(ci * q[j]);
    }
  }
  return r;
}

// ---------------------------------------------------------------- queue / heads

void KeyQueue::push(std::vector<float> key) {
  keys_.push_back(std::move(key));
  while (keys_.size() > capacity_) keys_.pop_front();
}

std::string to_string(HeadKind h) { return h == HeadKind::fc ? "fc" : "mlp"; }

HeadKind head_for(ContrastiveMethod method) {
  return method == ContrastiveMethod::moco_v1 ? HeadKind::fc : HeadKind::mlp;
}

ProjectionHead::ProjectionHead(HeadKind kind, int in_features, int out_features, nn::Rng& rng,
                               const std::string& prefix)
    : kind_(kind) {
  if (kind == HeadKind::fc) {
    fc1_ = nn::Linear(prefix + ".fc", in_features, out_features, true, rng);
  } else {
    fc1_ = nn::Linear(prefix + ".fc1", in_features, in_features, true, rng);
    fc2_ = nn::Linear(prefix + ".fc2", in_features, out_features, true, rng);
  }
}

Tensor ProjectionHead::forward(const Tensor& pooled) {
  if (kind_ == HeadKind::fc) return fc1_.forward(pooled);
  return fc2_.forward(relu_.forward(fc1_.forward(pooled)));
}

Tensor ProjectionHead::backward(const Tensor& grad_out) {
  if (kind_ == HeadKind::fc) return fc1_.backward(grad_out);
  return fc1_.backward(relu_.backward(fc2_.backward(grad_out)));
}

void ProjectionHead::collect_params(std::vector<nn::Param*>& out) {
  fc1_.collect_params(out);
  if (kind_ == HeadKind::mlp) fc2_.collect_params(out);
}

// ---------------------------------------------------------------- state / momentum

namespace {

bool is_moco(ContrastiveMethod m) { return m != ContrastiveMethod::simclr; }

// Backbone + head, saved and loaded as one blob.
class EncoderWithHead : public nn::Module {
 public:
  EncoderWithHead(nn::ResNet& backbone, ProjectionHead& head) : backbone_(backbone), head_(head) {}
  void collect_params(std::vector<nn::Param*>& out) override {
    backbone_.collect_params(out);
    head_.collect_params(out);
  }
  void collect_buffers(std::vector<nn::Buffer>& out) override { backbone_.collect_buffers(out); }

 private:
  nn::ResNet& backbone_;
  ProjectionHead& head_;
};

std::vector<float> random_unit(int dim, nn::Rng& rng) {
  std::normal_distribution<float> d(0.0f, 1.0f);
  std::vector<float> v(dim);
  double n = 0;
  for (auto& x : v) {
    x = d(rng);
    n += static_cast<double>(x) * x;
  }
  const auto inv = static_cast<float>(1.0 / std::sqrt(n));
  for (auto& x : v) x *= inv;
  return v;
}

}  // namespace

ContrastiveState::ContrastiveState(ContrastiveMethod m, const EncoderConfig& config, const ContrastiveOptions& options)
    : method(m), tau(options.tau), momentum(options.momentum), query(config, options.seed) {
  check_tau(tau);
  nn::Rng rng(options.seed ^ 0x9e3779b97f4a7c15ull);
  const int d5 = config.backbone.stage_channels(config.backbone.last_stage);
  query_head = std::make_unique<ProjectionHead>(head_for(m), d5, options.embedding_dim, rng);
  if (options.init_checkpoint) nn::load_weights(query.backbone(), *options.init_checkpoint);
  if (is_moco(m)) {
    key = std::make_unique<Encoder>(config, options.seed);
    key_head = std::make_unique<ProjectionHead>(head_for(m), d5, options.embedding_dim, rng);
    nn::copy_params(query.backbone(), key->backbone());
    nn::copy_params(*query_head, *key_head);
    queue.emplace(options.queue_capacity);
    for (std::size_t i = 0; i < options.queue_capacity; ++i) queue->push(random_unit(options.embedding_dim, rng));
  }
}

void momentum_update(std::span<float> key, std::span<const float> query, double m) {
  if (key.size() != query.size()) throw ShapeError("momentum_update: parameter size mismatch");
  const auto mf = static_cast<float>(m);
  for (std::size_t i = 0; i < key.size(); ++i) key[i] = mf * key[i] + (1.0f - mf) * query[i];
}

void momentum_update(ContrastiveState& state) {
  if (!is_moco(state.method)) throw InvalidMethod("momentum update is undefined for simclr (no key encoder)");
  auto update = [&](nn::Module& q, nn::Module& k) {
    auto qp = q.params();
    auto kp = k.params();
    for (std::size_t i = 0; i < qp.size(); ++i) momentum_update(kp[i]->value, qp[i]->value, state.momentum);
  };
  update(state.query.backbone(), state.key->backbone());
  update(*state.query_head, *state.key_head);
}

// ---------------------------------------------------------------- training

namespace {

// Row-wise L2 normalisation of an N x D x 1 x 1 tensor; keeps norms for backward.
Tensor normalize_rows(const Tensor& z, std::vector<float>& norms) {
  Tensor out = z;
  const int n = z.n();
  const std::size_t d = z.sample_size();
  norms.assign(n, 0.0f);
  for (int i = 0; i < n; ++i) {
    double s = 0;
    const float* p = z.sample(i);
    for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(p[j]) * p[j];
    norms[i] = static_cast<float>(std::max(std::sqrt(s), 1e-12));
    float* o = out.sample(i);
    for (std::size_t j = 0; j < d; ++j) o[j] = p[j] / norms[i];
  }
  return out;
}

Tensor normalize_rows_backward(const Tensor& y, const std::vector<float>& norms, const Tensor& dy) {
  Tensor dx = dy;
  const std::size_t d = y.sample_size();
  for (int i = 0; i < y.n(); ++i) {
    const float* yp = y.sample(i);
    const float* gp = dy.sample(i);
    double proj = 0;
    for (std::size_t j = 0; j < d; ++j) proj += static_cast<double>(yp[j]) * gp[j];
    float* o = dx.sample(i);
    for (std::size_t j = 0; j < d; ++j) o[j] = static_cast<float>((gp[j] - yp[j] * proj) / norms[i]);
  }
  return dx;
}

std::span<const float> row(const Tensor& t, int i) { return {t.sample(i), t.sample_size()}; }

std::vector<std::vector<int>> make_batches(std::vector<int> order, int batch, bool merge_singleton) {
  std::vector<std::vector<int>> batches;
  for (std::size_t s = 0; s < order.size(); s += batch)
    batches.emplace_back(order.begin() + s, order.begin() + std::min(order.size(), s + batch));
  if (merge_singleton && batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back().front());
    batches.pop_back();
  }
  return batches;
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a * 0x9e3779b97f4a7c15ull + b + 0x632be59bd9b4e019ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace

ContrastiveCheckpoint train_contrastive(ContrastiveMethod method, const std::vector<ImageSample>& dataset,
                                        const EncoderConfig& config, const ContrastiveOptions& options,
                                        const fs::path& out_dir) {
  if (dataset.empty()) throw EmptyDataset("contrastive training needs a nonempty dataset");
  if (options.batch_size < 1 || options.epochs < 0) throw ConfigError("contrastive", "batch_size >= 1 and epochs >= 0 required");
  if (method == ContrastiveMethod::simclr && dataset.size() < 2)
    throw DegenerateInput("simclr needs at least two images for in-batch negatives");

  ContrastiveState state(method, config, options);
  auto params = state.query.backbone().params();
  for (auto* p : state.query_head->params()) params.push_back(p);
  const double lr0 = options.base_lr * options.batch_size / 256.0;
  nn::Sgd sgd(params, {lr0, options.sgd_momentum, options.weight_decay});

  const int n = static_cast<int>(dataset.size());
  const int batches_per_epoch = static_cast<int>(
      make_batches(std::vector<int>(n, 0), options.batch_size, method == ContrastiveMethod::simclr).size());
  const long total_steps = static_cast<long>(batches_per_epoch) * options.epochs;
  const int d5_stage = config.backbone.last_stage;

  std::vector<double> trace;
  long step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    nn::Rng shuffle_rng(mix(options.seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (const auto& batch : make_batches(order, options.batch_size, method == ContrastiveMethod::simclr)) {
      const int b = static_cast<int>(batch.size());
      std::vector<Tensor> qs, ks;
      for (int idx : batch) {
        auto spec = AugmentationSpec::canonical(method, mix(options.seed, 1000 + static_cast<std::uint64_t>(epoch)));
        auto [q, k] = augment_two_views(dataset[idx], spec);
        qs.push_back(std::move(q));
        ks.push_back(std::move(k));
      }
      sgd.zero_grad();
      double loss = 0.0;
      std::vector<Tensor> grads(state.query.backbone().config().last_stage - 1);

      if (method == ContrastiveMethod::simclr) {
        std::vector<Tensor> views = qs;
        views.insert(views.end(), ks.begin(), ks.end());
        const Tensor x = stack(views);
        auto outs = state.query.backbone().forward(x, true);
        const Tensor& f5 = outs[d5_stage - 2];
        std::vector<float> norms;
        const Tensor z = normalize_rows(state.query_head->forward(nn::global_avg_pool(f5)), norms);
        Tensor dz(z.n(), z.c(), 1, 1);
        const int m = 2 * b;
        for (int i = 0; i < m; ++i) {
          const int pair = i < b ? i + b : i - b;
          std::vector<std::span<const float>> negs;
          std::vector<int> neg_idx;
          for (int j = 0; j < m; ++j)
            if (j != i && j != pair) {
              negs.push_back(row(z, j));
              neg_idx.push_back(j);
            }
          auto r = info_nce_with_grad(row(z, i), row(z, pair), negs, state.tau);
          loss += r.loss / m;
          for (std::size_t j = 0; j < r.grad_q.size(); ++j) {
            dz.sample(i)[j] += r.grad_q[j] / m;
            dz.sample(pair)[j] += r.grad_positive[j] / m;
          }
          for (std::size_t k = 0; k < neg_idx.size(); ++k)
            for (std::size_t j = 0; j < r.grad_q.size(); ++j) dz.sample(neg_idx[k])[j] += r.grad_negatives[k][j] / m;
        }
        const Tensor dpool = state.query_head->backward(normalize_rows_backward(z, norms, dz));
        grads[d5_stage - 2] = nn::global_avg_pool_backward(dpool, f5.h(), f5.w());
      } else {
        const Tensor xq = stack(qs);
        const Tensor xk = stack(ks);
        auto kouts = state.key->backbone().forward(xk, true);
        std::vector<float> knorms;
        const Tensor zk = normalize_rows(state.key_head->forward(nn::global_avg_pool(kouts[d5_stage - 2])), knorms);
        auto outs = state.query.backbone().forward(xq, true);
        const Tensor& f5 = outs[d5_stage - 2];
        std::vector<float> norms;
        const Tensor zq = normalize_rows(state.query_head->forward(nn::global_avg_pool(f5)), norms);
        std::vector<std::span<const float>> negs;
        for (const auto& key : state.queue->keys()) negs.emplace_back(key);
        Tensor dz(zq.n(), zq.c(), 1, 1);
        for (int i = 0; i < b; ++i) {
          auto r = info_nce_with_grad(row(zq, i), row(zk, i), negs, state.tau, false);
          loss += r.loss / b;
          for (std::size_t j = 0; j < r.grad_q.size(); ++j) dz.sample(i)[j] = r.grad_q[j] / b;
        }
        const Tensor dpool = state.query_head->backward(normalize_rows_backward(zq, norms, dz));
        grads[d5_stage - 2] = nn::global_avg_pool_backward(dpool, f5.h(), f5.w());
        for (int i = 0; i < b; ++i) state.queue->push(std::vector<float>(zk.sample(i), zk.sample(i) + zk.sample_size()));
      }

      if (!std::isfinite(loss)) throw NonFiniteLoss("contrastive/" + to_string(method), step);
      state.query.backbone().backward(grads);
      sgd.step(nn::cosine_lr(lr0, step, total_steps));
      if (is_moco(method)) momentum_update(state);
      trace.push_back(loss);
      ++step;
    }
  }

  fs::create_directories(out_dir);
  ContrastiveCheckpoint ckpt;
  ckpt.method = method;
  ckpt.encoder = config;
  ckpt.loss_trace = trace;
  ckpt.weights = out_dir / "weights.bin";
  ckpt.metadata = out_dir / "checkpoint.json";
  EncoderWithHead whole(state.query.backbone(), *state.query_head);
  nn::save_weights(whole, ckpt.weights);
  json meta{{"method", to_string(method)},
            {"arch", json::parse(encoder_to_json(config))},
            {"epochs", options.epochs},
            {"batch_size", options.batch_size},
            {"steps", step},
            {"tau", options.tau},
            {"K", is_moco(method) ? json(options.queue_capacity) : json(nullptr)},
            {"m", is_moco(method) ? json(options.momentum) : json(nullptr)},
            {"head", to_string(head_for(method))},
            {"embedding_dim", options.embedding_dim},
            {"seed", options.seed},
            {"loss_trace", trace},
            {"weights", ckpt.weights.filename().string()}};
  std::ofstream(ckpt.metadata) << meta.dump(2) << "\n";
  return ckpt;
}

std::string encoder_to_json(const EncoderConfig& config) {
  json j{{"base_width", config.backbone.base_width},
         {"blocks", config.backbone.blocks},
         {"final_stage_stride", config.backbone.final_stage_stride},
         {"last_stage", config.backbone.last_stage},
         {"feature_stages", config.feature_stages}};
  return j.dump();
}

ContrastiveCheckpoint read_checkpoint(const fs::path& metadata) {
  std::ifstream in(metadata);
  if (!in) throw Error("cannot read checkpoint metadata " + metadata.string());
  const json j = json::parse(in);
  ContrastiveCheckpoint c;
  c.metadata = metadata;
  c.weights = metadata.parent_path() / j.at("weights").get<std::string>();
  c.method = parse_method(j.at("method").get<std::string>());
  const json& a = j.at("arch");
  c.encoder.backbone.base_width = a.at("base_width").get<int>();
  c.encoder.backbone.blocks = a.at("blocks").get<std::array<int, 4>>();
  c.encoder.backbone.final_stage_stride = a.at("final_stage_stride").get<int>();
  c.encoder.backbone.last_stage = a.at("last_stage").get<int>();
  c.encoder.feature_stages = a.at("feature_stages").get<std::vector<int>>();
  c.loss_trace = j.at("loss_trace").get<std::vector<double>>();
  return c;
}

Encoder load_encoder(const ContrastiveCheckpoint& checkpoint) {
  Encoder enc(checkpoint.encoder, 0);
  nn::load_weights(enc.backbone(), checkpoint.weights);
  return enc;
}

// ---------------------------------------------------------------- fusion

FeatureMap fuse_features(const std::vector<FeatureMap>& maps) {
  if (maps.empty()) throw ShapeError("fuse_features: no maps");
  auto rank = [](const FeatureMap& m) {
    if (m.method == "simclr") return 0;
    if (m.method == "moco_v1") return 1;
    if (m.method == "moco_v2") return 2;
    return 3;
  };
  std::vector<const FeatureMap*> ordered;
  for (const auto& m : maps) ordered.push_back(&m);
  std::stable_sort(ordered.begin(), ordered.end(), [&](auto* a, auto* b) { return rank(*a) < rank(*b); });
  const Tensor& first = ordered.front()->values;
  std::vector<const Tensor*> parts;
  FeatureMap out;
  for (const FeatureMap* m : ordered) {
    if (m->values.h() != first.h() || m->values.w() != first.w() || m->values.n() != first.n())
      throw ShapeError("fuse_features: spatial dims differ (" + first.shape_str() + " vs " + m->values.shape_str() + ")");
    parts.push_back(&m->values);
    out.method += (out.method.empty() ? "" : "+") + m->method;
  }
  out.values = concat_channels(parts);
  out.stages = ordered.front()->stages;
  return out;
}

}  // namespace uslseg::contrastive
