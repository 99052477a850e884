#include "uslseg/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <sstream>

#include "uslseg/errors.hpp"

#ifndef USLSEG_VERSION
#define USLSEG_VERSION "0.0.0"
#endif

namespace uslseg {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Stage s) {
  switch (s) {
    case Stage::pretrain: return "pretrain";
    case Stage::ccam: return "ccam";
    case Stage::labels: return "labels";
    case Stage::train: return "train";
    case Stage::refine: return "refine";
    case Stage::infer: return "infer";
    case Stage::evaluate: return "evaluate";
    case Stage::all: return "all";
  }
  return "all";
}

Stage parse_stage(const std::string& s) {
  for (Stage st : {Stage::pretrain, Stage::ccam, Stage::labels, Stage::train, Stage::refine, Stage::infer,
                   Stage::evaluate, Stage::all})
    if (to_string(st) == s) return st;
  throw ConfigError("stage", "unknown stage '" + s + "'");
}

fs::path cache_root(const PipelineConfig& config, const RunOptions& options) {
  if (options.cache_root) return *options.cache_root;
  if (const char* env = std::getenv("USLSEG_CACHE"); env && *env) return fs::path(env);
  return fs::path(config.output_dir) / "cache";
}

// ---------------------------------------------------------------- diagnostics

Tensor overlay(const Mask& pred, const Mask& gt, const Tensor& image) {
  if (!pred.same_shape(gt) || image.n() != 1 || image.c() != 3 || image.h() != pred.rows || image.w() != pred.cols)
    throw ShapeError("overlay: prediction, ground truth and image must share one grid");
  Tensor out = image;
  for (int r = 0; r < pred.rows; ++r)
    for (int c = 0; c < pred.cols; ++c) {
      const bool p = pred.at(r, c), g = gt.at(r, c);
      if (p == g) continue;
      const float rgb[3] = {p ? 1.0f : 0.0f, p ? 0.0f : 1.0f, 0.0f};
      for (int ch = 0; ch < 3; ++ch) out.at(0, ch, r, c) = rgb[ch];
    }
  return out;
}

ccam::Cam naive_cam(const Tensor& features) {
  if (features.n() != 1) throw ShapeError("naive_cam expects one feature map");
  FloatMap m(features.h(), features.w(), 0.0f);
  for (int c = 0; c < features.c(); ++c) {
    const float* p = features.channel(0, c);
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] += p[i];
  }
  const auto [lo, hi] = std::minmax_element(m.data.begin(), m.data.end());
  const float a = *lo, span = *hi - *lo;
  for (auto& v : m.data) v = span > 0 ? (v - a) / span : 0.0f;
  return ccam::to_cam(ccam::ActivationMap{m});
}

std::optional<Mask> centrality_filter(const FloatMap& saliency, const um::UmConfig& config, double threshold) {
  FloatMap binary(saliency.rows, saliency.cols, 0.0f);
  for (std::size_t i = 0; i < saliency.size(); ++i) binary.data[i] = saliency.data[i] >= threshold ? 1.0f : 0.0f;
  um::UmConfig cfg = config;
  cfg.lo = 0.25;
  cfg.hi = 0.75;
  const um::TriLabel label = um::make_pseudo_label(binary, cfg);
  if (label.excluded) return std::nullopt;
  return seg::label_to_mask(label);
}

std::vector<SweepRow> threshold_sweep(const std::vector<FloatMap>& saliency, const std::vector<Mask>& gts,
                                      const std::vector<double>& grid, const um::UmConfig& base) {
  if (saliency.size() != gts.size()) throw ShapeError("threshold_sweep: saliency and ground truth counts differ");
  std::vector<SweepRow> rows;
  for (double x : grid) {
    if (!(x > 0.0 && x < 0.5)) continue;
    SweepRow row{x, 0, 0, 0};
    um::UmConfig cfg = base;
    cfg.lo = x;
    cfg.hi = 1.0 - x;
    int um_images = 0;
    for (std::size_t k = 0; k < saliency.size(); ++k) {
      const FloatMap& s = saliency[k];
      const Mask& g = gts[k];
      if (s.rows != g.rows || s.cols != g.cols) throw ShapeError("threshold_sweep: saliency and ground truth grids differ");
      std::size_t ok_x = 0, ok_1mx = 0;
      for (std::size_t i = 0; i < s.size(); ++i) {
        ok_x += (s.data[i] >= x) == (g.data[i] != 0);
        ok_1mx += (s.data[i] >= 1.0 - x) == (g.data[i] != 0);
      }
      row.naive_x_acc += static_cast<double>(ok_x) / s.size();
      row.naive_1mx_acc += static_cast<double>(ok_1mx) / s.size();
      const um::TriLabel l = um::make_pseudo_label(s, cfg);
      if (l.excluded) continue;
      std::size_t certain = 0, ok = 0;
      for (std::size_t i = 0; i < s.size(); ++i) {
        const float v = l.values.data[i];
        if (v == 0.5f) continue;
        ++certain;
        ok += (v == 1.0f) == (g.data[i] != 0);
      }
      if (certain == 0) continue;
      row.um_acc += static_cast<double>(ok) / certain;
      ++um_images;
    }
    const double n = std::max<std::size_t>(saliency.size(), 1);
    row.naive_x_acc /= n;
    row.naive_1mx_acc /= n;
    row.um_acc = um_images ? row.um_acc / um_images : 0.0;
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "x,naive_x_acc,naive_1mx_acc,um_acc\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.4f,%.6f,%.6f,%.6f\n", r.x, r.naive_x_acc, r.naive_1mx_acc, r.um_acc);
    os << buf;
  }
  return os.str();
}

// ---------------------------------------------------------------- stage plumbing

namespace {

bool is_cam_variant(Variant v) { return v == Variant::baseline || v == Variant::model1 || v == Variant::model2; }
bool refines(Variant v) { return v == Variant::full || v == Variant::model5; }

// The lines of one `[section]` block of the canonical config text.
std::string section_text(const PipelineConfig& c, const std::string& name) {
  std::istringstream in(to_text(c));
  std::string line, out, current;
  while (std::getline(in, line)) {
    if (!line.empty() && line.front() == '[') {
      current = line.substr(1, line.size() - 2);
      continue;
    }
    if (current == name) out += line + "\n";
  }
  return out;
}

std::string drop_lines(std::string text, const std::vector<std::string>& keys) {
  std::istringstream in(text);
  std::string line, out;
  while (std::getline(in, line)) {
    bool skip = false;
    for (const auto& k : keys) skip |= line.rfind(k + " =", 0) == 0;
    if (!skip) out += line + "\n";
  }
  return out;
}

struct Hashes {
  std::string pretrain, ccam, labels, seg, infer;
};

Hashes compute_hashes(const PipelineConfig& c) {
  Hashes h;
  const std::string data = drop_lines(section_text(c, "dataset"), {"eval_root", "eval_split"});
  h.pretrain = stable_hash("pretrain\n" + std::to_string(c.seed) + "\n" + data + section_text(c, "contrastive"));
  const std::string cam_source = c.variant == Variant::baseline ? "naive" : "ccam";
  h.ccam = stable_hash("ccam\n" + h.pretrain + "\n" + cam_source + "\n" +
                       (cam_source == "naive" ? std::string() : section_text(c, "ccam")) + section_text(c, "dataset"));
  h.labels = stable_hash("labels\n" + h.ccam + "\n" + section_text(c, "um"));
  const std::string label_source = c.variant == Variant::model3 ? "filtered" : "um";
  h.seg = stable_hash("seg\n" + h.labels + "\n" + label_source + "\n" +
                      drop_lines(section_text(c, "seg"), {"n_iterations", "export_iteration"}));
  h.infer = stable_hash("infer\n" + (is_cam_variant(c.variant) ? h.labels : h.seg) + "\n" + to_string(c.variant) +
                        "\n" + section_text(c, "seg") + section_text(c, "infer"));
  return h;
}

std::string now_iso() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

json config_json(const PipelineConfig& c) {
  json j;
  std::istringstream in(to_text(c));
  std::string line, section;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.front() == '[') {
      section = line.substr(1, line.size() - 2);
      continue;
    }
    const auto eq = line.find(" = ");
    const std::string key = line.substr(0, eq);
    const std::string raw = line.substr(eq + 3);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;
    }
    if (section.empty()) {
      j[key] = value;
    } else {
      j[section][key] = value;
    }
  }
  return j;
}

class Runner {
 public:
  Runner(const PipelineConfig& config, const RunOptions& options)
      : cfg_(config),
        opt_(options),
        log_(options.log ? *options.log : std::cerr),
        cache_(cache_root(config, options)),
        out_(config.output_dir),
        h_(compute_hashes(config)) {}

  StageRecord run(Stage s) {
    const auto t0 = std::chrono::steady_clock::now();
    StageRecord rec;
    rec.stage = to_string(s);
    log_ << "[" << rec.stage << "] start\n";
    switch (s) {
      case Stage::pretrain: pretrain(rec); break;
      case Stage::ccam: ccam_stage(rec); break;
      case Stage::labels: labels(rec); break;
      case Stage::train: train(rec); break;
      case Stage::refine: refine_stage(rec); break;
      case Stage::infer: infer(rec); break;
      case Stage::evaluate: evaluate(rec); break;
      case Stage::all: break;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log_ << "[" << rec.stage << "] done in " << rec.seconds << " s" << (rec.reused ? " (cached)" : "")
         << (rec.skipped ? " (skipped for this variant)" : "") << "\n";
    return rec;
  }

  std::optional<metrics::MetricReport> report;

 private:
  fs::path stage_dir(const std::string& stage, const std::string& hash) const { return cache_ / (stage + "-" + hash); }
  static bool complete(const fs::path& dir) { return fs::exists(dir / "stage.json"); }

  static void mark_complete(const fs::path& dir, const StageRecord& rec) {
    json j{{"stage", rec.stage}, {"hash", rec.hash}, {"artifacts", rec.artifacts}};
    std::ofstream(dir / "stage.json") << j.dump(2) << "\n";
  }

  static bool reuse(const fs::path& dir, StageRecord& rec) {
    if (!complete(dir)) return false;
    std::ifstream in(dir / "stage.json");
    const json j = json::parse(in);
    if (j.at("hash").get<std::string>() != rec.hash) return false;
    rec.artifacts = j.at("artifacts").get<std::map<std::string, std::string>>();
    for (const auto& [k, p] : rec.artifacts)
      if (!fs::exists(p)) return false;
    rec.reused = true;
    return true;
  }

  std::vector<ImageSample> train_samples() const {
    if (cfg_.dataset.root.empty()) throw ConfigError("dataset.root", "must be set");
    return load_dataset(cfg_.dataset.root, cfg_.dataset.layout, cfg_.dataset.split, {cfg_.dataset.skip_bad});
  }

  bool separate_eval() const { return !cfg_.dataset.eval_root.empty() && cfg_.dataset.eval_root != cfg_.dataset.root; }

  std::vector<ImageSample> eval_samples() const {
    if (!separate_eval()) return train_samples();
    return load_dataset(cfg_.dataset.eval_root, cfg_.dataset.layout, cfg_.dataset.eval_split, {cfg_.dataset.skip_bad});
  }

  // ------------------------------------------------------------ pretrain

  void pretrain(StageRecord& rec) {
    rec.hash = h_.pretrain;
    const fs::path dir = stage_dir("pretrain", rec.hash);
    if (reuse(dir, rec)) return;
    const auto samples = train_samples();
    const auto enc = cfg_.encoder_config();
    for (ContrastiveMethod m : cfg_.contrastive.methods) {
      log_ << "  training " << to_string(m) << " on " << samples.size() << " images\n";
      const auto ck = contrastive::train_contrastive(m, samples, enc, cfg_.contrastive_options(m), dir / to_string(m));
      rec.artifacts[to_string(m) + ".weights"] = ck.weights.string();
      rec.artifacts[to_string(m) + ".metadata"] = ck.metadata.string();
      if (!ck.loss_trace.empty())
        log_ << "    loss " << ck.loss_trace.front() << " -> " << ck.loss_trace.back() << "\n";
    }
    mark_complete(dir, rec);
  }

  // ------------------------------------------------------------ ccam

  std::map<ContrastiveMethod, std::vector<Tensor>> encode_all(const std::vector<ImageSample>& samples) {
    const fs::path pre = stage_dir("pretrain", h_.pretrain);
    if (!complete(pre)) throw MissingPrerequisite("ccam", "contrastive checkpoints (run pretrain first)");
    std::map<ContrastiveMethod, std::vector<Tensor>> out;
    for (ContrastiveMethod m : cfg_.contrastive.methods) {
      auto encoder = contrastive::load_encoder(contrastive::read_checkpoint(pre / to_string(m) / "checkpoint.json"));
      auto& dst = out[m];
      for (const auto& s : samples) dst.push_back(encoder.encode(s.pixels, to_string(m)).values);
    }
    return out;
  }

  std::vector<Tensor> fused(const std::map<ContrastiveMethod, std::vector<Tensor>>& feats, std::size_t count) const {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < count; ++i) {
      std::vector<contrastive::FeatureMap> maps;
      for (const auto& [m, list] : feats) maps.push_back({list[i], to_string(m), cfg_.contrastive.feature_stages});
      out.push_back(contrastive::fuse_features(maps).values);
    }
    return out;
  }

  static std::vector<ccam::Cam> average(const std::vector<std::vector<ccam::Cam>>& sets) {
    std::vector<ccam::Cam> out = sets.front();
    for (std::size_t k = 1; k < sets.size(); ++k)
      for (std::size_t i = 0; i < out.size(); ++i)
        for (std::size_t j = 0; j < out[i].values.size(); ++j) out[i].values.data[j] += sets[k][i].values.data[j];
    for (auto& c : out)
      for (auto& v : c.values.data) v /= static_cast<float>(sets.size());
    return out;
  }

  void ccam_stage(StageRecord& rec) {
    rec.hash = h_.ccam;
    const fs::path dir = stage_dir("ccam", rec.hash);
    if (!complete(stage_dir("pretrain", h_.pretrain)))
      throw MissingPrerequisite("ccam", "contrastive checkpoints (run pretrain first)");
    if (reuse(dir, rec)) return;
    const auto train = train_samples();
    const auto train_feats = encode_all(train);
    std::vector<ImageSample> eval;
    std::map<ContrastiveMethod, std::vector<Tensor>> eval_feats;
    if (separate_eval()) {
      eval = eval_samples();
      eval_feats = encode_all(eval);
    }
    std::vector<ccam::Cam> cams, eval_cams;
    if (cfg_.variant == Variant::baseline) {
      auto it = train_feats.find(ContrastiveMethod::moco_v2);
      if (it == train_feats.end()) throw ConfigError("contrastive.methods", "the baseline variant needs moco_v2");
      for (const auto& f : it->second) cams.push_back(naive_cam(f));
      if (separate_eval())
        for (const auto& f : eval_feats.at(ContrastiveMethod::moco_v2)) eval_cams.push_back(naive_cam(f));
    } else if (cfg_.ccam.mode == CamMode::fused) {
      const auto res = ccam::train_ccam(fused(train_feats, train.size()), cfg_.ccam_options(), dir / "head");
      cams = res.cams;
      rec.artifacts["head.weights"] = res.weights.string();
      rec.artifacts["head.metadata"] = res.metadata.string();
      if (!res.loss_trace.empty())
        log_ << "  ccam loss " << res.loss_trace.front() << " -> " << res.loss_trace.back() << "\n";
      if (separate_eval()) eval_cams = ccam::apply_ccam(res.metadata, fused(eval_feats, eval.size()));
    } else {
      std::vector<std::vector<ccam::Cam>> per, per_eval;
      for (const auto& [m, list] : train_feats) {
        const fs::path head_dir = dir / ("head_" + to_string(m));
        const auto res = ccam::train_ccam(list, cfg_.ccam_options(), head_dir);
        per.push_back(res.cams);
        rec.artifacts["head_" + to_string(m) + ".metadata"] = res.metadata.string();
        if (separate_eval()) per_eval.push_back(ccam::apply_ccam(res.metadata, eval_feats.at(m)));
      }
      cams = average(per);
      if (separate_eval()) eval_cams = average(per_eval);
    }
    fs::create_directories(dir / "cams");
    json index = json::object();
    for (std::size_t i = 0; i < train.size(); ++i) {
      const fs::path p = dir / "cams" / (train[i].id + ".png");
      ccam::write_cam_png(p, cams[i]);
      index[train[i].id] = p.string();
    }
    std::ofstream(dir / "cams.json") << index.dump(2) << "\n";
    rec.artifacts["cams"] = (dir / "cams").string();
    rec.artifacts["cam_index"] = (dir / "cams.json").string();
    if (separate_eval()) {
      fs::create_directories(dir / "eval_cams");
      for (std::size_t i = 0; i < eval.size(); ++i)
        ccam::write_cam_png(dir / "eval_cams" / (eval[i].id + ".png"), eval_cams[i]);
      rec.artifacts["eval_cams"] = (dir / "eval_cams").string();
    }
    mark_complete(dir, rec);
  }

  // ------------------------------------------------------------ labels

  fs::path cam_dir(bool for_eval) const {
    const fs::path dir = stage_dir("ccam", h_.ccam);
    return dir / (for_eval && separate_eval() ? "eval_cams" : "cams");
  }

  std::vector<FloatMap> read_saliency(const std::vector<ImageSample>& samples, bool for_eval, const char* stage) const {
    if (!complete(stage_dir("ccam", h_.ccam))) throw MissingPrerequisite(stage, "CAMs (run the ccam stage first)");
    std::vector<FloatMap> out;
    for (const auto& s : samples) {
      const fs::path p = cam_dir(for_eval) / (s.id + ".png");
      if (!fs::exists(p)) throw MissingPrerequisite(stage, "CAM for '" + s.id + "'");
      out.push_back(ccam::cam_to_saliency(ccam::read_cam_png(p)));
    }
    return out;
  }

  void labels(StageRecord& rec) {
    rec.hash = h_.labels;
    const fs::path dir = stage_dir("labels", rec.hash);
    if (!complete(stage_dir("ccam", h_.ccam))) throw MissingPrerequisite("labels", "CAMs (run the ccam stage first)");
    const auto samples = train_samples();
    const auto saliency = read_saliency(samples, false, "labels");
    if (!reuse(dir, rec)) {
      const auto cfg = cfg_.um_config();
      fs::create_directories(dir / "labels");
      fs::create_directories(dir / "filtered");
      json excluded = json::object();
      json filtered_excluded = json::object();
      int n_excl = 0;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto l = um::make_pseudo_label(saliency[i], cfg);
        if (!l.excluded) um::write_trilabel_png(dir / "labels" / (samples[i].id + ".png"), l);
        excluded[samples[i].id] = l.excluded;
        n_excl += l.excluded;
        const auto f = centrality_filter(saliency[i], cfg);
        write_mask_png(dir / "filtered" / (samples[i].id + ".png"), f ? *f : Mask(saliency[i].rows, saliency[i].cols));
        filtered_excluded[samples[i].id] = !f.has_value();
      }
      std::ofstream(dir / "labels.json") << json{{"excluded", excluded}, {"filtered_excluded", filtered_excluded}}.dump(2)
                                         << "\n";
      log_ << "  " << n_excl << " of " << samples.size() << " labels excluded\n";
      rec.artifacts["labels"] = (dir / "labels").string();
      rec.artifacts["filtered"] = (dir / "filtered").string();
      rec.artifacts["index"] = (dir / "labels.json").string();
      mark_complete(dir, rec);
    }
    // diagnostic sweep against ground truth when the training images carry masks
    std::vector<FloatMap> s;
    std::vector<Mask> g;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].gt_mask) {
        s.push_back(saliency[i]);
        g.push_back(*samples[i].gt_mask);
      }
    if (!g.empty()) {
      std::vector<double> grid;
      for (int k = 1; k <= 9; ++k) grid.push_back(0.05 * k);
      const fs::path csv = out_ / "threshold_sweep.csv";
      fs::create_directories(out_);
      std::ofstream(csv) << sweep_csv(threshold_sweep(s, g, grid, cfg_.um_config()));
      rec.artifacts["threshold_sweep"] = csv.string();
    }
  }

  std::vector<um::TriLabel> read_labels(const std::vector<ImageSample>& samples, const char* stage) const {
    const fs::path dir = stage_dir("labels", h_.labels);
    if (!complete(dir)) throw MissingPrerequisite(stage, "pseudo-labels (run the labels stage first)");
    std::ifstream in(dir / "labels.json");
    const json index = json::parse(in);
    std::vector<um::TriLabel> out;
    const bool filtered = cfg_.variant == Variant::model3;
    for (const auto& s : samples) {
      if (filtered) {
        const Mask m = read_mask(dir / "filtered" / (s.id + ".png"));
        um::TriLabel l{FloatMap(m.rows, m.cols), index.at("filtered_excluded").at(s.id).get<bool>()};
        for (std::size_t i = 0; i < m.size(); ++i) l.values.data[i] = m.data[i] ? 1.0f : 0.0f;
        out.push_back(std::move(l));
      } else {
        if (index.at("excluded").at(s.id).get<bool>()) {
          out.push_back({FloatMap(kImageSize, kImageSize, 0.0f), true});
        } else {
          out.push_back(um::read_trilabel_png(dir / "labels" / (s.id + ".png")));
        }
      }
    }
    return out;
  }

  // ------------------------------------------------------------ train / refine

  seg::SegModel build_model(StageRecord& rec) const {
    seg::SegModel model(cfg_.seg_model_config(), cfg_.seed * 31 + 13);
    const auto sc = cfg_.seg_model_config();
    const bool has_v2 = std::find(cfg_.contrastive.methods.begin(), cfg_.contrastive.methods.end(),
                                  ContrastiveMethod::moco_v2) != cfg_.contrastive.methods.end();
    const bool compatible = sc.backbone.base_width == cfg_.contrastive.base_width &&
                            std::equal(cfg_.seg.blocks.begin(), cfg_.seg.blocks.end(), cfg_.contrastive.blocks.begin());
    const fs::path w = stage_dir("pretrain", h_.pretrain) / "moco_v2" / "weights.bin";
    if (cfg_.seg.init_from_contrastive && has_v2 && compatible && fs::exists(w)) {
      model.load_encoder(w);
      rec.artifacts["encoder_init"] = w.string();
    }
    return model;
  }

  void run_schedule(StageRecord& rec, const seg::RefinementSchedule& schedule, const char* stage) {
    rec.hash = h_.seg;
    const auto samples = train_samples();
    const auto initial = read_labels(samples, stage);
    seg::SegModel model = build_model(rec);
    const fs::path dir = stage_dir("seg", h_.seg);
    std::vector<std::string> rows;
    bool all_resumed = true;
    auto on_iter = [&](const seg::IterationRecord& r, const std::vector<um::TriLabel>& labels,
                       const std::vector<seg::Prediction>& preds) {
      std::map<std::string, Mask> pm, lm, gm;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        if (!samples[i].gt_mask) continue;
        gm[samples[i].id] = *samples[i].gt_mask;
        pm[samples[i].id] = seg::infer(preds[i], cfg_.infer.threshold);
        lm[samples[i].id] = seg::label_to_mask(labels[i]);
      }
      char buf[160];
      double ld = 0, pd = 0;
      if (!gm.empty()) {
        ld = metrics::evaluate_dataset(lm, gm).averages.dic;
        pd = metrics::evaluate_dataset(pm, gm).averages.dic;
      }
      std::snprintf(buf, sizeof(buf), "%d,%d,%.6f,%.6f,%.6f", r.iteration, r.excluded_count, ld, pd,
                    r.loss_trace.empty() ? 0.0 : r.loss_trace.back());
      rows.emplace_back(buf);
      all_resumed = all_resumed && r.resumed;
      log_ << "  iteration " << r.iteration << (r.resumed ? " (checkpoint)" : "") << ": excluded " << r.excluded_count
           << ", label dice " << ld << ", prediction dice " << pd << "\n";
      rec.artifacts["iter_" + std::to_string(r.iteration)] = r.checkpoint.string();
    };
    seg::refine(model, samples, initial, schedule, cfg_.seg_train_options(), cfg_.um_config(), dir, h_.seg, on_iter);
    fs::create_directories(out_);
    std::ofstream csv(out_ / "iterations.csv");
    csv << "iteration,excluded,label_dice,prediction_dice,final_loss\n";
    for (const auto& r : rows) csv << r << "\n";
    rec.artifacts["iterations"] = (out_ / "iterations.csv").string();
    rec.reused = all_resumed;
  }

  void train(StageRecord& rec) {
    if (is_cam_variant(cfg_.variant)) {
      rec.skipped = true;
      return;
    }
    run_schedule(rec, {0, cfg_.seg.epochs_per_iteration, 0}, "train");
  }

  void refine_stage(StageRecord& rec) {
    if (!refines(cfg_.variant)) {
      rec.skipped = true;
      return;
    }
    const fs::path first = stage_dir("seg", h_.seg) / "iter_0" / "model.bin";
    if (!fs::exists(first)) throw MissingPrerequisite("refine", "iteration 0 checkpoint (run the train stage first)");
    run_schedule(rec, cfg_.schedule(), "refine");
  }

  // ------------------------------------------------------------ infer / evaluate

  void infer(StageRecord& rec) {
    rec.hash = h_.infer;
    const fs::path dir = stage_dir("infer", rec.hash);
    if (reuse(dir, rec)) return;
    const auto samples = eval_samples();
    std::vector<Mask> masks;
    if (is_cam_variant(cfg_.variant)) {
      const auto saliency = read_saliency(samples, true, "infer");
      for (const auto& s : saliency) {
        if (cfg_.variant == Variant::model2) {
          const auto f = centrality_filter(s, cfg_.um_config(), cfg_.infer.threshold);
          masks.push_back(f ? *f : Mask(s.rows, s.cols));
        } else {
          masks.push_back(seg::infer(s, cfg_.infer.threshold));
        }
      }
    } else {
      const int it = refines(cfg_.variant) ? cfg_.seg.export_iteration : 0;
      const fs::path ck = stage_dir("seg", h_.seg) / ("iter_" + std::to_string(it)) / "model.bin";
      if (!fs::exists(ck))
        throw MissingPrerequisite("infer", "segmentation checkpoint for iteration " + std::to_string(it) +
                                               " (run train/refine first)");
      seg::SegModel model(cfg_.seg_model_config(), 0);
      nn::load_weights(model, ck);
      rec.artifacts["model"] = ck.string();
      for (const auto& p : seg::predict_all(model, samples, cfg_.seg.batch)) masks.push_back(seg::infer(p, cfg_.infer.threshold));
    }
    fs::create_directories(dir / "masks");
    for (std::size_t i = 0; i < samples.size(); ++i) write_mask_png(dir / "masks" / (samples[i].id + ".png"), masks[i]);
    rec.artifacts["masks"] = (dir / "masks").string();
    mark_complete(dir, rec);
  }

  void evaluate(StageRecord& rec) {
    rec.hash = stable_hash(h_.infer + (opt_.pooled ? "pooled" : "mean"));
    const fs::path pred_dir = stage_dir("infer", h_.infer) / "masks";
    if (!complete(stage_dir("infer", h_.infer))) throw MissingPrerequisite("evaluate", "predicted masks (run infer first)");
    const auto samples = eval_samples();
    std::map<std::string, Mask> preds, gts;
    std::map<std::string, const ImageSample*> by_id;
    for (const auto& s : samples) {
      if (!s.gt_mask) continue;
      gts[s.id] = *s.gt_mask;
      by_id[s.id] = &s;
      const fs::path p = pred_dir / (s.id + ".png");
      if (fs::exists(p)) preds[s.id] = read_mask(p);
    }
    if (gts.empty()) throw MissingPrerequisite("evaluate", "ground-truth masks for the evaluation images");
    auto rep = metrics::evaluate_dataset(preds, gts, opt_.pooled);
    fs::create_directories(out_ / "overlays");
    rep.write_csv(out_ / "metrics.csv");
    std::ofstream(out_ / "table.txt") << rep.to_table(to_string(cfg_.variant));
    for (const auto& [id, gt] : gts)
      write_rgb_png(out_ / "overlays" / (id + ".png"), overlay(preds.at(id), gt, by_id.at(id)->pixels));
    log_ << rep.to_table(to_string(cfg_.variant));
    rec.artifacts["metrics"] = (out_ / "metrics.csv").string();
    rec.artifacts["table"] = (out_ / "table.txt").string();
    rec.artifacts["overlays"] = (out_ / "overlays").string();
    report = std::move(rep);
  }

  const PipelineConfig& cfg_;
  RunOptions opt_;
  std::ostream& log_;
  fs::path cache_;
  fs::path out_;
  Hashes h_;
};

void append_manifest(const fs::path& path, const PipelineConfig& config, Stage stage,
                     const std::vector<StageRecord>& records) {
  json manifest = {{"runs", json::array()}};
  if (fs::exists(path)) {
    std::ifstream in(path);
    manifest = json::parse(in);
  }
  json stages = json::array();
  for (const auto& r : records)
    stages.push_back({{"stage", r.stage},
                      {"hash", r.hash},
                      {"seconds", r.seconds},
                      {"reused", r.reused},
                      {"skipped", r.skipped},
                      {"artifacts", r.artifacts}});
  manifest["runs"].push_back({{"version", USLSEG_VERSION},
                              {"started", now_iso()},
                              {"command", to_string(stage)},
                              {"config", config_json(config)},
                              {"stages", stages}});
  fs::create_directories(path.parent_path());
  std::ofstream(path) << manifest.dump(2) << "\n";
}

}  // namespace

RunResult run(Stage stage, const PipelineConfig& config, const RunOptions& options) {
  config.validate();
  fs::create_directories(config.output_dir);
  save_config(config, fs::path(config.output_dir) / "config.txt");
  Runner runner(config, options);
  RunResult result;
  result.manifest = fs::path(config.output_dir) / "manifest.json";
  const auto t0 = std::chrono::steady_clock::now();
  if (stage == Stage::all) {
    for (Stage s : {Stage::pretrain, Stage::ccam, Stage::labels, Stage::train, Stage::refine, Stage::infer,
                    Stage::evaluate})
      result.stages.push_back(runner.run(s));
    StageRecord total;
    total.stage = "all";
    total.hash = compute_hashes(config).infer;
    total.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    total.artifacts["config"] = (fs::path(config.output_dir) / "config.txt").string();
    result.stages.push_back(total);
  } else {
    result.stages.push_back(runner.run(stage));
  }
  result.report = runner.report;
  append_manifest(result.manifest, config, stage, result.stages);
  return result;
}

}  // namespace uslseg
