#include "uslseg/config.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "uslseg/errors.hpp"

namespace uslseg {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::baseline: return "baseline";
    case Variant::model1: return "model1";
    case Variant::model2: return "model2";
    case Variant::model3: return "model3";
    case Variant::model4: return "model4";
    case Variant::model5: return "model5";
  }
  return "full";
}

Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::full, Variant::baseline, Variant::model1, Variant::model2, Variant::model3,
                    Variant::model4, Variant::model5})
    if (to_string(v) == s) return v;
  throw ConfigError("variant", "expected full|baseline|model1..model5, got '" + s + "'");
}

std::string to_string(CamMode m) { return m == CamMode::fused ? "fused" : "per_method"; }

CamMode parse_cam_mode(const std::string& s) {
  if (s == "fused") return CamMode::fused;
  if (s == "per_method") return CamMode::per_method;
  throw ConfigError("ccam.mode", "expected fused|per_method, got '" + s + "'");
}

// ---------------------------------------------------------------- scalars

namespace {

std::string fmt_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, end);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// Removes a trailing comment that is not inside a quoted string.
std::string strip_comment(const std::string& line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_str && c == '\\') {
      ++i;
    } else if (c == '"') {
      in_str = !in_str;
    } else if (c == '#' && !in_str) {
      return line.substr(0, i);
    }
  }
  return line;
}

std::string unquote(const std::string& field, const std::string& raw) {
  const std::string v = trim(raw);
  if (v.size() >= 2 && v.front() == '"' && v.back() == '"') {
    std::string out;
    for (std::size_t i = 1; i + 1 < v.size(); ++i) {
      if (v[i] == '\\' && i + 2 < v.size()) ++i;
      out += v[i];
    }
    return out;
  }
  if (!v.empty() && v.front() == '"') throw ConfigError(field, "unterminated string");
  return v;
}

double as_double(const std::string& field, const std::string& raw) {
  const std::string v = trim(raw);
  double out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    throw ConfigError(field, "expected a number, got '" + v + "'");
  return out;
}

template <class Int>
Int as_int(const std::string& field, const std::string& raw) {
  const std::string v = trim(raw);
  Int out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || v.empty())
    throw ConfigError(field, "expected an integer, got '" + v + "'");
  return out;
}

bool as_bool(const std::string& field, const std::string& raw) {
  const std::string v = trim(raw);
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError(field, "expected true or false, got '" + v + "'");
}

std::vector<std::string> as_list(const std::string& field, const std::string& raw) {
  const std::string v = trim(raw);
  if (v.size() < 2 || v.front() != '[' || v.back() != ']') throw ConfigError(field, "expected a [list]");
  std::vector<std::string> items;
  const std::string body = trim(v.substr(1, v.size() - 2));
  if (body.empty()) return items;
  std::stringstream ss(body);
  std::string item;
  while (std::getline(ss, item, ',')) items.push_back(unquote(field, item));
  return items;
}

std::vector<int> as_int_list(const std::string& field, const std::string& raw) {
  std::vector<int> out;
  for (const auto& s : as_list(field, raw)) out.push_back(as_int<int>(field, s));
  return out;
}

template <class F>
auto rethrow_as(const std::string& field, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    if (e.field() == field) throw;
    throw ConfigError(field, e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------- parse / print

PipelineConfig parse_config(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::string section;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(strip_comment(line));
    if (t.empty()) continue;
    if (t.front() == '[' && t.back() == ']' && t.find('=') == std::string::npos) {
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError(section.empty() ? "<top>" : section, "line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(t.substr(0, eq));
    const std::string path = section.empty() ? key : section + "." + key;
    if (kv.count(path)) throw ConfigError(path, "duplicate key");
    kv[path] = trim(t.substr(eq + 1));
  }

  PipelineConfig c;
  for (const auto& [path, raw] : kv) {
    auto str = [&] { return unquote(path, raw); };
    auto dbl = [&] { return as_double(path, raw); };
    auto i32 = [&] { return as_int<int>(path, raw); };
    auto b = [&] { return as_bool(path, raw); };
    if (path == "seed") c.seed = as_int<std::uint64_t>(path, raw);
    else if (path == "output_dir") c.output_dir = str();
    else if (path == "variant") c.variant = rethrow_as(path, [&] { return parse_variant(str()); });
    else if (path == "dataset.root") c.dataset.root = str();
    else if (path == "dataset.layout") c.dataset.layout = rethrow_as(path, [&] { return parse_layout(str()); });
    else if (path == "dataset.split") c.dataset.split = rethrow_as(path, [&] { return parse_split(str()); });
    else if (path == "dataset.eval_root") c.dataset.eval_root = str();
    else if (path == "dataset.eval_split") c.dataset.eval_split = rethrow_as(path, [&] { return parse_split(str()); });
    else if (path == "dataset.skip_bad") c.dataset.skip_bad = b();
    else if (path == "contrastive.methods") {
      c.contrastive.methods.clear();
      for (const auto& m : as_list(path, raw))
        c.contrastive.methods.push_back(rethrow_as(path, [&] { return parse_method(m); }));
    } else if (path == "contrastive.epochs") c.contrastive.epochs = i32();
    else if (path == "contrastive.batch") c.contrastive.batch = i32();
    else if (path == "contrastive.tau") c.contrastive.tau = dbl();
    else if (path == "contrastive.queue") c.contrastive.queue = i32();
    else if (path == "contrastive.momentum") c.contrastive.momentum = dbl();
    else if (path == "contrastive.embedding_dim") c.contrastive.embedding_dim = i32();
    else if (path == "contrastive.base_lr") c.contrastive.base_lr = dbl();
    else if (path == "contrastive.base_width") c.contrastive.base_width = i32();
    else if (path == "contrastive.blocks") c.contrastive.blocks = as_int_list(path, raw);
    else if (path == "contrastive.feature_stages") c.contrastive.feature_stages = as_int_list(path, raw);
    else if (path == "ccam.epochs") c.ccam.epochs = i32();
    else if (path == "ccam.batch") c.ccam.batch = i32();
    else if (path == "ccam.proj_channels") c.ccam.proj_channels = i32();
    else if (path == "ccam.lr") c.ccam.lr = dbl();
    else if (path == "ccam.fg_pull") c.ccam.fg_pull = dbl();
    else if (path == "ccam.bg_pull") c.ccam.bg_pull = dbl();
    else if (path == "ccam.push") c.ccam.push = dbl();
    else if (path == "ccam.separation") c.ccam.separation = dbl();
    else if (path == "ccam.mode") c.ccam.mode = rethrow_as(path, [&] { return parse_cam_mode(str()); });
    else if (path == "um.lo") c.um.lo = dbl();
    else if (path == "um.hi") c.um.hi = dbl();
    else if (path == "um.alpha") c.um.alpha = dbl();
    else if (path == "um.connectivity") c.um.connectivity = i32();
    else if (path == "um.comparator") c.um.comparator = str();
    else if (path == "um.weight_mode") c.um.weight_mode = str();
    else if (path == "um.far_fraction") c.um.far_fraction = dbl();
    else if (path == "seg.epochs_per_iteration") c.seg.epochs_per_iteration = i32();
    else if (path == "seg.n_iterations") c.seg.n_iterations = i32();
    else if (path == "seg.export_iteration") c.seg.export_iteration = i32();
    else if (path == "seg.batch") c.seg.batch = i32();
    else if (path == "seg.lr") c.seg.lr = dbl();
    else if (path == "seg.momentum") c.seg.momentum = dbl();
    else if (path == "seg.weight_decay") c.seg.weight_decay = dbl();
    else if (path == "seg.poly_power") c.seg.poly_power = dbl();
    else if (path == "seg.flip") c.seg.flip = b();
    else if (path == "seg.base_width") c.seg.base_width = i32();
    else if (path == "seg.blocks") c.seg.blocks = as_int_list(path, raw);
    else if (path == "seg.init_from_contrastive") c.seg.init_from_contrastive = b();
    else if (path == "infer.threshold") c.infer.threshold = dbl();
    else throw ConfigError(path, "unknown key");
  }
  c.validate();
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<file>", "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_text(const PipelineConfig& c) {
  auto ints = [](const std::vector<int>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
    return s + "]";
  };
  auto b = [](bool v) { return v ? "true" : "false"; };
  std::ostringstream os;
  os << "seed = " << c.seed << "\n";
  os << "output_dir = " << quote(c.output_dir) << "\n";
  os << "variant = " << quote(to_string(c.variant)) << "\n";
  os << "\n[dataset]\n";
  os << "root = " << quote(c.dataset.root) << "\n";
  os << "layout = " << quote(to_string(c.dataset.layout)) << "\n";
  os << "split = " << quote(to_string(c.dataset.split)) << "\n";
  os << "eval_root = " << quote(c.dataset.eval_root) << "\n";
  os << "eval_split = " << quote(to_string(c.dataset.eval_split)) << "\n";
  os << "skip_bad = " << b(c.dataset.skip_bad) << "\n";
  os << "\n[contrastive]\n";
  os << "methods = [";
  for (std::size_t i = 0; i < c.contrastive.methods.size(); ++i)
    os << (i ? ", " : "") << quote(to_string(c.contrastive.methods[i]));
  os << "]\n";
  os << "epochs = " << c.contrastive.epochs << "\n";
  os << "batch = " << c.contrastive.batch << "\n";
  os << "tau = " << fmt_double(c.contrastive.tau) << "\n";
  os << "queue = " << c.contrastive.queue << "\n";
  os << "momentum = " << fmt_double(c.contrastive.momentum) << "\n";
  os << "embedding_dim = " << c.contrastive.embedding_dim << "\n";
  os << "base_lr = " << fmt_double(c.contrastive.base_lr) << "\n";
  os << "base_width = " << c.contrastive.base_width << "\n";
  os << "blocks = " << ints(c.contrastive.blocks) << "\n";
  os << "feature_stages = " << ints(c.contrastive.feature_stages) << "\n";
  os << "\n[ccam]\n";
  os << "epochs = " << c.ccam.epochs << "\n";
  os << "batch = " << c.ccam.batch << "\n";
  os << "proj_channels = " << c.ccam.proj_channels << "\n";
  os << "lr = " << fmt_double(c.ccam.lr) << "\n";
  os << "fg_pull = " << fmt_double(c.ccam.fg_pull) << "\n";
  os << "bg_pull = " << fmt_double(c.ccam.bg_pull) << "\n";
  os << "push = " << fmt_double(c.ccam.push) << "\n";
  os << "separation = " << fmt_double(c.ccam.separation) << "\n";
  os << "mode = " << quote(to_string(c.ccam.mode)) << "\n";
  os << "\n[um]\n";
  os << "lo = " << fmt_double(c.um.lo) << "\n";
  os << "hi = " << fmt_double(c.um.hi) << "\n";
  os << "alpha = " << fmt_double(c.um.alpha) << "\n";
  os << "connectivity = " << c.um.connectivity << "\n";
  os << "comparator = " << quote(c.um.comparator) << "\n";
  os << "weight_mode = " << quote(c.um.weight_mode) << "\n";
  os << "far_fraction = " << fmt_double(c.um.far_fraction) << "\n";
  os << "\n[seg]\n";
  os << "epochs_per_iteration = " << c.seg.epochs_per_iteration << "\n";
  os << "n_iterations = " << c.seg.n_iterations << "\n";
  os << "export_iteration = " << c.seg.export_iteration << "\n";
  os << "batch = " << c.seg.batch << "\n";
  os << "lr = " << fmt_double(c.seg.lr) << "\n";
  os << "momentum = " << fmt_double(c.seg.momentum) << "\n";
  os << "weight_decay = " << fmt_double(c.seg.weight_decay) << "\n";
  os << "poly_power = " << fmt_double(c.seg.poly_power) << "\n";
  os << "flip = " << b(c.seg.flip) << "\n";
  os << "base_width = " << c.seg.base_width << "\n";
  os << "blocks = " << ints(c.seg.blocks) << "\n";
  os << "init_from_contrastive = " << b(c.seg.init_from_contrastive) << "\n";
  os << "\n[infer]\n";
  os << "threshold = " << fmt_double(c.infer.threshold) << "\n";
  return os.str();
}

void save_config(const PipelineConfig& config, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << to_text(config);
}

// ---------------------------------------------------------------- validation

void PipelineConfig::validate() const {
  auto positive = [](const char* field, double v) {
    if (!(v > 0)) throw ConfigError(field, "must be positive");
  };
  if (contrastive.methods.empty()) throw ConfigError("contrastive.methods", "at least one method is required");
  for (std::size_t i = 0; i < contrastive.methods.size(); ++i)
    for (std::size_t j = i + 1; j < contrastive.methods.size(); ++j)
      if (contrastive.methods[i] == contrastive.methods[j]) throw ConfigError("contrastive.methods", "duplicate method");
  if (contrastive.epochs < 0) throw ConfigError("contrastive.epochs", "must be >= 0");
  positive("contrastive.batch", contrastive.batch);
  if (contrastive.batch < 2) throw ConfigError("contrastive.batch", "must be at least 2");
  positive("contrastive.tau", contrastive.tau);
  positive("contrastive.queue", contrastive.queue);
  if (!(contrastive.momentum >= 0 && contrastive.momentum < 1)) throw ConfigError("contrastive.momentum", "must lie in [0,1)");
  positive("contrastive.embedding_dim", contrastive.embedding_dim);
  positive("contrastive.base_lr", contrastive.base_lr);
  positive("contrastive.base_width", contrastive.base_width);
  if (contrastive.blocks.size() != 4) throw ConfigError("contrastive.blocks", "needs four stage depths");
  for (int b : contrastive.blocks)
    if (b < 1) throw ConfigError("contrastive.blocks", "depths must be >= 1");
  if (contrastive.feature_stages.empty()) throw ConfigError("contrastive.feature_stages", "must not be empty");
  for (int s : contrastive.feature_stages)
    if (s < 2 || s > 5) throw ConfigError("contrastive.feature_stages", "stages must lie in [2,5]");
  if (ccam.epochs < 0) throw ConfigError("ccam.epochs", "must be >= 0");
  positive("ccam.batch", ccam.batch);
  positive("ccam.proj_channels", ccam.proj_channels);
  positive("ccam.lr", ccam.lr);
  for (auto [f, v] : {std::pair{"ccam.fg_pull", ccam.fg_pull}, std::pair{"ccam.bg_pull", ccam.bg_pull},
                      std::pair{"ccam.push", ccam.push}, std::pair{"ccam.separation", ccam.separation}})
    if (!(v >= 0)) throw ConfigError(f, "must be >= 0");
  if (!(um.lo >= 0 && um.lo < um.hi && um.hi <= 1)) throw ConfigError("um.lo", "need 0 <= lo < hi <= 1");
  if (!(um.alpha >= 0)) throw ConfigError("um.alpha", "must be >= 0");
  if (um.connectivity != 4 && um.connectivity != 8) throw ConfigError("um.connectivity", "must be 4 or 8");
  if (um.comparator != "min" && um.comparator != "max") throw ConfigError("um.comparator", "expected min|max");
  if (um.weight_mode != "mean" && um.weight_mode != "sum") throw ConfigError("um.weight_mode", "expected mean|sum");
  if (!(um.far_fraction > 0)) throw ConfigError("um.far_fraction", "must be positive");
  if (seg.epochs_per_iteration < 1) throw ConfigError("seg.epochs_per_iteration", "must be >= 1");
  if (seg.n_iterations < 0) throw ConfigError("seg.n_iterations", "must be >= 0");
  if (seg.export_iteration < 0 || seg.export_iteration > seg.n_iterations)
    throw ConfigError("seg.export_iteration", "must lie in [0, n_iterations]");
  positive("seg.batch", seg.batch);
  positive("seg.lr", seg.lr);
  if (!(seg.momentum >= 0 && seg.momentum < 1)) throw ConfigError("seg.momentum", "must lie in [0,1)");
  if (!(seg.weight_decay >= 0)) throw ConfigError("seg.weight_decay", "must be >= 0");
  positive("seg.poly_power", seg.poly_power);
  positive("seg.base_width", seg.base_width);
  if (seg.blocks.size() != 3) throw ConfigError("seg.blocks", "needs three stage depths");
  for (int b : seg.blocks)
    if (b < 1) throw ConfigError("seg.blocks", "depths must be >= 1");
  if (!(infer.threshold > 0 && infer.threshold < 1)) throw ConfigError("infer.threshold", "must lie in (0,1)");
  if (output_dir.empty()) throw ConfigError("output_dir", "must not be empty");
}

// ---------------------------------------------------------------- module options

um::UmConfig PipelineConfig::um_config() const {
  um::UmConfig u;
  u.lo = um.lo;
  u.hi = um.hi;
  u.alpha = um.alpha;
  u.connectivity = um.connectivity == 8 ? um::Connectivity::eight : um::Connectivity::four;
  u.comparator = um.comparator == "max" ? um::Comparator::max : um::Comparator::min;
  u.weight_mode = um.weight_mode == "sum" ? um::WeightMode::sum : um::WeightMode::mean;
  u.far_fraction = um.far_fraction;
  return u;
}

contrastive::EncoderConfig PipelineConfig::encoder_config() const {
  contrastive::EncoderConfig e;
  e.backbone.base_width = contrastive.base_width;
  std::copy(contrastive.blocks.begin(), contrastive.blocks.end(), e.backbone.blocks.begin());
  e.backbone.final_stage_stride = 1;
  e.backbone.last_stage = 5;
  e.feature_stages = contrastive.feature_stages;
  return e;
}

contrastive::ContrastiveOptions PipelineConfig::contrastive_options(ContrastiveMethod method) const {
  contrastive::ContrastiveOptions o;
  o.epochs = contrastive.epochs;
  o.batch_size = contrastive.batch;
  o.tau = contrastive.tau;
  o.queue_capacity = static_cast<std::size_t>(contrastive.queue);
  o.momentum = contrastive.momentum;
  o.embedding_dim = contrastive.embedding_dim;
  o.base_lr = contrastive.base_lr;
  o.seed = seed * 31 + static_cast<std::uint64_t>(method) + 1;
  return o;
}

ccam::CcamOptions PipelineConfig::ccam_options() const {
  ccam::CcamOptions o;
  o.epochs = ccam.epochs;
  o.batch_size = ccam.batch;
  o.proj_channels = ccam.proj_channels;
  o.lr = ccam.lr;
  o.weights = {ccam.fg_pull, ccam.bg_pull, ccam.push, ccam.separation};
  o.seed = seed * 31 + 7;
  return o;
}

seg::SegConfig PipelineConfig::seg_model_config() const {
  seg::SegConfig s;
  s.backbone.base_width = seg.base_width;
  s.backbone.blocks = {seg.blocks[0], seg.blocks[1], seg.blocks[2], 1};
  s.backbone.final_stage_stride = 1;
  s.backbone.last_stage = 4;
  return s;
}

seg::SegTrainOptions PipelineConfig::seg_train_options() const {
  seg::SegTrainOptions o;
  o.epochs = seg.epochs_per_iteration;
  o.batch_size = seg.batch;
  o.lr = seg.lr;
  o.momentum = seg.momentum;
  o.weight_decay = seg.weight_decay;
  o.poly_power = seg.poly_power;
  o.flip = seg.flip;
  o.seed = seed * 31 + 11;
  return o;
}

seg::RefinementSchedule PipelineConfig::schedule() const {
  return {seg.n_iterations, seg.epochs_per_iteration, seg.export_iteration};
}

// ---------------------------------------------------------------- presets

PipelineConfig apply_preset(PipelineConfig c, Variant variant) {
  c.variant = variant;
  if (variant == Variant::model3 || variant == Variant::model4) {
    c.seg.n_iterations = 0;
    c.seg.export_iteration = 0;
  }
  return c;
}

PipelineConfig toy_config(const std::string& dataset_root, const std::string& output_dir) {
  PipelineConfig c;
  c.dataset.root = dataset_root;
  c.dataset.eval_root = "";
  c.output_dir = output_dir;
  c.contrastive.epochs = 5;
  c.contrastive.batch = 16;
  c.contrastive.queue = 256;
  c.contrastive.base_width = 16;
  c.contrastive.blocks = {1, 1, 1, 1};
  c.ccam.epochs = 5;
  c.ccam.batch = 8;
  c.seg.epochs_per_iteration = 20;
  c.seg.n_iterations = 2;
  c.seg.export_iteration = 2;
  c.seg.base_width = 16;
  c.seg.blocks = {1, 1, 1};
  return c;
}

std::string stable_hash(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace uslseg
