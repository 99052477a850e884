#include "uslseg/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "uslseg/errors.hpp"

namespace uslseg::metrics {

ConfusionCounts confusion(const Mask& pred, const Mask& gt) {
  if (!pred.same_shape(gt))
    throw ShapeError("confusion: prediction " + std::to_string(pred.rows) + "x" + std::to_string(pred.cols) +
                     " vs ground truth " + std::to_string(gt.rows) + "x" + std::to_string(gt.cols));
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const auto p = pred.data[i], g = gt.data[i];
    if (p > 1 || g > 1) throw NonBinaryInput("confusion: mask values must be 0 or 1");
    if (p && g) {
      ++c.tp;
    } else if (!p && !g) {
      ++c.tn;
    } else if (p) {
      ++c.fp;
    } else {
      ++c.fn;
    }
  }
  return c;
}

Scores compute_metrics(const ConfusionCounts& c) {
  const auto tp = static_cast<double>(c.tp), tn = static_cast<double>(c.tn);
  const auto fp = static_cast<double>(c.fp), fn = static_cast<double>(c.fn);
  Scores s;
  const double total = tp + tn + fp + fn;
  s.acc = total > 0 ? (tp + tn) / total : 1.0;
  const bool both_empty = c.tp + c.fp + c.fn == 0;
  s.dic = both_empty ? 1.0 : 2 * tp / (2 * tp + fp + fn);
  s.jac = both_empty ? 1.0 : tp / (tp + fp + fn);
  s.sen = c.tp + c.fn == 0 ? 1.0 : tp / (tp + fn);
  s.spe = c.tn + c.fp == 0 ? 1.0 : tn / (tn + fp);
  s.recall = s.sen;
  if (c.tp + c.fp == 0) {
    s.precision = c.fn == 0 ? 1.0 : 0.0;
  } else {
    s.precision = tp / (tp + fp);
  }
  return s;
}

MetricReport evaluate_dataset(const std::map<std::string, Mask>& preds, const std::map<std::string, Mask>& gts,
                              bool pooled) {
  MetricReport report;
  report.pooled = pooled;
  ConfusionCounts pool;
  Scores sum;
  for (const auto& [id, gt] : gts) {
    auto it = preds.find(id);
    if (it == preds.end()) throw MissingPrediction(id);
    ImageScores row{id, confusion(it->second, gt), {}};
    row.scores = compute_metrics(row.counts);
    pool += row.counts;
    sum.acc += row.scores.acc;
    sum.dic += row.scores.dic;
    sum.jac += row.scores.jac;
    sum.sen += row.scores.sen;
    sum.spe += row.scores.spe;
    sum.recall += row.scores.recall;
    sum.precision += row.scores.precision;
    report.per_image.push_back(std::move(row));
  }
  if (report.per_image.empty()) return report;
  if (pooled) {
    report.averages = compute_metrics(pool);
  } else {
    const auto n = static_cast<double>(report.per_image.size());
    report.averages = {sum.acc / n, sum.dic / n, sum.jac / n, sum.sen / n, sum.spe / n, sum.recall / n, sum.precision / n};
  }
  return report;
}

namespace {

std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string pct(double v) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * v);
  return buf;
}

void write_scores(std::ostringstream& os, const Scores& s) {
  os << fmt6(s.acc) << ',' << fmt6(s.dic) << ',' << fmt6(s.jac) << ',' << fmt6(s.sen) << ',' << fmt6(s.spe) << ','
     << fmt6(s.recall) << ',' << fmt6(s.precision);
}

}  // namespace

std::string MetricReport::to_csv() const {
  std::ostringstream os;
  os << "id,tp,tn,fp,fn,acc,dic,jac,sen,spe,recall,precision\n";
  ConfusionCounts pool;
  for (const auto& row : per_image) {
    os << row.id << ',' << row.counts.tp << ',' << row.counts.tn << ',' << row.counts.fp << ',' << row.counts.fn << ',';
    write_scores(os, row.scores);
    os << '\n';
    pool += row.counts;
  }
  os << (pooled ? "POOLED" : "AVERAGE") << ',' << pool.tp << ',' << pool.tn << ',' << pool.fp << ',' << pool.fn << ',';
  write_scores(os, averages);
  os << '\n';
  return os.str();
}

std::string MetricReport::to_table(const std::string& method_name) const {
  std::ostringstream os;
  os << "Averaged evaluation metrics (%)" << (pooled ? " [pooled counts]" : "") << "\n";
  os << "Method                    | ACC  | DIC  | JAC  | SEN  | SPE\n";
  os << "--------------------------+------+------+------+------+------\n";
  std::string name = method_name;
  name.resize(26, ' ');
  os << name << "| " << pct(averages.acc) << " | " << pct(averages.dic) << " | " << pct(averages.jac) << " | "
     << pct(averages.sen) << " | " << pct(averages.spe) << "\n";
  return os.str();
}

void MetricReport::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << to_csv();
}

}  // namespace uslseg::metrics
