#include "tau/loss.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace tau {
namespace {

void check_cfg(const LossConfig& cfg) {
  if (cfg.alpha < 0.0 || cfg.beta < 0.0)
    throw std::invalid_argument("loss: alpha and beta must be nonnegative");
  if (cfg.epsilon <= 0.0) throw std::invalid_argument("loss: epsilon must be positive");
  if (cfg.clamp_eps <= 0.0 || cfg.clamp_eps >= 0.5)
    throw std::invalid_argument("loss: clamp_eps must lie in (0, 0.5)");
}

template <typename T>
void check_pair(const Tensor<T>& p, const Tensor<T>& y, const char* who) {
  if (p.shape() != y.shape())
    throw std::invalid_argument(std::string(who) + ": prediction and target shapes differ");
  if (checked_mode()) {
    for (T v : y.data())
      if (v != T(0) && v != T(1))
        throw std::invalid_argument(std::string(who) + ": target contains non-binary value " +
                                    std::to_string(static_cast<double>(v)));
  }
}

template <typename T>
void check_binary(const Tensor<T>& t, const char* who, const char* which) {
  for (T v : t.data())
    if (v != T(0) && v != T(1))
      throw std::invalid_argument(std::string(who) + ": " + which +
                                  " contains non-binary value " +
                                  std::to_string(static_cast<double>(v)));
}

// Zero-denominator rule: empty-vs-empty counts as a perfect score, any other
// vacuous denominator as a miss.
double ratio(int64_t num, int64_t den, bool empty_vs_empty) {
  if (den > 0) return static_cast<double>(num) / static_cast<double>(den);
  return empty_vs_empty ? 1.0 : 0.0;
}

std::string format_row(const std::string& id, const ConfusionCounts& c,
                       const MetricsReport& m) {
  std::ostringstream os;
  os << id << ',' << c.tp << ',' << c.tn << ',' << c.fp << ',' << c.fn << ',' << std::fixed
     << std::setprecision(6) << m.dice << ',' << m.iou << ',' << m.acc << ',' << m.rec << ','
     << m.pre;
  return os.str();
}

ConfusionCounts sum_counts(const std::vector<SampleMetrics>& rows) {
  ConfusionCounts t;
  for (const auto& r : rows) {
    t.tp += r.counts.tp;
    t.tn += r.counts.tn;
    t.fp += r.counts.fp;
    t.fn += r.counts.fn;
  }
  return t;
}

nlohmann::json row_json(const std::string& id, const ConfusionCounts& c,
                        const MetricsReport& m) {
  return {{"id", id},   {"tp", c.tp},     {"tn", c.tn},   {"fp", c.fp},   {"fn", c.fn},
          {"dice", m.dice}, {"iou", m.iou}, {"acc", m.acc}, {"rec", m.rec}, {"pre", m.pre}};
}

}  // namespace

template <typename T>
Tensor<T> bce_loss(const Tensor<T>& p, const Tensor<T>& y, const LossConfig& cfg) {
  check_cfg(cfg);
  check_pair(p, y, "bce_loss");
  Tensor<T> pc = clamp(p, cfg.clamp_eps, 1.0 - cfg.clamp_eps);
  Tensor<T> pos = mul(y, log(pc));
  Tensor<T> neg = mul(affine(y, -1.0, 1.0), log(affine(pc, -1.0, 1.0)));
  return scale(mean(add(pos, neg)), -1.0);
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& p, const Tensor<T>& y, const LossConfig& cfg) {
  check_cfg(cfg);
  check_pair(p, y, "dice_loss");
  Tensor<T> num = affine(sum(mul(y, p)), cfg.dice_numerator_factor, cfg.epsilon);
  Tensor<T> den = affine(add(sum(y), sum(p)), 1.0, cfg.epsilon);
  return affine(div(num, den), -1.0, 1.0);
}

template <typename T>
Tensor<T> combined_loss(const Tensor<T>& p, const Tensor<T>& y, const LossConfig& cfg) {
  return add(scale(bce_loss(p, y, cfg), cfg.alpha), scale(dice_loss(p, y, cfg), cfg.beta));
}

template <typename T>
Tensor<T> binarize(const Tensor<T>& p, double threshold) {
  std::vector<T> out(p.data().size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<double>(p.data()[i]) >= threshold ? T(1) : T(0);
  return Tensor<T>::from_data(p.shape(), std::move(out));
}

template <typename T>
ConfusionCounts confusion(const Tensor<T>& mask, const Tensor<T>& y) {
  if (mask.shape() != y.shape())
    throw std::invalid_argument("confusion: mask and target shapes differ");
  check_binary(mask, "confusion", "mask");
  check_binary(y, "confusion", "target");
  ConfusionCounts c;
  const auto& mv = mask.data();
  const auto& yv = y.data();
  for (size_t i = 0; i < mv.size(); ++i) {
    const bool m = mv[i] == T(1);
    const bool t = yv[i] == T(1);
    if (m && t) ++c.tp;
    else if (m) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

MetricsReport metrics(const ConfusionCounts& c) {
  if (c.tp < 0 || c.tn < 0 || c.fp < 0 || c.fn < 0)
    throw std::invalid_argument("metrics: negative confusion count");
  const bool empty_pred = c.tp + c.fp == 0;
  const bool empty_truth = c.tp + c.fn == 0;
  MetricsReport m;
  m.dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, true);  // zero denom implies both empty
  m.iou = ratio(c.tp, c.tp + c.fp + c.fn, true);
  m.acc = ratio(c.tp + c.tn, c.total(), true);
  m.rec = ratio(c.tp, c.tp + c.fn, empty_pred);
  m.pre = ratio(c.tp, c.tp + c.fp, empty_truth);
  return m;
}

MetricsReport aggregate_metrics(const std::vector<SampleMetrics>& rows) {
  if (rows.empty()) throw std::invalid_argument("aggregate_metrics: no samples");
  MetricsReport agg;
  for (const auto& r : rows) {
    agg.dice += r.report.dice;
    agg.iou += r.report.iou;
    agg.acc += r.report.acc;
    agg.rec += r.report.rec;
    agg.pre += r.report.pre;
  }
  const double n = static_cast<double>(rows.size());
  agg.dice /= n;
  agg.iou /= n;
  agg.acc /= n;
  agg.rec /= n;
  agg.pre /= n;
  return agg;
}

void write_metrics_csv(const std::string& path, const std::vector<SampleMetrics>& rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_metrics_csv: cannot open " + path);
  out << "id,tp,tn,fp,fn,dice,iou,acc,rec,pre\n";
  for (const auto& r : rows) out << format_row(r.id, r.counts, r.report) << "\n";
  out << format_row("aggregate", sum_counts(rows), aggregate_metrics(rows)) << "\n";
  if (!out) throw std::runtime_error("write_metrics_csv: write failed for " + path);
}

void write_metrics_json(const std::string& path, const std::vector<SampleMetrics>& rows) {
  nlohmann::json j;
  j["averaging"] = "macro";
  j["samples"] = nlohmann::json::array();
  for (const auto& r : rows) j["samples"].push_back(row_json(r.id, r.counts, r.report));
  j["aggregate"] = row_json("aggregate", sum_counts(rows), aggregate_metrics(rows));
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_metrics_json: cannot open " + path);
  out << j.dump(2) << "\n";
  if (!out) throw std::runtime_error("write_metrics_json: write failed for " + path);
}

#define TAU_INSTANTIATE_LOSS(T)                                                               \
  template Tensor<T> bce_loss<T>(const Tensor<T>&, const Tensor<T>&, const LossConfig&);      \
  template Tensor<T> dice_loss<T>(const Tensor<T>&, const Tensor<T>&, const LossConfig&);     \
  template Tensor<T> combined_loss<T>(const Tensor<T>&, const Tensor<T>&, const LossConfig&); \
  template Tensor<T> binarize<T>(const Tensor<T>&, double);                                   \
  template ConfusionCounts confusion<T>(const Tensor<T>&, const Tensor<T>&);

TAU_INSTANTIATE_LOSS(float)
TAU_INSTANTIATE_LOSS(double)

#undef TAU_INSTANTIATE_LOSS

}  // namespace tau
