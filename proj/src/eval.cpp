#include "ctxguard/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "ctxguard/errors.hpp"

namespace ctxguard {

using nlohmann::json;

double sweep_threshold(std::size_t k) { return static_cast<double>(50 + 5 * k) / 100.0; }

MatchResult match_detections(std::span<const Detection> preds, std::span<const GtObject> gts, double tau) {
  if (!(tau > 0.0 && tau <= 1.0)) throw ArgumentError("match_detections: tau must be in (0, 1]");
  MatchResult m;
  m.order.resize(preds.size());
  std::iota(m.order.begin(), m.order.end(), 0);
  std::stable_sort(m.order.begin(), m.order.end(), [&](std::size_t a, std::size_t b) {
    if (preds[a].confidence != preds[b].confidence) return preds[a].confidence > preds[b].confidence;
    return preds[a].box < preds[b].box;
  });
  std::vector<bool> taken(gts.size(), false);
  for (std::size_t idx : m.order) {
    const Detection& p = preds[idx];
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g] || gts[g].category != p.category) continue;
      const double v = iou(p.box, gts[g].box);
      if (v >= tau && v > best_iou) {
        best_iou = v;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) taken[static_cast<std::size_t>(best)] = true;
    m.true_positive.push_back(best >= 0);
    m.matched_gt.push_back(best);
  }
  m.unmatched_gt = static_cast<std::size_t>(std::count(taken.begin(), taken.end(), false));
  return m;
}

namespace {

struct ScoredEntry {
  double confidence;
  Box box;
  bool tp;
};

void check_aligned(const PredsByScene& preds, const GtsByScene& gts) {
  if (preds.size() != gts.size()) {
    throw ConsistencyError("predictions cover " + std::to_string(preds.size()) + " scenes, ground truth " +
                           std::to_string(gts.size()));
  }
}

/// Category entries in evaluation order plus the number of positives.
std::pair<std::vector<ScoredEntry>, std::size_t> category_entries(int category, const PredsByScene& preds,
                                                                  const GtsByScene& gts, double tau) {
  check_aligned(preds, gts);
  std::vector<ScoredEntry> entries;
  std::size_t npos = 0;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    for (const auto& g : gts[s]) npos += g.category == category;
    const MatchResult m = match_detections(preds[s], gts[s], tau);
    for (std::size_t r = 0; r < m.order.size(); ++r) {
      const Detection& d = preds[s][m.order[r]];
      if (d.category == category) entries.push_back({d.confidence, d.box, m.true_positive[r]});
    }
  }
  // Ties in confidence fall back to box, then to scene and match rank, so the
  // ranking agrees with the order the matcher consumed the predictions in.
  std::stable_sort(entries.begin(), entries.end(), [](const ScoredEntry& a, const ScoredEntry& b) {
    if (a.confidence != b.confidence) return a.confidence > b.confidence;
    return a.box < b.box;
  });
  return {std::move(entries), npos};
}

}  // namespace

double interpolated_ap(std::span<const double> recall, std::span<const double> precision) {
  if (recall.size() != precision.size()) throw ShapeError("interpolated_ap: length mismatch");
  std::vector<double> envelope(precision.begin(), precision.end());
  for (std::size_t i = envelope.size(); i-- > 1;) envelope[i - 1] = std::max(envelope[i - 1], envelope[i]);
  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += envelope[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

double average_precision(int category, const PredsByScene& preds, const GtsByScene& gts, double tau) {
  const auto [entries, npos] = category_entries(category, preds, gts, tau);
  if (npos == 0) return 0.0;
  std::vector<double> recall, precision;
  std::size_t tp = 0, fp = 0;
  for (const auto& e : entries) {
    (e.tp ? tp : fp) += 1;
    recall.push_back(static_cast<double>(tp) / static_cast<double>(npos));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  return interpolated_ap(recall, precision);
}

double average_precision(int category, std::span<const Detection> preds, std::span<const GtObject> gts,
                         double tau) {
  PredsByScene p{std::vector<Detection>(preds.begin(), preds.end())};
  GtsByScene g{std::vector<GtObject>(gts.begin(), gts.end())};
  return average_precision(category, p, g, tau);
}

std::vector<PrPoint> pr_curve(int category, const PredsByScene& preds, const GtsByScene& gts, double tau) {
  const auto [entries, npos] = category_entries(category, preds, gts, tau);
  std::vector<PrPoint> out;
  if (npos == 0) return out;
  std::size_t tp = 0, fp = 0;
  for (const auto& e : entries) {
    (e.tp ? tp : fp) += 1;
    out.push_back({static_cast<double>(tp) / static_cast<double>(npos),
                   static_cast<double>(tp) / static_cast<double>(tp + fp), e.confidence});
  }
  return out;
}

MapResult map_sweep(const PredsByScene& preds, const GtsByScene& gts) {
  check_aligned(preds, gts);
  MapResult res;
  std::size_t present = 0;
  for (int c = 0; c < kNumCategories; ++c) {
    bool any = false;
    for (const auto& scene : gts)
      for (const auto& g : scene) any = any || g.category == c;
    res.has_ground_truth[static_cast<std::size_t>(c)] = any;
    if (!any) continue;
    ++present;
    double sweep = 0.0;
    for (std::size_t k = 0; k < kNumThresholds; ++k) {
      const double ap = average_precision(c, preds, gts, sweep_threshold(k));
      res.ap[static_cast<std::size_t>(c)][k] = ap;
      sweep += ap;
    }
    res.map50 += res.ap[static_cast<std::size_t>(c)][0];
    res.map5095 += sweep / kNumThresholds;
  }
  if (present > 0) {
    res.map50 /= static_cast<double>(present);
    res.map5095 /= static_cast<double>(present);
  }
  return res;
}

double f1_micro(const PredsByScene& preds, const GtsByScene& gts, double tau, double score_min) {
  check_aligned(preds, gts);
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    std::vector<Detection> kept;
    for (const auto& d : preds[s])
      if (d.confidence >= score_min) kept.push_back(d);
    const MatchResult m = match_detections(kept, gts[s], tau);
    const auto hits = static_cast<std::size_t>(std::count(m.true_positive.begin(), m.true_positive.end(), true));
    tp += hits;
    fp += kept.size() - hits;
    fn += m.unmatched_gt;
  }
  const double p = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  const double r = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
}

std::optional<double> auc_from_scores(std::span<const double> positives, std::span<const double> negatives,
                                      AucMode mode) {
  if (positives.empty() || negatives.empty()) return std::nullopt;
  const double np = static_cast<double>(positives.size());
  const double nn = static_cast<double>(negatives.size());
  if (mode == AucMode::RankStatistic) {
    // Mann-Whitney U with mid-ranks for ties.
    std::vector<std::pair<double, bool>> all;
    for (double s : positives) all.emplace_back(s, true);
    for (double s : negatives) all.emplace_back(s, false);
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < all.size();) {
      std::size_t j = i;
      while (j < all.size() && all[j].first == all[i].first) ++j;
      const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
      for (std::size_t k = i; k < j; ++k)
        if (all[k].second) rank_sum += mid;
      i = j;
    }
    return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
  }
  // ROC by sweeping the score threshold from high to low; trapezoids.
  std::vector<double> thresholds(positives.begin(), positives.end());
  thresholds.insert(thresholds.end(), negatives.begin(), negatives.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  double area = 0.0, prev_tpr = 0.0, prev_fpr = 0.0;
  for (double t : thresholds) {
    const double tpr = static_cast<double>(std::count_if(positives.begin(), positives.end(),
                                                         [&](double s) { return s >= t; })) / np;
    const double fpr = static_cast<double>(std::count_if(negatives.begin(), negatives.end(),
                                                         [&](double s) { return s >= t; })) / nn;
    area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
    prev_tpr = tpr;
    prev_fpr = fpr;
  }
  return area;
}

std::optional<double> auc_per_category(int category, const PredsByScene& preds, const GtsByScene& gts,
                                       AucMode mode) {
  check_aligned(preds, gts);
  std::vector<double> pos, neg;
  for (std::size_t s = 0; s < preds.size(); ++s) {
    const MatchResult m = match_detections(preds[s], gts[s], 0.5);
    for (std::size_t r = 0; r < m.order.size(); ++r) {
      const Detection& d = preds[s][m.order[r]];
      if (d.category != category) continue;
      (m.true_positive[r] ? pos : neg).push_back(d.confidence);
    }
  }
  return auc_from_scores(pos, neg, mode);
}

EvalReport build_report(const ReportInputs& in) {
  check_aligned(in.preds, in.gts);
  EvalReport rep;
  rep.meta = in.meta;
  rep.scenes = in.preds.size();
  rep.map = map_sweep(in.preds, in.gts);
  rep.f1 = f1_micro(in.preds, in.gts);
  double auc_sum = 0.0;
  std::size_t auc_n = 0;
  for (int c = 0; c < kNumCategories; ++c) {
    rep.auc[static_cast<std::size_t>(c)] = auc_per_category(c, in.preds, in.gts, in.auc_mode);
    if (rep.auc[static_cast<std::size_t>(c)]) {
      auc_sum += *rep.auc[static_cast<std::size_t>(c)];
      ++auc_n;
    }
  }
  rep.mean_auc = auc_n ? auc_sum / static_cast<double>(auc_n) : 0.0;
  rep.fooling_rate = in.fooling_rate;
  return rep;
}

namespace {

std::string num(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace

std::string EvalReport::csv_header() { return "model,attack,mode,epsilon,seed,map50,map5095,f1,mean_auc,fool_rate"; }

std::string EvalReport::csv_row() const {
  return meta.model + "," + meta.attack + "," + meta.mode + "," + num(meta.epsilon) + "," +
         std::to_string(meta.seed) + "," + num(map.map50) + "," + num(map.map5095) + "," + num(f1) + "," +
         num(mean_auc) + "," + (fooling_rate ? num(*fooling_rate) : std::string());
}

std::string EvalReport::to_json() const {
  json cats = json::array();
  for (int c = 0; c < kNumCategories; ++c) {
    const auto ci = static_cast<std::size_t>(c);
    json entry = {{"category", std::string(category_name(c))},
                  {"has_ground_truth", map.has_ground_truth[ci]},
                  {"ap", map.ap[ci]},
                  {"auc", auc[ci] ? json(*auc[ci]) : json(nullptr)}};
    cats.push_back(std::move(entry));
  }
  json thresholds = json::array();
  for (std::size_t k = 0; k < kNumThresholds; ++k) thresholds.push_back(sweep_threshold(k));
  const json doc = {{"model", meta.model},
                    {"attack", meta.attack},
                    {"mode", meta.mode},
                    {"epsilon", meta.epsilon},
                    {"seed", meta.seed},
                    {"scenes", scenes},
                    {"map50", map.map50},
                    {"map5095", map.map5095},
                    {"f1", f1},
                    {"mean_auc", mean_auc},
                    {"fooling_rate", fooling_rate ? json(*fooling_rate) : json(nullptr)},
                    {"iou_thresholds", thresholds},
                    {"categories", cats}};
  return doc.dump(2) + "\n";
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ArgumentError("quantile of an empty set");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

SizeBreakdown region_size_breakdown(const PredsByScene& clean, const PredsByScene& attacked, const GtsByScene& gts) {
  check_aligned(clean, gts);
  check_aligned(attacked, gts);
  SizeBreakdown out;
  std::vector<double> areas;
  for (const auto& scene : gts)
    for (const auto& g : scene) areas.push_back(g.box.area());
  if (areas.empty()) return out;
  for (std::size_t k = 0; k < 3; ++k) out.boundaries[k] = quantile(areas, 0.25 * static_cast<double>(k + 1));
  auto bucket = [&](double area) {
    std::size_t b = 0;
    while (b < 3 && area > out.boundaries[b]) ++b;
    return b;
  };
  std::array<std::size_t, 4> clean_hits{}, attacked_hits{};
  for (std::size_t s = 0; s < gts.size(); ++s) {
    const MatchResult mc = match_detections(clean[s], gts[s], 0.5);
    const MatchResult ma = match_detections(attacked[s], gts[s], 0.5);
    std::vector<bool> hit_c(gts[s].size(), false), hit_a(gts[s].size(), false);
    for (int g : mc.matched_gt)
      if (g >= 0) hit_c[static_cast<std::size_t>(g)] = true;
    for (int g : ma.matched_gt)
      if (g >= 0) hit_a[static_cast<std::size_t>(g)] = true;
    for (std::size_t g = 0; g < gts[s].size(); ++g) {
      const std::size_t b = bucket(gts[s][g].box.area());
      ++out.counts[b];
      clean_hits[b] += hit_c[g];
      attacked_hits[b] += hit_a[g];
    }
  }
  for (std::size_t b = 0; b < 4; ++b) {
    if (out.counts[b] == 0) continue;
    out.clean_recall[b] = static_cast<double>(clean_hits[b]) / static_cast<double>(out.counts[b]);
    out.attacked_recall[b] = static_cast<double>(attacked_hits[b]) / static_cast<double>(out.counts[b]);
    out.delta[b] = out.clean_recall[b] - out.attacked_recall[b];
  }
  return out;
}

}  // namespace ctxguard
