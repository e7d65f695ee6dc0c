#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ctxguard/backbone.hpp"
#include "ctxguard/geometry.hpp"
#include "ctxguard/scenegen.hpp"

namespace ctxguard {

inline constexpr std::size_t kNumThresholds = 10;

/// IoU threshold k of the sweep: 0.50, 0.55, ..., 0.95.
double sweep_threshold(std::size_t k);

/// Greedy matching in descending confidence (ties by box). `order[r]` is the
/// prediction index at rank r; the other vectors are indexed by rank.
struct MatchResult {
  std::vector<std::size_t> order;
  std::vector<bool> true_positive;
  std::vector<int> matched_gt;  // -1 when unmatched
  std::size_t unmatched_gt = 0;
};

MatchResult match_detections(std::span<const Detection> preds, std::span<const GtObject> gts, double tau);

using PredsByScene = std::vector<std::vector<Detection>>;
using GtsByScene = std::vector<std::vector<GtObject>>;

/// 101-point interpolated AP of `category` at IoU threshold `tau`.
double average_precision(int category, const PredsByScene& preds, const GtsByScene& gts, double tau);
double average_precision(int category, std::span<const Detection> preds, std::span<const GtObject> gts,
                         double tau);

/// 101-point interpolation of a precision/recall staircase given in rank order.
double interpolated_ap(std::span<const double> recall, std::span<const double> precision);

struct MapResult {
  double map50 = 0.0;
  double map5095 = 0.0;
  /// [category][threshold]
  std::array<std::array<double, kNumThresholds>, kNumCategories> ap{};
  std::array<bool, kNumCategories> has_ground_truth{};
};

MapResult map_sweep(const PredsByScene& preds, const GtsByScene& gts);

double f1_micro(const PredsByScene& preds, const GtsByScene& gts, double tau = 0.5, double score_min = 0.5);

enum class AucMode { RankStatistic, ThresholdSweep };

/// Matched-vs-unmatched ranking AUC; nullopt when either class is empty.
std::optional<double> auc_per_category(int category, const PredsByScene& preds, const GtsByScene& gts,
                                       AucMode mode = AucMode::RankStatistic);
/// Probability a random positive outscores a random negative, ties count 1/2.
std::optional<double> auc_from_scores(std::span<const double> positives, std::span<const double> negatives,
                                      AucMode mode = AucMode::RankStatistic);

struct PrPoint {
  double recall = 0.0;
  double precision = 0.0;
  double confidence = 0.0;
};
std::vector<PrPoint> pr_curve(int category, const PredsByScene& preds, const GtsByScene& gts, double tau);

struct ConditionMeta {
  std::string model = "baseline";
  std::string attack = "none";
  std::string mode = "none";
  double epsilon = 0.0;
  std::uint64_t seed = 0;
};

struct EvalReport {
  ConditionMeta meta;
  MapResult map;
  double f1 = 0.0;
  std::array<std::optional<double>, kNumCategories> auc{};
  double mean_auc = 0.0;
  std::optional<double> fooling_rate;
  std::size_t scenes = 0;

  std::string to_json() const;
  std::string csv_row() const;
  static std::string csv_header();
};

struct ReportInputs {
  ConditionMeta meta;
  PredsByScene preds;
  GtsByScene gts;
  std::optional<double> fooling_rate;
  AucMode auc_mode = AucMode::RankStatistic;
};

/// Throws ConsistencyError when prediction and ground-truth scene counts differ.
EvalReport build_report(const ReportInputs& in);

struct SizeBreakdown {
  std::array<double, 3> boundaries{};  // area quartile cut points q1, q2, q3
  std::array<double, 4> clean_recall{};
  std::array<double, 4> attacked_recall{};
  std::array<double, 4> delta{};  // clean - attacked
  std::array<std::size_t, 4> counts{};
};

/// Linear-interpolation quantile of sorted-or-not values, q in [0, 1].
double quantile(std::vector<double> values, double q);

SizeBreakdown region_size_breakdown(const PredsByScene& clean, const PredsByScene& attacked, const GtsByScene& gts);

}  // namespace ctxguard
