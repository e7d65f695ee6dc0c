#include <cmath>

#include "doctest.h"
#include "json.hpp"

#include "ctxguard/errors.hpp"
#include "ctxguard/eval.hpp"
#include "support/brute_ap.hpp"

using namespace ctxguard;

namespace {

Detection det(int cat, Box b, double conf) {
  Detection d;
  d.category = cat;
  d.box = b;
  d.confidence = conf;
  return d;
}

}  // namespace

TEST_CASE("match_detections examples") {
  std::vector<GtObject> gts{{1, Box{0, 0, 10, 10}}};
  MatchResult none = match_detections({}, gts, 0.5);
  CHECK(none.true_positive.empty());
  CHECK(none.unmatched_gt == 1);

  std::vector<Detection> one{det(1, Box{0, 0, 10, 10}, 0.8)};
  MatchResult m1 = match_detections(one, gts, 0.5);
  CHECK(m1.true_positive == std::vector<bool>{true});
  CHECK(m1.unmatched_gt == 0);

  std::vector<Detection> two{det(1, Box{1, 0, 10, 10}, 0.4), det(1, Box{0, 0, 10, 10}, 0.9)};
  MatchResult m2 = match_detections(two, gts, 0.5);
  CHECK(m2.order == std::vector<std::size_t>{1, 0});
  CHECK(m2.true_positive == std::vector<bool>{true, false});
  CHECK(m2.matched_gt == std::vector<int>{0, -1});

  CHECK_THROWS_AS(match_detections(one, gts, 0.0), ArgumentError);
  CHECK_THROWS_AS(match_detections(one, gts, 1.5), ArgumentError);
}

TEST_CASE("average_precision examples") {
  std::vector<GtObject> gts{{2, Box{0, 0, 10, 10}}};
  std::vector<Detection> good{det(2, Box{0, 0, 10, 10}, 0.7)};
  std::vector<Detection> wrong{det(3, Box{0, 0, 10, 10}, 0.7)};
  CHECK(average_precision(2, good, gts, 0.5) == 1.0);
  CHECK(average_precision(2, wrong, gts, 0.5) == 0.0);

  std::vector<GtObject> two_gt{{0, Box{0, 0, 10, 10}}, {0, Box{30, 30, 10, 10}}};
  std::vector<Detection> tft{det(0, Box{0, 0, 10, 10}, 0.9), det(0, Box{50, 0, 10, 10}, 0.8),
                             det(0, Box{30, 30, 10, 10}, 0.7)};
  const double expected = (51.0 * 1.0 + 50.0 * (2.0 / 3.0)) / 101.0;
  CHECK(std::abs(average_precision(0, tft, two_gt, 0.5) - expected) <= 1e-12);
  CHECK(expected == doctest::Approx(0.835).epsilon(1e-3));
}

TEST_CASE("greedy matcher + 101-point AP equals the brute-force evaluator on all small instances") {
  std::size_t instances = 0;
  double worst = 0.0;
  bool monotone = true;
  testsupport::enumerate_small_instances([&](const std::vector<Detection>& preds, const std::vector<GtObject>& gts) {
    ++instances;
    for (std::size_t t = 0; t < kNumThresholds; ++t)
      for (int c = 0; c < 2; ++c) {
        const double tau = sweep_threshold(t);
        worst = std::max(worst, std::abs(average_precision(c, preds, gts, tau) - testsupport::brute_ap(c, preds, gts, tau)));
      }
    MapResult m = map_sweep(PredsByScene{preds}, GtsByScene{gts});
    monotone = monotone && m.map5095 <= m.map50 + 1e-12;
  });
  CHECK(instances > 100000);
  CHECK(worst <= 1e-12);
  CHECK(monotone);
}

TEST_CASE("map_sweep: perfect detector and empty predictions") {
  GtsByScene gts{{{0, Box{0, 0, 10, 10}}, {3, Box{20, 20, 12, 12}}}, {{3, Box{5, 40, 9, 9}}}};
  PredsByScene perfect(2);
  for (std::size_t s = 0; s < gts.size(); ++s)
    for (const auto& g : gts[s]) perfect[s].push_back(det(g.category, g.box, 0.9));
  MapResult m = map_sweep(perfect, gts);
  CHECK(m.map50 == 1.0);
  CHECK(m.map5095 == 1.0);
  CHECK(m.has_ground_truth[0]);
  CHECK_FALSE(m.has_ground_truth[1]);
  MapResult e = map_sweep(PredsByScene(2), gts);
  CHECK(e.map50 == 0.0);
  CHECK(e.map5095 == 0.0);
}

TEST_CASE("f1_micro examples") {
  GtsByScene gts{{{0, Box{0, 0, 10, 10}}, {1, Box{30, 30, 10, 10}}}};
  PredsByScene perfect{{det(0, Box{0, 0, 10, 10}, 0.9), det(1, Box{30, 30, 10, 10}, 0.8)}};
  CHECK(f1_micro(perfect, gts) == 1.0);
  CHECK(f1_micro(PredsByScene(1), gts) == 0.0);
  PredsByScene mixed{{det(0, Box{0, 0, 10, 10}, 0.9), det(1, Box{50, 0, 10, 10}, 0.8)}};
  CHECK(f1_micro(mixed, gts) == doctest::Approx(0.5).epsilon(1e-15));
  PredsByScene low{{det(0, Box{0, 0, 10, 10}, 0.4)}};
  CHECK(f1_micro(low, gts) == 0.0);
}

TEST_CASE("auc_from_scores examples, both modes") {
  for (AucMode mode : {AucMode::RankStatistic, AucMode::ThresholdSweep}) {
    CHECK(*auc_from_scores(std::vector<double>{0.9, 0.8}, std::vector<double>{0.3, 0.1}, mode) == 1.0);
    CHECK(*auc_from_scores(std::vector<double>{0.5, 0.5}, std::vector<double>{0.5, 0.5, 0.5}, mode) ==
          doctest::Approx(0.5).epsilon(1e-15));
    CHECK(*auc_from_scores(std::vector<double>{0.9, 0.2}, std::vector<double>{0.8, 0.1}, mode) ==
          doctest::Approx(0.75).epsilon(1e-15));
    CHECK_FALSE(auc_from_scores(std::vector<double>{}, std::vector<double>{0.1}, mode).has_value());
  }
  // Mann-Whitney against a pairwise count on random scores with ties.
  Rng rng(4);
  std::vector<double> pos, neg;
  for (int i = 0; i < 40; ++i) pos.push_back(std::round(rng.uniform() * 10) / 10);
  for (int i = 0; i < 55; ++i) neg.push_back(std::round(rng.uniform() * 8) / 10);
  double wins = 0.0;
  for (double p : pos)
    for (double n : neg) wins += p > n ? 1.0 : (p == n ? 0.5 : 0.0);
  const double pairwise = wins / (pos.size() * neg.size());
  CHECK(std::abs(*auc_from_scores(pos, neg) - pairwise) <= 1e-12);
  CHECK(std::abs(*auc_from_scores(pos, neg, AucMode::ThresholdSweep) - pairwise) <= 1e-12);
}

TEST_CASE("auc_per_category uses IoU-0.5 matches as positives") {
  GtsByScene gts{{{0, Box{0, 0, 10, 10}}}};
  PredsByScene preds{{det(0, Box{0, 0, 10, 10}, 0.9), det(0, Box{40, 40, 10, 10}, 0.3)}};
  CHECK(*auc_per_category(0, preds, gts) == 1.0);
  CHECK_FALSE(auc_per_category(1, preds, gts).has_value());
}

TEST_CASE("build_report: consistency error and identical inputs give identical rows") {
  ReportInputs in;
  in.preds = PredsByScene(2);
  in.gts = GtsByScene(3);
  CHECK_THROWS_AS(build_report(in), ConsistencyError);

  GtsByScene gts{{{0, Box{0, 0, 10, 10}}}, {{2, Box{10, 10, 10, 10}}}};
  PredsByScene preds{{det(0, Box{0, 0, 10, 10}, 0.9), det(0, Box{40, 40, 10, 10}, 0.3)}, {det(2, Box{11, 10, 10, 10}, 0.6)}};
  ReportInputs a{ConditionMeta{"baseline", "none", "none", 0.0, 1}, preds, gts, std::nullopt};
  ReportInputs b{ConditionMeta{"tedm", "none", "none", 0.0, 1}, preds, gts, std::nullopt};
  EvalReport ra = build_report(a), rb = build_report(b);
  CHECK(ra.map.map50 == rb.map.map50);
  CHECK(ra.f1 == rb.f1);
  CHECK(ra.mean_auc == rb.mean_auc);
  std::string row_a = ra.csv_row(), row_b = rb.csv_row();
  CHECK(row_a.substr(row_a.find(',')) == row_b.substr(row_b.find(',')));
  CHECK(EvalReport::csv_header() == "model,attack,mode,epsilon,seed,map50,map5095,f1,mean_auc,fool_rate");

  auto j = nlohmann::json::parse(ra.to_json());
  for (const char* k : {"model", "attack", "mode", "epsilon", "seed", "scenes", "map50", "map5095", "f1", "mean_auc",
                        "fooling_rate", "iou_thresholds", "categories"})
    CHECK(j.contains(k));
  CHECK(j["categories"].size() == kNumCategories);
  CHECK(j["fooling_rate"].is_null());
}

TEST_CASE("quantile and region size breakdown") {
  CHECK(quantile({4, 1, 3, 2}, 0.5) == doctest::Approx(2.5));
  CHECK(quantile({4, 1, 3, 2}, 0.0) == 1.0);
  CHECK(quantile({4, 1, 3, 2}, 1.0) == 4.0);
  CHECK(quantile({10, 20, 30, 40, 50}, 0.25) == doctest::Approx(20.0));

  GtsByScene gts{{{0, Box{0, 0, 4, 4}}, {0, Box{10, 10, 6, 6}}, {1, Box{20, 20, 8, 8}}, {1, Box{40, 40, 12, 12}}}};
  PredsByScene clean(1);
  for (const auto& g : gts[0]) clean[0].push_back(det(g.category, g.box, 0.9));
  SizeBreakdown same = region_size_breakdown(clean, clean, gts);
  for (double d : same.delta) CHECK(d == 0.0);
  std::vector<double> areas{16, 36, 64, 144};
  CHECK(same.boundaries[0] == quantile(areas, 0.25));
  CHECK(same.boundaries[1] == quantile(areas, 0.5));
  CHECK(same.boundaries[2] == quantile(areas, 0.75));
  std::size_t total = 0;
  for (auto c : same.counts) total += c;
  CHECK(total == 4);

  PredsByScene attacked{{clean[0][0], clean[0][1], clean[0][2]}};
  SizeBreakdown hit = region_size_breakdown(clean, attacked, gts);
  CHECK(hit.delta[3] == 1.0);
  CHECK(hit.delta[0] == 0.0);
}
