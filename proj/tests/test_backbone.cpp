#include <cmath>
#include <numeric>

#include "doctest.h"

#include "ctxguard/backbone.hpp"
#include "ctxguard/errors.hpp"

using namespace ctxguard;

namespace {

Matrix random_crops(std::size_t n, Rng& rng) {
  Matrix m(n, kCropSize);
  for (double& v : m.data()) v = rng.uniform();
  return m;
}

// Sum of a fixed random projection of logits and features, so every output path is exercised.
struct Probe {
  std::vector<double> a_logit, a_feat, a_hidden;
  explicit Probe(Rng& rng) : a_logit(kNumClasses), a_feat(kFeatureDim), a_hidden(kHidden1) {
    for (double& v : a_logit) v = rng.normal();
    for (double& v : a_feat) v = rng.normal();
    for (double& v : a_hidden) v = rng.normal();
  }
  double value(const BackboneCache& c) const {
    double s = 0.0;
    for (std::size_t r = 0; r < c.logits.rows(); ++r) {
      s += dot(c.logits.row(r), a_logit);
      s += dot(c.feature.row(r), a_feat);
      s += dot(c.hidden.row(r), a_hidden);
    }
    return s;
  }
  BackboneUpstream upstream(const BackboneCache& c) const {
    BackboneUpstream up{Matrix(c.logits.rows(), kNumClasses), Matrix(c.feature.rows(), kFeatureDim),
                        Matrix(c.hidden.rows(), kHidden1)};
    for (std::size_t r = 0; r < c.logits.rows(); ++r) {
      std::copy(a_logit.begin(), a_logit.end(), up.dlogits.row(r).begin());
      std::copy(a_feat.begin(), a_feat.end(), up.dfeature.row(r).begin());
      std::copy(a_hidden.begin(), a_hidden.end(), up.dhidden.row(r).begin());
    }
    return up;
  }
};

}  // namespace

TEST_CASE("crop_resize: exact 16x16 box is an identity resample") {
  Rng rng(1);
  Image img(kImageSide, kImageSide);
  for (double& v : img.pixels()) v = rng.uniform();
  Box b{10, 20, 16, 16};
  auto crop = crop_resize(img, b);
  REQUIRE(crop.size() == kCropSize);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c) CHECK(crop[(y * 16 + x) * 3 + c] == img.at(20 + y, 10 + x, c));
}

TEST_CASE("crop_resize: uniform region gives a uniform crop") {
  Image img(kImageSide, kImageSide, 0.42);
  for (double v : crop_resize(img, Box{3, 7, 23, 11})) CHECK(v == 0.42);
}

TEST_CASE("crop_resize: 32x32 source of 2x2 constant blocks decimates 2:1 exactly") {
  Image img(kImageSide, kImageSide);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = ((y / 2) * 16 + (x / 2) + c * 0.25) / 300.0;
  auto crop = crop_resize(img, Box{0, 0, 32, 32});
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x)
      for (int c = 0; c < 3; ++c) CHECK(crop[(y * 16 + x) * 3 + c] == (y * 16 + x + c * 0.25) / 300.0);
}

TEST_CASE("zero weights: zero feature and uniform probs") {
  BackboneWeights w = BackboneWeights::zeros();
  Rng rng(2);
  Matrix crops = random_crops(1, rng);
  auto out = backbone_forward(w, crops.row(0));
  for (double f : out.feature) CHECK(f == 0.0);
  for (double p : out.probs) CHECK(p == doctest::Approx(1.0 / 9.0).epsilon(1e-15));
}

TEST_CASE("probs sum to 1 and features are non-negative for random weights") {
  Rng rng(3);
  BackboneWeights w = BackboneWeights::initialize(rng);
  Matrix crops = random_crops(20, rng);
  for (std::size_t r = 0; r < crops.rows(); ++r) {
    auto out = backbone_forward(w, crops.row(r));
    CHECK(std::accumulate(out.probs.begin(), out.probs.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    for (double f : out.feature) CHECK(f >= 0.0);
  }
  BackboneCache c = backbone_forward_batch(w, crops);
  auto single = backbone_forward(w, crops.row(4));
  for (std::size_t k = 0; k < kNumClasses; ++k) CHECK(c.probs(4, k) == doctest::Approx(single.probs[k]).epsilon(1e-14));
}

TEST_CASE("backbone input gradient matches finite differences (3 seeds)") {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    Rng rng(seed);
    BackboneWeights w = BackboneWeights::initialize(rng);
    Matrix crops = random_crops(1, rng);
    Probe probe(rng);
    Objective f = [&](std::span<const double> x) {
      Matrix m(1, kCropSize, std::vector<double>(x.begin(), x.end()));
      BackboneCache c = backbone_forward_batch(w, m);
      Matrix dinput;
      backbone_backward(w, c, probe.upstream(c), nullptr, &dinput);
      return ValueGrad{probe.value(c), dinput.values()};
    };
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < kCropSize; i += 7) idx.push_back(i);
    CHECK(grad_check(f, crops.row(0), 1e-5, idx) <= 1e-4);
  }
}

TEST_CASE("backbone weight gradient matches finite differences (3 seeds)") {
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    Rng rng(seed);
    BackboneWeights w = BackboneWeights::initialize(rng);
    Matrix crops = random_crops(3, rng);
    Probe probe(rng);
    Objective f = [&](std::span<const double> flat) {
      BackboneWeights wk = w;
      unflatten_into(flat, wk.params());
      BackboneCache c = backbone_forward_batch(wk, crops);
      ParamSet g = wk.params().zeros_like();
      backbone_backward(wk, c, probe.upstream(c), &g, nullptr);
      return ValueGrad{probe.value(c), flatten_params(g)};
    };
    auto flat = flatten_params(w.params());
    std::vector<std::size_t> idx;
    Rng pick(seed + 100);
    for (int i = 0; i < 300; ++i) idx.push_back(static_cast<std::size_t>(pick.uniform_int(flat.size())));
    // Every bias and the last layers get full coverage.
    for (std::size_t i = flat.size() - 9 * kFeatureDim - 9; i < flat.size(); i += 3) idx.push_back(i);
    CHECK(grad_check(f, flat, 1e-5, idx) <= 1e-4);
  }
}

TEST_CASE("mean_pool examples") {
  auto p = mean_pool(std::vector<double>{1, 3, 5, 7});
  REQUIRE(p.size() == 2);
  CHECK(p[0] == 2.0);
  CHECK(p[1] == 6.0);
  for (double v : mean_pool(std::vector<double>(8, 0.0))) CHECK(v == 0.0);
  for (double v : mean_pool(std::vector<double>(8, 2.5))) CHECK(v == 2.5);
  CHECK_THROWS(mean_pool(std::vector<double>{1, 2, 3}));
}

TEST_CASE("label_for_box follows the IoU rule") {
  std::vector<GtObject> gts{{2, Box{0, 0, 10, 10}}, {5, Box{30, 30, 12, 12}}};
  CHECK(label_for_box(Box{0, 0, 10, 10}, gts) == 2);
  CHECK(label_for_box(Box{31, 31, 12, 12}, gts) == 5);
  CHECK(label_for_box(Box{50, 0, 10, 10}, gts) == kBackground);
  CHECK(label_for_box(Box{0, 0, 10, 10}, {}) == kBackground);
}

TEST_CASE("detect: empty proposals and argmax contract") {
  Rng rng(4);
  BackboneWeights w = BackboneWeights::initialize(rng);
  Image img(kImageSide, kImageSide);
  for (double& v : img.pixels()) v = rng.uniform();
  CHECK(detect(w, img, {}).reported.empty());
  CHECK(detect(w, img, {}).regions.empty());
  std::vector<Box> props;
  for (int i = 0; i < 30; ++i) props.push_back(clamp_box(Box{rng.uniform_int(0, 50), rng.uniform_int(0, 50), 12, 12}));
  DetectResult r = detect(w, img, props);
  CHECK(r.regions.size() == props.size());
  for (const auto& d : r.reported) {
    CHECK(d.category != kBackground);
    CHECK(d.confidence == *std::max_element(d.probs.begin(), d.probs.end()));
    CHECK(d.confidence >= kReportMinConfidence);
  }
}

namespace {
// Two categories with opposite colour cards: linearly separable.
LabeledCrops toy_split(Rng& rng, std::size_t n) {
  LabeledCrops d{Matrix(n, kCropSize), std::vector<int>(n)};
  for (std::size_t r = 0; r < n; ++r) {
    const int label = static_cast<int>(r % 2);
    d.labels[r] = label;
    for (std::size_t i = 0; i < kCropSize; ++i) {
      const double base = (i % 3 == 0) == (label == 0) ? 0.7 : 0.3;
      d.crops(r, i) = std::clamp(base + 0.05 * rng.normal(), 0.0, 1.0);
    }
  }
  return d;
}
}  // namespace

TEST_CASE("train_backbone: 0 epochs returns the initialization") {
  Rng rng(6);
  LabeledCrops d = toy_split(rng, 32);
  BackboneTrainOptions opts;
  opts.epochs = 0;
  Rng a(50), b(50);
  BackboneWeights trained = train_backbone(d, a, opts, ContextModel::standard());
  BackboneWeights init = BackboneWeights::initialize(b);
  CHECK(trained == init);
}

TEST_CASE("train_backbone: deterministic and separates a toy split") {
  Rng rng(7);
  LabeledCrops d = toy_split(rng, 128);
  BackboneTrainOptions opts;
  opts.epochs = 30;
  Rng a(9), b(9);
  BackboneTrainReport rep;
  BackboneWeights w1 = train_backbone(d, a, opts, ContextModel::standard(), &rep);
  BackboneWeights w2 = train_backbone(d, b, opts, ContextModel::standard());
  CHECK(w1 == w2);
  CHECK(backbone_accuracy(w1, d.crops, d.labels) == 1.0);
  CHECK(rep.epoch_loss.size() == 30);
  CHECK(rep.epoch_loss.back() < rep.epoch_loss.front());
}
