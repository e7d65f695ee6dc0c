#include <cmath>

#include "doctest.h"

#include "ctxguard/attacks.hpp"
#include "ctxguard/errors.hpp"

using namespace ctxguard;

namespace {

Perturbation random_tile(double eps, Rng& rng) {
  Perturbation p;
  p.epsilon = eps;
  for (double& v : p.tile) v = rng.uniform(-eps, eps);
  return p;
}

Image random_image(Rng& rng) {
  Image img(kImageSide, kImageSide);
  for (double& v : img.pixels()) v = rng.uniform();
  return img;
}

}  // namespace

TEST_CASE("fff_objective gradient matches finite differences (3 seeds)") {
  for (std::uint64_t seed : {41u, 42u, 43u}) {
    Rng rng(seed);
    BackboneWeights w = BackboneWeights::initialize(rng);
    Perturbation p = random_tile(0.06, rng);
    Objective f = [&](std::span<const double> t) { return fff_objective(w, t); };
    CHECK(grad_check(f, p.tile, 1e-5) <= 1e-4);
  }
}

TEST_CASE("crop_loss gradient matches finite differences (3 seeds)") {
  for (std::uint64_t seed : {51u, 52u, 53u}) {
    Rng rng(seed);
    BackboneWeights w = BackboneWeights::initialize(rng);
    std::vector<double> crop(kCropSize);
    for (double& v : crop) v = rng.uniform(0.1, 0.9);
    const int label = static_cast<int>(rng.uniform_int(kNumClasses));
    Objective f = [&](std::span<const double> x) { return crop_loss(w, x, label); };
    CHECK(grad_check(f, crop, 1e-5) <= 1e-4);
  }
}

TEST_CASE("fff: zero budget gives a zero tile") {
  Rng rng(1);
  BackboneWeights w = BackboneWeights::initialize(rng);
  Rng a(2);
  Perturbation p = fff_synthesize(w, FffOptions{0.0, 50}, a);
  for (double v : p.tile) CHECK(v == 0.0);
  Matrix crops(5, kCropSize, 0.4);
  CHECK(fooling_rate(w, crops, p) == 0.0);
}

TEST_CASE("fff: budget saturation, rising objective, determinism") {
  Rng rng(3);
  BackboneWeights w = BackboneWeights::initialize(rng);
  Rng a(4), b(4);
  AttackReport rep;
  FffOptions opts;
  opts.iters = 60;
  Perturbation p = fff_synthesize(w, opts, a, &rep);
  Perturbation q = fff_synthesize(w, opts, b);
  CHECK(p == q);
  CHECK(p.linf() <= opts.epsilon + 1e-12);
  CHECK(std::abs(p.linf() - opts.epsilon) <= 1e-12);
  REQUIRE(rep.objective_trace.size() >= 2);
  CHECK(rep.objective_trace.back() > rep.objective_trace.front());
}

TEST_CASE("perturbation JSON round trip and validation") {
  Rng rng(5);
  Perturbation p = random_tile(0.06, rng);
  p.kind = AttackKind::UAP;
  p.seed = 123456789012345ull;
  p.iters_used = 3;
  CHECK(perturbation_from_string(perturbation_to_string(p)) == p);
  Perturbation over = p;
  over.tile[7] = 0.5;
  CHECK_THROWS_AS(perturbation_from_string(perturbation_to_string(over)), ConsistencyError);
  CHECK_THROWS(perturbation_from_string("{}"));
  CHECK_THROWS_AS(load_perturbation("/nonexistent/p.json"), std::ios_base::failure);
  CHECK(parse_attack_kind("fff") == AttackKind::FFF);
  CHECK(apply_mode_name(parse_apply_mode("region")) == "region");
  CHECK_THROWS(parse_attack_kind("pgd"));
}

TEST_CASE("apply_whole_image contracts") {
  Rng rng(6);
  Image img = random_image(rng);
  Perturbation zero;
  CHECK(apply_whole_image(img, zero) == img);

  Perturbation p = random_tile(0.06, rng);
  Image out = apply_whole_image(img, p);
  for (int y = 0; y < kImageSide; ++y)
    for (int x = 0; x < kImageSide; ++x)
      for (int c = 0; c < 3; ++c) {
        const double raw = img.at(y, x, c) + p.tile[((y % 16) * 16 + x % 16) * 3 + c];
        CHECK(out.at(y, x, c) == std::clamp(raw, 0.0, 1.0));
        CHECK(std::abs(out.at(y, x, c) - img.at(y, x, c)) <= std::abs(raw - img.at(y, x, c)));
      }

  Image white(kImageSide, kImageSide, 1.0);
  Perturbation pos;
  for (double& v : pos.tile) v = 0.05;
  CHECK(apply_whole_image(white, pos) == white);
}

TEST_CASE("apply_per_region contracts") {
  Rng rng(7);
  Image img = random_image(rng);
  Perturbation p = random_tile(0.06, rng);
  CHECK(apply_per_region(img, {}, p) == img);

  std::vector<Box> whole{Box{0, 0, kImageSide, kImageSide}};
  Image a = apply_per_region(img, whole, p);
  // A full-image box is the tile upsampled 4x by nearest neighbour.
  Image expect = img;
  for (int y = 0; y < kImageSide; ++y)
    for (int x = 0; x < kImageSide; ++x)
      for (int c = 0; c < 3; ++c)
        expect.at(y, x, c) = std::clamp(img.at(y, x, c) + p.tile[((y / 4) * 16 + x / 4) * 3 + c], 0.0, 1.0);
  CHECK(a == expect);

  Box b1{2, 2, 10, 10}, b2{30, 30, 16, 20};
  std::vector<Box> two{b1, b2};
  Image o = apply_per_region(img, two, p);
  auto inside = [](const Box& b, int x, int y) { return x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h; };
  for (int y = 0; y < kImageSide; ++y)
    for (int x = 0; x < kImageSide; ++x)
      if (!inside(b1, x, y) && !inside(b2, x, y))
        for (int c = 0; c < 3; ++c) CHECK(o.at(y, x, c) == img.at(y, x, c));
}

TEST_CASE("fooling_rate: zero perturbation is 0 and rates lie in [0, 1]") {
  Rng rng(8);
  BackboneWeights w = BackboneWeights::initialize(rng);
  Matrix crops(40, kCropSize);
  for (double& v : crops.data()) v = rng.uniform();
  CHECK(fooling_rate(w, crops, Perturbation{}) == 0.0);
  Perturbation big;
  for (double& v : big.tile) v = rng.uniform(-0.5, 0.5);
  const double r = fooling_rate(w, crops, big);
  CHECK(r >= 0.0);
  CHECK(r <= 1.0);

  Matrix pc = perturb_crops(crops, big);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    CHECK(pc.data()[i] >= 0.0);
    CHECK(pc.data()[i] <= 1.0);
  }
}

TEST_CASE("uap: misclassified crops contribute no update; fooling does not drop") {
  Rng rng(9);
  BackboneWeights w = BackboneWeights::initialize(rng);
  LabeledCrops d{Matrix(12, kCropSize), std::vector<int>(12)};
  for (double& v : d.crops.data()) v = rng.uniform(0.2, 0.8);
  for (std::size_t r = 0; r < 12; ++r) {
    auto out = backbone_forward(w, d.crops.row(r));
    const int arg = static_cast<int>(std::max_element(out.probs.begin(), out.probs.end()) - out.probs.begin());
    d.labels[r] = (arg + 1) % kNumCategories;
  }
  UapOptions opts;
  opts.max_epochs = 1;
  Rng a(10);
  Perturbation p = uap_synthesize(w, d, opts, a);
  for (double v : p.tile) CHECK(v == 0.0);

  for (std::size_t r = 0; r < 12; ++r) {
    auto out = backbone_forward(w, d.crops.row(r));
    d.labels[r] = static_cast<int>(std::max_element(out.probs.begin(), out.probs.end() - 1) - out.probs.begin());
  }
  Rng b(11), c(11);
  opts.max_epochs = 3;
  AttackReport rep;
  Perturbation u = uap_synthesize(w, d, opts, b, &rep);
  CHECK(u == uap_synthesize(w, d, opts, c));
  CHECK(u.linf() <= opts.epsilon + 1e-12);
  CHECK(fooling_rate(w, d.crops, u) >= fooling_rate(w, d.crops, Perturbation{}));
  CHECK(rep.fooling_rate == doctest::Approx(fooling_rate(w, d.crops, u)).epsilon(1e-12));
}
