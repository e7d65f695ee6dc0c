#include "ctxguard/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

#include "ctxguard/errors.hpp"
#include "ctxguard/parallel.hpp"

namespace ctxguard {

using nlohmann::json;

namespace {

constexpr double kActivationFloor = 1e-6;

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

Matrix single_row(std::span<const double> v) {
  Matrix m(1, v.size());
  std::copy(v.begin(), v.end(), m.data().begin());
  return m;
}

void check_tile(const Perturbation& p) {
  if (p.tile.size() != kCropSize) throw ShapeError("perturbation tile must have 768 entries");
}

}  // namespace

std::string attack_kind_name(AttackKind k) { return k == AttackKind::FFF ? "fff" : "uap"; }

AttackKind parse_attack_kind(const std::string& s) {
  if (s == "fff") return AttackKind::FFF;
  if (s == "uap") return AttackKind::UAP;
  throw ArgumentError("unknown attack kind '" + s + "' (expected fff or uap)");
}

std::string apply_mode_name(ApplyMode m) { return m == ApplyMode::Whole ? "whole" : "region"; }

ApplyMode parse_apply_mode(const std::string& s) {
  if (s == "whole") return ApplyMode::Whole;
  if (s == "region") return ApplyMode::Region;
  throw ArgumentError("unknown apply mode '" + s + "' (expected whole or region)");
}

double Perturbation::linf() const { return max_abs(tile); }

std::string perturbation_to_string(const Perturbation& p) {
  check_tile(p);
  const json doc = {{"kind", attack_kind_name(p.kind)},
                    {"epsilon", p.epsilon},
                    {"tile", p.tile},
                    {"seed", p.seed},
                    {"iters_used", p.iters_used}};
  return doc.dump() + "\n";
}

Perturbation perturbation_from_string(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("perturbation: ") + e.what(), 1);
  }
  Perturbation p;
  try {
    p.kind = parse_attack_kind(doc.at("kind").get<std::string>());
    p.epsilon = doc.at("epsilon").get<double>();
    p.tile = doc.at("tile").get<std::vector<double>>();
    p.seed = doc.at("seed").get<std::uint64_t>();
    p.iters_used = doc.value("iters_used", 0);
  } catch (const json::exception& e) {
    throw ParseError(std::string("perturbation: ") + e.what(), 1);
  }
  check_tile(p);
  if (!std::all_of(p.tile.begin(), p.tile.end(), [](double v) { return std::isfinite(v); }))
    throw NumericError("perturbation: non-finite tile entry");
  if (p.linf() > p.epsilon + 1e-12) throw ConsistencyError("perturbation: tile exceeds its epsilon budget");
  return p;
}

void save_perturbation(const std::filesystem::path& path, const Perturbation& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::ios_base::failure("cannot write " + path.string());
  out << perturbation_to_string(p);
  if (!out) throw std::ios_base::failure("write failed: " + path.string());
}

Perturbation load_perturbation(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::ios_base::failure("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return perturbation_from_string(ss.str());
}

ValueGrad fff_objective(const BackboneWeights& w, std::span<const double> tile) {
  if (tile.size() != kCropSize) throw ShapeError("fff_objective: tile must have 768 entries");
  // The tile is the centred input: the crop is the centring level plus the tile.
  std::vector<double> crop(tile.begin(), tile.end());
  for (double& v : crop) v += kInputCentre;
  const BackboneCache cache = backbone_forward_batch(w, single_row(crop));

  ValueGrad out;
  BackboneUpstream up;
  auto layer_term = [&](const Matrix& act, Matrix& grad) {
    double mean = 0.0;
    for (double a : act.data()) mean += a;
    mean /= static_cast<double>(act.size());
    grad = Matrix(act.rows(), act.cols(), 1.0 / ((mean + kActivationFloor) * static_cast<double>(act.size())));
    return std::log(mean + kActivationFloor);
  };
  out.value = layer_term(cache.hidden, up.dhidden) + layer_term(cache.feature, up.dfeature);
  Matrix dinput;
  backbone_backward(w, cache, up, nullptr, &dinput);
  out.grad.assign(dinput.data().begin(), dinput.data().end());
  return out;
}

ValueGrad crop_loss(const BackboneWeights& w, std::span<const double> crop, int label) {
  if (crop.size() != kCropSize) throw ShapeError("crop_loss: crop must have 768 entries");
  if (label < 0 || label >= kNumClasses) throw ArgumentError("crop_loss: label out of range");
  const BackboneCache cache = backbone_forward_batch(w, single_row(crop));
  const auto probs = cache.probs.row(0);
  const auto l = static_cast<std::size_t>(label);
  ValueGrad out;
  out.value = -std::log(std::max(probs[l], 1e-300));
  BackboneUpstream up;
  up.dlogits = Matrix(1, kNumClasses);
  for (std::size_t k = 0; k < static_cast<std::size_t>(kNumClasses); ++k)
    up.dlogits(0, k) = probs[k] - (k == l ? 1.0 : 0.0);
  Matrix dinput;
  backbone_backward(w, cache, up, nullptr, &dinput);
  out.grad.assign(dinput.data().begin(), dinput.data().end());
  return out;
}

Perturbation fff_synthesize(const BackboneWeights& w, const FffOptions& opts, Rng& rng, AttackReport* report) {
  if (!(opts.epsilon >= 0.0)) throw ArgumentError("fff: epsilon must be non-negative");
  if (opts.iters < 0) throw ArgumentError("fff: iters must be non-negative");
  Perturbation p;
  p.kind = AttackKind::FFF;
  p.epsilon = opts.epsilon;
  p.seed = rng.split(0).next_u64();
  AttackReport rep;
  rep.kind = p.kind;
  rep.epsilon = p.epsilon;
  rep.seed = p.seed;
  if (opts.epsilon > 0.0) {
    Rng init = rng.split(1);
    for (double& v : p.tile) v = init.uniform(-opts.epsilon, opts.epsilon);
    const double step = opts.epsilon / 10.0;
    for (int it = 0; it < opts.iters; ++it) {
      const ValueGrad vg = fff_objective(w, p.tile);
      rep.objective_trace.push_back(vg.value);
      for (std::size_t k = 0; k < kCropSize; ++k)
        p.tile[k] = std::clamp(p.tile[k] + step * sign(vg.grad[k]), -opts.epsilon, opts.epsilon);
      p.iters_used = it + 1;
    }
    rep.objective_trace.push_back(fff_objective(w, p.tile).value);
  }
  if (report) *report = std::move(rep);
  return p;
}

LabeledCrops foreground_crops(const LabeledCrops& all) {
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < all.labels.size(); ++i)
    if (all.labels[i] != kBackground) keep.push_back(i);
  LabeledCrops out;
  out.crops = Matrix(keep.size(), kCropSize);
  for (std::size_t r = 0; r < keep.size(); ++r) {
    const auto src = all.crops.row(keep[r]);
    std::copy(src.begin(), src.end(), out.crops.row(r).begin());
    out.labels.push_back(all.labels[keep[r]]);
  }
  return out;
}

Matrix perturb_crops(const Matrix& crops, const Perturbation& p) {
  check_tile(p);
  if (crops.cols() != kCropSize) throw ShapeError("perturb_crops: crops must have 768 columns");
  Matrix out = crops;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t k = 0; k < kCropSize; ++k) row[k] = std::clamp(row[k] + p.tile[k], 0.0, 1.0);
  }
  return out;
}

namespace {

std::vector<std::size_t> argmax_rows(const Matrix& probs) {
  std::vector<std::size_t> out(probs.rows());
  for (std::size_t r = 0; r < probs.rows(); ++r) out[r] = argmax(probs.row(r));
  return out;
}

double changed_fraction(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  if (a.empty()) return 0.0;
  std::size_t changed = 0;
  for (std::size_t i = 0; i < a.size(); ++i) changed += a[i] != b[i];
  return static_cast<double>(changed) / static_cast<double>(a.size());
}

}  // namespace

double fooling_rate(const BackboneWeights& w, const Matrix& crops, const Perturbation& p) {
  if (crops.rows() == 0) throw ArgumentError("fooling_rate: no crops");
  const auto clean = argmax_rows(backbone_forward_batch(w, crops).probs);
  const auto attacked = argmax_rows(backbone_forward_batch(w, perturb_crops(crops, p)).probs);
  return changed_fraction(clean, attacked);
}

Perturbation uap_synthesize(const BackboneWeights& w, const LabeledCrops& crops, const UapOptions& opts, Rng& rng,
                            AttackReport* report) {
  if (crops.crops.rows() == 0) throw ArgumentError("uap: empty train crop set");
  if (!(opts.epsilon > 0.0)) throw ArgumentError("uap: epsilon must be positive");
  if (!(opts.target_fool > 0.0 && opts.target_fool <= 1.0)) throw ArgumentError("uap: target_fool must be in (0, 1]");
  if (opts.max_epochs < 1 || opts.inner_steps < 1) throw ArgumentError("uap: epochs and inner steps must be >= 1");
  Perturbation p;
  p.kind = AttackKind::UAP;
  p.epsilon = opts.epsilon;
  p.seed = rng.split(0).next_u64();
  AttackReport rep;
  rep.kind = p.kind;
  rep.epsilon = p.epsilon;
  rep.seed = p.seed;

  const std::size_t n = crops.crops.rows();
  const double step = opts.epsilon / 10.0;
  std::vector<double> x(kCropSize);
  for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng shuffle_rng = rng.split(static_cast<std::uint64_t>(epoch) + 1);
    shuffle_rng.shuffle(order);
    for (std::size_t i : order) {
      const auto crop = crops.crops.row(i);
      const int label = crops.labels[i];
      for (std::size_t k = 0; k < kCropSize; ++k) x[k] = std::clamp(crop[k] + p.tile[k], 0.0, 1.0);
      if (static_cast<int>(argmax(backbone_forward(w, x).probs)) != label) continue;
      std::vector<double> delta(kCropSize, 0.0);
      for (int s = 0; s < opts.inner_steps; ++s) {
        const ValueGrad vg = crop_loss(w, x, label);
        for (std::size_t k = 0; k < kCropSize; ++k) {
          delta[k] += step * sign(vg.grad[k]);
          x[k] = std::clamp(crop[k] + p.tile[k] + delta[k], 0.0, 1.0);
        }
        if (static_cast<int>(argmax(backbone_forward(w, x).probs)) != label) break;
      }
      for (std::size_t k = 0; k < kCropSize; ++k)
        p.tile[k] = std::clamp(p.tile[k] + delta[k], -opts.epsilon, opts.epsilon);
    }
    p.iters_used = epoch + 1;
    const double rate = fooling_rate(w, crops.crops, p);
    rep.objective_trace.push_back(rate);
    if (rate >= opts.target_fool) break;
  }
  rep.fooling_rate = rep.objective_trace.back();
  if (report) *report = std::move(rep);
  return p;
}

Perturbation uap_synthesize(const BackboneWeights& w, const Dataset& train, const UapOptions& opts, Rng& rng,
                            AttackReport* report) {
  return uap_synthesize(w, foreground_crops(collect_training_crops(train)), opts, rng, report);
}

Image apply_whole_image(const Image& image, const Perturbation& p) {
  check_tile(p);
  Image out = image;
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x)
      for (int c = 0; c < kChannels; ++c) {
        const std::size_t k = (static_cast<std::size_t>(y % kCropSide) * kCropSide + x % kCropSide) * kChannels + c;
        out.at(y, x, c) = std::clamp(out.at(y, x, c) + p.tile[k], 0.0, 1.0);
      }
  return out;
}

Image apply_per_region(const Image& image, std::span<const Box> boxes, const Perturbation& p) {
  check_tile(p);
  std::vector<double> delta(image.pixels().size(), 0.0);
  for (const Box& b : boxes) {
    if (b.w < 1 || b.h < 1) throw GeometryError("apply_per_region: empty box");
    for (int i = 0; i < b.h; ++i) {
      const int y = b.y + i;
      if (y < 0 || y >= image.height()) continue;
      const int ty = ((2 * i + 1) * kCropSide) / (2 * b.h);
      for (int j = 0; j < b.w; ++j) {
        const int x = b.x + j;
        if (x < 0 || x >= image.width()) continue;
        const int tx = ((2 * j + 1) * kCropSide) / (2 * b.w);
        for (int c = 0; c < kChannels; ++c) {
          delta[(static_cast<std::size_t>(y) * image.width() + x) * kChannels + c] +=
              p.tile[(static_cast<std::size_t>(ty) * kCropSide + tx) * kChannels + c];
        }
      }
    }
  }
  Image out = image;
  auto px = out.pixels();
  for (std::size_t k = 0; k < px.size(); ++k) px[k] = std::clamp(px[k] + delta[k], 0.0, 1.0);
  return out;
}

double fooling_rate(const BackboneWeights& w, const Dataset& ds, const Perturbation& p, ApplyMode mode) {
  std::vector<std::size_t> offsets(ds.scenes.size() + 1, 0);
  for (std::size_t s = 0; s < ds.scenes.size(); ++s) offsets[s + 1] = offsets[s] + ds.scenes[s].proposals.size();
  if (offsets.back() == 0) throw ArgumentError("fooling_rate: no proposals");
  std::vector<std::size_t> clean(offsets.back()), attacked(offsets.back());
  parallel_for(ds.scenes.size(), [&](std::size_t s) {
    const Scene& scene = ds.scenes[s];
    const Image img = mode == ApplyMode::Whole ? apply_whole_image(scene.image, p)
                                               : apply_per_region(scene.image, scene.proposals, p);
    const DetectResult a = detect(w, scene.image, scene.proposals);
    const DetectResult b = detect(w, img, scene.proposals);
    for (std::size_t r = 0; r < scene.proposals.size(); ++r) {
      clean[offsets[s] + r] = static_cast<std::size_t>(a.regions[r].det.category);
      attacked[offsets[s] + r] = static_cast<std::size_t>(b.regions[r].det.category);
    }
  });
  return changed_fraction(clean, attacked);
}

}  // namespace ctxguard
