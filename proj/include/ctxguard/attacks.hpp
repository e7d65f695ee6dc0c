#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ctxguard/backbone.hpp"
#include "ctxguard/geometry.hpp"
#include "ctxguard/numerics.hpp"
#include "ctxguard/scenegen.hpp"

namespace ctxguard {

enum class AttackKind { FFF, UAP };

std::string attack_kind_name(AttackKind k);
AttackKind parse_attack_kind(const std::string& s);

enum class ApplyMode { Whole, Region };

std::string apply_mode_name(ApplyMode m);
ApplyMode parse_apply_mode(const std::string& s);

/// A crop-sized universal perturbation (16 x 16 x 3, same layout as a crop).
struct Perturbation {
  std::vector<double> tile = std::vector<double>(kCropSize, 0.0);
  double epsilon = 0.0;
  AttackKind kind = AttackKind::FFF;
  int iters_used = 0;
  std::uint64_t seed = 0;

  double linf() const;
  friend bool operator==(const Perturbation&, const Perturbation&) = default;
};

struct AttackReport {
  AttackKind kind = AttackKind::FFF;
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  double fooling_rate = 0.0;
  std::vector<double> objective_trace;
};

std::string perturbation_to_string(const Perturbation& p);
Perturbation perturbation_from_string(const std::string& text);
void save_perturbation(const std::filesystem::path& path, const Perturbation& p);
Perturbation load_perturbation(const std::filesystem::path& path);

/// Data-free objective: sum over both ReLU layers of log(mean activation + 1e-6),
/// with the tile itself as the (centred) network input.
ValueGrad fff_objective(const BackboneWeights& w, std::span<const double> tile);

/// Cross-entropy of `label` on clip01(crop) and its gradient w.r.t. the crop.
ValueGrad crop_loss(const BackboneWeights& w, std::span<const double> crop, int label);

struct FffOptions {
  double epsilon = 0.06;
  int iters = 400;
};

Perturbation fff_synthesize(const BackboneWeights& w, const FffOptions& opts, Rng& rng,
                            AttackReport* report = nullptr);

struct UapOptions {
  double epsilon = 0.06;
  double target_fool = 0.8;
  int max_epochs = 5;
  int inner_steps = 10;
};

/// Foreground crops only; background rows are dropped.
LabeledCrops foreground_crops(const LabeledCrops& all);

/// `crops` must be non-empty foreground crops.
Perturbation uap_synthesize(const BackboneWeights& w, const LabeledCrops& crops, const UapOptions& opts,
                            Rng& rng, AttackReport* report = nullptr);
Perturbation uap_synthesize(const BackboneWeights& w, const Dataset& train, const UapOptions& opts, Rng& rng,
                            AttackReport* report = nullptr);

/// Tile repeated across the canvas, added, clipped to [0, 1].
Image apply_whole_image(const Image& image, const Perturbation& p);
/// Tile resized (nearest neighbour) onto each box; overlaps accumulate.
Image apply_per_region(const Image& image, std::span<const Box> boxes, const Perturbation& p);

/// clip01(crop + tile) for every row.
Matrix perturb_crops(const Matrix& crops, const Perturbation& p);

/// Fraction of crops whose argmax changes when the tile is added directly.
double fooling_rate(const BackboneWeights& w, const Matrix& crops, const Perturbation& p);
/// Scene-level variant: the perturbation is applied to each image in `mode`
/// and the argmax at every proposal is compared with the clean one.
double fooling_rate(const BackboneWeights& w, const Dataset& ds, const Perturbation& p, ApplyMode mode);

}  // namespace ctxguard
