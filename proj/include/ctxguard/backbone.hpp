#pragma once

#include <span>
#include <string>
#include <vector>

#include "ctxguard/geometry.hpp"
#include "ctxguard/numerics.hpp"
#include "ctxguard/params.hpp"
#include "ctxguard/scenegen.hpp"

namespace ctxguard {

inline constexpr std::size_t kHidden1 = 256;
inline constexpr std::size_t kFeatureDim = 128;
inline constexpr std::size_t kPooledDim = kFeatureDim / 2;

/// Value subtracted from every input pixel before the first layer.
inline constexpr double kInputCentre = 0.5;

/// Nearest-neighbour resample of `box` to a 16x16x3 crop, flattened HWC.
std::vector<double> crop_resize(const Image& image, const Box& box);

/// MLP 768 -> 256 (ReLU) -> 128 (ReLU, feature layer) -> 9 logits.
/// Inputs are centred (x - kInputCentre) before the first layer.
class BackboneWeights {
 public:
  enum Tensor : std::size_t { W1, B1, W2, B2, W3, B3 };

  static BackboneWeights zeros();
  static BackboneWeights initialize(Rng& rng);
  /// Adopts a checkpoint after verifying its schema.
  static BackboneWeights from_params(ParamSet params);

  const ParamSet& params() const noexcept { return params_; }
  ParamSet& params() noexcept { return params_; }
  const Matrix& operator[](Tensor t) const { return params_[t]; }

  friend bool operator==(const BackboneWeights&, const BackboneWeights&) = default;

 private:
  ParamSet params_;
};

struct BackboneOutput {
  std::vector<double> feature;  // 128, non-negative
  std::vector<double> probs;    // 9
};

BackboneOutput backbone_forward(const BackboneWeights& w, std::span<const double> crop);

/// Activations of a batch forward pass, one row per crop.
struct BackboneCache {
  Matrix input;  // centred crops
  Matrix hidden;
  Matrix feature;
  Matrix logits;
  Matrix probs;
};

BackboneCache backbone_forward_batch(const BackboneWeights& w, const Matrix& crops);

/// Upstream gradients; an empty matrix stands for zero.
struct BackboneUpstream {
  Matrix dlogits;
  Matrix dfeature;
  Matrix dhidden;
};

/// Accumulates weight gradients into `wgrad` (zeroed by the caller) and writes
/// d/d(crop) into `dinput` when requested.
void backbone_backward(const BackboneWeights& w, const BackboneCache& cache,
                       const BackboneUpstream& up, ParamSet* wgrad, Matrix* dinput);

/// Adjacent-pair averaging: out[i] = (f[2i] + f[2i+1]) / 2.
std::vector<double> mean_pool(std::span<const double> feature);

/// Category of the highest-IoU ground truth when that IoU >= 0.5, else background.
int label_for_box(const Box& box, std::span<const GtObject> objects);

struct Detection {
  Box box;
  int category = kBackground;
  double confidence = 0.0;
  std::vector<double> probs;

  friend bool operator==(const Detection&, const Detection&) = default;
};

/// A detection plus the backbone feature it came from; the rescoring input.
struct RegionDetection {
  Detection det;
  std::vector<double> feature;

  friend bool operator==(const RegionDetection&, const RegionDetection&) = default;
};

struct DetectResult {
  std::vector<RegionDetection> regions;  // one per proposal, background included
  std::vector<Detection> reported;       // foreground argmax with confidence >= 0.05
};

inline constexpr double kReportMinConfidence = 0.05;

DetectResult detect(const BackboneWeights& w, const Image& image, std::span<const Box> proposals);
/// Same as detect, but on precomputed crops (one per proposal).
DetectResult detect_crops(const BackboneWeights& w, std::span<const Box> proposals, const Matrix& crops);

struct BackboneTrainOptions {
  int epochs = 30;
  double learning_rate = 0.05;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  double weight_decay = 0.0;
  /// Std of fresh Gaussian noise added to each crop every epoch.
  double augment_noise = 0.0;
};

struct BackboneTrainReport {
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
  double non_confusable_accuracy = 0.0;
  std::size_t samples = 0;
  bool divergence_warning = false;
};

/// Labelled training crops from every proposal in `ds`.
struct LabeledCrops {
  Matrix crops;
  std::vector<int> labels;
};

LabeledCrops collect_training_crops(const Dataset& ds);

BackboneWeights train_backbone(const LabeledCrops& data, Rng& rng, const BackboneTrainOptions& opts,
                               const ContextModel& cm, BackboneTrainReport* report = nullptr);
BackboneWeights train_backbone(const Dataset& ds, Rng& rng, const BackboneTrainOptions& opts,
                               const ContextModel& cm, BackboneTrainReport* report = nullptr);

/// Fraction of rows whose argmax equals the label.
double backbone_accuracy(const BackboneWeights& w, const Matrix& crops, std::span<const int> labels);

}  // namespace ctxguard
