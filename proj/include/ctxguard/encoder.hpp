#pragma once

#include <array>
#include <span>
#include <vector>

#include "ctxguard/backbone.hpp"
#include "ctxguard/numerics.hpp"
#include "ctxguard/params.hpp"
#include "ctxguard/scg.hpp"

namespace ctxguard {

struct EncoderConfig {
  std::size_t d_model = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t d_k = 16;
  std::size_t d_ff = 128;
  std::size_t d_out = 32;
  std::size_t hidden_units = 50;
  std::size_t classes = kNumClasses;
  std::size_t max_seq = 16;
  std::size_t pooled_dim = kPooledDim;
  bool use_positional_encoding = true;
  /// When false the normalised box entries of every token are zeroed.
  bool use_boxes = true;
  double layer_norm_eps = 1e-5;

  std::size_t token_dim() const noexcept { return pooled_dim + 4; }
  void validate() const;

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

struct RegionToken {
  std::vector<double> pooled;
  std::array<double, 4> nbox{};  // cx, cy, w, h over the image side
  std::size_t position = 0;
};

/// Tokens in descending baseline confidence, ties by (x, y). `order[k]` is the
/// region index that became token k.
struct TokenSequence {
  std::vector<RegionToken> tokens;
  std::vector<std::size_t> order;
};

TokenSequence build_tokens(std::span<const RegionDetection> regions, int image_side = kImageSide);

/// PE[pos, 2i] = sin(pos / 10000^(2i/d)), PE[pos, 2i+1] = cos(same).
Matrix positional_encoding(std::size_t n, std::size_t d);

/// Weights of the rescoring module. Schema order: input projection, then per
/// layer Q, K, V, O, feed-forward pair and two layer-norm gain/bias pairs, then
/// the output projection and the two classifier layers.
class TedmWeights {
 public:
  static TedmWeights zeros(const EncoderConfig& cfg);
  static TedmWeights initialize(const EncoderConfig& cfg, Rng& rng);
  static TedmWeights from_params(const EncoderConfig& cfg, ParamSet params);
  static ParamSet schema(const EncoderConfig& cfg);

  const EncoderConfig& config() const noexcept { return cfg_; }
  const ParamSet& params() const noexcept { return params_; }
  ParamSet& params() noexcept { return params_; }

  // Tensor indices into params().
  static constexpr std::size_t kInW = 0, kInB = 1;
  enum LayerTensor : std::size_t {
    Wq, Bq, Wk, Bk, Wv, Bv, Wo, Bo, Ff1W, Ff1B, Ff2W, Ff2B, Ln1G, Ln1B, Ln2G, Ln2B, kPerLayer
  };
  std::size_t layer_index(std::size_t layer, LayerTensor t) const noexcept {
    return 2 + layer * kPerLayer + t;
  }
  std::size_t out_w() const noexcept { return 2 + cfg_.layers * kPerLayer; }
  std::size_t out_b() const noexcept { return out_w() + 1; }
  std::size_t cls1_w() const noexcept { return out_w() + 2; }
  std::size_t cls1_b() const noexcept { return out_w() + 3; }
  std::size_t cls2_w() const noexcept { return out_w() + 4; }
  std::size_t cls2_b() const noexcept { return out_w() + 5; }

  friend bool operator==(const TedmWeights&, const TedmWeights&) = default;

 private:
  EncoderConfig cfg_;
  ParamSet params_;
};

struct AttentionOutput {
  Matrix out;                // n x d_model, after the output projection
  std::vector<Matrix> attn;  // one n x n row-stochastic matrix per head
};

/// One multi-head self-attention block (no masking).
AttentionOutput self_attention(const Matrix& x, const TedmWeights& w, std::size_t layer);

/// Token matrix (n x token_dim) for a sequence.
Matrix token_matrix(std::span<const RegionToken> tokens, const EncoderConfig& cfg);

/// n x d_out encoded features. Throws CapacityError when n > max_seq.
Matrix encoder_forward(std::span<const RegionToken> tokens, const TedmWeights& w, bool use_pe);
/// Per-row classifier head: sigmoid hidden layer then softmax over 9.
Matrix classify(const Matrix& encoded, const TedmWeights& w);

/// Attention matrices of every layer for a sequence, [layer][head].
std::vector<std::vector<Matrix>> attention_maps(std::span<const RegionToken> tokens, const TedmWeights& w);

/// One scene's rescoring example: tokens and their target labels.
struct TedmExample {
  std::vector<RegionToken> tokens;
  std::vector<int> targets;
};

/// Mean token cross-entropy over `examples` (+ 0.5 * l2 * |w|^2) and its
/// gradient with respect to every weight.
ValueGrad tedm_objective(const TedmWeights& w, std::span<const TedmExample> examples, double l2 = 0.0);

/// Tokens plus IoU-rule targets from the backbone's regions on every scene.
std::vector<TedmExample> build_tedm_examples(const Dataset& ds, const BackboneWeights& backbone);

struct TedmTrainOptions {
  ScgOptions scg;
  double l2 = 0.0;
};

struct TedmTrainReport {
  ScgTrace trace;
  double final_objective = 0.0;
  double token_accuracy = 0.0;
  std::size_t tokens = 0;
};

TedmWeights train_tedm(std::span<const TedmExample> examples, const EncoderConfig& cfg,
                       const TedmTrainOptions& opts, Rng& rng, TedmTrainReport* report = nullptr);
TedmWeights train_tedm(const Dataset& ds, const BackboneWeights& backbone, const EncoderConfig& cfg,
                       const TedmTrainOptions& opts, Rng& rng, TedmTrainReport* report = nullptr);

/// The module's probabilities for each region, in region order.
std::vector<std::vector<double>> tedm_region_probs(std::span<const RegionDetection> regions,
                                                   const TedmWeights& w);

/// Reported set from per-region probabilities: argmax category, background
/// removed, boxes unchanged, confidence = probs[category].
std::vector<Detection> revise_detections(std::span<const RegionDetection> regions,
                                         std::span<const std::vector<double>> probs);

/// Rescoring pass over every region of a scene, including those the baseline
/// labelled background.
std::vector<Detection> rescore(std::span<const RegionDetection> regions, const TedmWeights& w);

/// Fraction of tokens whose argmax equals the target.
double tedm_token_accuracy(const TedmWeights& w, std::span<const TedmExample> examples);

}  // namespace ctxguard
