#include "ctxguard/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ctxguard/errors.hpp"

namespace ctxguard {

std::vector<double> crop_resize(const Image& image, const Box& box) {
  const int x0 = std::max(0, box.x);
  const int y0 = std::max(0, box.y);
  const int x1 = std::min(image.width(), box.x + box.w);
  const int y1 = std::min(image.height(), box.y + box.h);
  const int w = x1 - x0;
  const int h = y1 - y0;
  if (w < 1 || h < 1) throw GeometryError("crop_resize: degenerate box after clamping");
  std::vector<double> crop(kCropSize);
  for (int i = 0; i < kCropSide; ++i) {
    const int sy = y0 + ((2 * i + 1) * h) / (2 * kCropSide);
    for (int j = 0; j < kCropSide; ++j) {
      const int sx = x0 + ((2 * j + 1) * w) / (2 * kCropSide);
      for (int c = 0; c < kChannels; ++c) {
        crop[(static_cast<std::size_t>(i) * kCropSide + j) * kChannels + c] = image.at(sy, sx, c);
      }
    }
  }
  return crop;
}

namespace {

ParamSet backbone_schema() {
  ParamSet p;
  p.add("bb.w1", Matrix(kCropSize, kHidden1));
  p.add("bb.b1", Matrix(1, kHidden1));
  p.add("bb.w2", Matrix(kHidden1, kFeatureDim));
  p.add("bb.b2", Matrix(1, kFeatureDim));
  p.add("bb.w3", Matrix(kFeatureDim, kNumClasses));
  p.add("bb.b3", Matrix(1, kNumClasses));
  return p;
}

void fill_normal(Matrix& m, Rng& rng, double stddev) {
  for (double& v : m.data()) v = stddev * rng.normal();
}

void relu_inplace(Matrix& m) {
  for (double& v : m.data()) v = v > 0.0 ? v : 0.0;
}

}  // namespace

BackboneWeights BackboneWeights::zeros() {
  BackboneWeights w;
  w.params_ = backbone_schema();
  return w;
}

BackboneWeights BackboneWeights::initialize(Rng& rng) {
  BackboneWeights w = zeros();
  fill_normal(w.params_[W1], rng, std::sqrt(2.0 / kCropSize));
  fill_normal(w.params_[W2], rng, std::sqrt(2.0 / kHidden1));
  fill_normal(w.params_[W3], rng, std::sqrt(1.0 / kFeatureDim));
  return w;
}

BackboneWeights BackboneWeights::from_params(ParamSet params) {
  if (!params.same_schema(backbone_schema())) throw ShapeError("backbone checkpoint schema mismatch");
  BackboneWeights w;
  w.params_ = std::move(params);
  return w;
}

BackboneCache backbone_forward_batch(const BackboneWeights& w, const Matrix& crops) {
  if (crops.cols() != kCropSize) throw ShapeError("backbone input must have 768 columns");
  BackboneCache c;
  c.input = crops;
  for (double& v : c.input.data()) v -= kInputCentre;
  c.hidden = matmul(c.input, w[BackboneWeights::W1]);
  add_row_vector(c.hidden, w[BackboneWeights::B1].data());
  relu_inplace(c.hidden);
  c.feature = matmul(c.hidden, w[BackboneWeights::W2]);
  add_row_vector(c.feature, w[BackboneWeights::B2].data());
  relu_inplace(c.feature);
  c.logits = matmul(c.feature, w[BackboneWeights::W3]);
  add_row_vector(c.logits, w[BackboneWeights::B3].data());
  c.probs = c.logits;
  softmax_rows(c.probs);
  return c;
}

BackboneOutput backbone_forward(const BackboneWeights& w, std::span<const double> crop) {
  if (crop.size() != kCropSize) throw ShapeError("backbone_forward: crop must have 768 values");
  const Matrix x(1, kCropSize, std::vector<double>(crop.begin(), crop.end()));
  BackboneCache c = backbone_forward_batch(w, x);
  return {c.feature.values(), c.probs.values()};
}

void backbone_backward(const BackboneWeights& w, const BackboneCache& cache,
                       const BackboneUpstream& up, ParamSet* wgrad, Matrix* dinput) {
  const std::size_t n = cache.input.rows();
  Matrix dfeat(n, kFeatureDim);
  if (up.dlogits.size() != 0) {
    if (wgrad) {
      accumulate_tn(cache.feature, up.dlogits, (*wgrad)[BackboneWeights::W3]);
      accumulate_column_sums(up.dlogits, (*wgrad)[BackboneWeights::B3].data());
    }
    dfeat = matmul_nt(up.dlogits, w[BackboneWeights::W3]);
  }
  if (up.dfeature.size() != 0) {
    auto d = dfeat.data();
    auto e = up.dfeature.data();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] += e[k];
  }
  {
    auto d = dfeat.data();
    auto a = cache.feature.data();
    for (std::size_t k = 0; k < d.size(); ++k)
      if (a[k] <= 0.0) d[k] = 0.0;
  }
  if (wgrad) {
    accumulate_tn(cache.hidden, dfeat, (*wgrad)[BackboneWeights::W2]);
    accumulate_column_sums(dfeat, (*wgrad)[BackboneWeights::B2].data());
  }
  Matrix dhid = matmul_nt(dfeat, w[BackboneWeights::W2]);
  if (up.dhidden.size() != 0) {
    auto d = dhid.data();
    auto e = up.dhidden.data();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] += e[k];
  }
  {
    auto d = dhid.data();
    auto a = cache.hidden.data();
    for (std::size_t k = 0; k < d.size(); ++k)
      if (a[k] <= 0.0) d[k] = 0.0;
  }
  if (wgrad) {
    accumulate_tn(cache.input, dhid, (*wgrad)[BackboneWeights::W1]);
    accumulate_column_sums(dhid, (*wgrad)[BackboneWeights::B1].data());
  }
  if (dinput) *dinput = matmul_nt(dhid, w[BackboneWeights::W1]);
}

std::vector<double> mean_pool(std::span<const double> feature) {
  if (feature.size() % 2 != 0) {
    throw ShapeError("mean_pool: odd feature length " + std::to_string(feature.size()));
  }
  std::vector<double> out(feature.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (feature[2 * i] + feature[2 * i + 1]) / 2.0;
  return out;
}

int label_for_box(const Box& box, std::span<const GtObject> objects) {
  double best = 0.0;
  int label = kBackground;
  for (const auto& o : objects) {
    const double v = iou(box, o.box);
    if (v > best) {
      best = v;
      label = o.category;
    }
  }
  return best >= 0.5 ? label : kBackground;
}

DetectResult detect_crops(const BackboneWeights& w, std::span<const Box> proposals, const Matrix& crops) {
  DetectResult res;
  if (proposals.empty()) return res;
  if (crops.rows() != proposals.size()) throw ShapeError("detect: one crop per proposal required");
  const BackboneCache c = backbone_forward_batch(w, crops);
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    RegionDetection r;
    r.det.box = proposals[i];
    r.det.probs = std::vector<double>(c.probs.row(i).begin(), c.probs.row(i).end());
    const auto it = std::max_element(r.det.probs.begin(), r.det.probs.end());
    r.det.category = static_cast<int>(it - r.det.probs.begin());
    r.det.confidence = *it;
    r.feature = std::vector<double>(c.feature.row(i).begin(), c.feature.row(i).end());
    if (r.det.category != kBackground && r.det.confidence >= kReportMinConfidence) {
      res.reported.push_back(r.det);
    }
    res.regions.push_back(std::move(r));
  }
  return res;
}

DetectResult detect(const BackboneWeights& w, const Image& image, std::span<const Box> proposals) {
  Matrix crops(proposals.size(), kCropSize);
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const auto crop = crop_resize(image, proposals[i]);
    std::copy(crop.begin(), crop.end(), crops.row(i).begin());
  }
  return detect_crops(w, proposals, crops);
}

LabeledCrops collect_training_crops(const Dataset& ds) {
  std::size_t n = 0;
  for (const auto& s : ds.scenes) n += s.proposals.size();
  LabeledCrops out;
  out.crops = Matrix(n, kCropSize);
  out.labels.reserve(n);
  std::size_t row = 0;
  for (const auto& s : ds.scenes) {
    for (const auto& b : s.proposals) {
      const auto crop = crop_resize(s.image, b);
      std::copy(crop.begin(), crop.end(), out.crops.row(row++).begin());
      out.labels.push_back(label_for_box(b, s.objects));
    }
  }
  return out;
}

double backbone_accuracy(const BackboneWeights& w, const Matrix& crops, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  const BackboneCache c = backbone_forward_batch(w, crops);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto r = c.probs.row(i);
    hits += static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin()) == labels[i];
  }
  return static_cast<double>(hits) / labels.size();
}

BackboneWeights train_backbone(const LabeledCrops& data, Rng& rng, const BackboneTrainOptions& opts,
                               const ContextModel& cm, BackboneTrainReport* report) {
  if (data.crops.rows() != data.labels.size()) throw ShapeError("train_backbone: label count mismatch");
  if (opts.batch_size == 0) throw ArgumentError("train_backbone: batch size must be positive");
  BackboneWeights w = BackboneWeights::initialize(rng);
  ParamSet velocity = w.params().zeros_like();
  ParamSet grad = w.params().zeros_like();
  const std::size_t n = data.labels.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  BackboneTrainReport rep;
  rep.samples = n;

  for (int epoch = 0; epoch < opts.epochs && n > 0; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < n; start += opts.batch_size) {
      const std::size_t bs = std::min(opts.batch_size, n - start);
      Matrix batch(bs, kCropSize);
      for (std::size_t b = 0; b < bs; ++b) {
        auto src = data.crops.row(order[start + b]);
        auto dst = batch.row(b);
        std::copy(src.begin(), src.end(), dst.begin());
        if (opts.augment_noise > 0.0)
          for (double& v : dst) v += opts.augment_noise * rng.normal();
      }
      const BackboneCache c = backbone_forward_batch(w, batch);
      BackboneUpstream up;
      up.dlogits = c.probs;
      for (std::size_t b = 0; b < bs; ++b) {
        const int y = data.labels[order[start + b]];
        loss_sum -= std::log(std::max(c.probs(b, static_cast<std::size_t>(y)), 1e-300));
        up.dlogits(b, static_cast<std::size_t>(y)) -= 1.0;
      }
      for (double& v : up.dlogits.data()) v /= static_cast<double>(bs);
      grad.set_zero();
      backbone_backward(w, c, up, &grad, nullptr);
      if (opts.weight_decay > 0.0) grad.add_scaled(w.params(), opts.weight_decay);
      // v <- momentum * v - lr * g;  w <- w + v
      for (std::size_t t = 0; t < velocity.count(); ++t) {
        auto v = velocity[t].data();
        auto g = grad[t].data();
        auto p = w.params()[t].data();
        for (std::size_t k = 0; k < v.size(); ++k) {
          v[k] = opts.momentum * v[k] - opts.learning_rate * g[k];
          p[k] += v[k];
        }
      }
    }
    rep.epoch_loss.push_back(loss_sum / static_cast<double>(n));
    if (!std::isfinite(rep.epoch_loss.back())) throw NumericError("train_backbone: loss diverged");
  }

  if (rep.epoch_loss.size() >= 5) {
    const double first = rep.epoch_loss[0];
    rep.divergence_warning =
        std::all_of(rep.epoch_loss.begin() + 1, rep.epoch_loss.begin() + 5, [&](double l) { return l >= first; });
  }
  if (n > 0) {
    const BackboneCache c = backbone_forward_batch(w, data.crops);
    std::size_t hits = 0, nc_hits = 0, nc_total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = c.probs.row(i);
      const bool hit = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin()) == data.labels[i];
      hits += hit;
      const int y = data.labels[i];
      if (y != kBackground && cm.confusable_partner(y) < 0) {
        ++nc_total;
        nc_hits += hit;
      }
    }
    rep.train_accuracy = static_cast<double>(hits) / n;
    rep.non_confusable_accuracy = nc_total ? static_cast<double>(nc_hits) / nc_total : 0.0;
  }
  if (report) *report = std::move(rep);
  return w;
}

BackboneWeights train_backbone(const Dataset& ds, Rng& rng, const BackboneTrainOptions& opts,
                               const ContextModel& cm, BackboneTrainReport* report) {
  return train_backbone(collect_training_crops(ds), rng, opts, cm, report);
}

}  // namespace ctxguard
