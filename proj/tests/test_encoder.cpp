#include <cmath>
#include <numeric>

#include "doctest.h"

#include "ctxguard/encoder.hpp"
#include "ctxguard/errors.hpp"

using namespace ctxguard;

namespace {

std::vector<RegionToken> random_tokens(std::size_t n, Rng& rng) {
  std::vector<RegionToken> t(n);
  for (std::size_t i = 0; i < n; ++i) {
    t[i].pooled.resize(kPooledDim);
    for (double& v : t[i].pooled) v = rng.uniform();
    for (double& v : t[i].nbox) v = rng.uniform();
    t[i].position = i;
  }
  return t;
}

double max_diff(const Matrix& a, const Matrix& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("positional encoding examples") {
  Matrix pe = positional_encoding(4, 4);
  for (std::size_t j = 0; j < 4; ++j) CHECK(pe(0, j) == (j % 2 == 0 ? 0.0 : 1.0));
  CHECK(pe(1, 0) == doctest::Approx(std::sin(1.0)).epsilon(1e-15));
  CHECK(pe(1, 1) == doctest::Approx(std::cos(1.0)).epsilon(1e-15));
  CHECK(pe(1, 2) == doctest::Approx(std::sin(0.01)).epsilon(1e-15));
  CHECK(pe(1, 3) == doctest::Approx(std::cos(0.01)).epsilon(1e-15));
  CHECK(pe(1, 0) == doctest::Approx(0.84147).epsilon(1e-5));
  Matrix big = positional_encoding(16, 64);
  for (double v : big.data()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("build_tokens orders by confidence, ties by position") {
  std::vector<RegionDetection> regions(3);
  regions[0].det = Detection{Box{10, 5, 8, 8}, 0, 0.3, {}};
  regions[1].det = Detection{Box{2, 5, 8, 8}, 1, 0.9, {}};
  regions[2].det = Detection{Box{1, 9, 8, 8}, 1, 0.3, {}};
  for (auto& r : regions) r.feature.assign(kFeatureDim, 1.0);
  TokenSequence seq = build_tokens(regions);
  REQUIRE(seq.order.size() == 3);
  CHECK(seq.order[0] == 1);
  CHECK(seq.order[1] == 2);
  CHECK(seq.order[2] == 0);
  for (std::size_t k = 0; k < 3; ++k) CHECK(seq.tokens[k].position == k);
  CHECK(seq.tokens[0].nbox[0] == doctest::Approx((2 + 4) / 64.0));
  CHECK(seq.tokens[0].nbox[2] == doctest::Approx(8 / 64.0));
}

TEST_CASE("self-attention: rows sum to 1, single token, identical tokens") {
  EncoderConfig cfg;
  Rng rng(3);
  TedmWeights w = TedmWeights::initialize(cfg, rng);
  Matrix x(6, cfg.d_model);
  for (double& v : x.data()) v = rng.normal();
  AttentionOutput a = self_attention(x, w, 0);
  REQUIRE(a.attn.size() == cfg.heads);
  for (const Matrix& m : a.attn)
    for (std::size_t r = 0; r < m.rows(); ++r) {
      const auto row = m.row(r);
      CHECK(std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0) <= 1e-12);
    }

  Matrix one(1, cfg.d_model);
  for (double& v : one.data()) v = rng.normal();
  AttentionOutput s = self_attention(one, w, 1);
  for (const Matrix& m : s.attn) CHECK(m(0, 0) == 1.0);
  // Output projection of the single token's value vector.
  const ParamSet& p = w.params();
  Matrix v = matmul(one, p[w.layer_index(1, TedmWeights::Wv)]);
  add_row_vector(v, p[w.layer_index(1, TedmWeights::Bv)].row(0));
  Matrix o = matmul(v, p[w.layer_index(1, TedmWeights::Wo)]);
  add_row_vector(o, p[w.layer_index(1, TedmWeights::Bo)].row(0));
  CHECK(max_diff(o, s.out) <= 1e-12);

  Matrix twin(2, cfg.d_model);
  for (std::size_t j = 0; j < cfg.d_model; ++j) twin(0, j) = twin(1, j) = rng.normal();
  AttentionOutput t = self_attention(twin, w, 0);
  for (std::size_t j = 0; j < cfg.d_model; ++j) CHECK(std::abs(t.out(0, j) - t.out(1, j)) <= 1e-15);
}

TEST_CASE("encoder attention maps of a full sequence are row-stochastic") {
  EncoderConfig cfg;
  Rng rng(4);
  TedmWeights w = TedmWeights::initialize(cfg, rng);
  auto maps = attention_maps(random_tokens(9, rng), w);
  CHECK(maps.size() == cfg.layers);
  for (const auto& layer : maps)
    for (const Matrix& m : layer)
      for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto row = m.row(r);
        CHECK(std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0) <= 1e-12);
      }
}

TEST_CASE("without positional encoding the encoder is permutation-equivariant") {
  EncoderConfig cfg;
  Rng rng(5);
  TedmWeights w = TedmWeights::initialize(cfg, rng);
  auto tokens = random_tokens(7, rng);
  Matrix out = encoder_forward(tokens, w, false);
  std::vector<std::size_t> perm{3, 0, 6, 1, 5, 2, 4};
  std::vector<RegionToken> permuted;
  for (std::size_t k = 0; k < perm.size(); ++k) {
    permuted.push_back(tokens[perm[k]]);
    permuted.back().position = k;
  }
  Matrix pout = encoder_forward(permuted, w, false);
  for (std::size_t k = 0; k < perm.size(); ++k)
    for (std::size_t j = 0; j < cfg.d_out; ++j) CHECK(std::abs(pout(k, j) - out(perm[k], j)) <= 1e-9);
}

TEST_CASE("with positional encoding a two-token swap breaks equivariance") {
  EncoderConfig cfg;
  Rng rng(6);
  TedmWeights w = TedmWeights::initialize(cfg, rng);
  auto tokens = random_tokens(2, rng);
  Matrix out = encoder_forward(tokens, w, true);
  std::vector<RegionToken> swapped{tokens[1], tokens[0]};
  swapped[0].position = 0;
  swapped[1].position = 1;
  Matrix sout = encoder_forward(swapped, w, true);
  double d = 0.0;
  for (std::size_t j = 0; j < cfg.d_out; ++j) {
    d = std::max(d, std::abs(sout(0, j) - out(1, j)));
    d = std::max(d, std::abs(sout(1, j) - out(0, j)));
  }
  CHECK(d > 1e-6);
}

TEST_CASE("single-token sequence and capacity") {
  EncoderConfig cfg;
  Rng rng(7);
  TedmWeights w = TedmWeights::initialize(cfg, rng);
  Matrix one = encoder_forward(random_tokens(1, rng), w, true);
  CHECK(one.rows() == 1);
  CHECK(one.all_finite());
  CHECK_THROWS_AS(encoder_forward(random_tokens(cfg.max_seq + 1, rng), w, true), CapacityError);
}

TEST_CASE("classifier: zero weights give uniform rows; rows sum to 1") {
  EncoderConfig cfg;
  TedmWeights z = TedmWeights::zeros(cfg);
  Rng rng(8);
  Matrix enc(5, cfg.d_out);
  for (double& v : enc.data()) v = rng.normal();
  Matrix pz = classify(enc, z);
  for (double p : pz.data()) CHECK(p == doctest::Approx(1.0 / 9.0).epsilon(1e-15));
  TedmWeights w = TedmWeights::initialize(cfg, rng);
  Matrix p = classify(enc, w);
  for (std::size_t r = 0; r < p.rows(); ++r) {
    const auto row = p.row(r);
    CHECK(std::abs(std::accumulate(row.begin(), row.end(), 0.0) - 1.0) <= 1e-9);
  }
}

namespace {

std::vector<TedmExample> random_examples(Rng& rng) {
  std::vector<TedmExample> ex(3);
  for (std::size_t e = 0; e < ex.size(); ++e) {
    ex[e].tokens = random_tokens(2 + e, rng);
    for (std::size_t i = 0; i < ex[e].tokens.size(); ++i) ex[e].targets.push_back(static_cast<int>(rng.uniform_int(9)));
  }
  return ex;
}

std::vector<std::size_t> sampled_indices(const TedmWeights& w, const std::vector<std::size_t>& tensors, Rng& rng,
                                         std::size_t per_tensor) {
  std::vector<std::size_t> offsets{0};
  for (const auto& t : w.params().tensors()) offsets.push_back(offsets.back() + t.value.size());
  std::vector<std::size_t> idx;
  for (std::size_t t : tensors) {
    const std::size_t n = offsets[t + 1] - offsets[t];
    for (std::size_t k = 0; k < std::min(per_tensor, n); ++k) idx.push_back(offsets[t] + rng.uniform_int(n));
  }
  return idx;
}

}  // namespace

TEST_CASE("encoder and classifier gradients match finite differences (3 seeds)") {
  EncoderConfig cfg;
  for (std::uint64_t seed : {31u, 32u, 33u}) {
    Rng rng(seed);
    TedmWeights w = TedmWeights::initialize(cfg, rng);
    auto examples = random_examples(rng);
    TedmWeights probe = w;
    Objective f = [&](std::span<const double> flat) {
      unflatten_into(flat, probe.params());
      return tedm_objective(probe, examples, 1e-3);
    };
    std::vector<std::size_t> all(w.params().count());
    std::iota(all.begin(), all.end(), 0);
    auto idx = sampled_indices(w, all, rng, 12);
    CHECK(grad_check(f, flatten_params(w.params()), 1e-5, idx) <= 1e-4);

    std::vector<std::size_t> head{w.cls1_w(), w.cls1_b(), w.cls2_w(), w.cls2_b()};
    auto hidx = sampled_indices(w, head, rng, 60);
    CHECK(grad_check(f, flatten_params(w.params()), 1e-5, hidx) <= 1e-4);
  }
}

TEST_CASE("train_tedm: deterministic with strictly decreasing accepted objectives") {
  EncoderConfig cfg;
  Rng data_rng(9);
  auto examples = random_examples(data_rng);
  TedmTrainOptions opts;
  opts.scg.max_iters = 25;
  Rng a(40), b(40);
  TedmTrainReport rep;
  TedmWeights w1 = train_tedm(examples, cfg, opts, a, &rep);
  TedmWeights w2 = train_tedm(examples, cfg, opts, b);
  CHECK(w1 == w2);
  Rng c(40);
  TedmWeights init = TedmWeights::initialize(cfg, c);
  double prev = tedm_objective(init, examples).value;
  CHECK(rep.trace.accepted_count() > 0);
  for (const auto& it : rep.trace.iterations) {
    if (!it.accepted) continue;
    CHECK(it.objective < prev);
    prev = it.objective;
  }
}

TEST_CASE("revise_detections: baseline probs are a fixed point; argmax flips relabel") {
  Rng rng(10);
  std::vector<RegionDetection> regions(4);
  std::vector<std::vector<double>> probs;
  std::vector<Detection> baseline;
  for (std::size_t i = 0; i < regions.size(); ++i) {
    std::vector<double> logits(kNumClasses);
    for (double& v : logits) v = 3.0 * rng.normal();
    if (i == 2) logits[kBackground] = 50.0;
    auto p = softmax(logits);
    const auto it = std::max_element(p.begin(), p.end());
    regions[i].det = Detection{Box{static_cast<int>(i) * 10, 3, 9, 9}, static_cast<int>(it - p.begin()), *it, p};
    regions[i].feature.assign(kFeatureDim, 0.5);
    probs.push_back(p);
    if (regions[i].det.category != kBackground) baseline.push_back(regions[i].det);
  }
  CHECK(revise_detections(regions, probs) == baseline);

  // A triangle flipped to diamond by context keeps its box and takes the new confidence.
  const int triangle = 0, diamond = 4;
  std::vector<RegionDetection> one(1);
  one[0].det = Detection{Box{5, 5, 12, 12}, triangle, 0.6, {}};
  one[0].feature.assign(kFeatureDim, 0.1);
  std::vector<double> p(kNumClasses, 0.02);
  p[diamond] = 0.7;
  p[triangle] = 0.16;
  std::vector<std::vector<double>> pr{p};
  auto revised = revise_detections(one, pr);
  REQUIRE(revised.size() == 1);
  CHECK(revised[0].category == diamond);
  CHECK(revised[0].box == one[0].det.box);
  CHECK(revised[0].confidence == 0.7);
  CHECK(std::string(category_name(diamond)) == "diamond");
}
