#include "ctxguard/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ctxguard/errors.hpp"
#include "ctxguard/parallel.hpp"

namespace ctxguard {

void EncoderConfig::validate() const {
  if (d_model == 0 || layers == 0 || heads == 0 || d_k == 0 || d_ff == 0 || d_out == 0 ||
      hidden_units == 0 || classes == 0 || max_seq == 0 || pooled_dim == 0) {
    throw ArgumentError("encoder config: all dimensions must be positive");
  }
  if (heads * d_k != d_model) throw ArgumentError("encoder config: heads * d_k must equal d_model");
  if (!(layer_norm_eps > 0.0)) throw ArgumentError("encoder config: layer_norm_eps must be positive");
}

TokenSequence build_tokens(std::span<const RegionDetection> regions, int image_side) {
  TokenSequence seq;
  seq.order.resize(regions.size());
  std::iota(seq.order.begin(), seq.order.end(), 0);
  std::stable_sort(seq.order.begin(), seq.order.end(), [&](std::size_t a, std::size_t b) {
    const auto& da = regions[a].det;
    const auto& db = regions[b].det;
    if (da.confidence != db.confidence) return da.confidence > db.confidence;
    if (da.box.x != db.box.x) return da.box.x < db.box.x;
    return da.box.y < db.box.y;
  });
  const double side = image_side;
  for (std::size_t k = 0; k < seq.order.size(); ++k) {
    const RegionDetection& r = regions[seq.order[k]];
    RegionToken t;
    t.pooled = mean_pool(r.feature);
    const Box& b = r.det.box;
    t.nbox = {(b.x + b.w / 2.0) / side, (b.y + b.h / 2.0) / side, b.w / side, b.h / side};
    for (double& v : t.nbox) v = std::clamp(v, 0.0, 1.0);
    t.position = k;
    seq.tokens.push_back(std::move(t));
  }
  return seq;
}

Matrix positional_encoding(std::size_t n, std::size_t d) {
  Matrix pe(n, d);
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; 2 * i < d; ++i) {
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(2 * i) / static_cast<double>(d));
      pe(pos, 2 * i) = std::sin(angle);
      if (2 * i + 1 < d) pe(pos, 2 * i + 1) = std::cos(angle);
    }
  }
  return pe;
}

ParamSet TedmWeights::schema(const EncoderConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.d_model;
  ParamSet p;
  p.add("in.w", Matrix(cfg.token_dim(), d));
  p.add("in.b", Matrix(1, d));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string pre = "enc" + std::to_string(l) + ".";
    p.add(pre + "wq", Matrix(d, d));
    p.add(pre + "bq", Matrix(1, d));
    p.add(pre + "wk", Matrix(d, d));
    p.add(pre + "bk", Matrix(1, d));
    p.add(pre + "wv", Matrix(d, d));
    p.add(pre + "bv", Matrix(1, d));
    p.add(pre + "wo", Matrix(d, d));
    p.add(pre + "bo", Matrix(1, d));
    p.add(pre + "ff1.w", Matrix(d, cfg.d_ff));
    p.add(pre + "ff1.b", Matrix(1, cfg.d_ff));
    p.add(pre + "ff2.w", Matrix(cfg.d_ff, d));
    p.add(pre + "ff2.b", Matrix(1, d));
    p.add(pre + "ln1.g", Matrix(1, d));
    p.add(pre + "ln1.b", Matrix(1, d));
    p.add(pre + "ln2.g", Matrix(1, d));
    p.add(pre + "ln2.b", Matrix(1, d));
  }
  p.add("out.w", Matrix(d, cfg.d_out));
  p.add("out.b", Matrix(1, cfg.d_out));
  p.add("cls1.w", Matrix(cfg.d_out, cfg.hidden_units));
  p.add("cls1.b", Matrix(1, cfg.hidden_units));
  p.add("cls2.w", Matrix(cfg.hidden_units, cfg.classes));
  p.add("cls2.b", Matrix(1, cfg.classes));
  return p;
}

TedmWeights TedmWeights::zeros(const EncoderConfig& cfg) {
  TedmWeights w;
  w.cfg_ = cfg;
  w.params_ = schema(cfg);
  return w;
}

TedmWeights TedmWeights::initialize(const EncoderConfig& cfg, Rng& rng) {
  TedmWeights w = zeros(cfg);
  for (auto& t : w.params_.tensors()) {
    const std::string& name = t.name;
    const bool is_weight = name.ends_with(".w") || name.ends_with("wq") || name.ends_with("wk") ||
                           name.ends_with("wv") || name.ends_with("wo");
    if (name.ends_with(".g")) {
      t.value.fill(1.0);
    } else if (is_weight) {
      const double stddev = std::sqrt(1.0 / static_cast<double>(t.value.rows()));
      for (double& v : t.value.data()) v = stddev * rng.normal();
    }
  }
  return w;
}

TedmWeights TedmWeights::from_params(const EncoderConfig& cfg, ParamSet params) {
  if (!params.same_schema(schema(cfg))) throw ShapeError("rescoring checkpoint schema mismatch");
  TedmWeights w;
  w.cfg_ = cfg;
  w.params_ = std::move(params);
  return w;
}

namespace {

/// Token rows of several sequences stacked; sequence s owns rows
/// [start[s], start[s+1]).
struct Segments {
  std::vector<std::size_t> start{0};
  std::size_t count() const { return start.size() - 1; }
  std::size_t rows() const { return start.back(); }
};

struct LayerCache {
  Matrix in;
  Matrix q, k, v;
  std::vector<Matrix> attn;  // [segment * heads + head]
  Matrix cat;
  Matrix n1;
  std::vector<double> inv1;
  Matrix h1;
  Matrix u;
  Matrix r;
  Matrix n2;
  std::vector<double> inv2;
  Matrix h2;
};

struct ForwardCache {
  Matrix x0;
  std::vector<LayerCache> layers;
  Matrix encoded;
  Matrix hidden;  // sigmoid activations
  Matrix probs;
};

Matrix affine(const Matrix& x, const Matrix& w, const Matrix& b) {
  Matrix y = matmul(x, w);
  add_row_vector(y, b.data());
  return y;
}

Matrix layer_norm_rows(const Matrix& z, const Matrix& g, const Matrix& b, double eps, Matrix& normalized,
                       std::vector<double>& inv_std) {
  Matrix out(z.rows(), z.cols());
  normalized = Matrix(z.rows(), z.cols());
  inv_std.assign(z.rows(), 0.0);
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const LayerNormResult res = layer_norm_full(z.row(i), g.data(), b.data(), eps);
    std::copy(res.out.begin(), res.out.end(), out.row(i).begin());
    std::copy(res.normalized.begin(), res.normalized.end(), normalized.row(i).begin());
    inv_std[i] = res.inv_std;
  }
  return out;
}

/// dZ from dH for H = g * N + b; accumulates dg, db.
Matrix layer_norm_backward(const Matrix& dh, const Matrix& normalized, const std::vector<double>& inv_std,
                           const Matrix& g, Matrix& dg, Matrix& db) {
  const std::size_t d = dh.cols();
  Matrix dz(dh.rows(), d);
  std::vector<double> dn(d);
  for (std::size_t i = 0; i < dh.rows(); ++i) {
    const auto dhr = dh.row(i);
    const auto nr = normalized.row(i);
    double mean_dn = 0.0, mean_dn_n = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dg(0, j) += dhr[j] * nr[j];
      db(0, j) += dhr[j];
      dn[j] = dhr[j] * g(0, j);
      mean_dn += dn[j];
      mean_dn_n += dn[j] * nr[j];
    }
    mean_dn /= static_cast<double>(d);
    mean_dn_n /= static_cast<double>(d);
    auto out = dz.row(i);
    for (std::size_t j = 0; j < d; ++j) out[j] = inv_std[i] * (dn[j] - mean_dn - nr[j] * mean_dn_n);
  }
  return dz;
}

/// Multi-head attention core: fills attn and returns the concatenated heads.
Matrix attention_heads(const Matrix& q, const Matrix& k, const Matrix& v, const Segments& seg,
                       std::size_t heads, std::size_t dk, std::vector<Matrix>& attn) {
  Matrix cat(q.rows(), q.cols());
  attn.clear();
  attn.reserve(seg.count() * heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  for (std::size_t s = 0; s < seg.count(); ++s) {
    const std::size_t a = seg.start[s];
    const std::size_t n = seg.start[s + 1] - a;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t c0 = h * dk;
      Matrix sc(n, n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < dk; ++c) acc += q(a + i, c0 + c) * k(a + j, c0 + c);
          sc(i, j) = acc * scale;
        }
      softmax_rows(sc);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double p = sc(i, j);
          for (std::size_t c = 0; c < dk; ++c) cat(a + i, c0 + c) += p * v(a + j, c0 + c);
        }
      attn.push_back(std::move(sc));
    }
  }
  return cat;
}

Matrix forward_batch(const TedmWeights& w, const Matrix& x0, const Segments& seg,
                     std::span<const std::size_t> positions, bool use_pe, ForwardCache* cache) {
  const EncoderConfig& cfg = w.config();
  const ParamSet& p = w.params();
  ForwardCache local;
  ForwardCache& fc = cache ? *cache : local;
  fc.x0 = x0;
  Matrix h = affine(x0, p[TedmWeights::kInW], p[TedmWeights::kInB]);
  if (use_pe) {
    std::size_t max_pos = 0;
    for (std::size_t pos : positions) max_pos = std::max(max_pos, pos);
    const Matrix pe = positional_encoding(max_pos + 1, cfg.d_model);
    for (std::size_t i = 0; i < h.rows(); ++i) {
      auto r = h.row(i);
      const auto e = pe.row(positions[i]);
      for (std::size_t j = 0; j < r.size(); ++j) r[j] += e[j];
    }
  }
  fc.layers.assign(cfg.layers, {});
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    LayerCache& lc = fc.layers[l];
    auto at = [&](TedmWeights::LayerTensor t) -> const Matrix& { return p[w.layer_index(l, t)]; };
    lc.in = std::move(h);
    lc.q = affine(lc.in, at(TedmWeights::Wq), at(TedmWeights::Bq));
    lc.k = affine(lc.in, at(TedmWeights::Wk), at(TedmWeights::Bk));
    lc.v = affine(lc.in, at(TedmWeights::Wv), at(TedmWeights::Bv));
    lc.cat = attention_heads(lc.q, lc.k, lc.v, seg, cfg.heads, cfg.d_k, lc.attn);
    Matrix z1 = affine(lc.cat, at(TedmWeights::Wo), at(TedmWeights::Bo));
    {
      auto zd = z1.data();
      auto id = lc.in.data();
      for (std::size_t k = 0; k < zd.size(); ++k) zd[k] += id[k];
    }
    lc.h1 = layer_norm_rows(z1, at(TedmWeights::Ln1G), at(TedmWeights::Ln1B), cfg.layer_norm_eps, lc.n1, lc.inv1);
    lc.u = affine(lc.h1, at(TedmWeights::Ff1W), at(TedmWeights::Ff1B));
    lc.r = lc.u;
    for (double& x : lc.r.data()) x = x > 0.0 ? x : 0.0;
    Matrix z2 = affine(lc.r, at(TedmWeights::Ff2W), at(TedmWeights::Ff2B));
    {
      auto zd = z2.data();
      auto hd = lc.h1.data();
      for (std::size_t k = 0; k < zd.size(); ++k) zd[k] += hd[k];
    }
    lc.h2 = layer_norm_rows(z2, at(TedmWeights::Ln2G), at(TedmWeights::Ln2B), cfg.layer_norm_eps, lc.n2, lc.inv2);
    h = lc.h2;
  }
  fc.encoded = affine(h, p[w.out_w()], p[w.out_b()]);
  fc.hidden = affine(fc.encoded, p[w.cls1_w()], p[w.cls1_b()]);
  for (double& x : fc.hidden.data()) x = 1.0 / (1.0 + std::exp(-x));
  fc.probs = affine(fc.hidden, p[w.cls2_w()], p[w.cls2_b()]);
  softmax_rows(fc.probs);
  return fc.probs;
}

void add_into(Matrix& dst, const Matrix& src) {
  auto d = dst.data();
  auto s = src.data();
  for (std::size_t k = 0; k < d.size(); ++k) d[k] += s[k];
}

/// Accumulates d(loss)/d(weights) into `grad` given d(loss)/d(logits).
void backward_batch(const TedmWeights& w, const ForwardCache& fc, const Segments& seg, const Matrix& dlogits,
                    ParamSet& grad) {
  const EncoderConfig& cfg = w.config();
  const ParamSet& p = w.params();

  accumulate_tn(fc.hidden, dlogits, grad[w.cls2_w()]);
  accumulate_column_sums(dlogits, grad[w.cls2_b()].data());
  Matrix da = matmul_nt(dlogits, p[w.cls2_w()]);
  {
    auto d = da.data();
    auto hsig = fc.hidden.data();
    for (std::size_t k = 0; k < d.size(); ++k) d[k] *= hsig[k] * (1.0 - hsig[k]);
  }
  accumulate_tn(fc.encoded, da, grad[w.cls1_w()]);
  accumulate_column_sums(da, grad[w.cls1_b()].data());
  Matrix denc = matmul_nt(da, p[w.cls1_w()]);
  const Matrix& last = fc.layers.back().h2;
  accumulate_tn(last, denc, grad[w.out_w()]);
  accumulate_column_sums(denc, grad[w.out_b()].data());
  Matrix dh = matmul_nt(denc, p[w.out_w()]);

  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_k));
  for (std::size_t li = cfg.layers; li-- > 0;) {
    const LayerCache& lc = fc.layers[li];
    auto at = [&](TedmWeights::LayerTensor t) -> const Matrix& { return p[w.layer_index(li, t)]; };
    auto gat = [&](TedmWeights::LayerTensor t) -> Matrix& { return grad[w.layer_index(li, t)]; };

    Matrix dz2 = layer_norm_backward(dh, lc.n2, lc.inv2, at(TedmWeights::Ln2G), gat(TedmWeights::Ln2G),
                                     gat(TedmWeights::Ln2B));
    Matrix dh1 = dz2;
    accumulate_tn(lc.r, dz2, gat(TedmWeights::Ff2W));
    accumulate_column_sums(dz2, gat(TedmWeights::Ff2B).data());
    Matrix du = matmul_nt(dz2, at(TedmWeights::Ff2W));
    {
      auto d = du.data();
      auto u = lc.u.data();
      for (std::size_t k = 0; k < d.size(); ++k)
        if (u[k] <= 0.0) d[k] = 0.0;
    }
    accumulate_tn(lc.h1, du, gat(TedmWeights::Ff1W));
    accumulate_column_sums(du, gat(TedmWeights::Ff1B).data());
    add_into(dh1, matmul_nt(du, at(TedmWeights::Ff1W)));

    Matrix dz1 = layer_norm_backward(dh1, lc.n1, lc.inv1, at(TedmWeights::Ln1G), gat(TedmWeights::Ln1G),
                                     gat(TedmWeights::Ln1B));
    Matrix din = dz1;
    accumulate_tn(lc.cat, dz1, gat(TedmWeights::Wo));
    accumulate_column_sums(dz1, gat(TedmWeights::Bo).data());
    const Matrix dcat = matmul_nt(dz1, at(TedmWeights::Wo));

    Matrix dq(lc.q.rows(), lc.q.cols()), dk(lc.k.rows(), lc.k.cols()), dv(lc.v.rows(), lc.v.cols());
    for (std::size_t s = 0; s < seg.count(); ++s) {
      const std::size_t a = seg.start[s];
      const std::size_t n = seg.start[s + 1] - a;
      for (std::size_t h = 0; h < cfg.heads; ++h) {
        const Matrix& A = lc.attn[s * cfg.heads + h];
        const std::size_t c0 = h * cfg.d_k;
        // dA = dO V^T and dV = A^T dO
        Matrix dA(n, n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < cfg.d_k; ++c) acc += dcat(a + i, c0 + c) * lc.v(a + j, c0 + c);
            dA(i, j) = acc;
            const double aij = A(i, j);
            for (std::size_t c = 0; c < cfg.d_k; ++c) dv(a + j, c0 + c) += aij * dcat(a + i, c0 + c);
          }
        // softmax backward, row by row
        for (std::size_t i = 0; i < n; ++i) {
          double rs = 0.0;
          for (std::size_t j = 0; j < n; ++j) rs += dA(i, j) * A(i, j);
          for (std::size_t j = 0; j < n; ++j) dA(i, j) = A(i, j) * (dA(i, j) - rs) * scale;
        }
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double ds = dA(i, j);
            if (ds == 0.0) continue;
            for (std::size_t c = 0; c < cfg.d_k; ++c) {
              dq(a + i, c0 + c) += ds * lc.k(a + j, c0 + c);
              dk(a + j, c0 + c) += ds * lc.q(a + i, c0 + c);
            }
          }
      }
    }
    accumulate_tn(lc.in, dq, gat(TedmWeights::Wq));
    accumulate_column_sums(dq, gat(TedmWeights::Bq).data());
    accumulate_tn(lc.in, dk, gat(TedmWeights::Wk));
    accumulate_column_sums(dk, gat(TedmWeights::Bk).data());
    accumulate_tn(lc.in, dv, gat(TedmWeights::Wv));
    accumulate_column_sums(dv, gat(TedmWeights::Bv).data());
    add_into(din, matmul_nt(dq, at(TedmWeights::Wq)));
    add_into(din, matmul_nt(dk, at(TedmWeights::Wk)));
    add_into(din, matmul_nt(dv, at(TedmWeights::Wv)));
    dh = std::move(din);
  }
  accumulate_tn(fc.x0, dh, grad[TedmWeights::kInW]);
  accumulate_column_sums(dh, grad[TedmWeights::kInB].data());
}

void append_tokens(Matrix& x0, std::size_t& row, std::span<const RegionToken> tokens, const EncoderConfig& cfg) {
  for (const RegionToken& t : tokens) {
    if (t.pooled.size() != cfg.pooled_dim) throw ShapeError("token pooled feature has wrong length");
    auto r = x0.row(row++);
    std::copy(t.pooled.begin(), t.pooled.end(), r.begin());
    if (cfg.use_boxes)
      for (std::size_t j = 0; j < 4; ++j) r[cfg.pooled_dim + j] = t.nbox[j];
  }
}

void check_capacity(std::size_t n, const EncoderConfig& cfg) {
  if (n > cfg.max_seq) {
    throw CapacityError("sequence of " + std::to_string(n) + " tokens exceeds max_seq " +
                        std::to_string(cfg.max_seq));
  }
}

Matrix single_forward(std::span<const RegionToken> tokens, const TedmWeights& w, bool use_pe, ForwardCache& fc) {
  const EncoderConfig& cfg = w.config();
  if (tokens.empty()) throw ArgumentError("encoder: empty token sequence");
  check_capacity(tokens.size(), cfg);
  Matrix x0 = token_matrix(tokens, cfg);
  Segments seg;
  seg.start.push_back(tokens.size());
  std::vector<std::size_t> pos;
  for (const auto& t : tokens) {
    if (t.position >= cfg.max_seq) throw CapacityError("token position exceeds max_seq");
    pos.push_back(t.position);
  }
  return forward_batch(w, x0, seg, pos, use_pe, &fc);
}

}  // namespace

Matrix token_matrix(std::span<const RegionToken> tokens, const EncoderConfig& cfg) {
  Matrix x0(tokens.size(), cfg.token_dim());
  std::size_t row = 0;
  append_tokens(x0, row, tokens, cfg);
  return x0;
}

AttentionOutput self_attention(const Matrix& x, const TedmWeights& w, std::size_t layer) {
  const EncoderConfig& cfg = w.config();
  if (x.rows() == 0) throw ArgumentError("self_attention: empty input");
  if (x.cols() != cfg.d_model) throw ShapeError("self_attention: input width must equal d_model");
  const ParamSet& p = w.params();
  auto at = [&](TedmWeights::LayerTensor t) -> const Matrix& { return p[w.layer_index(layer, t)]; };
  const Matrix q = affine(x, at(TedmWeights::Wq), at(TedmWeights::Bq));
  const Matrix k = affine(x, at(TedmWeights::Wk), at(TedmWeights::Bk));
  const Matrix v = affine(x, at(TedmWeights::Wv), at(TedmWeights::Bv));
  Segments seg;
  seg.start.push_back(x.rows());
  AttentionOutput out;
  const Matrix cat = attention_heads(q, k, v, seg, cfg.heads, cfg.d_k, out.attn);
  out.out = affine(cat, at(TedmWeights::Wo), at(TedmWeights::Bo));
  return out;
}

Matrix encoder_forward(std::span<const RegionToken> tokens, const TedmWeights& w, bool use_pe) {
  ForwardCache fc;
  single_forward(tokens, w, use_pe, fc);
  return fc.encoded;
}

Matrix classify(const Matrix& encoded, const TedmWeights& w) {
  const ParamSet& p = w.params();
  Matrix hidden = affine(encoded, p[w.cls1_w()], p[w.cls1_b()]);
  for (double& x : hidden.data()) x = 1.0 / (1.0 + std::exp(-x));
  Matrix probs = affine(hidden, p[w.cls2_w()], p[w.cls2_b()]);
  softmax_rows(probs);
  return probs;
}

std::vector<std::vector<Matrix>> attention_maps(std::span<const RegionToken> tokens, const TedmWeights& w) {
  ForwardCache fc;
  single_forward(tokens, w, w.config().use_positional_encoding, fc);
  std::vector<std::vector<Matrix>> maps;
  for (auto& lc : fc.layers) maps.push_back(lc.attn);
  return maps;
}

ValueGrad tedm_objective(const TedmWeights& w, std::span<const TedmExample> examples, double l2) {
  const EncoderConfig& cfg = w.config();
  std::size_t total_tokens = 0;
  for (const auto& ex : examples) {
    if (ex.tokens.size() != ex.targets.size()) throw ShapeError("tedm example: one target per token");
    check_capacity(ex.tokens.size(), cfg);
    total_tokens += ex.tokens.size();
  }
  ValueGrad out;
  const std::vector<double> flat_w = flatten_params(w.params());
  out.grad.assign(flat_w.size(), 0.0);
  if (total_tokens == 0) return out;

  // Fixed-size blocks reduced in index order keep the sum independent of the
  // worker count.
  constexpr std::size_t kBlock = 32;
  const std::size_t blocks = (examples.size() + kBlock - 1) / kBlock;
  std::vector<double> block_loss(blocks, 0.0);
  std::vector<std::vector<double>> block_grad(blocks);
  const double inv_total = 1.0 / static_cast<double>(total_tokens);

  parallel_for(blocks, [&](std::size_t b) {
    const std::size_t e0 = b * kBlock;
    const std::size_t e1 = std::min(examples.size(), e0 + kBlock);
    Segments seg;
    std::vector<std::size_t> pos;
    for (std::size_t e = e0; e < e1; ++e) {
      seg.start.push_back(seg.start.back() + examples[e].tokens.size());
      for (const auto& t : examples[e].tokens) pos.push_back(t.position);
    }
    if (seg.rows() == 0) {
      block_grad[b].assign(flat_w.size(), 0.0);
      return;
    }
    Matrix x0(seg.rows(), cfg.token_dim());
    std::size_t row = 0;
    for (std::size_t e = e0; e < e1; ++e) append_tokens(x0, row, examples[e].tokens, cfg);
    ForwardCache fc;
    const Matrix probs = forward_batch(w, x0, seg, pos, cfg.use_positional_encoding, &fc);
    Matrix dlogits = probs;
    double loss = 0.0;
    row = 0;
    for (std::size_t e = e0; e < e1; ++e) {
      for (int y : examples[e].targets) {
        if (y < 0 || static_cast<std::size_t>(y) >= cfg.classes) throw ArgumentError("tedm target out of range");
        loss -= std::log(std::max(probs(row, static_cast<std::size_t>(y)), 1e-300));
        dlogits(row, static_cast<std::size_t>(y)) -= 1.0;
        ++row;
      }
    }
    for (double& v : dlogits.data()) v *= inv_total;
    ParamSet g = w.params().zeros_like();
    backward_batch(w, fc, seg, dlogits, g);
    block_loss[b] = loss;
    block_grad[b] = flatten_params(g);
  });

  double loss = 0.0;
  for (std::size_t b = 0; b < blocks; ++b) {
    loss += block_loss[b];
    for (std::size_t k = 0; k < out.grad.size(); ++k) out.grad[k] += block_grad[b][k];
  }
  out.value = loss * inv_total;
  if (l2 > 0.0) {
    double sq = 0.0;
    for (std::size_t k = 0; k < flat_w.size(); ++k) {
      sq += flat_w[k] * flat_w[k];
      out.grad[k] += l2 * flat_w[k];
    }
    out.value += 0.5 * l2 * sq;
  }
  return out;
}

std::vector<TedmExample> build_tedm_examples(const Dataset& ds, const BackboneWeights& backbone) {
  std::vector<TedmExample> examples(ds.scenes.size());
  parallel_for(ds.scenes.size(), [&](std::size_t i) {
    const Scene& s = ds.scenes[i];
    const DetectResult det = detect(backbone, s.image, s.proposals);
    TokenSequence seq = build_tokens(det.regions);
    TedmExample ex;
    for (std::size_t k = 0; k < seq.tokens.size(); ++k) {
      ex.targets.push_back(label_for_box(det.regions[seq.order[k]].det.box, s.objects));
    }
    ex.tokens = std::move(seq.tokens);
    examples[i] = std::move(ex);
  });
  std::erase_if(examples, [](const TedmExample& e) { return e.tokens.empty(); });
  return examples;
}

double tedm_token_accuracy(const TedmWeights& w, std::span<const TedmExample> examples) {
  std::size_t hits = 0, total = 0;
  for (const auto& ex : examples) {
    if (ex.tokens.empty()) continue;
    const Matrix probs = classify(encoder_forward(ex.tokens, w, w.config().use_positional_encoding), w);
    for (std::size_t i = 0; i < ex.targets.size(); ++i) {
      const auto r = probs.row(i);
      hits += static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin()) == ex.targets[i];
      ++total;
    }
  }
  return total ? static_cast<double>(hits) / total : 0.0;
}

TedmWeights train_tedm(std::span<const TedmExample> examples, const EncoderConfig& cfg,
                       const TedmTrainOptions& opts, Rng& rng, TedmTrainReport* report) {
  TedmWeights w = TedmWeights::initialize(cfg, rng);
  TedmWeights probe = w;
  const Objective f = [&](std::span<const double> flat) {
    unflatten_into(flat, probe.params());
    return tedm_objective(probe, examples, opts.l2);
  };
  const ScgResult res = scg_minimize(f, flatten_params(w.params()), opts.scg);
  unflatten_into(res.w, w.params());
  if (report) {
    report->trace = res.trace;
    report->final_objective = res.value;
    report->token_accuracy = tedm_token_accuracy(w, examples);
    report->tokens = 0;
    for (const auto& ex : examples) report->tokens += ex.tokens.size();
  }
  return w;
}

TedmWeights train_tedm(const Dataset& ds, const BackboneWeights& backbone, const EncoderConfig& cfg,
                       const TedmTrainOptions& opts, Rng& rng, TedmTrainReport* report) {
  const auto examples = build_tedm_examples(ds, backbone);
  return train_tedm(examples, cfg, opts, rng, report);
}

std::vector<std::vector<double>> tedm_region_probs(std::span<const RegionDetection> regions, const TedmWeights& w) {
  std::vector<std::vector<double>> out(regions.size());
  if (regions.empty()) return out;
  const TokenSequence seq = build_tokens(regions);
  const Matrix probs = classify(encoder_forward(seq.tokens, w, w.config().use_positional_encoding), w);
  for (std::size_t k = 0; k < seq.order.size(); ++k) {
    out[seq.order[k]] = std::vector<double>(probs.row(k).begin(), probs.row(k).end());
  }
  return out;
}

std::vector<Detection> revise_detections(std::span<const RegionDetection> regions,
                                         std::span<const std::vector<double>> probs) {
  if (regions.size() != probs.size()) throw ShapeError("revise_detections: one probability row per region");
  std::vector<Detection> out;
  for (std::size_t i = 0; i < regions.size(); ++i) {
    Detection d;
    d.box = regions[i].det.box;
    d.probs = probs[i];
    const auto it = std::max_element(d.probs.begin(), d.probs.end());
    d.category = static_cast<int>(it - d.probs.begin());
    d.confidence = *it;
    if (d.category == kBackground || d.confidence < kReportMinConfidence) continue;
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<Detection> rescore(std::span<const RegionDetection> regions, const TedmWeights& w) {
  const auto probs = tedm_region_probs(regions, w);
  return revise_detections(regions, probs);
}

}  // namespace ctxguard
