#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cbvila/graph.hpp"
#include "cbvila/params.hpp"
#include "cbvila/rng.hpp"

namespace cbvila {

template <typename S>
Mat<S> normal_init(Rng& rng, int rows, int cols, double stddev = 0.02) {
  Mat<S> m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = static_cast<S>(rng.normal(0.0, stddev));
  return m;
}

struct AttentionIds {
  int wq, bq, wk, bk, wv, bv, wo, bo;
};

struct LayerNormIds {
  int gamma, beta;
};

struct FfnIds {
  int w1, b1, w2, b2;
};

struct EncoderLayerIds {
  LayerNormIds ln1;
  AttentionIds attn;
  LayerNormIds ln2;
  FfnIds ffn;
};

struct FusionLayerIds {
  LayerNormIds ln1;
  AttentionIds self_attn;
  LayerNormIds ln2;
  AttentionIds cross_attn;
  LayerNormIds ln3;
  FfnIds ffn;
};

template <typename S>
AttentionIds make_attention(ParamStore<S>& store, const std::string& prefix, int d, Rng& rng,
                            double init_std = 0.02) {
  AttentionIds ids;
  ids.wq = store.add(prefix + ".q.weight", normal_init<S>(rng, d, d, init_std));
  ids.bq = store.add(prefix + ".q.bias", Mat<S>::Zero(1, d));
  ids.wk = store.add(prefix + ".k.weight", normal_init<S>(rng, d, d, init_std));
  ids.bk = store.add(prefix + ".k.bias", Mat<S>::Zero(1, d));
  ids.wv = store.add(prefix + ".v.weight", normal_init<S>(rng, d, d, init_std));
  ids.bv = store.add(prefix + ".v.bias", Mat<S>::Zero(1, d));
  ids.wo = store.add(prefix + ".out.weight", normal_init<S>(rng, d, d, init_std));
  ids.bo = store.add(prefix + ".out.bias", Mat<S>::Zero(1, d));
  return ids;
}

template <typename S>
LayerNormIds make_layer_norm(ParamStore<S>& store, const std::string& prefix, int d) {
  LayerNormIds ids;
  ids.gamma = store.add(prefix + ".gamma", Mat<S>::Ones(1, d));
  ids.beta = store.add(prefix + ".beta", Mat<S>::Zero(1, d));
  return ids;
}

template <typename S>
FfnIds make_ffn(ParamStore<S>& store, const std::string& prefix, int d, int hidden, Rng& rng,
                double init_std = 0.02) {
  FfnIds ids;
  ids.w1 = store.add(prefix + ".fc1.weight", normal_init<S>(rng, d, hidden, init_std));
  ids.b1 = store.add(prefix + ".fc1.bias", Mat<S>::Zero(1, hidden));
  ids.w2 = store.add(prefix + ".fc2.weight", normal_init<S>(rng, hidden, d, init_std));
  ids.b2 = store.add(prefix + ".fc2.bias", Mat<S>::Zero(1, d));
  return ids;
}

template <typename S>
EncoderLayerIds make_encoder_layer(ParamStore<S>& store, const std::string& prefix, int d, Rng& rng,
                                   double init_std = 0.02) {
  EncoderLayerIds ids;
  ids.ln1 = make_layer_norm(store, prefix + ".ln1", d);
  ids.attn = make_attention(store, prefix + ".attn", d, rng, init_std);
  ids.ln2 = make_layer_norm(store, prefix + ".ln2", d);
  ids.ffn = make_ffn(store, prefix + ".ffn", d, 4 * d, rng, init_std);
  return ids;
}

template <typename S>
FusionLayerIds make_fusion_layer(ParamStore<S>& store, const std::string& prefix, int d, Rng& rng,
                                 double init_std = 0.02) {
  FusionLayerIds ids;
  ids.ln1 = make_layer_norm(store, prefix + ".ln1", d);
  ids.self_attn = make_attention(store, prefix + ".self", d, rng, init_std);
  ids.ln2 = make_layer_norm(store, prefix + ".ln2", d);
  ids.cross_attn = make_attention(store, prefix + ".cross", d, rng, init_std);
  ids.ln3 = make_layer_norm(store, prefix + ".ln3", d);
  ids.ffn = make_ffn(store, prefix + ".ffn", d, 4 * d, rng, init_std);
  return ids;
}

/// Attention probability nodes captured during a forward build, one list of
/// per-head (Tq x Tk) nodes per layer. Used for the row-distribution
/// invariants and Grad-CAM.
struct AttnTrace {
  std::vector<std::vector<Var>> self_layers;
  std::vector<std::vector<Var>> cross_layers;
};

/// Precomputed K/V projections of a key-value sequence for one attention
/// block; lets several fusion passes over the same kv sequence share work.
struct KvProjection {
  Var k, v;
};

template <typename S>
KvProjection project_kv(Graph<S>& g, Var keyval, const AttentionIds& ids, bool with_grad) {
  KvProjection p;
  p.k = g.affine(keyval, g.param(ids.wk, with_grad), g.param(ids.bk, with_grad));
  p.v = g.affine(keyval, g.param(ids.wv, with_grad), g.param(ids.bv, with_grad));
  return p;
}

/// Multi-head scaled dot-product attention. `kv_valid` keys outside the mask
/// get exactly zero probability. Pass `probes` to collect the per-head
/// attention nodes.
template <typename S>
Var attention(Graph<S>& g, Var query, Var keyval, const AttentionIds& ids, int heads,
              const std::vector<std::uint8_t>& kv_valid, bool with_grad,
              std::vector<Var>* probes = nullptr, const KvProjection* cache = nullptr) {
  const int d = static_cast<int>(g.value(query).cols());
  require_contract(d % heads == 0, "attention: width must divide by heads");
  const int dh = d / heads;
  Var q = g.affine(query, g.param(ids.wq, with_grad), g.param(ids.bq, with_grad));
  KvProjection kv = cache != nullptr ? *cache : project_kv(g, keyval, ids, with_grad);
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(dh));
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var qh = g.slice_cols(q, h * dh, dh);
    Var kh = g.slice_cols(kv.k, h * dh, dh);
    Var vh = g.slice_cols(kv.v, h * dh, dh);
    Var scores = g.scale(g.matmul_nt(qh, kh), inv_sqrt);
    Var probs = g.softmax_rows(scores, kv_valid);
    if (probes != nullptr) probes->push_back(probs);
    outs.push_back(g.matmul(probs, vh));
  }
  Var merged = g.concat_cols(outs);
  return g.affine(merged, g.param(ids.wo, with_grad), g.param(ids.bo, with_grad));
}

template <typename S>
Var feed_forward(Graph<S>& g, Var x, const FfnIds& ids, bool with_grad) {
  Var h = g.gelu(g.affine(x, g.param(ids.w1, with_grad), g.param(ids.b1, with_grad)));
  return g.affine(h, g.param(ids.w2, with_grad), g.param(ids.b2, with_grad));
}

template <typename S>
Var layer_norm_p(Graph<S>& g, Var x, const LayerNormIds& ids, bool with_grad) {
  return g.layer_norm(x, g.param(ids.gamma, with_grad), g.param(ids.beta, with_grad));
}

/// Pre-LN encoder block: x += attn(LN(x)); x += ffn(LN(x)).
template <typename S>
Var encoder_layer(Graph<S>& g, Var x, const EncoderLayerIds& ids, int heads,
                  const std::vector<std::uint8_t>& key_valid, bool with_grad,
                  std::vector<Var>* probes = nullptr) {
  Var n1 = layer_norm_p(g, x, ids.ln1, with_grad);
  x = g.add(x, attention(g, n1, n1, ids.attn, heads, key_valid, with_grad, probes));
  Var n2 = layer_norm_p(g, x, ids.ln2, with_grad);
  return g.add(x, feed_forward(g, n2, ids.ffn, with_grad));
}

/// Pre-LN fusion block: self-attention over the query stream, cross-attention
/// into the kv stream, feed-forward; residuals throughout.
template <typename S>
Var fusion_layer(Graph<S>& g, Var x, Var kv, const FusionLayerIds& ids, int heads,
                 const std::vector<std::uint8_t>& query_valid,
                 const std::vector<std::uint8_t>& kv_valid, bool with_grad,
                 std::vector<Var>* self_probes = nullptr, std::vector<Var>* cross_probes = nullptr,
                 const KvProjection* cross_cache = nullptr) {
  Var n1 = layer_norm_p(g, x, ids.ln1, with_grad);
  x = g.add(x, attention(g, n1, n1, ids.self_attn, heads, query_valid, with_grad, self_probes));
  Var n2 = layer_norm_p(g, x, ids.ln2, with_grad);
  x = g.add(x, attention(g, n2, kv, ids.cross_attn, heads, kv_valid, with_grad, cross_probes,
                         cross_cache));
  Var n3 = layer_norm_p(g, x, ids.ln3, with_grad);
  return g.add(x, feed_forward(g, n3, ids.ffn, with_grad));
}

}  // namespace cbvila
