#pragma once

#include <string>
#include <vector>

#include "cbvila/codebook.hpp"
#include "cbvila/config.hpp"
#include "cbvila/graph.hpp"
#include "cbvila/patches.hpp"
#include "cbvila/tokenizer.hpp"
#include "cbvila/transformer.hpp"

namespace cbvila {

/// The full CB-ViLA parameter set and forward builders: visual encoder with
/// mask-token substitution, text encoder with pad key-masking, the shared
/// cross-attention fusion trunk (used in both query directions), the four
/// task heads, the similarity projection, and the codebook.
template <typename S>
class CbVilaModel {
 public:
  struct VisualOut {
    Var seq;  // (N+1) x d, row 0 is CLS
  };
  struct TextOut {
    Var seq;  // max_text_len x d
    std::vector<std::uint8_t> valid;
  };
  struct FusionKvCache {
    Var kv;
    std::vector<KvProjection> layers;
  };

  CbVilaModel(TrainConfig cfg, Vocab vocab) : cfg_(std::move(cfg)), vocab_(std::move(vocab)) {
    cfg_.validate();
    require_config(vocab_.size() >= 5, "model: vocabulary too small");
    Rng rng(cfg_.seed, RngStream::init);
    const int d = cfg_.d;
    const int n = num_patches();

    codebook_pid_ = store_.add("codebook.vectors", codebook_init(rng));

    vis_patch_w_ = store_.add("visual.patch_embed.weight", normal_init<S>(rng, patch_dim(), d, cfg_.init_std));
    vis_patch_b_ = store_.add("visual.patch_embed.bias", Mat<S>::Zero(1, d));
    vis_cls_ = store_.add("visual.cls", normal_init<S>(rng, 1, d, cfg_.init_std));
    vis_mask_token_ = store_.add("visual.mask_token", normal_init<S>(rng, 1, d, cfg_.init_std));
    vis_pos_ = store_.add("visual.pos", normal_init<S>(rng, n + 1, d, cfg_.init_std));
    for (int i = 0; i < cfg_.enc_layers; ++i)
      vis_layers_.push_back(make_encoder_layer(store_, "visual.layer" + std::to_string(i), d, rng, cfg_.init_std));
    vis_final_ln_ = make_layer_norm(store_, "visual.final_ln", d);

    text_embed_ = store_.add("text.token_embed", normal_init<S>(rng, vocab_.size(), d, cfg_.init_std));
    text_pos_ = store_.add("text.pos", normal_init<S>(rng, cfg_.max_text_len, d, cfg_.init_std));
    for (int i = 0; i < cfg_.enc_layers; ++i)
      text_layers_.push_back(make_encoder_layer(store_, "text.layer" + std::to_string(i), d, rng, cfg_.init_std));
    text_final_ln_ = make_layer_norm(store_, "text.final_ln", d);

    for (int i = 0; i < cfg_.fusion_layers; ++i)
      fusion_layers_.push_back(make_fusion_layer(store_, "fusion.layer" + std::to_string(i), d, rng, cfg_.init_std));
    fusion_final_ln_ = make_layer_norm(store_, "fusion.final_ln", d);

    itm_w_ = store_.add("heads.itm.weight", normal_init<S>(rng, d, 2, cfg_.init_std));
    itm_b_ = store_.add("heads.itm.bias", Mat<S>::Zero(1, 2));
    mlm_w_ = store_.add("heads.mlm.weight", normal_init<S>(rng, d, vocab_.size(), cfg_.init_std));
    mlm_b_ = store_.add("heads.mlm.bias", Mat<S>::Zero(1, vocab_.size()));
    mim_w_ = store_.add("heads.mim.weight", normal_init<S>(rng, d, cfg_.codebook_size, cfg_.init_std));
    mim_b_ = store_.add("heads.mim.bias", Mat<S>::Zero(1, cfg_.codebook_size));
    pixel_w_ = store_.add("heads.pixel.weight", normal_init<S>(rng, d, patch_dim(), cfg_.init_std));
    pixel_b_ = store_.add("heads.pixel.bias", Mat<S>::Zero(1, patch_dim()));

    sim_proj_ = store_.add("sim.proj.weight", normal_init<S>(rng, d, sim_dim_, cfg_.init_std));
  }

  const TrainConfig& config() const { return cfg_; }
  const Vocab& vocab() const { return vocab_; }
  ParamStore<S>& store() { return store_; }
  const ParamStore<S>& store() const { return store_; }

  int num_patches() const {
    const int side = cfg_.image_size / cfg_.patch;
    return side * side;
  }
  int patch_dim() const { return cfg_.patch * cfg_.patch * 3; }
  int codebook_pid() const { return codebook_pid_; }

  Codebook<S> codebook_snapshot() const {
    Codebook<S> cb;
    cb.vectors = store_.at(codebook_pid_).value;
    return cb;
  }

  // ----- encoders -------------------------------------------------------------

  /// Patch rows (N x P*P*C) -> CLS + N token embeddings. Masked positions'
  /// patch embeddings are replaced by the learned mask token before
  /// positional embeddings and the transformer stack.
  VisualOut visual_encode(Graph<S>& g, const Mat<S>& patch_rows,
                          const std::vector<int>& mask_positions, bool with_grad,
                          AttnTrace* trace = nullptr) const {
    const int n = num_patches();
    require_contract(static_cast<int>(patch_rows.rows()) == n &&
                         static_cast<int>(patch_rows.cols()) == patch_dim(),
                     "visual_encode: patch grid shape");
    for (int p : mask_positions)
      require_contract(p >= 0 && p < n, "visual_encode: mask position out of range");

    Var e = g.affine(g.constant(patch_rows), g.param(vis_patch_w_, with_grad),
                     g.param(vis_patch_b_, with_grad));
    if (!mask_positions.empty())
      e = g.overwrite_rows(e, g.param(vis_mask_token_, with_grad), mask_positions);
    Var x = g.concat_rows({g.param(vis_cls_, with_grad), e});
    x = g.add(x, g.param(vis_pos_, with_grad));
    for (const auto& layer : vis_layers_) {
      std::vector<Var> probes;
      x = encoder_layer(g, x, layer, cfg_.heads, {}, with_grad, trace ? &probes : nullptr);
      if (trace) trace->self_layers.push_back(std::move(probes));
    }
    x = layer_norm_p(g, x, vis_final_ln_, with_grad);
    return {x};
  }

  VisualOut visual_encode(Graph<S>& g, const ImagePatchGrid<S>& grid,
                          const std::vector<int>& mask_positions, bool with_grad,
                          AttnTrace* trace = nullptr) const {
    return visual_encode(g, grid.patches, mask_positions, with_grad, trace);
  }

  /// Token ids -> contextual embeddings, one per position. [PAD] keys are
  /// excluded from every attention softmax.
  TextOut text_encode(Graph<S>& g, const std::vector<int>& ids, bool with_grad,
                      AttnTrace* trace = nullptr) const {
    require_contract(static_cast<int>(ids.size()) == cfg_.max_text_len,
                     "text_encode: ids must have max_text_len entries");
    TextOut out;
    out.valid.resize(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      require_contract(ids[i] >= 0 && ids[i] < vocab_.size(), "text_encode: id outside vocabulary");
      out.valid[i] = ids[i] != Vocab::pad_id ? 1 : 0;
    }
    Var e = g.gather_rows(g.param(text_embed_, with_grad), ids);
    Var x = g.add(e, g.param(text_pos_, with_grad));
    for (const auto& layer : text_layers_) {
      std::vector<Var> probes;
      x = encoder_layer(g, x, layer, cfg_.heads, out.valid, with_grad, trace ? &probes : nullptr);
      if (trace) trace->self_layers.push_back(std::move(probes));
    }
    out.seq = layer_norm_p(g, x, text_final_ln_, with_grad);
    return out;
  }

  // ----- fusion ----------------------------------------------------------------

  FusionKvCache build_fusion_kv_cache(Graph<S>& g, Var kv, bool with_grad) const {
    FusionKvCache cache;
    cache.kv = kv;
    for (const auto& layer : fusion_layers_)
      cache.layers.push_back(project_kv(g, kv, layer.cross_attn, with_grad));
    return cache;
  }

  /// Shared cross-attention trunk; the same parameters serve both query
  /// directions. Output length equals the query length, position 0 carries
  /// the query stream's CLS.
  Var fuse(Graph<S>& g, Var query, const std::vector<std::uint8_t>& query_valid, Var kv,
           const std::vector<std::uint8_t>& kv_valid, bool with_grad, AttnTrace* trace = nullptr,
           const FusionKvCache* cache = nullptr) const {
    require_contract(g.value(query).cols() == cfg_.d && g.value(kv).cols() == cfg_.d,
                     "fuse: width mismatch");
    Var x = query;
    for (std::size_t i = 0; i < fusion_layers_.size(); ++i) {
      std::vector<Var> self_probes, cross_probes;
      x = fusion_layer(g, x, kv, fusion_layers_[i], cfg_.heads, query_valid, kv_valid, with_grad,
                       trace ? &self_probes : nullptr, trace ? &cross_probes : nullptr,
                       cache ? &cache->layers[i] : nullptr);
      if (trace) {
        trace->self_layers.push_back(std::move(self_probes));
        trace->cross_layers.push_back(std::move(cross_probes));
      }
    }
    return layer_norm_p(g, x, fusion_final_ln_, with_grad);
  }

  // ----- heads -----------------------------------------------------------------

  /// Two logits (non-match, match) from the fused CLS row.
  Var itm_logits(Graph<S>& g, Var fused, bool with_grad) const {
    return g.affine(g.row(fused, 0), g.param(itm_w_, with_grad), g.param(itm_b_, with_grad));
  }

  /// Vocabulary logits for each given fused text row.
  Var mlm_logits(Graph<S>& g, Var fused, const std::vector<int>& positions, bool with_grad) const {
    Var rows = g.gather_rows(fused, positions);
    return g.affine(rows, g.param(mlm_w_, with_grad), g.param(mlm_b_, with_grad));
  }

  /// K-way codeword logits for each given fused visual row (row index is
  /// 1 + patch position; callers pass fused-row indices).
  Var mim_logits(Graph<S>& g, Var fused, const std::vector<int>& fused_rows, bool with_grad) const {
    Var rows = g.gather_rows(fused, fused_rows);
    return g.affine(rows, g.param(mim_w_, with_grad), g.param(mim_b_, with_grad));
  }

  /// Per-position patch pixel predictions in (0,1).
  Var pixel_out(Graph<S>& g, Var fused, const std::vector<int>& fused_rows, bool with_grad) const {
    Var rows = g.gather_rows(fused, fused_rows);
    return g.sigmoid(g.affine(rows, g.param(pixel_w_, with_grad), g.param(pixel_b_, with_grad)));
  }

  /// Shared-space projection of CLS rows, L2-normalized (cosine geometry).
  Var sim_project(Graph<S>& g, Var cls_rows, bool with_grad) const {
    return g.l2_normalize_rows(g.matmul(cls_rows, g.param(sim_proj_, with_grad)));
  }

  int sim_proj_pid() const { return sim_proj_; }
  int mlm_head_pid() const { return mlm_w_; }
  int mim_head_pid() const { return mim_w_; }
  int itm_head_pid() const { return itm_w_; }
  int itm_bias_pid() const { return itm_b_; }
  int pixel_head_pid() const { return pixel_w_; }
  int text_embed_pid() const { return text_embed_; }
  int text_pos_pid() const { return text_pos_; }
  int vis_mask_token_pid() const { return vis_mask_token_; }

 private:
  Mat<S> codebook_init(Rng& rng) const {
    Mat<S> m(cfg_.codebook_size, cfg_.code_dim);
    const double bound = 1.0 / static_cast<double>(cfg_.codebook_size);
    for (int r = 0; r < m.rows(); ++r)
      for (int c = 0; c < m.cols(); ++c) m(r, c) = static_cast<S>(rng.uniform(-bound, bound));
    return m;
  }

  TrainConfig cfg_;
  Vocab vocab_;
  ParamStore<S> store_;

  int codebook_pid_ = -1;
  int vis_patch_w_ = -1, vis_patch_b_ = -1, vis_cls_ = -1, vis_mask_token_ = -1, vis_pos_ = -1;
  std::vector<EncoderLayerIds> vis_layers_;
  LayerNormIds vis_final_ln_{};
  int text_embed_ = -1, text_pos_ = -1;
  std::vector<EncoderLayerIds> text_layers_;
  LayerNormIds text_final_ln_{};
  std::vector<FusionLayerIds> fusion_layers_;
  LayerNormIds fusion_final_ln_{};
  int itm_w_ = -1, itm_b_ = -1, mlm_w_ = -1, mlm_b_ = -1, mim_w_ = -1, mim_b_ = -1;
  int pixel_w_ = -1, pixel_b_ = -1;
  int sim_proj_ = -1;
  static constexpr int sim_dim_ = 32;
};

}  // namespace cbvila
