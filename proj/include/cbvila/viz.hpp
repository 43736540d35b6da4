#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "cbvila/codebook.hpp"
#include "cbvila/dataset.hpp"
#include "cbvila/masking.hpp"
#include "cbvila/model.hpp"
#include "cbvila/patches.hpp"
#include "cbvila/schedule.hpp"

namespace cbvila {

// ---------------------------------------------------------------------------
// Codeword patch grids (which image patches map to a codeword)
// ---------------------------------------------------------------------------

struct CodewordPatchRef {
  int image_index = 0;
  int position = 0;  // patch position within the image
};

template <typename S>
struct CodewordGrid {
  int codeword = 0;
  std::vector<CodewordPatchRef> refs;  // provenance, selection order
  Image<S> grid;
  bool empty = false;
};

/// Hard-quantizes every full-image token over the dataset and collects up to
/// max_patches raw pixel patches per requested codeword, in dataset order.
/// Codewords with no assignment yield an empty one-cell grid.
template <typename S>
std::vector<CodewordGrid<S>> codeword_patch_grids(CbVilaModel<S>& model, const Dataset<S>& ds,
                                                  const std::vector<int>& codeword_ids,
                                                  int max_patches) {
  require_input(max_patches >= 1, "codeword_patch_grids: max_patches must be >= 1");
  const Codebook<S> cb = model.codebook_snapshot();
  for (int k : codeword_ids)
    require_input(k >= 0 && k < cb.size(), "codeword_patch_grids: codeword id out of range");
  const int patch = model.config().patch;
  const int n_patches = model.num_patches();

  std::vector<CodewordGrid<S>> grids;
  grids.reserve(codeword_ids.size());
  for (int k : codeword_ids) {
    CodewordGrid<S> g;
    g.codeword = k;
    grids.push_back(std::move(g));
  }

  Rng unused(0);
  for (int i = 0; i < ds.size(); ++i) {
    bool anyone_wants_more = false;
    for (const auto& g : grids)
      anyone_wants_more = anyone_wants_more || static_cast<int>(g.refs.size()) < max_patches;
    if (!anyone_wants_more) break;
    Graph<S> graph(&model.store());
    auto grid_in = patchify(ds.images[static_cast<std::size_t>(i)], patch);
    auto vis = model.visual_encode(graph, grid_in, {}, false);
    Mat<S> tokens = graph.value(vis.seq).middleRows(1, n_patches);
    auto q = quantize_sequence<S>(tokens, cb, QuantizeMode::hard, S(1), unused);
    for (int pos = 0; pos < n_patches; ++pos) {
      for (auto& g : grids) {
        if (q.indices[static_cast<std::size_t>(pos)] == g.codeword &&
            static_cast<int>(g.refs.size()) < max_patches)
          g.refs.push_back({i, pos});
      }
    }
  }

  for (auto& g : grids) {
    const int n = static_cast<int>(g.refs.size());
    if (n == 0) {
      g.empty = true;
      g.grid = Image<S>::zeros(patch, patch, 3);
      for (auto& v : g.grid.data) v = S(0.5);
      continue;
    }
    const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    const int rows = (n + cols - 1) / cols;
    g.grid = Image<S>::zeros(rows * patch, cols * patch, 3);
    for (auto& v : g.grid.data) v = S(0.5);
    for (int idx = 0; idx < n; ++idx) {
      const auto& ref = g.refs[static_cast<std::size_t>(idx)];
      auto img_grid = patchify(ds.images[static_cast<std::size_t>(ref.image_index)], patch);
      const int gy = (idx / cols) * patch;
      const int gx = (idx % cols) * patch;
      for (int dy = 0; dy < patch; ++dy)
        for (int dx = 0; dx < patch; ++dx)
          for (int c = 0; c < 3; ++c)
            g.grid.at(gy + dy, gx + dx, c) =
                img_grid.patches(ref.position, (dy * patch + dx) * 3 + c);
    }
  }
  return grids;
}

// ---------------------------------------------------------------------------
// Reconstruction triptych (original / masked view / reconstruction)
// ---------------------------------------------------------------------------

template <typename S>
struct Triptych {
  Image<S> original;
  Image<S> masked_view;
  Image<S> reconstruction;
  std::vector<int> mask_positions;
};

/// Masks 75% of patches (seeded), reconstructs the masked patches through
/// quantization and the text-conditioned fusion decoder, and passes visible
/// patches through bitwise. The conditioning caption is empty unless given.
template <typename S>
Triptych<S> reconstruct_triptych(CbVilaModel<S>& model, const Image<S>& image,
                                 std::uint64_t mask_seed, long global_step,
                                 const std::string& caption = "") {
  const auto& cfg = model.config();
  require_input(image.height == cfg.image_size && image.width == cfg.image_size,
                "reconstruct_triptych: image size mismatch with the model config");
  const int n_patches = model.num_patches();
  const int patch = cfg.patch;

  Triptych<S> out;
  out.original = image;
  Rng mask_rng(mask_seed, RngStream::visual_mask);
  out.mask_positions = mask_visual(n_patches, cfg.visual_mask_ratio, mask_rng);
  const std::vector<int> visible = complement_positions(out.mask_positions, n_patches);

  auto grid = patchify(image, patch);

  // gray out masked patches for the middle panel
  auto masked_grid = grid;
  for (int p : out.mask_positions) masked_grid.patches.row(p).setConstant(S(0.5));
  out.masked_view = unpatchify(masked_grid);

  Graph<S> g(&model.store());
  auto vis = model.visual_encode(g, grid, out.mask_positions, false);
  Var tokens = g.slice_rows(vis.seq, 1, n_patches);
  Var visible_tokens = g.gather_rows(tokens, visible);
  const QuantizeMode mode =
      cfg.quantize_mode == "hard" ? QuantizeMode::hard : QuantizeMode::gumbel;
  const S tau = static_cast<S>(gumbel_tau_at(global_step, cfg, cfg.total_steps()));
  auto q = quantize_for_training(g, visible_tokens, g.param(model.codebook_pid(), false), mode, tau,
                                 nullptr);  // noise disabled outside training
  Var mixed = g.scatter_rows(tokens, q.quantized, visible);
  Var query = g.concat_rows({g.slice_rows(vis.seq, 0, 1), mixed});

  auto ids = tokenize(caption, model.vocab(), cfg.max_text_len);
  auto txt = model.text_encode(g, ids, false);
  Var fused = model.fuse(g, query, {}, txt.seq, txt.valid, false);
  std::vector<int> fused_rows;
  for (int p : out.mask_positions) fused_rows.push_back(1 + p);
  Var pred = model.pixel_out(g, fused, fused_rows, false);

  auto recon_grid = grid;  // visible patches pass through bitwise
  const Mat<S>& pred_v = g.value(pred);
  for (std::size_t r = 0; r < out.mask_positions.size(); ++r)
    recon_grid.patches.row(out.mask_positions[r]) = pred_v.row(static_cast<int>(r));
  out.reconstruction = unpatchify(recon_grid);
  return out;
}

// ---------------------------------------------------------------------------
// Grad-CAM on the final text-query cross-attention layer
// ---------------------------------------------------------------------------

template <typename S>
struct GradCamResult {
  std::vector<S> heatmap;  // H x W, values in [0,1]
  Image<S> overlay;
};

/// Gradient of the ITM match logit with respect to the final-layer
/// text-to-visual cross-attention map at the chosen word, rectified and
/// head-averaged, upsampled to image resolution.
template <typename S>
GradCamResult<S> gradcam_word_heatmap(CbVilaModel<S>& model, const Image<S>& image,
                                      const std::string& caption, int word_index,
                                      bool bilinear = true) {
  const auto& cfg = model.config();
  const auto words = split_words(caption);
  require_input(word_index >= 0 && word_index < static_cast<int>(words.size()),
                "gradcam: word index outside the caption");
  auto ids = tokenize(caption, model.vocab(), cfg.max_text_len);
  const int query_pos = 1 + word_index;  // [CLS] occupies position 0
  require_input(query_pos < cfg.max_text_len - 1, "gradcam: word truncated away by max_text_len");

  Graph<S> g(&model.store());
  auto grid = patchify(image, cfg.patch);
  auto vis = model.visual_encode(g, grid, {}, true);
  auto txt = model.text_encode(g, ids, true);
  AttnTrace trace;
  Var fused = model.fuse(g, txt.seq, txt.valid, vis.seq, {}, true, &trace);
  Var logits = model.itm_logits(g, fused, true);
  Var match_logit = g.slice_cols(logits, 1, 1);
  g.backward(match_logit);

  require_contract(!trace.cross_layers.empty(), "gradcam: no cross-attention trace");
  const auto& final_heads = trace.cross_layers.back();
  const int n_patches = model.num_patches();
  const int side = cfg.image_size / cfg.patch;
  std::vector<S> cell(static_cast<std::size_t>(n_patches), S(0));
  for (Var head : final_heads) {
    const Mat<S>& attn = g.value(head);
    Mat<S> grad = g.grad(head);
    for (int p = 0; p < n_patches; ++p) {
      // kv column 0 is the visual CLS; patches start at column 1
      const S weighted = grad(query_pos, 1 + p) * attn(query_pos, 1 + p);
      cell[static_cast<std::size_t>(p)] += std::max(weighted, S(0));
    }
  }
  for (auto& v : cell) v /= static_cast<S>(final_heads.size());

  GradCamResult<S> out;
  out.heatmap = bilinear
                    ? bilinear_upsample(cell, side, side, image.height, image.width)
                    : nearest_upsample(cell, side, side, image.height, image.width);
  S lo = out.heatmap[0], hi = out.heatmap[0];
  for (S v : out.heatmap) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi - lo > S(1e-12)) {
    for (auto& v : out.heatmap) v = (v - lo) / (hi - lo);
  } else {
    for (auto& v : out.heatmap) v = S(0);
  }

  out.overlay = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      const S h = out.heatmap[static_cast<std::size_t>(y * image.width + x)];
      out.overlay.at(y, x, 0) = S(0.5) * image.at(y, x, 0) + S(0.5) * h;
      out.overlay.at(y, x, 1) = S(0.5) * image.at(y, x, 1);
      out.overlay.at(y, x, 2) = S(0.5) * image.at(y, x, 2) + S(0.5) * (S(1) - h);
    }
  out.overlay.quantize_to_8bit();
  return out;
}

}  // namespace cbvila
