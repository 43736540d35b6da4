#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "cbvila/codebook.hpp"
#include "cbvila/dataset.hpp"
#include "cbvila/model.hpp"
#include "cbvila/patches.hpp"

namespace cbvila {

/// ITM match probability for every (image, text) pair: rows index images
/// (queries for TR), columns index texts. Deterministic: no gumbel noise is
/// involved anywhere on the ITM path.
template <typename S>
Mat<S> score_all_pairs(CbVilaModel<S>& model, const std::vector<Image<S>>& images,
                       const std::vector<std::string>& captions) {
  require_input(!images.empty() && !captions.empty(), "score_all_pairs: empty inputs");
  const int q = static_cast<int>(images.size());
  const int g_count = static_cast<int>(captions.size());
  const auto& cfg = model.config();

  // text encodings are reused across every image
  std::vector<Mat<S>> text_values;
  std::vector<std::vector<std::uint8_t>> text_valid;
  text_values.reserve(captions.size());
  {
    Graph<S> tg(&model.store());
    for (const auto& caption : captions) {
      auto ids = tokenize(caption, model.vocab(), cfg.max_text_len);
      auto out = model.text_encode(tg, ids, false);
      text_values.push_back(tg.value(out.seq));
      text_valid.push_back(out.valid);
    }
  }

  Mat<S> scores(q, g_count);
  for (int i = 0; i < q; ++i) {
    Graph<S> g(&model.store());
    auto grid = patchify(images[static_cast<std::size_t>(i)], cfg.patch);
    auto vis = model.visual_encode(g, grid, {}, false);
    auto kv = model.build_fusion_kv_cache(g, vis.seq, false);
    for (int t = 0; t < g_count; ++t) {
      Var txt = g.constant(text_values[static_cast<std::size_t>(t)]);
      Var fused = model.fuse(g, txt, text_valid[static_cast<std::size_t>(t)], vis.seq, {},
                             false, nullptr, &kv);
      Var logits = model.itm_logits(g, fused, false);
      const S l0 = g.value(logits)(0, 0);
      const S l1 = g.value(logits)(0, 1);
      const S m = std::max(l0, l1);
      const S e0 = std::exp(l0 - m);
      const S e1 = std::exp(l1 - m);
      scores(i, t) = e1 / (e0 + e1);
    }
  }
  return scores;
}

/// Fraction of queries whose true item ranks within the top k. Ties break
/// toward the lower column index.
template <typename S>
double recall_at_k(const Mat<S>& scores, const std::vector<int>& ground_truth, int k) {
  const int q = static_cast<int>(scores.rows());
  const int g_count = static_cast<int>(scores.cols());
  require_contract(k >= 1 && k <= g_count, "recall_at_k: k out of range");
  require_contract(static_cast<int>(ground_truth.size()) == q, "recall_at_k: ground truth length");
  int hits = 0;
  for (int i = 0; i < q; ++i) {
    const int t = ground_truth[static_cast<std::size_t>(i)];
    require_contract(t >= 0 && t < g_count, "recall_at_k: ground truth out of range");
    int rank = 1;
    for (int j = 0; j < g_count; ++j) {
      if (j == t) continue;
      if (scores(i, j) > scores(i, t) || (scores(i, j) == scores(i, t) && j < t)) ++rank;
    }
    if (rank <= k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(q);
}

struct RetrievalReport {
  double tr_r1 = 0, tr_r5 = 0, tr_r10 = 0;
  double ir_r1 = 0, ir_r5 = 0, ir_r10 = 0;
};

/// Zero-shot retrieval on a paired dataset where pair i is the unique match.
/// TR ranks texts per image query; IR ranks images per text query.
template <typename S>
RetrievalReport report_from_scores(const Mat<S>& scores) {
  const int n = static_cast<int>(scores.rows());
  require_contract(scores.cols() == n, "report_from_scores: needs a square paired matrix");
  std::vector<int> truth(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) truth[static_cast<std::size_t>(i)] = i;
  Mat<S> transposed = scores.transpose();
  RetrievalReport r;
  r.tr_r1 = recall_at_k(scores, truth, 1);
  r.tr_r5 = recall_at_k(scores, truth, std::min(5, n));
  r.tr_r10 = recall_at_k(scores, truth, std::min(10, n));
  r.ir_r1 = recall_at_k(transposed, truth, 1);
  r.ir_r5 = recall_at_k(transposed, truth, std::min(5, n));
  r.ir_r10 = recall_at_k(transposed, truth, std::min(10, n));
  return r;
}

template <typename S>
RetrievalReport evaluate_retrieval(CbVilaModel<S>& model, const Dataset<S>& ds,
                                   Mat<S>* scores_out = nullptr) {
  Mat<S> scores = score_all_pairs(model, ds.images, ds.captions);
  if (scores_out != nullptr) *scores_out = scores;
  return report_from_scores(scores);
}

/// Fraction of codewords assigned at least once when hard-quantizing every
/// full-image token of the dataset.
template <typename S>
double codebook_utilization(CbVilaModel<S>& model, const Dataset<S>& ds) {
  const Codebook<S> cb = model.codebook_snapshot();
  std::vector<bool> used(static_cast<std::size_t>(cb.size()), false);
  Rng unused(0);
  for (const auto& image : ds.images) {
    Graph<S> g(&model.store());
    auto grid = patchify(image, model.config().patch);
    auto vis = model.visual_encode(g, grid, {}, false);
    Mat<S> tokens = g.value(vis.seq).middleRows(1, model.num_patches());
    auto q = quantize_sequence<S>(tokens, cb, QuantizeMode::hard, S(1), unused);
    for (int idx : q.indices) used[static_cast<std::size_t>(idx)] = true;
  }
  int count = 0;
  for (bool u : used)
    if (u) ++count;
  return static_cast<double>(count) / static_cast<double>(cb.size());
}

}  // namespace cbvila
