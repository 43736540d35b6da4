#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "cbvila/common.hpp"
#include "cbvila/rng.hpp"
#include "cbvila/schedule.hpp"

namespace cbvila {

namespace detail {

template <typename S>
S mean_ce(const Mat<S>& logits, const std::vector<int>& targets) {
  require_contract(static_cast<int>(targets.size()) == logits.rows(), "mean_ce: target count");
  S total = S(0);
  for (int r = 0; r < logits.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    require_contract(t >= 0 && t < logits.cols(), "mean_ce: target range");
    const S m = logits.row(r).maxCoeff();
    const S lse = m + std::log((logits.row(r).array() - m).exp().sum());
    total += lse - logits(r, t);
  }
  return total / static_cast<S>(logits.rows());
}

}  // namespace detail

/// Mean binary cross-entropy over B positive pairs (label 1) and 2B hard
/// negative pairs (label 0), all as two-class logits.
template <typename S>
S itm_loss(const Mat<S>& pos_logits, const Mat<S>& neg_logits) {
  require_contract(pos_logits.cols() == 2 && neg_logits.cols() == 2, "itm_loss: two-class logits");
  Mat<S> all(pos_logits.rows() + neg_logits.rows(), 2);
  all << pos_logits, neg_logits;
  std::vector<int> labels(static_cast<std::size_t>(all.rows()), 0);
  for (int i = 0; i < pos_logits.rows(); ++i) labels[static_cast<std::size_t>(i)] = 1;
  return detail::mean_ce(all, labels);
}

/// Mean cross-entropy over masked text positions only.
template <typename S>
S mlm_loss(const Mat<S>& logits_at_masked, const std::vector<int>& labels) {
  return detail::mean_ce(logits_at_masked, labels);
}

/// Mean cross-entropy over masked visual positions against gradient-stopped
/// codebook indices.
template <typename S>
S mim_loss(const Mat<S>& logits_at_masked, const std::vector<int>& target_indices) {
  return detail::mean_ce(logits_at_masked, target_indices);
}

/// Mean squared error per pixel over masked positions.
template <typename S>
S pixel_loss(const Mat<S>& predicted, const Mat<S>& truth) {
  require_contract(predicted.rows() == truth.rows() && predicted.cols() == truth.cols(),
                   "pixel_loss: shape mismatch");
  return (predicted - truth).squaredNorm() / static_cast<S>(predicted.size());
}

/// The raw per-component loss values entering Eq.-style summation.
template <typename S>
struct LossComponents {
  S pixel = S(0);
  S alignment = S(0);
  S commitment = S(0);
  S mim = S(0);
  S itm = S(0);
  S mlm = S(0);
};

template <typename S>
struct LossWeights {
  S pixel = S(1), alignment = S(1), commitment = S(1), mim = S(1), itm = S(1), mlm = S(1);
};

/// Sum of active components with configured weights; inactive components
/// contribute exactly zero. The codebook objective is pixel + alignment +
/// commitment; the total adds MIM, ITM and MLM.
template <typename S>
S total_loss(const LossComponents<S>& c, const ObjectiveGate& gate,
             const LossWeights<S>& w = LossWeights<S>{}) {
  S total = S(0);
  if (gate.pixel) total += w.pixel * c.pixel + w.alignment * c.alignment + w.commitment * c.commitment;
  if (gate.mim) total += w.mim * c.mim;
  if (gate.itm) total += w.itm * c.itm;
  if (gate.mlm) total += w.mlm * c.mlm;
  return total;
}

/// Cosine similarity of projected CLS embeddings: rows of both batches are
/// mapped through the shared projection, L2-normalized, and paired. Entries
/// are clamped onto [-1, 1].
template <typename S>
Mat<S> similarity_matrix(const Mat<S>& image_cls, const Mat<S>& text_cls, const Mat<S>& projection) {
  require_contract(image_cls.rows() == text_cls.rows(), "similarity_matrix: batch size mismatch");
  require_contract(image_cls.rows() >= 2, "similarity_matrix: batch size must be >= 2");
  require_contract(image_cls.cols() == projection.rows() && text_cls.cols() == projection.rows(),
                   "similarity_matrix: projection shape");
  Mat<S> zi = image_cls * projection;
  Mat<S> zt = text_cls * projection;
  for (int r = 0; r < zi.rows(); ++r) {
    zi.row(r) /= std::max(zi.row(r).norm(), S(1e-12));
    zt.row(r) /= std::max(zt.row(r).norm(), S(1e-12));
  }
  Mat<S> sim = zi * zt.transpose();
  return sim.cwiseMax(S(-1)).cwiseMin(S(1));
}

/// For every image, sample a hard negative text index from the softmax over
/// the off-diagonal similarities of its row (temperature 1); likewise one
/// hard negative image per text from the column. The diagonal is excluded,
/// so an item never pairs with itself.
template <typename S>
std::pair<std::vector<int>, std::vector<int>> sample_hard_negatives(const Mat<S>& sim, Rng& rng) {
  const int b = static_cast<int>(sim.rows());
  if (b < 2) throw SamplingError("sample_hard_negatives: batch must have at least 2 items");
  require_contract(sim.cols() == b, "sample_hard_negatives: square matrix required");

  auto draw = [&rng](const std::vector<double>& logits, const std::vector<int>& choices) {
    double m = logits[0];
    for (double v : logits) m = std::max(m, v);
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      p[i] = std::exp(logits[i] - m);
      z += p[i];
    }
    const double u = rng.uniform() * z;
    double acc = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      acc += p[i];
      if (u < acc) return choices[i];
    }
    return choices.back();
  };

  std::vector<int> neg_text(static_cast<std::size_t>(b));
  std::vector<int> neg_image(static_cast<std::size_t>(b));
  for (int i = 0; i < b; ++i) {
    std::vector<double> row_logits, col_logits;
    std::vector<int> row_choices, col_choices;
    for (int j = 0; j < b; ++j) {
      if (j == i) continue;
      row_logits.push_back(static_cast<double>(sim(i, j)));
      row_choices.push_back(j);
      col_logits.push_back(static_cast<double>(sim(j, i)));
      col_choices.push_back(j);
    }
    neg_text[static_cast<std::size_t>(i)] = draw(row_logits, row_choices);
    neg_image[static_cast<std::size_t>(i)] = draw(col_logits, col_choices);
  }
  return {neg_text, neg_image};
}

}  // namespace cbvila
