#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "cbvila/common.hpp"
#include "cbvila/graph.hpp"
#include "cbvila/rng.hpp"

namespace cbvila {

enum class QuantizeMode { hard, gumbel };

/// Learnable visual-semantic codebook: K codewords of dimension d_c, one row
/// per codeword. Continuous encoder outputs are snapped to rows of this
/// matrix; the row index is the discrete "visual semantic" of a patch.
template <typename S>
struct Codebook {
  Mat<S> vectors;  // K x d_c

  int size() const { return static_cast<int>(vectors.rows()); }
  int dim() const { return static_cast<int>(vectors.cols()); }

  void validate() const {
    require_contract(size() >= 2, "codebook needs K >= 2");
    require_contract(dim() >= 1, "codebook needs d_c >= 1");
    require_input(all_finite(vectors), "codebook has non-finite entries");
  }

  /// Rows drawn i.i.d. uniform in [-1/K, 1/K]; small norms keep early
  /// distances comparable across codewords.
  static Codebook init(int k, int d_c, Rng& rng) {
    Codebook cb;
    cb.vectors = Mat<S>(k, d_c);
    const double bound = 1.0 / static_cast<double>(k);
    for (int r = 0; r < k; ++r)
      for (int c = 0; c < d_c; ++c) cb.vectors(r, c) = static_cast<S>(rng.uniform(-bound, bound));
    cb.validate();
    return cb;
  }
};

template <typename S>
struct QuantizationResult {
  std::vector<int> indices;                 // length N, each in [0, K)
  Mat<S> quantized;                         // N x d_c
  std::optional<Mat<S>> soft_assignments;   // N x K, gumbel mode only
  QuantizeMode mode = QuantizeMode::hard;
};

namespace detail {

/// Squared L2 distances computed the direct way, one pair at a time. Both
/// the hard argmin and the gumbel logits read this same array, so the two
/// modes agree exactly on index decisions, including tie cases.
template <typename S>
Mat<S> sqdist_direct(const Mat<S>& seq, const Mat<S>& codewords) {
  Mat<S> d(seq.rows(), codewords.rows());
  for (int i = 0; i < seq.rows(); ++i)
    for (int k = 0; k < codewords.rows(); ++k)
      d(i, k) = (seq.row(i) - codewords.row(k)).squaredNorm();
  return d;
}

template <typename S>
int argmin_row(const Mat<S>& d, int row) {
  int best = 0;
  for (int k = 1; k < d.cols(); ++k)
    if (d(row, k) < d(row, best)) best = k;  // strict: ties keep the lowest index
  return best;
}

template <typename S>
int argmax_row(const Mat<S>& m, int row) {
  int best = 0;
  for (int k = 1; k < m.cols(); ++k)
    if (m(row, k) > m(row, best)) best = k;
  return best;
}

}  // namespace detail

/// Nearest-neighbor lookup: index of the codeword minimizing squared L2
/// distance, ties resolved to the lowest index.
template <typename S>
std::pair<int, RowVec<S>> nearest_codeword(const RowVec<S>& v, const Codebook<S>& cb) {
  require_contract(v.cols() == cb.dim(), "nearest_codeword: dimension mismatch");
  require_input(v.allFinite(), "nearest_codeword: non-finite input");
  int best = 0;
  S best_d = (v - cb.vectors.row(0)).squaredNorm();
  for (int k = 1; k < cb.size(); ++k) {
    const S d = (v - cb.vectors.row(k)).squaredNorm();
    if (d < best_d) {
      best = k;
      best_d = d;
    }
  }
  return {best, cb.vectors.row(best)};
}

/// Soft one-hot assignment rows: softmax((logits + g) / temperature) with g
/// i.i.d. Gumbel(0,1) when noise is enabled, else g = 0.
template <typename S>
Mat<S> gumbel_assign(const Mat<S>& logits, S temperature, Rng& rng, bool noise_enabled) {
  require_config(temperature > S(0), "gumbel_assign: temperature must be positive");
  require_input(all_finite(logits), "gumbel_assign: non-finite logits");
  Mat<S> z = logits;
  if (noise_enabled) {
    for (int r = 0; r < z.rows(); ++r)
      for (int c = 0; c < z.cols(); ++c) z(r, c) += static_cast<S>(rng.gumbel());
  }
  z /= temperature;
  Mat<S> p(z.rows(), z.cols());
  for (int r = 0; r < z.rows(); ++r) {
    const S m = z.row(r).maxCoeff();
    RowVec<S> e = (z.row(r).array() - m).exp().matrix();
    p.row(r) = e / e.sum();
  }
  return p;
}

/// Value-level quantization of a sequence of encoder outputs (rows).
/// Hard mode selects nearest codewords; gumbel mode mixes codewords by the
/// soft assignment. The gradient contracts live in quantize_for_training.
template <typename S>
QuantizationResult<S> quantize_sequence(const Mat<S>& seq, const Codebook<S>& cb, QuantizeMode mode,
                                        S temperature, Rng& rng, bool noise_enabled = false) {
  require_contract(seq.cols() == cb.dim(), "quantize_sequence: dimension mismatch");
  require_input(all_finite(seq), "quantize_sequence: non-finite input");
  QuantizationResult<S> out;
  out.mode = mode;
  const int n = static_cast<int>(seq.rows());
  out.indices.resize(static_cast<std::size_t>(n));
  Mat<S> d = detail::sqdist_direct(seq, cb.vectors);
  if (mode == QuantizeMode::hard) {
    out.quantized = Mat<S>(n, cb.dim());
    for (int i = 0; i < n; ++i) {
      out.indices[static_cast<std::size_t>(i)] = detail::argmin_row(d, i);
      out.quantized.row(i) = cb.vectors.row(out.indices[static_cast<std::size_t>(i)]);
    }
  } else {
    Mat<S> soft = gumbel_assign<S>(-d, temperature, rng, noise_enabled);
    out.quantized = soft * cb.vectors;
    for (int i = 0; i < n; ++i) out.indices[static_cast<std::size_t>(i)] = detail::argmax_row(soft, i);
    out.soft_assignments = std::move(soft);
  }
  return out;
}

/// Value-level Eq.-style codebook losses. The values are beta-scaled copies
/// of the same distance; the stop-gradient routing that distinguishes them
/// lives in the graph version below.
template <typename S>
std::pair<S, S> vq_losses(const Mat<S>& encoder_out, const QuantizationResult<S>& result, S beta) {
  require_contract(encoder_out.rows() == result.quantized.rows() &&
                       encoder_out.cols() == result.quantized.cols(),
                   "vq_losses: shape mismatch");
  require_contract(beta >= S(0), "vq_losses: beta must be non-negative");
  const S d = (encoder_out - result.quantized).squaredNorm() / static_cast<S>(encoder_out.rows());
  return {d, beta * d};
}

// ---------------------------------------------------------------------------
// Graph (training) versions
// ---------------------------------------------------------------------------

template <typename S>
struct QuantizedVars {
  std::vector<int> indices;
  Var quantized;   // downstream input: straight-through (hard) or soft @ C (gumbel)
  Var align_path;  // same values, gradient reaches the codebook only
  Var soft;        // gumbel mode only
  QuantizeMode mode = QuantizeMode::hard;
};

/// Differentiable quantization of `seq` rows against codebook node `cb`.
///
/// hard:   quantized carries codeword values and passes its entire upstream
///         gradient through to `seq` (straight-through); the codebook gets
///         no gradient from downstream consumers.
/// gumbel: quantized = softmax((-d^2 + g)/tau) @ C, differentiable in both
///         the encoder outputs and the codebook.
template <typename S>
QuantizedVars<S> quantize_for_training(Graph<S>& g, Var seq, Var cb, QuantizeMode mode,
                                       S temperature, Rng* noise_rng) {
  QuantizedVars<S> out;
  out.mode = mode;
  const int n = static_cast<int>(g.value(seq).rows());
  const int k = static_cast<int>(g.value(cb).rows());
  require_contract(g.value(seq).cols() == g.value(cb).cols(),
                   "quantize_for_training: dimension mismatch");

  if (mode == QuantizeMode::hard) {
    Mat<S> d = detail::sqdist_direct(g.value(seq), g.value(cb));
    out.indices.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.indices[static_cast<std::size_t>(i)] = detail::argmin_row(d, i);
    out.align_path = g.gather_rows(cb, out.indices);
    out.quantized = g.reroute_grad(out.align_path, seq);
    return out;
  }

  require_config(temperature > S(0), "quantize_for_training: temperature must be positive");
  Var dist = g.pairwise_sqdist(seq, cb);
  Var logits = g.scale(dist, S(-1));
  if (noise_rng != nullptr) {
    Mat<S> noise(n, k);
    for (int r = 0; r < noise.rows(); ++r)
      for (int c = 0; c < noise.cols(); ++c) noise(r, c) = static_cast<S>(noise_rng->gumbel());
    logits = g.add(logits, g.constant(std::move(noise)));
  }
  out.soft = g.softmax_rows(g.scale(logits, S(1) / temperature));
  out.quantized = g.matmul(out.soft, cb);
  out.align_path = g.matmul(g.stopgrad(out.soft), cb);
  const Mat<S>& soft_v = g.value(out.soft);
  out.indices.resize(static_cast<std::size_t>(soft_v.rows()));
  for (int i = 0; i < soft_v.rows(); ++i)
    out.indices[static_cast<std::size_t>(i)] = detail::argmax_row(soft_v, i);
  return out;
}

template <typename S>
struct VqLossVars {
  Var alignment;   // || sg[encoder_out] - quantized ||^2, trains the codebook
  Var commitment;  // beta * || encoder_out - sg[quantized] ||^2, trains the encoder
};

template <typename S>
VqLossVars<S> vq_loss_vars(Graph<S>& g, Var encoder_out, const QuantizedVars<S>& q, S beta) {
  const int n = static_cast<int>(g.value(encoder_out).rows());
  require_contract(n == static_cast<int>(g.value(q.quantized).rows()), "vq_loss_vars: shape mismatch");
  VqLossVars<S> out;
  out.alignment = g.sum_sq(g.sub(g.stopgrad(encoder_out), q.align_path), S(1) / static_cast<S>(n));
  out.commitment =
      g.scale(g.sum_sq(g.sub(encoder_out, g.stopgrad(q.quantized)), S(1) / static_cast<S>(n)), beta);
  return out;
}

// ---------------------------------------------------------------------------
// Maintenance
// ---------------------------------------------------------------------------

/// Reinitialize codewords whose usage fell below `threshold` to a randomly
/// chosen donor row (an encoder output) plus small uniform noise. Donors are
/// drawn without replacement while they last, so distinct dead codes land on
/// distinct donors whenever possible.
template <typename S>
Codebook<S> refresh_dead_codes(const Codebook<S>& cb, const std::vector<int>& usage_counts,
                               int threshold, const Mat<S>& donor_batch, Rng& rng,
                               S noise_scale = S(0.01)) {
  require_contract(static_cast<int>(usage_counts.size()) == cb.size(),
                   "refresh_dead_codes: usage count length");
  std::vector<int> dead;
  for (int k = 0; k < cb.size(); ++k)
    if (usage_counts[static_cast<std::size_t>(k)] < threshold) dead.push_back(k);
  Codebook<S> out = cb;
  if (dead.empty()) return out;
  if (donor_batch.rows() == 0)
    throw MaintenanceError("refresh_dead_codes: dead codes present but donor batch is empty");
  require_contract(donor_batch.cols() == cb.dim(), "refresh_dead_codes: donor dimension");

  std::vector<int> order;
  for (std::size_t i = 0; i < dead.size(); ++i) {
    if (order.empty()) {
      order = rng.sample_without_replacement(static_cast<int>(donor_batch.rows()),
                                             static_cast<int>(donor_batch.rows()));
    }
    const int donor = order.back();
    order.pop_back();
    RowVec<S> noise(cb.dim());
    for (int c = 0; c < cb.dim(); ++c) {
      double u;
      do {
        u = 2.0 * rng.uniform() - 1.0;
      } while (u <= -1.0);  // keep |noise| strictly below the scale
      noise(c) = static_cast<S>(noise_scale * static_cast<S>(u));
    }
    out.vectors.row(dead[i]) = donor_batch.row(donor) + noise;
  }
  return out;
}

/// Per-codeword usage histogram of an index sequence.
inline std::vector<int> count_usage(const std::vector<int>& indices, int k) {
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (int idx : indices) {
    require_contract(idx >= 0 && idx < k, "count_usage: index out of range");
    ++counts[static_cast<std::size_t>(idx)];
  }
  return counts;
}

}  // namespace cbvila
