#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "cbvila/rng.hpp"
#include "cbvila/tokenizer.hpp"

namespace cbvila {

struct TextMask {
  std::vector<int> masked_ids;  // input ids with [MASK] substituted
  std::vector<int> positions;   // ascending masked positions
  std::vector<int> labels;      // original ids at those positions
};

/// Mask max(1, round(ratio * maskable)) word positions; every selected
/// position becomes [MASK] (no 80/10/10 split). Special tokens are never
/// selected.
inline TextMask mask_text(const std::vector<int>& ids, double ratio, Rng& rng) {
  const std::vector<int> maskable = maskable_positions(ids);
  if (maskable.empty()) throw InputError("mask_text: caption has no maskable tokens");
  const int count = std::max(
      1, static_cast<int>(std::lround(ratio * static_cast<double>(maskable.size()))));
  auto picks = rng.sample_without_replacement(static_cast<int>(maskable.size()), count);
  TextMask out;
  out.masked_ids = ids;
  out.positions.reserve(picks.size());
  for (int p : picks) out.positions.push_back(maskable[static_cast<std::size_t>(p)]);
  std::sort(out.positions.begin(), out.positions.end());
  out.labels.reserve(out.positions.size());
  for (int pos : out.positions) {
    out.labels.push_back(ids[static_cast<std::size_t>(pos)]);
    out.masked_ids[static_cast<std::size_t>(pos)] = Vocab::mask_id;
  }
  return out;
}

/// Uniformly random patch subset of size round(ratio * n), without
/// replacement, returned in ascending order.
inline std::vector<int> mask_visual(int n, double ratio, Rng& rng) {
  require_contract(n >= 4, "mask_visual: needs at least 4 patches");
  const int count = static_cast<int>(std::lround(ratio * static_cast<double>(n)));
  auto picks = rng.sample_without_replacement(n, count);
  std::sort(picks.begin(), picks.end());
  return picks;
}

/// Ascending complement of a sorted position set in [0, n).
inline std::vector<int> complement_positions(const std::vector<int>& positions, int n) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(n) - positions.size());
  std::size_t j = 0;
  for (int i = 0; i < n; ++i) {
    if (j < positions.size() && positions[j] == i) {
      ++j;
    } else {
      out.push_back(i);
    }
  }
  return out;
}

}  // namespace cbvila
