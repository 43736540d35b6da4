#pragma once

#include <cmath>

#include "cbvila/params.hpp"

namespace cbvila {

/// AdamW: adaptive moments with decoupled weight decay. Stateless across
/// steps beyond the per-parameter moments in the store; the bias-correction
/// step index is passed in so a resumed run continues exactly.
template <typename S>
struct AdamW {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.02;

  /// One update from the gradients accumulated in the store. `t` is the
  /// 1-based update count. The decay term scales with the learning rate, so
  /// lr = 0 leaves parameters bitwise unchanged.
  void step(ParamStore<S>& store, double lr, long t) const {
    const S b1 = static_cast<S>(beta1);
    const S b2 = static_cast<S>(beta2);
    const S corr1 = static_cast<S>(1.0 - std::pow(beta1, static_cast<double>(t)));
    const S corr2 = static_cast<S>(1.0 - std::pow(beta2, static_cast<double>(t)));
    const S slr = static_cast<S>(lr);
    const S seps = static_cast<S>(eps);
    const S wd = static_cast<S>(weight_decay);
    for (int pid = 0; pid < store.size(); ++pid) {
      auto& p = store.at(pid);
      p.m = b1 * p.m + (S(1) - b1) * p.grad;
      p.v = b2 * p.v + (S(1) - b2) * p.grad.cwiseProduct(p.grad);
      p.value -= slr * (((p.m.array() / corr1) / ((p.v.array() / corr2).sqrt() + seps)).matrix() +
                        wd * p.value);
    }
  }
};

}  // namespace cbvila
