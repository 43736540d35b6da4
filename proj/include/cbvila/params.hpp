#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "cbvila/common.hpp"

namespace cbvila {

template <typename S>
struct Param {
  std::string name;
  Mat<S> value;
  Mat<S> grad;
  Mat<S> m;  // AdamW first moment
  Mat<S> v;  // AdamW second moment
};

/// Flat registry of named trainable tensors. Parameter ids are stable for
/// the lifetime of the store and double as checkpoint ordering.
template <typename S>
class ParamStore {
 public:
  int add(const std::string& name, Mat<S> init) {
    require_contract(index_.find(name) == index_.end(), "duplicate parameter name: " + name);
    Param<S> p;
    p.name = name;
    p.value = std::move(init);
    p.grad = Mat<S>::Zero(p.value.rows(), p.value.cols());
    p.m = Mat<S>::Zero(p.value.rows(), p.value.cols());
    p.v = Mat<S>::Zero(p.value.rows(), p.value.cols());
    params_.push_back(std::move(p));
    const int pid = static_cast<int>(params_.size()) - 1;
    index_[params_.back().name] = pid;
    return pid;
  }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  Param<S>& at(int pid) { return params_[static_cast<std::size_t>(pid)]; }
  const Param<S>& at(int pid) const { return params_[static_cast<std::size_t>(pid)]; }

  int size() const { return static_cast<int>(params_.size()); }

  void zero_grads() {
    for (auto& p : params_) p.grad.setZero();
  }

  std::int64_t scalar_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  std::vector<Param<S>> params_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace cbvila
