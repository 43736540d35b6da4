#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace cbvila {

/// Dense row-major matrix; rows index sequence positions, columns feature dims.
template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using RowVec = Eigen::Matrix<S, 1, Eigen::Dynamic>;

// Error taxonomy. Input and config errors map to CLI exit codes 1 and 2;
// contract violations indicate caller bugs; numerical errors abort training.
struct InputError : std::runtime_error {
  explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ContractError : std::logic_error {
  explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

struct MaintenanceError : std::runtime_error {
  explicit MaintenanceError(const std::string& msg) : std::runtime_error(msg) {}
};

struct SamplingError : std::runtime_error {
  explicit SamplingError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename S>
bool all_finite(const Mat<S>& m) {
  return m.allFinite();
}

template <typename Derived>
void require(bool cond, const std::string& msg, Derived* /*tag*/ = nullptr) {
  if (!cond) throw Derived(msg);
}

inline void require_input(bool cond, const std::string& msg) {
  if (!cond) throw InputError(msg);
}

inline void require_config(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

inline void require_contract(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

}  // namespace cbvila
