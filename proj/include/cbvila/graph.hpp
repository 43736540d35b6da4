#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "cbvila/common.hpp"
#include "cbvila/params.hpp"

namespace cbvila {

struct Var {
  int i = -1;
  bool valid() const { return i >= 0; }
};

/// Reverse-mode autodiff over dense matrices.
///
/// Two properties beyond a plain tape matter here:
///  - recompute(): every op re-evaluates its value from current leaf values,
///    with all discrete decisions (gather indices, masks, sampled noise)
///    frozen at build time. Finite-difference probes perturb a leaf, call
///    recompute() and read losses, so they differentiate exactly the
///    function the backward pass claims to differentiate. stopgrad() nodes
///    keep their built value, which is what makes
///    "finite differences return zero through a stop-gradient" literal.
///  - backward() can run several times per graph from different roots, each
///    sweep optionally freezing a set of parameters. Gradients flush into
///    the ParamStore additively, which implements per-objective gradient
///    rules (the codebook is frozen for the MIM sweep only).
template <typename S>
class Graph {
 public:
  explicit Graph(ParamStore<S>* store = nullptr) : store_(store) {}

  // ----- leaves ------------------------------------------------------------

  Var constant(Mat<S> value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = false;
    return push(std::move(n));
  }

  /// Non-parameter leaf that collects gradient on the node itself.
  Var input(Mat<S> value) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = true;
    return push(std::move(n));
  }

  /// Parameter leaf backed by the store. Repeated requests return the same
  /// node, so parameter sharing is by storage identity within a graph.
  Var param(int pid, bool with_grad = true) {
    require_contract(store_ != nullptr, "graph has no parameter store");
    auto it = param_nodes_.find(pid);
    if (it != param_nodes_.end()) {
      require_contract(nodes_[static_cast<std::size_t>(it->second.i)].requires_grad == with_grad,
                       "param requested with inconsistent grad mode");
      return it->second;
    }
    Node n;
    n.value = store_->at(pid).value;
    n.requires_grad = with_grad;
    n.pid = pid;
    n.forward = [pid](Graph& g, int i) { g.nodes_[static_cast<std::size_t>(i)].value = g.store_->at(pid).value; };
    Var v = push(std::move(n));
    param_nodes_[pid] = v;
    if (with_grad) param_leaves_.push_back(v.i);
    return v;
  }

  // ----- access ------------------------------------------------------------

  const Mat<S>& value(Var v) const { return nodes_[static_cast<std::size_t>(v.i)].value; }
  Mat<S>& mutable_value(Var v) { return nodes_[static_cast<std::size_t>(v.i)].value; }
  S scalar(Var v) const { return nodes_[static_cast<std::size_t>(v.i)].value(0, 0); }

  /// Gradient captured on a node in the most recent backward sweep; zero
  /// matrix if the sweep never reached it.
  Mat<S> grad(Var v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.i)];
    if (n.grad_epoch == epoch_) return n.grad;
    return Mat<S>::Zero(n.value.rows(), n.value.cols());
  }

  int node_count() const { return static_cast<int>(nodes_.size()); }

  // ----- execution ----------------------------------------------------------

  /// Re-evaluate all node values in creation order from current leaf values.
  void recompute() {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].forward) nodes_[i].forward(*this, static_cast<int>(i));
    }
  }

  /// Reverse sweep from a scalar root. Parameter gradients accumulate into
  /// the store; `frozen_pids` are skipped during the flush of this sweep.
  void backward(Var root, S seed = S(1), const std::vector<int>& frozen_pids = {}) {
    Node& r = nodes_[static_cast<std::size_t>(root.i)];
    require_contract(r.value.size() == 1, "backward root must be scalar");
    ++epoch_;
    r.grad_epoch = epoch_;
    r.grad = Mat<S>::Constant(1, 1, seed);
    for (int i = root.i; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.grad_epoch != epoch_ || !n.requires_grad) continue;
      if (n.backward) n.backward(*this, i);
    }
    if (store_ != nullptr) {
      for (int leaf : param_leaves_) {
        Node& n = nodes_[static_cast<std::size_t>(leaf)];
        if (n.grad_epoch != epoch_) continue;
        bool frozen = false;
        for (int f : frozen_pids) frozen = frozen || (f == n.pid);
        if (!frozen) store_->at(n.pid).grad += n.grad;
      }
    }
  }

  template <typename Expr>
  void accum(Var v, const Expr& contribution) {
    Node& n = nodes_[static_cast<std::size_t>(v.i)];
    if (!n.requires_grad) return;
    if (n.grad_epoch != epoch_) {
      n.grad_epoch = epoch_;
      n.grad = contribution;
    } else {
      n.grad += contribution;
    }
  }

  // ----- elementwise / linear ops -------------------------------------------

  Var add(Var a, Var b) {
    check_same_shape(a, b, "add");
    Mat<S> v = value(a) + value(b);
    return make(std::move(v), {a, b},
                [a, b](Graph& g, int i) { g.val(i) = g.value(a) + g.value(b); },
                [a, b](Graph& g, int i) {
                  g.accum(a, g.gradref(i));
                  g.accum(b, g.gradref(i));
                });
  }

  Var sub(Var a, Var b) {
    check_same_shape(a, b, "sub");
    Mat<S> v = value(a) - value(b);
    return make(std::move(v), {a, b},
                [a, b](Graph& g, int i) { g.val(i) = g.value(a) - g.value(b); },
                [a, b](Graph& g, int i) {
                  g.accum(a, g.gradref(i));
                  g.accum(b, -g.gradref(i));
                });
  }

  Var scale(Var a, S c) {
    Mat<S> v = value(a) * c;
    return make(std::move(v), {a},
                [a, c](Graph& g, int i) { g.val(i) = g.value(a) * c; },
                [a, c](Graph& g, int i) { g.accum(a, g.gradref(i) * c); });
  }

  Var hadamard(Var a, Var b) {
    check_same_shape(a, b, "hadamard");
    Mat<S> v = value(a).cwiseProduct(value(b));
    return make(std::move(v), {a, b},
                [a, b](Graph& g, int i) { g.val(i) = g.value(a).cwiseProduct(g.value(b)); },
                [a, b](Graph& g, int i) {
                  g.accum(a, g.gradref(i).cwiseProduct(g.value(b)));
                  g.accum(b, g.gradref(i).cwiseProduct(g.value(a)));
                });
  }

  /// rows(a) x d  +  broadcast 1 x d row vector.
  Var add_rowvec(Var a, Var r) {
    require_contract(value(r).rows() == 1 && value(r).cols() == value(a).cols(), "add_rowvec shape");
    Mat<S> v = value(a).rowwise() + value(r).row(0);
    return make(std::move(v), {a, r},
                [a, r](Graph& g, int i) { g.val(i) = g.value(a).rowwise() + g.value(r).row(0); },
                [a, r](Graph& g, int i) {
                  g.accum(a, g.gradref(i));
                  g.accum(r, g.gradref(i).colwise().sum());
                });
  }

  Var matmul(Var a, Var b) {
    require_contract(value(a).cols() == value(b).rows(), "matmul inner dims");
    Mat<S> v = value(a) * value(b);
    return make(std::move(v), {a, b},
                [a, b](Graph& g, int i) { g.val(i).noalias() = g.value(a) * g.value(b); },
                [a, b](Graph& g, int i) {
                  g.accum(a, g.gradref(i) * g.value(b).transpose());
                  g.accum(b, g.value(a).transpose() * g.gradref(i));
                });
  }

  /// a * b^T without materializing the transpose.
  Var matmul_nt(Var a, Var b) {
    require_contract(value(a).cols() == value(b).cols(), "matmul_nt inner dims");
    Mat<S> v = value(a) * value(b).transpose();
    return make(std::move(v), {a, b},
                [a, b](Graph& g, int i) { g.val(i).noalias() = g.value(a) * g.value(b).transpose(); },
                [a, b](Graph& g, int i) {
                  g.accum(a, g.gradref(i) * g.value(b));
                  g.accum(b, g.gradref(i).transpose() * g.value(a));
                });
  }

  // ----- shape ops -----------------------------------------------------------

  Var slice_rows(Var a, int r0, int n) {
    require_contract(r0 >= 0 && n >= 0 && r0 + n <= value(a).rows(), "slice_rows range");
    Mat<S> v = value(a).middleRows(r0, n);
    return make(std::move(v), {a},
                [a, r0, n](Graph& g, int i) { g.val(i) = g.value(a).middleRows(r0, n); },
                [a, r0, n](Graph& g, int i) {
                  const Mat<S>& va = g.value(a);
                  Mat<S> padded = Mat<S>::Zero(va.rows(), va.cols());
                  padded.middleRows(r0, n) = g.gradref(i);
                  g.accum(a, padded);
                });
  }

  Var slice_cols(Var a, int c0, int n) {
    require_contract(c0 >= 0 && n >= 0 && c0 + n <= value(a).cols(), "slice_cols range");
    Mat<S> v = value(a).middleCols(c0, n);
    return make(std::move(v), {a},
                [a, c0, n](Graph& g, int i) { g.val(i) = g.value(a).middleCols(c0, n); },
                [a, c0, n](Graph& g, int i) {
                  const Mat<S>& va = g.value(a);
                  Mat<S> padded = Mat<S>::Zero(va.rows(), va.cols());
                  padded.middleCols(c0, n) = g.gradref(i);
                  g.accum(a, padded);
                });
  }

  Var concat_rows(const std::vector<Var>& parts) {
    require_contract(!parts.empty(), "concat_rows empty");
    int rows = 0;
    const int cols = static_cast<int>(value(parts[0]).cols());
    for (Var p : parts) {
      require_contract(value(p).cols() == cols, "concat_rows width");
      rows += static_cast<int>(value(p).rows());
    }
    Mat<S> v(rows, cols);
    int at = 0;
    for (Var p : parts) {
      v.middleRows(at, static_cast<int>(value(p).rows())) = value(p);
      at += static_cast<int>(value(p).rows());
    }
    return make(std::move(v), parts,
                [parts](Graph& g, int i) {
                  int at2 = 0;
                  for (Var p : parts) {
                    g.val(i).middleRows(at2, static_cast<int>(g.value(p).rows())) = g.value(p);
                    at2 += static_cast<int>(g.value(p).rows());
                  }
                },
                [parts](Graph& g, int i) {
                  int at2 = 0;
                  for (Var p : parts) {
                    const int pr = static_cast<int>(g.value(p).rows());
                    g.accum(p, g.gradref(i).middleRows(at2, pr));
                    at2 += pr;
                  }
                });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    require_contract(!parts.empty(), "concat_cols empty");
    const int rows = static_cast<int>(value(parts[0]).rows());
    int cols = 0;
    for (Var p : parts) {
      require_contract(value(p).rows() == rows, "concat_cols height");
      cols += static_cast<int>(value(p).cols());
    }
    Mat<S> v(rows, cols);
    int at = 0;
    for (Var p : parts) {
      v.middleCols(at, static_cast<int>(value(p).cols())) = value(p);
      at += static_cast<int>(value(p).cols());
    }
    return make(std::move(v), parts,
                [parts](Graph& g, int i) {
                  int at2 = 0;
                  for (Var p : parts) {
                    g.val(i).middleCols(at2, static_cast<int>(g.value(p).cols())) = g.value(p);
                    at2 += static_cast<int>(g.value(p).cols());
                  }
                },
                [parts](Graph& g, int i) {
                  int at2 = 0;
                  for (Var p : parts) {
                    const int pc = static_cast<int>(g.value(p).cols());
                    g.accum(p, g.gradref(i).middleCols(at2, pc));
                    at2 += pc;
                  }
                });
  }

  /// Row lookup with scatter-add backward (embedding / codeword gather).
  /// Indices are frozen at build time.
  Var gather_rows(Var table, std::vector<int> indices) {
    const Mat<S>& t = value(table);
    for (int idx : indices)
      require_contract(idx >= 0 && idx < t.rows(), "gather_rows index out of range");
    Mat<S> v(static_cast<int>(indices.size()), t.cols());
    for (std::size_t r = 0; r < indices.size(); ++r) v.row(static_cast<int>(r)) = t.row(indices[r]);
    auto idx = std::make_shared<const std::vector<int>>(std::move(indices));
    return make(std::move(v), {table},
                [table, idx](Graph& g, int i) {
                  const Mat<S>& tv = g.value(table);
                  Mat<S>& out = g.val(i);
                  for (std::size_t r = 0; r < idx->size(); ++r)
                    out.row(static_cast<int>(r)) = tv.row((*idx)[r]);
                },
                [table, idx](Graph& g, int i) {
                  const Mat<S>& tv = g.value(table);
                  Mat<S> acc = Mat<S>::Zero(tv.rows(), tv.cols());
                  const Mat<S>& gr = g.gradref(i);
                  for (std::size_t r = 0; r < idx->size(); ++r)
                    acc.row((*idx)[r]) += gr.row(static_cast<int>(r));
                  g.accum(table, acc);
                });
  }

  /// Copy of `base` with rows at `positions` replaced by the broadcast 1 x d
  /// `rowvec` (mask-token substitution).
  Var overwrite_rows(Var base, Var rowvec, std::vector<int> positions) {
    require_contract(value(rowvec).rows() == 1 && value(rowvec).cols() == value(base).cols(),
                     "overwrite_rows shape");
    for (int p : positions)
      require_contract(p >= 0 && p < value(base).rows(), "overwrite_rows position out of range");
    auto pos = std::make_shared<const std::vector<int>>(std::move(positions));
    Mat<S> v = value(base);
    for (int p : *pos) v.row(p) = value(rowvec).row(0);
    return make(std::move(v), {base, rowvec},
                [base, rowvec, pos](Graph& g, int i) {
                  Mat<S>& out = g.val(i);
                  out = g.value(base);
                  for (int p : *pos) out.row(p) = g.value(rowvec).row(0);
                },
                [base, rowvec, pos](Graph& g, int i) {
                  Mat<S> gb = g.gradref(i);
                  Mat<S> gv = Mat<S>::Zero(1, gb.cols());
                  for (int p : *pos) {
                    gv.row(0) += gb.row(p);
                    gb.row(p).setZero();
                  }
                  g.accum(base, gb);
                  g.accum(rowvec, gv);
                });
  }

  /// Copy of `base` with rows at `positions` replaced by the corresponding
  /// rows of `rows` (len(positions) x d).
  Var scatter_rows(Var base, Var rows, std::vector<int> positions) {
    require_contract(value(rows).rows() == static_cast<int>(positions.size()) &&
                         value(rows).cols() == value(base).cols(),
                     "scatter_rows shape");
    auto pos = std::make_shared<const std::vector<int>>(std::move(positions));
    Mat<S> v = value(base);
    for (std::size_t r = 0; r < pos->size(); ++r) v.row((*pos)[r]) = value(rows).row(static_cast<int>(r));
    return make(std::move(v), {base, rows},
                [base, rows, pos](Graph& g, int i) {
                  Mat<S>& out = g.val(i);
                  out = g.value(base);
                  for (std::size_t r = 0; r < pos->size(); ++r)
                    out.row((*pos)[r]) = g.value(rows).row(static_cast<int>(r));
                },
                [base, rows, pos](Graph& g, int i) {
                  Mat<S> gb = g.gradref(i);
                  Mat<S> gr(static_cast<int>(pos->size()), gb.cols());
                  for (std::size_t r = 0; r < pos->size(); ++r) {
                    gr.row(static_cast<int>(r)) = gb.row((*pos)[r]);
                    gb.row((*pos)[r]).setZero();
                  }
                  g.accum(base, gb);
                  g.accum(rows, gr);
                });
  }

  // ----- gradient routing -----------------------------------------------------

  /// Identity forward, no backward. The built value is frozen: recompute()
  /// does not refresh it, so perturbations cannot leak through a
  /// stop-gradient in finite-difference probes.
  Var stopgrad(Var a) {
    Node n;
    n.value = value(a);
    n.requires_grad = false;
    return push(std::move(n));
  }

  /// Straight-through primitive: takes its value from `value_of` and sends
  /// its entire gradient to `grad_to`, unchanged.
  Var reroute_grad(Var value_of, Var grad_to) {
    check_same_shape(value_of, grad_to, "reroute_grad");
    Mat<S> v = value(value_of);
    return make(std::move(v), {grad_to},
                [value_of](Graph& g, int i) { g.val(i) = g.value(value_of); },
                [grad_to](Graph& g, int i) { g.accum(grad_to, g.gradref(i)); });
  }

  // ----- nonlinearities --------------------------------------------------------

  /// Rowwise softmax. When `valid` is given, invalid columns receive exactly
  /// zero probability and transmit no gradient.
  Var softmax_rows(Var a, std::vector<std::uint8_t> valid = {}) {
    const Mat<S>& x = value(a);
    require_contract(valid.empty() || static_cast<int>(valid.size()) == x.cols(),
                     "softmax_rows mask length");
    auto mask = std::make_shared<const std::vector<std::uint8_t>>(std::move(valid));
    Mat<S> v = softmax_value(x, *mask);
    auto fwd = [a, mask](Graph& g, int i) { g.val(i) = softmax_value(g.value(a), *mask); };
    auto bwd = [a, mask](Graph& g, int i) {
      const Mat<S>& p = g.val(i);
      const Mat<S>& gy = g.gradref(i);
      Mat<S> gx(p.rows(), p.cols());
      for (int r = 0; r < p.rows(); ++r) {
        const S dot = gy.row(r).dot(p.row(r));
        gx.row(r) = (gy.row(r).array() - dot).matrix().cwiseProduct(p.row(r));
      }
      g.accum(a, gx);
    };
    return make(std::move(v), {a}, std::move(fwd), std::move(bwd));
  }

  Var layer_norm(Var x, Var gamma, Var beta, S eps = S(1e-5)) {
    require_contract(value(gamma).rows() == 1 && value(gamma).cols() == value(x).cols() &&
                         value(beta).rows() == 1 && value(beta).cols() == value(x).cols(),
                     "layer_norm shapes");
    Mat<S> v = layer_norm_value(value(x), value(gamma), value(beta), eps);
    auto fwd = [x, gamma, beta, eps](Graph& g, int i) {
      g.val(i) = layer_norm_value(g.value(x), g.value(gamma), g.value(beta), eps);
    };
    auto bwd = [x, gamma, beta, eps](Graph& g, int i) {
      const Mat<S>& xv = g.value(x);
      const Mat<S>& gv = g.value(gamma);
      const Mat<S>& gy = g.gradref(i);
      const int rows = static_cast<int>(xv.rows());
      const int d = static_cast<int>(xv.cols());
      Mat<S> gx(rows, d);
      Mat<S> ggamma = Mat<S>::Zero(1, d);
      Mat<S> gbeta = Mat<S>::Zero(1, d);
      for (int r = 0; r < rows; ++r) {
        const S mu = xv.row(r).mean();
        const S var = (xv.row(r).array() - mu).square().mean();
        const S inv = S(1) / std::sqrt(var + eps);
        RowVec<S> xhat = ((xv.row(r).array() - mu) * inv).matrix();
        RowVec<S> u = gy.row(r).cwiseProduct(gv.row(0));
        const S mu_u = u.mean();
        const S mu_ux = u.cwiseProduct(xhat).mean();
        gx.row(r) = ((u.array() - mu_u - xhat.array() * mu_ux) * inv).matrix();
        ggamma.row(0) += gy.row(r).cwiseProduct(xhat);
        gbeta.row(0) += gy.row(r);
      }
      g.accum(x, gx);
      g.accum(gamma, ggamma);
      g.accum(beta, gbeta);
    };
    return make(std::move(v), {x, gamma, beta}, std::move(fwd), std::move(bwd));
  }

  Var gelu(Var a) {
    Mat<S> v = gelu_value(value(a));
    return make(std::move(v), {a},
                [a](Graph& g, int i) { g.val(i) = gelu_value(g.value(a)); },
                [a](Graph& g, int i) {
                  const Mat<S>& x = g.value(a);
                  Mat<S> d = x.unaryExpr([](S v) {
                    const S inv_sqrt2 = S(0.70710678118654752440);
                    const S inv_sqrt2pi = S(0.39894228040143267794);
                    return S(0.5) * (S(1) + std::erf(v * inv_sqrt2)) +
                           v * inv_sqrt2pi * std::exp(S(-0.5) * v * v);
                  });
                  g.accum(a, g.gradref(i).cwiseProduct(d));
                });
  }

  Var sigmoid(Var a) {
    Mat<S> v = sigmoid_value(value(a));
    return make(std::move(v), {a},
                [a](Graph& g, int i) { g.val(i) = sigmoid_value(g.value(a)); },
                [a](Graph& g, int i) {
                  const Mat<S>& y = g.val(i);
                  g.accum(a, g.gradref(i).cwiseProduct(
                                 (y.array() * (S(1) - y.array())).matrix()));
                });
  }

  // ----- reductions / losses -----------------------------------------------------

  Var mean_all(Var a) {
    Mat<S> v = Mat<S>::Constant(1, 1, value(a).mean());
    return make(std::move(v), {a},
                [a](Graph& g, int i) { g.val(i)(0, 0) = g.value(a).mean(); },
                [a](Graph& g, int i) {
                  const Mat<S>& x = g.value(a);
                  const S c = g.gradref(i)(0, 0) / static_cast<S>(x.size());
                  g.accum(a, Mat<S>::Constant(x.rows(), x.cols(), c));
                });
  }

  Var sum_all(Var a) {
    Mat<S> v = Mat<S>::Constant(1, 1, value(a).sum());
    return make(std::move(v), {a},
                [a](Graph& g, int i) { g.val(i)(0, 0) = g.value(a).sum(); },
                [a](Graph& g, int i) {
                  const Mat<S>& x = g.value(a);
                  g.accum(a, Mat<S>::Constant(x.rows(), x.cols(), g.gradref(i)(0, 0)));
                });
  }

  /// scale * sum of squared entries. With scale = 1/rows this is the mean
  /// over positions of the squared row norm; with scale = 1/size it is the
  /// elementwise mean square.
  Var sum_sq(Var a, S scale) {
    Mat<S> v = Mat<S>::Constant(1, 1, value(a).squaredNorm() * scale);
    return make(std::move(v), {a},
                [a, scale](Graph& g, int i) { g.val(i)(0, 0) = g.value(a).squaredNorm() * scale; },
                [a, scale](Graph& g, int i) {
                  g.accum(a, (S(2) * scale * g.gradref(i)(0, 0)) * g.value(a));
                });
  }

  /// Weighted sum of 1x1 nodes.
  Var sum_scalars(const std::vector<Var>& terms, const std::vector<S>& weights) {
    require_contract(terms.size() == weights.size() && !terms.empty(), "sum_scalars arity");
    S total = S(0);
    for (std::size_t k = 0; k < terms.size(); ++k) total += weights[k] * scalar(terms[k]);
    auto ts = std::make_shared<const std::vector<Var>>(terms);
    auto ws = std::make_shared<const std::vector<S>>(weights);
    Mat<S> v = Mat<S>::Constant(1, 1, total);
    return make(std::move(v), terms,
                [ts, ws](Graph& g, int i) {
                  S t = S(0);
                  for (std::size_t k = 0; k < ts->size(); ++k) t += (*ws)[k] * g.scalar((*ts)[k]);
                  g.val(i)(0, 0) = t;
                },
                [ts, ws](Graph& g, int i) {
                  const S go = g.gradref(i)(0, 0);
                  for (std::size_t k = 0; k < ts->size(); ++k)
                    g.accum((*ts)[k], Mat<S>::Constant(1, 1, go * (*ws)[k]));
                });
  }

  /// Mean cross-entropy of rowwise softmax(logits) against integer targets.
  Var cross_entropy_rows(Var logits, std::vector<int> targets) {
    const Mat<S>& x = value(logits);
    require_contract(static_cast<int>(targets.size()) == x.rows(), "cross_entropy target count");
    for (int t : targets) require_contract(t >= 0 && t < x.cols(), "cross_entropy target range");
    auto tg = std::make_shared<const std::vector<int>>(std::move(targets));
    Mat<S> v = Mat<S>::Constant(1, 1, ce_value(x, *tg));
    return make(std::move(v), {logits},
                [logits, tg](Graph& g, int i) { g.val(i)(0, 0) = ce_value(g.value(logits), *tg); },
                [logits, tg](Graph& g, int i) {
                  const Mat<S>& xv = g.value(logits);
                  const S go = g.gradref(i)(0, 0) / static_cast<S>(xv.rows());
                  Mat<S> gx(xv.rows(), xv.cols());
                  for (int r = 0; r < xv.rows(); ++r) {
                    const S m = xv.row(r).maxCoeff();
                    RowVec<S> e = (xv.row(r).array() - m).exp().matrix();
                    gx.row(r) = e / e.sum();
                    gx(r, (*tg)[static_cast<std::size_t>(r)]) -= S(1);
                  }
                  g.accum(logits, gx * go);
                });
  }

  /// N x K matrix of squared L2 distances between rows of x and rows of c.
  Var pairwise_sqdist(Var x, Var c) {
    require_contract(value(x).cols() == value(c).cols(), "pairwise_sqdist dims");
    Mat<S> v = sqdist_value(value(x), value(c));
    return make(std::move(v), {x, c},
                [x, c](Graph& g, int i) { g.val(i) = sqdist_value(g.value(x), g.value(c)); },
                [x, c](Graph& g, int i) {
                  const Mat<S>& xv = g.value(x);
                  const Mat<S>& cv = g.value(c);
                  const Mat<S>& gd = g.gradref(i);
                  // d D_ik / d x_i = 2 (x_i - c_k); d D_ik / d c_k = 2 (c_k - x_i)
                  Eigen::Matrix<S, Eigen::Dynamic, 1> rs = gd.rowwise().sum();
                  Eigen::Matrix<S, Eigen::Dynamic, 1> cs = gd.colwise().sum().transpose();
                  Mat<S> gx = S(2) * ((xv.array().colwise() * rs.array()).matrix() - gd * cv);
                  Mat<S> gc = S(2) * ((cv.array().colwise() * cs.array()).matrix() - gd.transpose() * xv);
                  g.accum(x, gx);
                  g.accum(c, gc);
                });
  }

  /// Rowwise x / max(||x||, eps).
  Var l2_normalize_rows(Var a, S eps = S(1e-12)) {
    Mat<S> v = l2norm_value(value(a), eps);
    return make(std::move(v), {a},
                [a, eps](Graph& g, int i) { g.val(i) = l2norm_value(g.value(a), eps); },
                [a, eps](Graph& g, int i) {
                  const Mat<S>& x = g.value(a);
                  const Mat<S>& y = g.val(i);
                  const Mat<S>& gy = g.gradref(i);
                  Mat<S> gx(x.rows(), x.cols());
                  for (int r = 0; r < x.rows(); ++r) {
                    const S n = x.row(r).norm();
                    if (n > eps) {
                      const S dot = gy.row(r).dot(y.row(r));
                      gx.row(r) = (gy.row(r) - dot * y.row(r)) / n;
                    } else {
                      gx.row(r) = gy.row(r) / eps;
                    }
                  }
                  g.accum(a, gx);
                });
  }

  // ----- composite helpers ----------------------------------------------------

  Var affine(Var x, Var w, Var b) { return add_rowvec(matmul(x, w), b); }

  Var row(Var a, int r) { return slice_rows(a, r, 1); }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    int grad_epoch = -1;
    bool requires_grad = false;
    int pid = -1;
    std::function<void(Graph&, int)> forward;
    std::function<void(Graph&, int)> backward;
  };

  Mat<S>& val(int i) { return nodes_[static_cast<std::size_t>(i)].value; }
  const Mat<S>& gradref(int i) const { return nodes_[static_cast<std::size_t>(i)].grad; }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  Var make(Mat<S> value, const std::vector<Var>& parents, std::function<void(Graph&, int)> fwd,
           std::function<void(Graph&, int)> bwd) {
    Node n;
    n.value = std::move(value);
    for (Var p : parents)
      n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(p.i)].requires_grad;
    n.forward = std::move(fwd);
    if (n.requires_grad) n.backward = std::move(bwd);
    return push(std::move(n));
  }

  void check_same_shape(Var a, Var b, const char* op) {
    require_contract(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(),
                     std::string(op) + ": shape mismatch");
  }

  static Mat<S> softmax_value(const Mat<S>& x, const std::vector<std::uint8_t>& valid) {
    Mat<S> p = Mat<S>::Zero(x.rows(), x.cols());
    for (int r = 0; r < x.rows(); ++r) {
      S m = -std::numeric_limits<S>::infinity();
      for (int c = 0; c < x.cols(); ++c)
        if (valid.empty() || valid[static_cast<std::size_t>(c)]) m = std::max(m, x(r, c));
      S z = S(0);
      for (int c = 0; c < x.cols(); ++c) {
        if (valid.empty() || valid[static_cast<std::size_t>(c)]) {
          p(r, c) = std::exp(x(r, c) - m);
          z += p(r, c);
        }
      }
      p.row(r) /= z;
    }
    return p;
  }

  static Mat<S> layer_norm_value(const Mat<S>& x, const Mat<S>& gamma, const Mat<S>& beta, S eps) {
    Mat<S> y(x.rows(), x.cols());
    for (int r = 0; r < x.rows(); ++r) {
      const S mu = x.row(r).mean();
      const S var = (x.row(r).array() - mu).square().mean();
      const S inv = S(1) / std::sqrt(var + eps);
      y.row(r) = (((x.row(r).array() - mu) * inv) * gamma.row(0).array() + beta.row(0).array()).matrix();
    }
    return y;
  }

  static Mat<S> gelu_value(const Mat<S>& x) {
    return x.unaryExpr([](S v) {
      const S inv_sqrt2 = S(0.70710678118654752440);
      return S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2));
    });
  }

  static Mat<S> sigmoid_value(const Mat<S>& x) {
    return (S(1) / (S(1) + (-x.array()).exp())).matrix();
  }

  static Mat<S> l2norm_value(const Mat<S>& x, S eps) {
    Mat<S> y(x.rows(), x.cols());
    for (int r = 0; r < x.rows(); ++r) {
      const S n = x.row(r).norm();
      y.row(r) = x.row(r) / std::max(n, eps);
    }
    return y;
  }

  static S ce_value(const Mat<S>& x, const std::vector<int>& targets) {
    S total = S(0);
    for (int r = 0; r < x.rows(); ++r) {
      const S m = x.row(r).maxCoeff();
      const S lse = m + std::log((x.row(r).array() - m).exp().sum());
      total += lse - x(r, targets[static_cast<std::size_t>(r)]);
    }
    return total / static_cast<S>(x.rows());
  }

  // Direct per-pair evaluation so argmin/argmax decisions agree bit-for-bit
  // with the hard nearest-neighbor scan.
  static Mat<S> sqdist_value(const Mat<S>& x, const Mat<S>& c) {
    Mat<S> d(x.rows(), c.rows());
    for (int i = 0; i < x.rows(); ++i)
      for (int k = 0; k < c.rows(); ++k) d(i, k) = (x.row(i) - c.row(k)).squaredNorm();
    return d;
  }

  std::vector<Node> nodes_;
  ParamStore<S>* store_ = nullptr;
  std::unordered_map<int, Var> param_nodes_;
  std::vector<int> param_leaves_;
  int epoch_ = 0;
};

}  // namespace cbvila
