#include <catch2/catch_amalgamated.hpp>

#include "cbvila/graph.hpp"
#include "cbvila/rng.hpp"
#include "test_util.hpp"

using namespace cbvila;
using testutil::fd_input;
using testutil::fd_param;
using testutil::max_grad_rel_err_input;
using testutil::random_mat;
using testutil::rel_err;

namespace {

Rng test_rng(std::uint64_t salt) { return Rng(42, RngStream::test, {salt}); }

}  // namespace

TEST_CASE("rng streams are deterministic and well ranged") {
  Rng a(7, RngStream::test, {1});
  Rng b(7, RngStream::test, {1});
  Rng c(7, RngStream::test, {2});
  bool diverged = false;
  for (int i = 0; i < 100; ++i) {
    const double ua = a.uniform();
    REQUIRE(ua == b.uniform());
    REQUIRE(ua >= 0.0);
    REQUIRE(ua < 1.0);
    diverged = diverged || (ua != c.uniform());
  }
  REQUIRE(diverged);

  Rng d = test_rng(3);
  for (int i = 0; i < 1000; ++i) {
    REQUIRE(d.uniform_int(17) < 17);
    REQUIRE(std::isfinite(d.gumbel()));
    REQUIRE(std::isfinite(d.normal()));
  }
}

TEST_CASE("sample_without_replacement covers range without duplicates") {
  Rng rng = test_rng(4);
  auto picks = rng.sample_without_replacement(20, 8);
  REQUIRE(picks.size() == 8);
  std::vector<bool> seen(20, false);
  for (int p : picks) {
    REQUIRE(p >= 0);
    REQUIRE(p < 20);
    REQUIRE(!seen[static_cast<std::size_t>(p)]);
    seen[static_cast<std::size_t>(p)] = true;
  }
}

TEST_CASE("elementwise and linear op gradients match finite differences") {
  Rng rng = test_rng(10);
  Graph<double> g;
  Var a = g.input(random_mat<double>(rng, 3, 4));
  Var b = g.input(random_mat<double>(rng, 3, 4));
  Var w = g.input(random_mat<double>(rng, 4, 5));
  Var bias = g.input(random_mat<double>(rng, 1, 5));
  Var k = g.input(random_mat<double>(rng, 2, 5));

  Var h1 = g.hadamard(g.add(a, g.scale(b, 0.7)), g.sub(a, b));
  Var h2 = g.affine(h1, w, bias);
  Var h3 = g.matmul_nt(h2, k);
  Var loss = g.mean_all(g.gelu(h3));

  REQUIRE(max_grad_rel_err_input(g, a, loss) < 1e-5);
  REQUIRE(max_grad_rel_err_input(g, b, loss) < 1e-5);
  REQUIRE(max_grad_rel_err_input(g, w, loss) < 1e-5);
  REQUIRE(max_grad_rel_err_input(g, bias, loss) < 1e-5);
  REQUIRE(max_grad_rel_err_input(g, k, loss) < 1e-5);
}

TEST_CASE("softmax, layer_norm, sigmoid gradients match finite differences") {
  Rng rng = test_rng(11);
  Graph<double> g;
  Var x = g.input(random_mat<double>(rng, 4, 6));
  Var gamma = g.input(random_mat<double>(rng, 1, 6, 0.5));
  Var beta = g.input(random_mat<double>(rng, 1, 6, 0.5));
  Var target = g.constant(random_mat<double>(rng, 4, 6));

  Var ln = g.layer_norm(x, gamma, beta);
  Var sm = g.softmax_rows(ln);
  Var sg = g.sigmoid(sm);
  Var loss = g.sum_sq(g.sub(sg, target), 1.0 / 24.0);

  REQUIRE(max_grad_rel_err_input(g, x, loss) < 1e-5);
  REQUIRE(max_grad_rel_err_input(g, gamma, loss) < 1e-5);
  REQUIRE(max_grad_rel_err_input(g, beta, loss) < 1e-5);
}

TEST_CASE("masked softmax assigns exact zeros and blocks gradient") {
  Graph<double> g;
  Mat<double> x(2, 4);
  x << 1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 2.0, 0.0;
  Var xv = g.input(x);
  Var p = g.softmax_rows(xv, {1, 1, 0, 1});
  REQUIRE(g.value(p)(0, 2) == 0.0);
  REQUIRE(g.value(p)(1, 2) == 0.0);
  for (int r = 0; r < 2; ++r) REQUIRE(g.value(p).row(r).sum() == Catch::Approx(1.0).epsilon(1e-12));

  // perturbing a masked logit changes nothing, including downstream values
  Var loss = g.mean_all(p);
  const double before = g.scalar(loss);
  g.mutable_value(xv)(0, 2) = 1e6;
  g.recompute();
  REQUIRE(g.scalar(loss) == before);
}

TEST_CASE("shape ops route gradients correctly") {
  Rng rng = test_rng(12);
  Graph<double> g;
  Var a = g.input(random_mat<double>(rng, 5, 6));
  Var b = g.input(random_mat<double>(rng, 2, 6));
  Var r = g.input(random_mat<double>(rng, 1, 6));

  Var top = g.slice_rows(a, 0, 3);
  Var left = g.slice_cols(top, 0, 3);
  Var right = g.slice_cols(top, 3, 3);
  Var joined = g.concat_cols({right, left});
  Var stacked = g.concat_rows({joined, g.slice_rows(a, 3, 2)});
  Var over = g.overwrite_rows(stacked, r, {1, 4});
  Var scat = g.scatter_rows(over, b, {0, 2});
  Var loss = g.sum_sq(scat, 0.1);

  REQUIRE(max_grad_rel_err_input(g, a, loss) < 1e-5);
  REQUIRE(max_grad_rel_err_input(g, b, loss) < 1e-5);
  REQUIRE(max_grad_rel_err_input(g, r, loss) < 1e-5);
}

TEST_CASE("gather_rows accumulates duplicate-index gradients") {
  Graph<double> g;
  Mat<double> table(3, 2);
  table << 1, 2, 3, 4, 5, 6;
  Var t = g.input(table);
  Var picked = g.gather_rows(t, {1, 1, 0});
  Var loss = g.sum_all(picked);
  g.backward(loss);
  Mat<double> grad = g.grad(t);
  REQUIRE(grad(1, 0) == 2.0);
  REQUIRE(grad(0, 0) == 1.0);
  REQUIRE(grad(2, 0) == 0.0);
  REQUIRE(max_grad_rel_err_input(g, t, loss) < 1e-6);
}

TEST_CASE("cross entropy matches a hand-rolled oracle and its gradient checks out") {
  Rng rng = test_rng(13);
  Graph<double> g;
  Mat<double> logits = random_mat<double>(rng, 5, 7, 3.0);
  std::vector<int> targets = {0, 3, 6, 2, 2};
  Var lv = g.input(logits);
  Var loss = g.cross_entropy_rows(lv, targets);

  double expect = 0.0;
  for (int r = 0; r < 5; ++r) {
    double z = 0.0;
    for (int c = 0; c < 7; ++c) z += std::exp(logits(r, c));
    expect += std::log(z) - logits(r, targets[static_cast<std::size_t>(r)]);
  }
  expect /= 5.0;
  REQUIRE(g.scalar(loss) == Catch::Approx(expect).epsilon(1e-10));
  REQUIRE(max_grad_rel_err_input(g, lv, loss) < 1e-5);
}

TEST_CASE("pairwise_sqdist values and gradients") {
  Rng rng = test_rng(14);
  Graph<double> g;
  Mat<double> xm = random_mat<double>(rng, 4, 3);
  Mat<double> cm = random_mat<double>(rng, 5, 3);
  Var x = g.input(xm);
  Var c = g.input(cm);
  Var d = g.pairwise_sqdist(x, c);
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < 5; ++k)
      REQUIRE(g.value(d)(i, k) == Catch::Approx((xm.row(i) - cm.row(k)).squaredNorm()).margin(1e-12));

  Var loss = g.mean_all(g.hadamard(d, d));
  REQUIRE(max_grad_rel_err_input(g, x, loss) < 1e-5);
  REQUIRE(max_grad_rel_err_input(g, c, loss) < 1e-5);
}

TEST_CASE("stopgrad blocks both gradient and finite-difference leakage") {
  Rng rng = test_rng(15);
  Graph<double> g;
  Var x = g.input(random_mat<double>(rng, 3, 3));
  Var frozen = g.stopgrad(x);
  Var live = g.scale(x, 2.0);
  Var loss = g.sum_sq(g.sub(live, frozen), 1.0);

  g.backward(loss);
  Mat<double> analytic = g.grad(x);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      const double fd = fd_input(g, x, loss, r, c, 1e-6);
      // fd sees x only through the live branch: d/dx of (2x - x0)^2 = 2*2*(2x - x0)
      REQUIRE(rel_err(analytic(r, c), fd, 1e-6) < 1e-5);
    }

  // a loss reading only the frozen branch is numerically flat in x
  Var flat = g.sum_all(frozen);
  for (int r = 0; r < 3; ++r) {
    const double fd = fd_input(g, x, flat, r, 0, 1e-4);
    REQUIRE(fd == 0.0);
  }
}

TEST_CASE("reroute_grad implements the straight-through contract") {
  Rng rng = test_rng(16);
  Graph<double> g;
  Var seq = g.input(random_mat<double>(rng, 4, 3));
  Var codes = g.constant(random_mat<double>(rng, 4, 3));
  Var st = g.reroute_grad(codes, seq);
  REQUIRE(g.value(st) == g.value(codes));

  Var target = g.constant(random_mat<double>(rng, 4, 3));
  Var loss = g.sum_sq(g.sub(st, target), 0.25);
  g.backward(loss);
  Mat<double> at_seq = g.grad(seq);

  // oracle: gradient of the downstream loss with respect to its input,
  // computed by finite differences on a detached copy
  Graph<double> g2;
  Var q = g2.input(g.value(codes));
  Var loss2 = g2.sum_sq(g2.sub(q, g2.constant(g.value(target))), 0.25);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 3; ++c) {
      const double fd = fd_input(g2, q, loss2, r, c, 1e-6);
      REQUIRE(rel_err(at_seq(r, c), fd, 1e-6) < 1e-4);
    }
}

TEST_CASE("parameter leaves accumulate into the store across sweeps with freezing") {
  ParamStore<double> store;
  Mat<double> init(2, 2);
  init << 1, 2, 3, 4;
  const int pid_a = store.add("a", init);
  const int pid_b = store.add("b", init * 2);

  Graph<double> g(&store);
  Var a = g.param(pid_a);
  Var b = g.param(pid_b);
  Var loss1 = g.sum_sq(a, 1.0);
  Var loss2 = g.sum_sq(g.add(a, b), 1.0);

  g.backward(loss1);
  // d/da sum(a^2) = 2a
  REQUIRE(store.at(pid_a).grad(0, 0) == 2.0);
  REQUIRE(store.at(pid_b).grad.cwiseAbs().maxCoeff() == 0.0);

  g.backward(loss2, 1.0, {pid_a});
  // sweep 2 froze a: only b accumulates 2(a+b)
  REQUIRE(store.at(pid_a).grad(0, 0) == 2.0);
  REQUIRE(store.at(pid_b).grad(0, 0) == 2.0 * (1.0 + 2.0));

  g.backward(loss2);
  REQUIRE(store.at(pid_a).grad(0, 0) == 2.0 + 2.0 * 3.0);
  REQUIRE(store.at(pid_b).grad(0, 0) == 2.0 * (2.0 * 3.0));

  store.zero_grads();
  REQUIRE(store.at(pid_a).grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("param leaves refresh from the store on recompute") {
  ParamStore<double> store;
  const int pid = store.add("w", Mat<double>::Constant(1, 1, 3.0));
  Graph<double> g(&store);
  Var w = g.param(pid);
  Var loss = g.sum_sq(w, 1.0);
  REQUIRE(g.scalar(loss) == 9.0);
  const double fd = fd_param(g, store, pid, loss, 0, 0, 1e-6);
  REQUIRE(rel_err(fd, 6.0, 1e-6) < 1e-5);
}

TEST_CASE("sum_scalars applies weights in value and gradient") {
  Graph<double> g;
  Var a = g.input(Mat<double>::Constant(1, 1, 2.0));
  Var b = g.input(Mat<double>::Constant(1, 1, 5.0));
  Var s = g.sum_scalars({a, b}, {1.0, 0.5});
  REQUIRE(g.scalar(s) == 4.5);
  g.backward(s);
  REQUIRE(g.grad(a)(0, 0) == 1.0);
  REQUIRE(g.grad(b)(0, 0) == 0.5);
}
