#include <catch2/catch_amalgamated.hpp>

#include "cbvila/model.hpp"
#include "cbvila/patches.hpp"
#include "test_util.hpp"

using namespace cbvila;
using testutil::fd_input;
using testutil::random_mat;
using testutil::rel_err;

namespace {

Rng test_rng(std::uint64_t salt) { return Rng(21, RngStream::test, {salt}); }

Vocab tiny_vocab() {
  return Vocab::from_words({"a", "red", "blue", "circle", "square", "above", "small", "large"});
}

TrainConfig tiny_cfg() {
  TrainConfig cfg;
  cfg.d = 32;
  cfg.code_dim = 32;
  cfg.heads = 4;
  cfg.enc_layers = 2;
  cfg.fusion_layers = 2;
  cfg.patch = 8;
  cfg.image_size = 32;
  cfg.max_text_len = 10;
  cfg.codebook_size = 16;
  return cfg;
}

}  // namespace

TEST_CASE("fused output matches the query shape in both directions") {
  auto cfg = tiny_cfg();
  CbVilaModel<double> model(cfg, tiny_vocab());
  Rng rng = test_rng(1);
  Graph<double> g(&model.store());

  Var text_seq = g.input(random_mat<double>(rng, cfg.max_text_len, cfg.d));
  Var vis_seq = g.input(random_mat<double>(rng, 17, cfg.d));
  std::vector<std::uint8_t> text_valid(static_cast<std::size_t>(cfg.max_text_len), 1);
  text_valid[8] = 0;
  text_valid[9] = 0;

  Var fused_t = model.fuse(g, text_seq, text_valid, vis_seq, {}, false);
  REQUIRE(g.value(fused_t).rows() == cfg.max_text_len);
  REQUIRE(g.value(fused_t).cols() == cfg.d);

  Var fused_v = model.fuse(g, vis_seq, {}, text_seq, text_valid, false);
  REQUIRE(g.value(fused_v).rows() == 17);
  REQUIRE(g.value(fused_v).cols() == cfg.d);
}

TEST_CASE("pad-masked kv content has zero influence, bitwise") {
  auto cfg = tiny_cfg();
  CbVilaModel<double> model(cfg, tiny_vocab());
  Rng rng = test_rng(2);
  Graph<double> g(&model.store());

  Var query = g.input(random_mat<double>(rng, 17, cfg.d));
  Var kv = g.input(random_mat<double>(rng, cfg.max_text_len, cfg.d));
  std::vector<std::uint8_t> kv_valid(static_cast<std::size_t>(cfg.max_text_len), 1);
  kv_valid[6] = 0;
  kv_valid[7] = 0;
  kv_valid[8] = 0;
  kv_valid[9] = 0;

  Var fused = model.fuse(g, query, {}, kv, kv_valid, false);
  Mat<double> before = g.value(fused);
  g.mutable_value(kv).row(7).setConstant(1e9);
  g.mutable_value(kv).row(9).setConstant(-42.0);
  g.recompute();
  REQUIRE(g.value(fused) == before);
}

TEST_CASE("gradients flow to both query and kv inputs and match finite differences") {
  auto cfg = tiny_cfg();
  cfg.fusion_layers = 1;
  CbVilaModel<double> model(cfg, tiny_vocab());
  Rng rng = test_rng(3);
  Graph<double> g(&model.store());

  Var query = g.input(random_mat<double>(rng, 5, cfg.d, 0.5));
  Var kv = g.input(random_mat<double>(rng, 6, cfg.d, 0.5));
  Var fused = model.fuse(g, query, {}, kv, {}, false);
  Var loss = g.sum_sq(fused, 0.01);

  g.backward(loss);
  Mat<double> gq = g.grad(query);
  Mat<double> gk = g.grad(kv);
  REQUIRE(gq.cwiseAbs().maxCoeff() > 0.0);
  REQUIRE(gk.cwiseAbs().maxCoeff() > 0.0);

  Rng probe = test_rng(4);
  for (int t = 0; t < 20; ++t) {
    const int r = static_cast<int>(probe.uniform_int(5));
    const int c = static_cast<int>(probe.uniform_int(static_cast<std::uint64_t>(cfg.d)));
    REQUIRE(rel_err(gq(r, c), fd_input(g, query, loss, r, c, 1e-5), 1e-6) < 1e-4);
    const int r2 = static_cast<int>(probe.uniform_int(6));
    REQUIRE(rel_err(gk(r2, c), fd_input(g, kv, loss, r2, c, 1e-5), 1e-6) < 1e-4);
  }
}

TEST_CASE("task heads meet their output contracts") {
  auto cfg = tiny_cfg();
  CbVilaModel<double> model(cfg, tiny_vocab());
  Rng rng = test_rng(5);
  Graph<double> g(&model.store());
  Var fused = g.input(random_mat<double>(rng, 17, cfg.d));

  SECTION("mim head emits (positions, K) logits") {
    Var logits = model.mim_logits(g, fused, {1, 4, 9}, false);
    REQUIRE(g.value(logits).rows() == 3);
    REQUIRE(g.value(logits).cols() == cfg.codebook_size);
  }

  SECTION("mlm head emits (positions, vocab) logits") {
    Var logits = model.mlm_logits(g, fused, {2, 3}, false);
    REQUIRE(g.value(logits).rows() == 2);
    REQUIRE(g.value(logits).cols() == model.vocab().size());
  }

  SECTION("pixel head output lies strictly inside (0,1)") {
    Var px = model.pixel_out(g, fused, {1, 2, 3, 4}, false);
    REQUIRE(g.value(px).rows() == 4);
    REQUIRE(g.value(px).cols() == model.patch_dim());
    REQUIRE(g.value(px).minCoeff() > 0.0);
    REQUIRE(g.value(px).maxCoeff() < 1.0);
  }

  SECTION("zero-initialized itm head gives (0,0) logits and probability one half") {
    model.store().at(model.itm_head_pid()).value.setZero();
    model.store().at(model.itm_bias_pid()).value.setZero();
    Graph<double> g2(&model.store());
    Var fused2 = g2.input(random_mat<double>(rng, 17, cfg.d, 2.0));
    Var logits = model.itm_logits(g2, fused2, false);
    REQUIRE(g2.value(logits)(0, 0) == 0.0);
    REQUIRE(g2.value(logits)(0, 1) == 0.0);
  }
}

TEST_CASE("fusion trunk parameters are shared across directions by storage identity") {
  auto cfg = tiny_cfg();
  CbVilaModel<double> model(cfg, tiny_vocab());
  const int before = model.store().size();
  Rng rng = test_rng(6);
  Graph<double> g(&model.store());
  Var a = g.input(random_mat<double>(rng, 4, cfg.d));
  Var b = g.input(random_mat<double>(rng, 6, cfg.d));
  Var f1 = model.fuse(g, a, {}, b, {}, true);
  const int nodes_after_first = g.node_count();
  Var f2 = model.fuse(g, b, {}, a, {}, true);
  REQUIRE(model.store().size() == before);  // no direction-specific copies appear

  // both directions touch the same parameter leaves: gradients from a joint
  // loss accumulate once per leaf, not per direction
  Var loss = g.sum_scalars({g.mean_all(f1), g.mean_all(f2)}, {1.0, 1.0});
  g.backward(loss);
  const int pid = model.store().find("fusion.layer0.cross.q.weight");
  REQUIRE(pid >= 0);
  REQUIRE(model.store().at(pid).grad.cwiseAbs().maxCoeff() > 0.0);
  REQUIRE(nodes_after_first < g.node_count());
}

TEST_CASE("fusion kv cache reproduces the uncached forward bitwise") {
  auto cfg = tiny_cfg();
  CbVilaModel<double> model(cfg, tiny_vocab());
  Rng rng = test_rng(7);
  Graph<double> g(&model.store());
  Var q1 = g.input(random_mat<double>(rng, 5, cfg.d));
  Var q2 = g.input(random_mat<double>(rng, 7, cfg.d));
  Var kv = g.input(random_mat<double>(rng, 6, cfg.d));

  auto cache = model.build_fusion_kv_cache(g, kv, false);
  Var with_cache1 = model.fuse(g, q1, {}, kv, {}, false, nullptr, &cache);
  Var with_cache2 = model.fuse(g, q2, {}, kv, {}, false, nullptr, &cache);
  Var plain1 = model.fuse(g, q1, {}, kv, {}, false);
  Var plain2 = model.fuse(g, q2, {}, kv, {}, false);
  REQUIRE(g.value(with_cache1) == g.value(plain1));
  REQUIRE(g.value(with_cache2) == g.value(plain2));
}

TEST_CASE("sim_project rows are unit length") {
  auto cfg = tiny_cfg();
  CbVilaModel<double> model(cfg, tiny_vocab());
  Rng rng = test_rng(8);
  Graph<double> g(&model.store());
  Var cls = g.input(random_mat<double>(rng, 6, cfg.d));
  Var z = model.sim_project(g, cls, false);
  REQUIRE(g.value(z).cols() == 32);
  for (int r = 0; r < 6; ++r) REQUIRE(g.value(z).row(r).norm() == Catch::Approx(1.0).margin(1e-9));
}
