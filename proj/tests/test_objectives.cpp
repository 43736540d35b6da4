#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "cbvila/losses.hpp"
#include "cbvila/masking.hpp"
#include "cbvila/tokenizer.hpp"
#include "test_util.hpp"

using namespace cbvila;
using testutil::random_mat;

namespace {

Rng test_rng(std::uint64_t salt) { return Rng(55, RngStream::test, {salt}); }

std::vector<int> ids_with_words(int words, int max_len) {
  std::vector<int> ids(static_cast<std::size_t>(max_len), Vocab::pad_id);
  ids[0] = Vocab::cls_id;
  for (int i = 1; i <= words; ++i) ids[static_cast<std::size_t>(i)] = 5 + (i % 3);
  ids[static_cast<std::size_t>(words + 1)] = Vocab::sep_id;
  return ids;
}

}  // namespace

TEST_CASE("mask_text selects exact counts") {
  Rng rng = test_rng(1);

  SECTION("20 maskable words mask exactly 3") {
    auto tm = mask_text(ids_with_words(20, 24), 0.15, rng);
    REQUIRE(tm.positions.size() == 3);
    REQUIRE(tm.labels.size() == 3);
    for (std::size_t k = 0; k < tm.positions.size(); ++k) {
      REQUIRE(tm.masked_ids[static_cast<std::size_t>(tm.positions[k])] == Vocab::mask_id);
      REQUIRE(tm.labels[k] == 5 + (tm.positions[k] % 3));
    }
  }

  SECTION("a single maskable word still masks one") {
    auto tm = mask_text(ids_with_words(1, 6), 0.15, rng);
    REQUIRE(tm.positions == std::vector<int>{1});
  }

  SECTION("no maskable tokens is an input error") {
    std::vector<int> empty = {Vocab::cls_id, Vocab::sep_id, 0, 0};
    REQUIRE_THROWS_AS(mask_text(empty, 0.15, rng), InputError);
  }
}

TEST_CASE("mask_text never selects special tokens over 10000 draws") {
  Rng rng = test_rng(2);
  auto ids = ids_with_words(5, 10);
  for (int t = 0; t < 10000; ++t) {
    auto tm = mask_text(ids, 0.15, rng);
    for (int pos : tm.positions) {
      REQUIRE(pos >= 1);
      REQUIRE(pos <= 5);
      REQUIRE(ids[static_cast<std::size_t>(pos)] >= 5);
    }
  }
}

TEST_CASE("mask_visual counts and distribution") {
  Rng rng = test_rng(3);

  SECTION("N=256 masks 192 leaving 64 visible") {
    auto masked = mask_visual(256, 0.75, rng);
    REQUIRE(masked.size() == 192);
    REQUIRE(complement_positions(masked, 256).size() == 64);
  }

  SECTION("N=16 masks 12") { REQUIRE(mask_visual(16, 0.75, rng).size() == 12); }

  SECTION("selection frequency per position is 0.75 within 3 sigma over 10000 draws") {
    const int draws = 10000;
    std::vector<int> counts(16, 0);
    for (int t = 0; t < draws; ++t)
      for (int p : mask_visual(16, 0.75, rng)) ++counts[static_cast<std::size_t>(p)];
    const double expect = draws * 0.75;
    const double sigma = std::sqrt(draws * 0.75 * 0.25);
    for (int p = 0; p < 16; ++p)
      REQUIRE(std::abs(counts[static_cast<std::size_t>(p)] - expect) <= 3.0 * sigma);
  }

  SECTION("no position masked twice") {
    auto masked = mask_visual(16, 0.75, rng);
    std::set<int> unique(masked.begin(), masked.end());
    REQUIRE(unique.size() == masked.size());
  }

  SECTION("fewer than 4 patches is a contract violation") {
    REQUIRE_THROWS_AS(mask_visual(3, 0.75, rng), ContractError);
  }
}

TEST_CASE("similarity_matrix geometry") {
  SECTION("identical embeddings on both sides give unit diagonal") {
    Rng rng = test_rng(4);
    Mat<double> cls = random_mat<double>(rng, 4, 8);
    Mat<double> proj = random_mat<double>(rng, 8, 32);
    Mat<double> sim = similarity_matrix(cls, cls, proj);
    for (int i = 0; i < 4; ++i) REQUIRE(sim(i, i) == Catch::Approx(1.0).margin(1e-9));
  }

  SECTION("orthogonal embeddings under an identity projection give zero off-diagonals") {
    Mat<double> img = Mat<double>::Zero(2, 32);
    Mat<double> txt = Mat<double>::Zero(2, 32);
    img(0, 0) = 1.0;
    img(1, 1) = 1.0;
    txt(0, 0) = 1.0;
    txt(1, 1) = 1.0;
    Mat<double> proj = Mat<double>::Identity(32, 32);
    Mat<double> sim = similarity_matrix(img, txt, proj);
    REQUIRE(sim(0, 1) == 0.0);
    REQUIRE(sim(1, 0) == 0.0);
    REQUIRE(sim(0, 0) == 1.0);
  }

  SECTION("entries stay in [-1, 1] over 1000 random batches") {
    Rng rng = test_rng(5);
    for (int t = 0; t < 1000; ++t) {
      Mat<double> img = random_mat<double>(rng, 3, 6, 4.0);
      Mat<double> txt = random_mat<double>(rng, 3, 6, 4.0);
      Mat<double> proj = random_mat<double>(rng, 6, 32);
      Mat<double> sim = similarity_matrix(img, txt, proj);
      REQUIRE(sim.minCoeff() >= -1.0);
      REQUIRE(sim.maxCoeff() <= 1.0);
    }
  }
}

TEST_CASE("sample_hard_negatives") {
  SECTION("B=2 always picks the only other item") {
    Rng rng = test_rng(6);
    Mat<double> sim(2, 2);
    sim << 1.0, 0.3, -0.2, 1.0;
    for (int t = 0; t < 50; ++t) {
      auto [nt, ni] = sample_hard_negatives(sim, rng);
      REQUIRE(nt == std::vector<int>{1, 0});
      REQUIRE(ni == std::vector<int>{1, 0});
    }
  }

  SECTION("self-pairing never occurs over 10000 draws") {
    Rng rng = test_rng(7);
    Mat<double> sim = random_mat<double>(rng, 5, 5);
    for (int t = 0; t < 10000; ++t) {
      auto [nt, ni] = sample_hard_negatives(sim, rng);
      for (int i = 0; i < 5; ++i) {
        REQUIRE(nt[static_cast<std::size_t>(i)] != i);
        REQUIRE(ni[static_cast<std::size_t>(i)] != i);
      }
    }
  }

  SECTION("frequencies follow the off-diagonal softmax within 3 sigma") {
    Rng rng = test_rng(8);
    Mat<double> sim(3, 3);
    sim << 1.0, 0.9, -0.4, 0.1, 1.0, 0.6, 0.2, -0.8, 1.0;
    const int draws = 10000;
    Mat<double> counts = Mat<double>::Zero(3, 3);
    for (int t = 0; t < draws; ++t) {
      auto [nt, ni] = sample_hard_negatives(sim, rng);
      for (int i = 0; i < 3; ++i) counts(i, nt[static_cast<std::size_t>(i)]) += 1.0;
    }
    for (int i = 0; i < 3; ++i) {
      double z = 0.0;
      for (int j = 0; j < 3; ++j)
        if (j != i) z += std::exp(sim(i, j));
      for (int j = 0; j < 3; ++j) {
        if (j == i) continue;
        const double p = std::exp(sim(i, j)) / z;
        const double sigma = std::sqrt(draws * p * (1.0 - p));
        REQUIRE(std::abs(counts(i, j) - draws * p) <= 3.0 * sigma);
      }
    }
  }

  SECTION("B=1 is a sampling error") {
    Rng rng = test_rng(9);
    Mat<double> sim = Mat<double>::Ones(1, 1);
    REQUIRE_THROWS_AS(sample_hard_negatives(sim, rng), SamplingError);
  }
}

TEST_CASE("itm_loss values") {
  SECTION("perfectly separated logits vanish") {
    Mat<double> pos(2, 2), neg(4, 2);
    pos << -20, 20, -20, 20;
    neg << 20, -20, 20, -20, 20, -20, 20, -20;
    REQUIRE(itm_loss(pos, neg) < 1e-8);
  }

  SECTION("all-zero logits give ln 2") {
    Mat<double> pos = Mat<double>::Zero(3, 2);
    Mat<double> neg = Mat<double>::Zero(6, 2);
    REQUIRE(itm_loss(pos, neg) == Catch::Approx(std::log(2.0)).epsilon(1e-12));
  }

  SECTION("matches a hand-rolled cross-entropy oracle") {
    Rng rng = test_rng(10);
    Mat<double> pos = random_mat<double>(rng, 3, 2, 2.0);
    Mat<double> neg = random_mat<double>(rng, 6, 2, 2.0);
    double oracle = 0.0;
    for (int r = 0; r < 3; ++r) {
      const double z = std::exp(pos(r, 0)) + std::exp(pos(r, 1));
      oracle += -std::log(std::exp(pos(r, 1)) / z);
    }
    for (int r = 0; r < 6; ++r) {
      const double z = std::exp(neg(r, 0)) + std::exp(neg(r, 1));
      oracle += -std::log(std::exp(neg(r, 0)) / z);
    }
    oracle /= 9.0;
    REQUIRE(std::abs(itm_loss(pos, neg) - oracle) < 1e-10);
  }
}

TEST_CASE("mlm_loss and mim_loss saturation and uniform values") {
  SECTION("one-hot-correct logits approach zero") {
    Mat<double> logits = Mat<double>::Zero(4, 50);
    std::vector<int> labels = {3, 10, 0, 49};
    for (int r = 0; r < 4; ++r) logits(r, labels[static_cast<std::size_t>(r)]) = 40.0;
    REQUIRE(mlm_loss(logits, labels) < 1e-8);
    REQUIRE(mim_loss(logits, labels) < 1e-8);
  }

  SECTION("uniform logits give ln(class count)") {
    Mat<double> logits100 = Mat<double>::Zero(5, 100);
    std::vector<int> labels = {0, 1, 2, 3, 4};
    REQUIRE(mlm_loss(logits100, labels) == Catch::Approx(std::log(100.0)).epsilon(1e-12));
    Mat<double> logits64 = Mat<double>::Constant(3, 64, 0.7);
    std::vector<int> t64 = {5, 40, 63};
    REQUIRE(mim_loss(logits64, t64) == Catch::Approx(std::log(64.0)).epsilon(1e-12));
  }
}

TEST_CASE("pixel_loss values") {
  Rng rng = test_rng(11);
  Mat<double> truth = random_mat<double>(rng, 4, 12);
  REQUIRE(pixel_loss(truth, truth) == 0.0);
  Mat<double> off = truth.array() + 0.1;
  REQUIRE(pixel_loss(off, truth) == Catch::Approx(0.01).epsilon(1e-9));
}

TEST_CASE("total_loss additivity and gating") {
  LossComponents<double> c;
  c.pixel = 1.0;
  c.mim = 2.0;
  c.itm = 3.0;
  c.mlm = 4.0;
  c.alignment = 0.5;
  c.commitment = 0.1;

  ObjectiveGate all;
  all.itm = all.mlm = all.mim = all.pixel = true;
  REQUIRE(total_loss(c, all) == Catch::Approx(10.6).epsilon(1e-15));

  ObjectiveGate warmup;
  warmup.itm = true;
  warmup.pixel = true;
  REQUIRE(total_loss(c, warmup) == Catch::Approx(3.0 + 1.0 + 0.5 + 0.1).epsilon(1e-15));

  LossWeights<double> w;
  w.mim = 0.5;
  REQUIRE(total_loss(c, all, w) == Catch::Approx(10.6 - 1.0).epsilon(1e-12));
}

TEST_CASE("gradient of a weighted sum equals the weighted component gradients") {
  Rng rng = test_rng(12);
  Graph<double> g;
  Var x = g.input(random_mat<double>(rng, 3, 3));
  Var a = g.sum_sq(x, 0.5);
  Var b = g.mean_all(g.gelu(x));
  Var total = g.sum_scalars({a, b}, {1.0, 1.0});

  g.backward(a);
  Mat<double> ga = g.grad(x);
  g.backward(b);
  Mat<double> gb = g.grad(x);
  g.backward(total);
  Mat<double> gt = g.grad(x);
  REQUIRE((gt - (ga + gb)).cwiseAbs().maxCoeff() < 1e-12);
}
