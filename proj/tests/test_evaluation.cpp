#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "cbvila/ablation.hpp"
#include "cbvila/retrieval.hpp"
#include "test_util.hpp"

using namespace cbvila;
using testutil::random_mat;

namespace {

Rng test_rng(std::uint64_t salt) { return Rng(31, RngStream::test, {salt}); }

TrainConfig tiny_cfg() {
  TrainConfig cfg;
  cfg.d = 32;
  cfg.code_dim = 32;
  cfg.heads = 4;
  cfg.enc_layers = 1;
  cfg.fusion_layers = 1;
  cfg.codebook_size = 8;
  cfg.n_train = 8;
  cfg.n_eval = 4;
  cfg.batch_size = 4;
  cfg.epochs = 1;
  return cfg;
}

// independent ranking oracle: stable sort by (score desc, column asc)
double recall_oracle(const Mat<double>& scores, const std::vector<int>& truth, int k) {
  int hits = 0;
  for (int i = 0; i < scores.rows(); ++i) {
    std::vector<int> cols(static_cast<std::size_t>(scores.cols()));
    std::iota(cols.begin(), cols.end(), 0);
    std::stable_sort(cols.begin(), cols.end(), [&](int a, int b) {
      if (scores(i, a) != scores(i, b)) return scores(i, a) > scores(i, b);
      return a < b;
    });
    for (int r = 0; r < k; ++r)
      if (cols[static_cast<std::size_t>(r)] == truth[static_cast<std::size_t>(i)]) {
        ++hits;
        break;
      }
  }
  return static_cast<double>(hits) / static_cast<double>(scores.rows());
}

}  // namespace

TEST_CASE("recall_at_k basics") {
  SECTION("identity scores give perfect R@1") {
    Mat<double> scores = Mat<double>::Identity(6, 6);
    std::vector<int> truth = {0, 1, 2, 3, 4, 5};
    REQUIRE(recall_at_k(scores, truth, 1) == 1.0);
  }

  SECTION("true item at rank 2 everywhere: R@1 = 0, R@5 = 1") {
    const int n = 6;
    Mat<double> scores = Mat<double>::Zero(n, n);
    std::vector<int> truth(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      truth[static_cast<std::size_t>(i)] = i;
      scores(i, i) = 0.8;                 // true item
      scores(i, (i + 1) % n) = 0.9;       // one better distractor
    }
    REQUIRE(recall_at_k(scores, truth, 1) == 0.0);
    REQUIRE(recall_at_k(scores, truth, 2) == 1.0);
    REQUIRE(recall_at_k(scores, truth, 5) == 1.0);
  }

  SECTION("ties break toward the lower column index") {
    Mat<double> scores(1, 3);
    scores << 0.5, 0.5, 0.5;
    REQUIRE(recall_at_k(scores, {0}, 1) == 1.0);  // index 0 wins the three-way tie
    REQUIRE(recall_at_k(scores, {1}, 1) == 0.0);
    REQUIRE(recall_at_k(scores, {1}, 2) == 1.0);
  }

  SECTION("k out of range is a contract violation") {
    Mat<double> scores = Mat<double>::Zero(2, 2);
    REQUIRE_THROWS_AS(recall_at_k(scores, {0, 1}, 0), ContractError);
    REQUIRE_THROWS_AS(recall_at_k(scores, {0, 1}, 3), ContractError);
  }
}

TEST_CASE("recall_at_k matches a sort-based oracle on random 50x50 matrices") {
  Rng rng = test_rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    Mat<double> scores = random_mat<double>(rng, 50, 50);
    std::vector<int> truth(50);
    for (auto& t : truth) t = static_cast<int>(rng.uniform_int(50));
    for (int k : {1, 5, 10, 50})
      REQUIRE(recall_at_k(scores, truth, k) == recall_oracle(scores, truth, k));
  }
}

TEST_CASE("recall_at_k is monotone in k and reaches 1 at the gallery size") {
  Rng rng = test_rng(2);
  Mat<double> scores = random_mat<double>(rng, 20, 30);
  std::vector<int> truth(20);
  for (auto& t : truth) t = static_cast<int>(rng.uniform_int(30));
  double prev = 0.0;
  for (int k = 1; k <= 30; ++k) {
    const double r = recall_at_k(scores, truth, k);
    REQUIRE(r >= prev);
    prev = r;
  }
  REQUIRE(recall_at_k(scores, truth, 30) == 1.0);
}

TEST_CASE("permuting the gallery permutes ranks without changing recall") {
  Rng rng = test_rng(3);
  Mat<double> scores = random_mat<double>(rng, 12, 12);
  std::vector<int> truth(12);
  for (auto& t : truth) t = static_cast<int>(rng.uniform_int(12));
  auto perm = rng.sample_without_replacement(12, 12);
  Mat<double> permuted(12, 12);
  std::vector<int> new_truth(12);
  for (int j = 0; j < 12; ++j) permuted.col(perm[static_cast<std::size_t>(j)]) = scores.col(j);
  for (int i = 0; i < 12; ++i)
    new_truth[static_cast<std::size_t>(i)] = perm[static_cast<std::size_t>(truth[static_cast<std::size_t>(i)])];
  // ties are absent with probability one in random matrices, so recall is
  // permutation-consistent
  for (int k : {1, 3, 7})
    REQUIRE(recall_at_k(scores, truth, k) == recall_at_k(permuted, new_truth, k));
}

TEST_CASE("score_all_pairs yields probabilities, finiteness, and replay determinism") {
  TrainConfig cfg = tiny_cfg();
  auto data = generate_synthetic_dataset<double>(6, 9);
  CbVilaModel<double> model(cfg, data.vocab);

  Mat<double> s1 = score_all_pairs(model, data.images, data.captions);
  REQUIRE(s1.rows() == 6);
  REQUIRE(s1.cols() == 6);
  REQUIRE(s1.minCoeff() >= 0.0);
  REQUIRE(s1.maxCoeff() <= 1.0);
  REQUIRE(all_finite(s1));

  Mat<double> s2 = score_all_pairs(model, data.images, data.captions);
  REQUIRE(s1 == s2);
}

TEST_CASE("evaluate_retrieval and utilization on a random-init model stay sane") {
  TrainConfig cfg = tiny_cfg();
  auto data = generate_synthetic_dataset<double>(8, 10);
  CbVilaModel<double> model(cfg, data.vocab);
  auto rep = evaluate_retrieval(model, data);
  for (double v : {rep.tr_r1, rep.tr_r5, rep.tr_r10, rep.ir_r1, rep.ir_r5, rep.ir_r10}) {
    REQUIRE(v >= 0.0);
    REQUIRE(v <= 1.0);
  }
  REQUIRE(rep.tr_r5 >= rep.tr_r1);
  const double util = codebook_utilization(model, data);
  REQUIRE(util > 0.0);
  REQUIRE(util <= 1.0);
}

TEST_CASE("ablation row configs differ only in the objective gate") {
  TrainConfig base = tiny_cfg();
  auto rows = ablation_row_configs(base);
  REQUIRE(rows.size() == 3);
  REQUIRE(rows[0].first == "MLM+ITM");
  REQUIRE(rows[1].first == "MLM+ITM+Pixel");
  REQUIRE(rows[2].first == "MLM+ITM+Pixel+MIM");

  auto diff_keys = [](const TrainConfig& a, const TrainConfig& b) {
    std::istringstream at(config_to_text(a)), bt(config_to_text(b));
    std::string la, lb;
    std::vector<std::string> keys;
    while (std::getline(at, la) && std::getline(bt, lb))
      if (la != lb) keys.push_back(la.substr(0, la.find('=')));
    return keys;
  };
  for (const auto& [label, cfg] : rows)
    for (const std::string& key : diff_keys(cfg, rows[0].second))
      REQUIRE(key.rfind("objectives.", 0) == 0);

  REQUIRE(!rows[0].second.enable_pixel);
  REQUIRE(!rows[0].second.enable_mim);
  REQUIRE(rows[1].second.enable_pixel);
  REQUIRE(!rows[1].second.enable_mim);
  REQUIRE(rows[2].second.enable_pixel);
  REQUIRE(rows[2].second.enable_mim);
}

TEST_CASE("run_ablation emits the three-row six-column table") {
  TrainConfig base = tiny_cfg();
  base.epochs = 2;  // a few steps per row keep this test quick
  auto table = run_ablation<double>(base, {3, 4});
  REQUIRE(table.rows.size() == 3);
  for (const auto& row : table.rows) {
    REQUIRE(row.per_seed.size() == 2);
    for (const auto& cell : {row.tr_r1, row.tr_r5, row.tr_r10, row.ir_r1, row.ir_r5, row.ir_r10}) {
      REQUIRE(cell.mean >= 0.0);
      REQUIRE(cell.mean <= 1.0);
      REQUIRE(std::isfinite(cell.stddev));
    }
  }
  REQUIRE(table.to_text().find("MLM+ITM+Pixel+MIM") != std::string::npos);
  REQUIRE(!table.to_json().empty());
}
