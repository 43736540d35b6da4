#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "cbvila/retrieval.hpp"
#include "cbvila/trainer.hpp"

namespace cbvila {

struct AblationCell {
  double mean = 0.0;
  double stddev = 0.0;
};

struct AblationRow {
  std::string label;
  TrainConfig cfg;
  std::vector<RetrievalReport> per_seed;
  AblationCell tr_r1, tr_r5, tr_r10, ir_r1, ir_r5, ir_r10;
};

struct AblationTable {
  std::vector<AblationRow> rows;

  std::string to_text() const {
    std::ostringstream out;
    out << "objective set          | TR R@1  TR R@5  TR R@10 | IR R@1  IR R@5  IR R@10 (mean +/- std over seeds)\n";
    for (const auto& r : rows) {
      char buf[256];
      std::snprintf(buf, sizeof(buf),
                    "%-22s | %.3f+/-%.3f %.3f+/-%.3f %.3f+/-%.3f | %.3f+/-%.3f %.3f+/-%.3f %.3f+/-%.3f\n",
                    r.label.c_str(), r.tr_r1.mean, r.tr_r1.stddev, r.tr_r5.mean, r.tr_r5.stddev,
                    r.tr_r10.mean, r.tr_r10.stddev, r.ir_r1.mean, r.ir_r1.stddev, r.ir_r5.mean,
                    r.ir_r5.stddev, r.ir_r10.mean, r.ir_r10.stddev);
      out << buf;
    }
    return out.str();
  }

  std::string to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& r : rows) {
      nlohmann::json row;
      row["label"] = r.label;
      auto cell = [](const AblationCell& c) {
        return nlohmann::json{{"mean", c.mean}, {"stddev", c.stddev}};
      };
      row["tr_r1"] = cell(r.tr_r1);
      row["tr_r5"] = cell(r.tr_r5);
      row["tr_r10"] = cell(r.tr_r10);
      row["ir_r1"] = cell(r.ir_r1);
      row["ir_r5"] = cell(r.ir_r5);
      row["ir_r10"] = cell(r.ir_r10);
      nlohmann::json seeds = nlohmann::json::array();
      for (const auto& rep : r.per_seed)
        seeds.push_back({{"tr_r1", rep.tr_r1},
                         {"tr_r5", rep.tr_r5},
                         {"tr_r10", rep.tr_r10},
                         {"ir_r1", rep.ir_r1},
                         {"ir_r5", rep.ir_r5},
                         {"ir_r10", rep.ir_r10}});
      row["per_seed"] = seeds;
      j.push_back(row);
    }
    return j.dump(2);
  }
};

namespace detail {

inline AblationCell summarize(const std::vector<double>& values) {
  AblationCell c;
  for (double v : values) c.mean += v;
  c.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - c.mean) * (v - c.mean);
    c.stddev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return c;
}

}  // namespace detail

/// The three objective subsets of the paper's ablation protocol. The rows
/// differ only in the objective gate flags.
inline std::vector<std::pair<std::string, TrainConfig>> ablation_row_configs(
    const TrainConfig& base) {
  TrainConfig r1 = base;
  r1.enable_itm = true;
  r1.enable_mlm = true;
  r1.enable_pixel = false;
  r1.enable_mim = false;
  TrainConfig r2 = r1;
  r2.enable_pixel = true;
  TrainConfig r3 = r2;
  r3.enable_mim = true;
  return {{"MLM+ITM", r1}, {"MLM+ITM+Pixel", r2}, {"MLM+ITM+Pixel+MIM", r3}};
}

/// Trains every objective subset on identical data and seeds, evaluates
/// zero-shot retrieval on the held-out split, and reports mean +/- stddev
/// per row.
template <typename S>
AblationTable run_ablation(const TrainConfig& base_cfg, const std::vector<std::uint64_t>& seeds,
                           std::ostream* progress = nullptr) {
  require_config(!seeds.empty(), "run_ablation: needs at least one seed");
  auto train_data = generate_synthetic_dataset<S>(base_cfg.n_train, base_cfg.data_seed);
  auto eval_data = generate_synthetic_dataset<S>(base_cfg.n_eval, base_cfg.data_seed, 32,
                                                 /*index_offset=*/base_cfg.n_train);
  AblationTable table;
  for (auto& [label, row_cfg] : ablation_row_configs(base_cfg)) {
    AblationRow row;
    row.label = label;
    row.cfg = row_cfg;
    std::vector<double> tr1, tr5, tr10, ir1, ir5, ir10;
    for (std::uint64_t seed : seeds) {
      TrainConfig cfg = row_cfg;
      cfg.seed = seed;
      CbVilaModel<S> model(cfg, train_data.vocab);
      Trainer<S> trainer(model, train_data);
      trainer.run(0, nullptr, "");
      RetrievalReport rep = evaluate_retrieval(model, eval_data);
      row.per_seed.push_back(rep);
      tr1.push_back(rep.tr_r1);
      tr5.push_back(rep.tr_r5);
      tr10.push_back(rep.tr_r10);
      ir1.push_back(rep.ir_r1);
      ir5.push_back(rep.ir_r5);
      ir10.push_back(rep.ir_r10);
      if (progress != nullptr)
        (*progress) << label << " seed " << seed << ": TR R@1 " << rep.tr_r1 << ", IR R@1 "
                    << rep.ir_r1 << "\n"
                    << std::flush;
    }
    row.tr_r1 = detail::summarize(tr1);
    row.tr_r5 = detail::summarize(tr5);
    row.tr_r10 = detail::summarize(tr10);
    row.ir_r1 = detail::summarize(ir1);
    row.ir_r5 = detail::summarize(ir5);
    row.ir_r10 = detail::summarize(ir10);
    table.rows.push_back(std::move(row));
  }
  return table;
}

}  // namespace cbvila
