#pragma once

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "cbvila/checkpoint.hpp"
#include "cbvila/codebook.hpp"
#include "cbvila/dataset.hpp"
#include "cbvila/losses.hpp"
#include "cbvila/masking.hpp"
#include "cbvila/model.hpp"
#include "cbvila/optimizer.hpp"
#include "cbvila/patches.hpp"
#include "cbvila/schedule.hpp"

namespace cbvila {

struct StepMetrics {
  long step = 0;
  double lr = 0.0;
  double gumbel_tau = 0.0;
  double itm = 0.0;
  double mlm = 0.0;
  double mim = 0.0;
  double pixel = 0.0;
  double alignment = 0.0;
  double commitment = 0.0;
  double infonce = 0.0;
  double total = 0.0;
  double codebook_utilization = 0.0;
};

inline std::string metrics_to_json(const StepMetrics& m) {
  nlohmann::json j;
  j["step"] = m.step;
  j["lr"] = m.lr;
  j["gumbel_tau"] = m.gumbel_tau;
  j["itm"] = m.itm;
  j["mlm"] = m.mlm;
  j["mim"] = m.mim;
  j["pixel"] = m.pixel;
  j["alignment"] = m.alignment;
  j["commitment"] = m.commitment;
  j["infonce"] = m.infonce;
  j["total"] = m.total;
  j["codebook_utilization"] = m.codebook_utilization;
  return j.dump();
}

/// Single-threaded training driver. One optimizer step per batch; the
/// stop-gradients of the codebook objective realize the paper's alternating
/// optimization, and the MIM term runs as a separate backward sweep with the
/// codebook frozen. All randomness derives from (seed, purpose, step, slot),
/// so runs replay exactly, including after a resume.
template <typename S>
class Trainer {
 public:
  Trainer(CbVilaModel<S>& model, Dataset<S> train_data)
      : model_(model), cfg_(model.config()), data_(std::move(train_data)) {
    require_config(cfg_.batch_size >= 2, "training needs batch_size >= 2 for hard negatives");
    require_input(data_.size() >= 2, "training needs at least 2 pairs");
    opt_.beta1 = cfg_.adam_beta1;
    opt_.beta2 = cfg_.adam_beta2;
    opt_.eps = cfg_.adam_eps;
    opt_.weight_decay = cfg_.weight_decay;
    const int n = data_.size();
    patch_rows_.reserve(static_cast<std::size_t>(n));
    token_ids_.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      patch_rows_.push_back(patchify(data_.images[static_cast<std::size_t>(i)], cfg_.patch).patches);
      token_ids_.push_back(
          tokenize(data_.captions[static_cast<std::size_t>(i)], model_.vocab(), cfg_.max_text_len));
    }
    usage_.assign(static_cast<std::size_t>(cfg_.codebook_size), 0);
  }

  const TrainConfig& config() const { return cfg_; }

  /// One AdamW update over a batch of dataset indices. With
  /// apply_update = false the accumulated gradients stay in the store for
  /// inspection and no parameter changes.
  StepMetrics train_step(const std::vector<int>& batch, long step, bool apply_update = true) {
    const int b = static_cast<int>(batch.size());
    require_contract(b >= 2, "train_step: batch must hold at least 2 items");
    const ScheduleState sched = schedule_at(step, cfg_);
    const ObjectiveGate gate = sched.active;
    const int n_patches = model_.num_patches();
    const int d = cfg_.d;
    const QuantizeMode mode =
        cfg_.quantize_mode == "hard" ? QuantizeMode::hard : QuantizeMode::gumbel;

    // ---- phase 1 (no grad): unimodal encodings for hard-negative sampling,
    //      MIM targets, similarity features, donor pool ----
    Mat<S> img_cls(b, d), txt_cls(b, d);
    std::vector<Mat<S>> full_tokens(static_cast<std::size_t>(b));
    std::vector<std::vector<int>> target_indices(static_cast<std::size_t>(b));
    {
      Graph<S> pre(&model_.store());
      const Codebook<S> cb = model_.codebook_snapshot();
      Rng unused(0);
      for (int slot = 0; slot < b; ++slot) {
        const int i = batch[static_cast<std::size_t>(slot)];
        auto vis = model_.visual_encode(pre, patch_rows_[static_cast<std::size_t>(i)], {}, false);
        auto txt = model_.text_encode(pre, token_ids_[static_cast<std::size_t>(i)], false);
        const Mat<S>& vseq = pre.value(vis.seq);
        img_cls.row(slot) = vseq.row(0);
        txt_cls.row(slot) = pre.value(txt.seq).row(0);
        full_tokens[static_cast<std::size_t>(slot)] = vseq.middleRows(1, n_patches);
        auto q = quantize_sequence<S>(full_tokens[static_cast<std::size_t>(slot)], cb,
                                      QuantizeMode::hard, S(1), unused);
        target_indices[static_cast<std::size_t>(slot)] = q.indices;
        for (int idx : q.indices) ++usage_[static_cast<std::size_t>(idx)];
      }
    }
    donor_pool_.resize(b * n_patches, d);
    for (int slot = 0; slot < b; ++slot)
      donor_pool_.middleRows(slot * n_patches, n_patches) = full_tokens[static_cast<std::size_t>(slot)];

    std::vector<int> neg_text, neg_image;
    if (gate.itm) {
      Mat<S> sim =
          similarity_matrix(img_cls, txt_cls, model_.store().at(model_.sim_proj_pid()).value);
      Rng neg_rng(cfg_.seed, RngStream::negatives, {static_cast<std::uint64_t>(step)});
      std::tie(neg_text, neg_image) = sample_hard_negatives(sim, neg_rng);
    }

    Mat<S> z_img_all, z_txt_all;
    if (cfg_.infonce_enable) {
      const Mat<S>& proj = model_.store().at(model_.sim_proj_pid()).value;
      z_img_all = img_cls * proj;
      z_txt_all = txt_cls * proj;
      for (int r = 0; r < b; ++r) {
        z_img_all.row(r) /= std::max(z_img_all.row(r).norm(), S(1e-12));
        z_txt_all.row(r) /= std::max(z_txt_all.row(r).norm(), S(1e-12));
      }
    }

    // ---- phase 2: per-item gradient graphs, two backward sweeps ----
    StepMetrics m;
    m.step = step;
    m.lr = sched.current_lr;
    m.gumbel_tau = sched.gumbel_temperature;
    model_.store().zero_grads();
    const S inv_b = S(1) / static_cast<S>(b);

    for (int slot = 0; slot < b; ++slot) {
      const int i = batch[static_cast<std::size_t>(slot)];
      const std::uint64_t ustep = static_cast<std::uint64_t>(step);
      const std::uint64_t uslot = static_cast<std::uint64_t>(slot);
      Graph<S> g(&model_.store());

      auto txt_full = model_.text_encode(g, token_ids_[static_cast<std::size_t>(i)], true);
      auto vis_full = model_.visual_encode(g, patch_rows_[static_cast<std::size_t>(i)], {}, true);
      auto kv_vis = model_.build_fusion_kv_cache(g, vis_full.seq, true);

      std::vector<Var> sweep_a;
      std::vector<S> weights_a;

      if (gate.itm) {
        const int j = batch[static_cast<std::size_t>(neg_text[static_cast<std::size_t>(slot)])];
        const int k = batch[static_cast<std::size_t>(neg_image[static_cast<std::size_t>(slot)])];
        auto txt_neg = model_.text_encode(g, token_ids_[static_cast<std::size_t>(j)], true);
        auto vis_neg = model_.visual_encode(g, patch_rows_[static_cast<std::size_t>(k)], {}, true);
        auto kv_neg = model_.build_fusion_kv_cache(g, vis_neg.seq, true);
        Var fused_pos =
            model_.fuse(g, txt_full.seq, txt_full.valid, vis_full.seq, {}, true, nullptr, &kv_vis);
        Var fused_neg1 =
            model_.fuse(g, txt_neg.seq, txt_neg.valid, vis_full.seq, {}, true, nullptr, &kv_vis);
        Var fused_neg2 =
            model_.fuse(g, txt_full.seq, txt_full.valid, vis_neg.seq, {}, true, nullptr, &kv_neg);
        Var logits = g.concat_rows({model_.itm_logits(g, fused_pos, true),
                                    model_.itm_logits(g, fused_neg1, true),
                                    model_.itm_logits(g, fused_neg2, true)});
        Var itm = g.cross_entropy_rows(logits, {1, 0, 0});
        m.itm += static_cast<double>(g.scalar(itm));
        sweep_a.push_back(itm);
        weights_a.push_back(static_cast<S>(cfg_.w_itm) * inv_b);
      }

      if (gate.mlm) {
        Rng trng(cfg_.seed, RngStream::text_mask, {ustep, uslot});
        TextMask tm = mask_text(token_ids_[static_cast<std::size_t>(i)], cfg_.text_mask_ratio, trng);
        auto txt_masked = model_.text_encode(g, tm.masked_ids, true);
        Var fused =
            model_.fuse(g, txt_masked.seq, txt_masked.valid, vis_full.seq, {}, true, nullptr, &kv_vis);
        Var logits = model_.mlm_logits(g, fused, tm.positions, true);
        Var mlm = g.cross_entropy_rows(logits, tm.labels);
        m.mlm += static_cast<double>(g.scalar(mlm));
        sweep_a.push_back(mlm);
        weights_a.push_back(static_cast<S>(cfg_.w_mlm) * inv_b);
      }

      Var mim_var{};
      bool has_mim = false;
      if (gate.pixel || gate.mim) {
        Rng vrng(cfg_.seed, RngStream::visual_mask, {ustep, uslot});
        const std::vector<int> masked = mask_visual(n_patches, cfg_.visual_mask_ratio, vrng);
        const std::vector<int> visible = complement_positions(masked, n_patches);
        auto vis_masked = model_.visual_encode(g, patch_rows_[static_cast<std::size_t>(i)], masked, true);
        Var tokens = g.slice_rows(vis_masked.seq, 1, n_patches);
        Var visible_tokens = g.gather_rows(tokens, visible);

        Rng grng(cfg_.seed, RngStream::gumbel, {ustep, uslot});
        Rng* noise = (mode == QuantizeMode::gumbel && cfg_.gumbel_noise) ? &grng : nullptr;
        Var cb_node = g.param(model_.codebook_pid(), true);
        auto q = quantize_for_training(g, visible_tokens, cb_node, mode,
                                       static_cast<S>(sched.gumbel_temperature), noise);

        if (gate.pixel) {
          auto vq = vq_loss_vars(g, visible_tokens, q, static_cast<S>(cfg_.beta));
          m.alignment += static_cast<double>(g.scalar(vq.alignment));
          m.commitment += static_cast<double>(g.scalar(vq.commitment));
          sweep_a.push_back(vq.alignment);
          weights_a.push_back(static_cast<S>(cfg_.w_align) * inv_b);
          sweep_a.push_back(vq.commitment);
          weights_a.push_back(static_cast<S>(cfg_.w_commit) * inv_b);
        }

        Var mixed = g.scatter_rows(tokens, q.quantized, visible);
        Var query = g.concat_rows({g.slice_rows(vis_masked.seq, 0, 1), mixed});
        Var fused_v = model_.fuse(g, query, {}, txt_full.seq, txt_full.valid, true);
        std::vector<int> fused_rows;
        fused_rows.reserve(masked.size());
        for (int p : masked) fused_rows.push_back(1 + p);

        if (gate.pixel) {
          Var pred = model_.pixel_out(g, fused_v, fused_rows, true);
          Mat<S> truth(static_cast<int>(masked.size()), model_.patch_dim());
          for (std::size_t r = 0; r < masked.size(); ++r)
            truth.row(static_cast<int>(r)) =
                patch_rows_[static_cast<std::size_t>(i)].row(masked[r]);
          Var pix = g.sum_sq(g.sub(pred, g.constant(std::move(truth))),
                             S(1) / static_cast<S>(static_cast<long>(masked.size()) * model_.patch_dim()));
          m.pixel += static_cast<double>(g.scalar(pix));
          sweep_a.push_back(pix);
          weights_a.push_back(static_cast<S>(cfg_.w_pixel) * inv_b);
        }

        if (gate.mim) {
          std::vector<int> targets;
          targets.reserve(masked.size());
          for (int p : masked)
            targets.push_back(target_indices[static_cast<std::size_t>(slot)][static_cast<std::size_t>(p)]);
          Var logits = model_.mim_logits(g, fused_v, fused_rows, true);
          mim_var = g.cross_entropy_rows(logits, targets);
          has_mim = true;
          m.mim += static_cast<double>(g.scalar(mim_var));
        }
      }

      if (cfg_.infonce_enable) {
        Var zi = model_.sim_project(g, g.row(vis_full.seq, 0), true);
        Var zt = model_.sim_project(g, g.row(txt_full.seq, 0), true);
        const S inv_tau = S(1) / static_cast<S>(cfg_.infonce_tau);
        Var li = g.scale(g.matmul_nt(zi, g.constant(z_txt_all)), inv_tau);
        Var lt = g.scale(g.matmul_nt(zt, g.constant(z_img_all)), inv_tau);
        Var nce = g.sum_scalars(
            {g.cross_entropy_rows(li, {slot}), g.cross_entropy_rows(lt, {slot})}, {S(0.5), S(0.5)});
        m.infonce += static_cast<double>(g.scalar(nce));
        sweep_a.push_back(nce);
        weights_a.push_back(static_cast<S>(cfg_.infonce_weight) * inv_b);
      }

      if (!sweep_a.empty()) g.backward(g.sum_scalars(sweep_a, weights_a));
      // MIM sweep: encoders update, the codebook is frozen for this term
      if (has_mim)
        g.backward(mim_var, static_cast<S>(cfg_.w_mim) * inv_b, {model_.codebook_pid()});
    }

    const double inv = 1.0 / static_cast<double>(b);
    m.itm *= inv;
    m.mlm *= inv;
    m.mim *= inv;
    m.pixel *= inv;
    m.alignment *= inv;
    m.commitment *= inv;
    m.infonce *= inv;
    LossComponents<double> comps;
    comps.pixel = m.pixel;
    comps.alignment = m.alignment;
    comps.commitment = m.commitment;
    comps.mim = m.mim;
    comps.itm = m.itm;
    comps.mlm = m.mlm;
    LossWeights<double> w;
    w.pixel = cfg_.w_pixel;
    w.alignment = cfg_.w_align;
    w.commitment = cfg_.w_commit;
    w.mim = cfg_.w_mim;
    w.itm = cfg_.w_itm;
    w.mlm = cfg_.w_mlm;
    m.total = total_loss(comps, gate, w) + (cfg_.infonce_enable ? cfg_.infonce_weight * m.infonce : 0.0);

    if (!std::isfinite(m.total) || !std::isfinite(m.itm) || !std::isfinite(m.mlm) ||
        !std::isfinite(m.mim) || !std::isfinite(m.pixel) || !std::isfinite(m.alignment) ||
        !std::isfinite(m.commitment)) {
      throw NumericalError("train_step " + std::to_string(step) +
                           ": non-finite loss; components itm=" + std::to_string(m.itm) +
                           " mlm=" + std::to_string(m.mlm) + " mim=" + std::to_string(m.mim) +
                           " pixel=" + std::to_string(m.pixel) +
                           " alignment=" + std::to_string(m.alignment) +
                           " commitment=" + std::to_string(m.commitment));
    }

    if (apply_update) {
      opt_.step(model_.store(), sched.current_lr, step + 1);
      model_.store().zero_grads();
    }

    int used = 0;
    for (int c : usage_)
      if (c > 0) ++used;
    m.codebook_utilization = static_cast<double>(used) / static_cast<double>(cfg_.codebook_size);
    return m;
  }

  /// Dead-code maintenance at an epoch boundary: codewords never used this
  /// epoch restart at an encoder output from the most recent batch. AdamW
  /// moments of refreshed rows reset so stale statistics do not drag them.
  void epoch_end(long epoch) {
    if (cfg_.deadcode_enable && donor_pool_.rows() > 0) {
      const Codebook<S> cb = model_.codebook_snapshot();
      std::vector<int> dead;
      for (int k = 0; k < cb.size(); ++k)
        if (usage_[static_cast<std::size_t>(k)] < cfg_.deadcode_threshold) dead.push_back(k);
      if (!dead.empty()) {
        Rng rng(cfg_.seed, RngStream::dead_codes, {static_cast<std::uint64_t>(epoch)});
        Codebook<S> refreshed = refresh_dead_codes(cb, usage_, cfg_.deadcode_threshold, donor_pool_,
                                                   rng, static_cast<S>(cfg_.deadcode_noise));
        auto& param = model_.store().at(model_.codebook_pid());
        param.value = refreshed.vectors;
        for (int k : dead) {
          param.m.row(k).setZero();
          param.v.row(k).setZero();
        }
      }
    }
    usage_.assign(static_cast<std::size_t>(cfg_.codebook_size), 0);
  }

  /// Full training loop from `start_step` (0, or a resumed checkpoint's
  /// step). Writes one metrics record per step and periodic checkpoints.
  long run(long start_step = 0, std::ostream* metrics_stream = nullptr,
           const std::string& checkpoint_dir = "") {
    const long total = cfg_.total_steps();
    const int spe = cfg_.steps_per_epoch();
    const int b = cfg_.batch_size;
    for (long step = start_step; step < total; ++step) {
      const long epoch = step / spe;
      const int pos = static_cast<int>(step % spe);
      Rng shuffle_rng(cfg_.seed, RngStream::shuffle, {static_cast<std::uint64_t>(epoch)});
      auto order = shuffle_rng.sample_without_replacement(data_.size(), data_.size());
      std::vector<int> batch(static_cast<std::size_t>(b));
      for (int s = 0; s < b; ++s)
        batch[static_cast<std::size_t>(s)] = order[static_cast<std::size_t>((pos * b + s) % data_.size())];
      StepMetrics m = train_step(batch, step);
      if (metrics_stream != nullptr) (*metrics_stream) << metrics_to_json(m) << "\n";
      if (pos == spe - 1) epoch_end(epoch);
      if (!checkpoint_dir.empty() && (step + 1) % cfg_.checkpoint_every == 0 && step + 1 < total)
        save(checkpoint_dir + "/ckpt_step" + std::to_string(step + 1) + ".bin", step + 1);
    }
    if (!checkpoint_dir.empty()) save(checkpoint_dir + "/ckpt_final.bin", total);
    return total;
  }

  /// Checkpoint including trainer maintenance state, so a resumed run
  /// replays exactly.
  void save(const std::string& path, long step) const {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::vector<std::pair<std::string, Mat<S>>> extras;
    Mat<S> usage(cfg_.codebook_size, 1);
    for (int k = 0; k < cfg_.codebook_size; ++k)
      usage(k, 0) = static_cast<S>(usage_[static_cast<std::size_t>(k)]);
    extras.emplace_back("state.codebook_usage", std::move(usage));
    if (donor_pool_.rows() > 0) extras.emplace_back("state.donor_pool", donor_pool_);
    save_checkpoint_with_state(path, model_.store(), cfg_, model_.vocab(), step, extras);
  }

  void restore_state(const CheckpointData<S>& data) {
    for (const auto& [name, tensor] : data.tensors) {
      if (name == "state.codebook_usage") {
        require_input(tensor.rows() == cfg_.codebook_size, "restore_state: usage length");
        for (int k = 0; k < cfg_.codebook_size; ++k)
          usage_[static_cast<std::size_t>(k)] = static_cast<int>(tensor(k, 0));
      } else if (name == "state.donor_pool") {
        donor_pool_ = tensor;
      }
    }
  }

 private:
  CbVilaModel<S>& model_;
  TrainConfig cfg_;
  Dataset<S> data_;
  AdamW<S> opt_;
  std::vector<Mat<S>> patch_rows_;
  std::vector<std::vector<int>> token_ids_;
  std::vector<int> usage_;
  Mat<S> donor_pool_;
};

}  // namespace cbvila
