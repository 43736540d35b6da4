// Minimal tour of the codebook machinery: quantize a toy sequence, inspect
// the VQ losses, then run a handful of training steps on synthetic data.

#include <cstdio>

#include "cbvila/cbvila.hpp"

using namespace cbvila;

int main() {
  Rng rng(7);
  auto cb = Codebook<double>::init(8, 4, rng);
  Mat<double> seq(3, 4);
  seq << 0.1, -0.2, 0.05, 0.0, 0.5, 0.4, -0.3, 0.2, -0.1, 0.0, 0.1, -0.05;

  auto hard = quantize_sequence<double>(seq, cb, QuantizeMode::hard, 1.0, rng);
  std::printf("hard indices:");
  for (int idx : hard.indices) std::printf(" %d", idx);
  std::printf("\n");

  auto soft = quantize_sequence<double>(seq, cb, QuantizeMode::gumbel, 0.5, rng, true);
  std::printf("gumbel indices:");
  for (int idx : soft.indices) std::printf(" %d", idx);
  std::printf("\n");

  auto [alignment, commitment] = vq_losses(seq, hard, 0.25);
  std::printf("alignment %.4f, commitment %.4f\n", alignment, commitment);

  // a short training run on synthetic shape-caption pairs
  TrainConfig cfg;
  cfg.d = 32;
  cfg.code_dim = 32;
  cfg.enc_layers = 1;
  cfg.fusion_layers = 1;
  cfg.codebook_size = 16;
  cfg.n_train = 16;
  cfg.n_eval = 4;
  cfg.batch_size = 4;
  cfg.epochs = 5;
  cfg.warmup_iters = 5;
  cfg.peak_lr = 1e-3;
  auto data = generate_synthetic_dataset<float>(cfg.n_train, cfg.data_seed);
  CbVilaModel<float> model(cfg, data.vocab);
  Trainer<float> trainer(model, data);
  for (long step = 0; step < cfg.total_steps(); ++step) {
    auto m = trainer.train_step({0, 1, 2, 3}, step);
    if (step % 5 == 0)
      std::printf("step %ld  total %.4f  itm %.4f  pixel %.4f  align %.4f\n", m.step, m.total,
                  m.itm, m.pixel, m.alignment);
  }
  return 0;
}
