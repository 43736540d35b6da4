// Command-line front end: pretraining, data generation, retrieval
// evaluation, the ablation harness, and the three figure pipelines.
//
// Exit codes: 0 success, 1 input error, 2 config error, 3 runtime/numerical
// error.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cbvila/cbvila.hpp"

namespace fs = std::filesystem;
using Scalar = float;

namespace {

std::vector<int> parse_csv_ints(const std::string& csv) {
  std::vector<int> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw cbvila::InputError("invalid integer in list: " + item);
    }
  }
  if (out.empty()) throw cbvila::InputError("empty integer list");
  return out;
}

cbvila::Dataset<Scalar> dataset_for_training(const cbvila::TrainConfig& cfg) {
  if (!cfg.data_dir.empty()) {
    auto ds = cbvila::load_dataset<Scalar>((fs::path(cfg.data_dir) / "train").string());
    return ds;
  }
  return cbvila::generate_synthetic_dataset<Scalar>(cfg.n_train, cfg.data_seed);
}

int cmd_pretrain(const std::string& config_path, const std::string& resume_path) {
  cbvila::TrainConfig cfg = cbvila::load_train_config(config_path);
  auto data = dataset_for_training(cfg);
  fs::create_directories(cfg.out_dir);

  long start_step = 0;
  std::unique_ptr<cbvila::CbVilaModel<Scalar>> model;
  std::unique_ptr<cbvila::Trainer<Scalar>> trainer;
  if (!resume_path.empty()) {
    auto ckpt = cbvila::load_checkpoint<Scalar>(resume_path);
    if (cbvila::config_to_text(ckpt.cfg) != cbvila::config_to_text(cfg))
      throw cbvila::ConfigError("resume checkpoint was trained with a different config");
    auto loaded = cbvila::load_model_checkpoint<Scalar>(resume_path);
    start_step = loaded.global_step;
    model = std::make_unique<cbvila::CbVilaModel<Scalar>>(std::move(loaded.model));
    trainer = std::make_unique<cbvila::Trainer<Scalar>>(*model, data);
    trainer->restore_state(ckpt);
  } else {
    model = std::make_unique<cbvila::CbVilaModel<Scalar>>(cfg, data.vocab);
    trainer = std::make_unique<cbvila::Trainer<Scalar>>(*model, data);
  }

  const auto metrics_path = fs::path(cfg.out_dir) / "metrics.jsonl";
  std::ofstream metrics(metrics_path, resume_path.empty() ? std::ios::trunc : std::ios::app);
  if (!metrics) throw cbvila::InputError("cannot write " + metrics_path.string());

  std::cout << "training " << cfg.total_steps() << " steps (" << cfg.epochs << " epochs x "
            << cfg.steps_per_epoch() << " steps), " << data.size() << " pairs, starting at step "
            << start_step << "\n";
  const long final_step = trainer->run(start_step, &metrics, cfg.out_dir);
  std::cout << "done at step " << final_step << "; final checkpoint " << cfg.out_dir
            << "/ckpt_final.bin\n";
  return 0;
}

int cmd_gen_data(const std::string& out_dir, int n, std::uint64_t seed) {
  auto ds = cbvila::generate_synthetic_dataset<Scalar>(n, seed);
  cbvila::save_dataset(out_dir, ds);
  std::cout << "wrote " << n << " pairs to " << out_dir << "\n";
  return 0;
}

int cmd_eval_retrieval(const std::string& ckpt_path, const std::string& data_dir,
                       const std::string& split, const std::string& out_path) {
  auto loaded = cbvila::load_model_checkpoint<Scalar>(ckpt_path);
  const fs::path root = split == "." ? fs::path(data_dir) : fs::path(data_dir) / split;
  auto ds = cbvila::load_dataset<Scalar>(root.string());

  cbvila::Mat<Scalar> scores;
  auto rep = cbvila::evaluate_retrieval(loaded.model, ds, &scores);
  const double util = cbvila::codebook_utilization(loaded.model, ds);

  std::ostringstream text;
  text << "zero-shot retrieval on " << root.string() << " (" << ds.size() << " pairs)\n";
  char buf[160];
  std::snprintf(buf, sizeof(buf), "TR  R@1 %.4f  R@5 %.4f  R@10 %.4f\n", rep.tr_r1, rep.tr_r5,
                rep.tr_r10);
  text << buf;
  std::snprintf(buf, sizeof(buf), "IR  R@1 %.4f  R@5 %.4f  R@10 %.4f\n", rep.ir_r1, rep.ir_r5,
                rep.ir_r10);
  text << buf;
  std::snprintf(buf, sizeof(buf), "codebook utilization %.4f\n", util);
  text << buf;

  std::ofstream out(out_path);
  if (!out) throw cbvila::InputError("cannot write " + out_path);
  out << text.str();
  nlohmann::json j;
  j["split"] = root.string();
  j["pairs"] = ds.size();
  j["tr_r1"] = rep.tr_r1;
  j["tr_r5"] = rep.tr_r5;
  j["tr_r10"] = rep.tr_r10;
  j["ir_r1"] = rep.ir_r1;
  j["ir_r5"] = rep.ir_r5;
  j["ir_r10"] = rep.ir_r10;
  j["codebook_utilization"] = util;
  j["checkpoint_step"] = loaded.global_step;
  std::ofstream jout(out_path + ".json");
  jout << j.dump(2) << "\n";
  std::cout << text.str();
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& seeds_csv,
               const std::string& out_path) {
  cbvila::TrainConfig cfg = cbvila::load_train_config(config_path);
  std::vector<std::uint64_t> seeds;
  for (int s : parse_csv_ints(seeds_csv)) seeds.push_back(static_cast<std::uint64_t>(s));
  auto table = cbvila::run_ablation<Scalar>(cfg, seeds, &std::cout);
  std::ofstream out(out_path);
  if (!out) throw cbvila::InputError("cannot write " + out_path);
  out << table.to_text();
  std::ofstream jout(out_path + ".json");
  jout << table.to_json() << "\n";
  std::cout << table.to_text();
  return 0;
}

int cmd_viz_codebook(const std::string& ckpt_path, const std::string& data_dir,
                     const std::string& codewords_csv, int max_patches,
                     const std::string& out_dir) {
  auto loaded = cbvila::load_model_checkpoint<Scalar>(ckpt_path);
  auto ds = cbvila::load_dataset<Scalar>(data_dir);
  auto codewords = parse_csv_ints(codewords_csv);
  auto grids = cbvila::codeword_patch_grids(loaded.model, ds, codewords, max_patches);
  fs::create_directories(out_dir);
  std::ofstream report(fs::path(out_dir) / "report.jsonl");
  for (const auto& grid : grids) {
    char name[48];
    std::snprintf(name, sizeof(name), "codeword_%04d.ppm", grid.codeword);
    cbvila::write_ppm((fs::path(out_dir) / name).string(), grid.grid);
    nlohmann::json rec;
    rec["codeword"] = grid.codeword;
    rec["count"] = grid.refs.size();
    rec["image_file"] = name;
    if (grid.empty) rec["warning"] = "no patches assigned to this codeword";
    nlohmann::json patches = nlohmann::json::array();
    for (const auto& ref : grid.refs)
      patches.push_back({{"image_index", ref.image_index}, {"position", ref.position}});
    rec["patches"] = patches;
    report << rec.dump() << "\n";
    if (grid.empty)
      std::cout << "warning: codeword " << grid.codeword << " has no assigned patches\n";
    else
      std::cout << "codeword " << grid.codeword << ": " << grid.refs.size() << " patches -> "
                << name << "\n";
  }
  return 0;
}

int cmd_reconstruct(const std::string& ckpt_path, const std::string& image_path,
                    std::uint64_t seed, const std::string& out_dir) {
  auto loaded = cbvila::load_model_checkpoint<Scalar>(ckpt_path);
  auto image = cbvila::read_ppm<Scalar>(image_path);
  auto trip = cbvila::reconstruct_triptych(loaded.model, image, seed, loaded.global_step);
  fs::create_directories(out_dir);
  cbvila::write_ppm((fs::path(out_dir) / "original.ppm").string(), trip.original);
  cbvila::write_ppm((fs::path(out_dir) / "masked.ppm").string(), trip.masked_view);
  cbvila::write_ppm((fs::path(out_dir) / "reconstruction.ppm").string(), trip.reconstruction);
  std::cout << "masked " << trip.mask_positions.size() << " of " << loaded.model.num_patches()
            << " patches; wrote triptych to " << out_dir << "\n";
  return 0;
}

int cmd_gradcam(const std::string& ckpt_path, const std::string& image_path,
                const std::string& caption, int word, const std::string& out_path,
                bool nearest) {
  auto loaded = cbvila::load_model_checkpoint<Scalar>(ckpt_path);
  auto image = cbvila::read_ppm<Scalar>(image_path);
  auto result = cbvila::gradcam_word_heatmap(loaded.model, image, caption, word, !nearest);
  cbvila::write_ppm(out_path, result.overlay);
  const auto words = cbvila::split_words(caption);
  std::cout << "grad-cam for word '" << words[static_cast<std::size_t>(word)] << "' -> "
            << out_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"codebook-based vision-language pretraining"};
  app.require_subcommand(1);

  std::string config_path, resume_path;
  auto* pretrain = app.add_subcommand("pretrain", "train a model from a config file");
  pretrain->add_option("--config", config_path, "flat key=value config file")->required();
  pretrain->add_option("--resume", resume_path, "checkpoint to resume from");

  std::string gen_out;
  int gen_n = 0;
  std::uint64_t gen_seed = 0;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic paired dataset");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n", gen_n, "number of pairs")->required();
  gen->add_option("--seed", gen_seed, "generator seed")->required();

  std::string er_ckpt, er_data, er_split, er_out;
  auto* er = app.add_subcommand("eval-retrieval", "zero-shot image-text retrieval");
  er->add_option("--ckpt", er_ckpt, "checkpoint path")->required();
  er->add_option("--data", er_data, "dataset root directory")->required();
  er->add_option("--split", er_split, "split subdirectory (or . for the root)")->required();
  er->add_option("--out", er_out, "report path (JSON twin written alongside)")->required();

  std::string ab_config, ab_seeds, ab_out;
  auto* ab = app.add_subcommand("ablate", "objective-subset ablation study");
  ab->add_option("--config", ab_config, "base config file")->required();
  ab->add_option("--seeds", ab_seeds, "comma-separated seeds")->required();
  ab->add_option("--out", ab_out, "report path")->required();

  std::string vc_ckpt, vc_data, vc_codewords, vc_out;
  int vc_max = 16;
  auto* vc = app.add_subcommand("viz-codebook", "patch grids per codeword");
  vc->add_option("--ckpt", vc_ckpt, "checkpoint path")->required();
  vc->add_option("--data", vc_data, "dataset directory")->required();
  vc->add_option("--codewords", vc_codewords, "comma-separated codeword ids")->required();
  vc->add_option("--max-patches", vc_max, "patches per grid");
  vc->add_option("--out", vc_out, "output directory")->required();

  std::string rc_ckpt, rc_image, rc_out;
  std::uint64_t rc_seed = 0;
  auto* rc = app.add_subcommand("reconstruct", "original/masked/reconstruction triptych");
  rc->add_option("--ckpt", rc_ckpt, "checkpoint path")->required();
  rc->add_option("--image", rc_image, "input PPM image")->required();
  rc->add_option("--seed", rc_seed, "mask seed")->required();
  rc->add_option("--out", rc_out, "output directory")->required();

  std::string gc_ckpt, gc_image, gc_caption, gc_out;
  int gc_word = 0;
  bool gc_nearest = false;
  auto* gc = app.add_subcommand("gradcam", "cross-attention Grad-CAM for one word");
  gc->add_option("--ckpt", gc_ckpt, "checkpoint path")->required();
  gc->add_option("--image", gc_image, "input PPM image")->required();
  gc->add_option("--caption", gc_caption, "caption text")->required();
  gc->add_option("--word", gc_word, "word index within the caption")->required();
  gc->add_option("--out", gc_out, "output overlay path")->required();
  gc->add_flag("--nearest", gc_nearest, "nearest-neighbor upsampling instead of bilinear");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (app.got_subcommand(pretrain)) return cmd_pretrain(config_path, resume_path);
    if (app.got_subcommand(gen)) return cmd_gen_data(gen_out, gen_n, gen_seed);
    if (app.got_subcommand(er)) return cmd_eval_retrieval(er_ckpt, er_data, er_split, er_out);
    if (app.got_subcommand(ab)) return cmd_ablate(ab_config, ab_seeds, ab_out);
    if (app.got_subcommand(vc))
      return cmd_viz_codebook(vc_ckpt, vc_data, vc_codewords, vc_max, vc_out);
    if (app.got_subcommand(rc)) return cmd_reconstruct(rc_ckpt, rc_image, rc_seed, rc_out);
    if (app.got_subcommand(gc))
      return cmd_gradcam(gc_ckpt, gc_image, gc_caption, gc_word, gc_out, gc_nearest);
  } catch (const cbvila::InputError& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return 1;
  } catch (const cbvila::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
