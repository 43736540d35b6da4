// End-to-end checks of the command-line surface: every subcommand, the
// dataset/checkpoint/report files they exchange, and the exit-code contract
// (0 success, 1 input error, 2 config error, 3 runtime error).

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "cbvila/dataset.hpp"

namespace fs = std::filesystem;

namespace {

const std::string cli = CBVILA_CLI_PATH;

int run(const std::string& args) {
  const std::string cmd = cli + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

fs::path work_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "cbvila_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::string tiny_config(const fs::path& out_dir) {
  std::ostringstream cfg;
  cfg << "model.d=32\ncodebook.dim=32\nmodel.enc_layers=1\nmodel.fusion_layers=1\n"
      << "codebook.size=8\ndata.n_train=8\ndata.n_eval=4\ntrain.batch_size=4\n"
      << "train.epochs=3\ntrain.warmup_iters=2\ntrain.peak_lr=0.001\n"
      << "run.checkpoint_every=100\nrun.out_dir=" << out_dir.string() << "\n";
  return cfg.str();
}

}  // namespace

TEST_CASE("gen-data writes a loadable dataset") {
  const auto dir = work_dir() / "data" / "train";
  REQUIRE(run("gen-data --out " + dir.string() + " --n 12 --seed 5") == 0);
  REQUIRE(fs::exists(dir / "captions.jsonl"));
  REQUIRE(fs::exists(dir / "vocab.txt"));
  REQUIRE(fs::exists(dir / "images" / "img_00000.ppm"));
  auto ds = cbvila::load_dataset<float>(dir.string());
  REQUIRE(ds.size() == 12);

  // same seed reproduces the files byte for byte
  const auto dir2 = work_dir() / "data2";
  REQUIRE(run("gen-data --out " + dir2.string() + " --n 12 --seed 5") == 0);
  auto bytes = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  };
  REQUIRE(bytes(dir / "images" / "img_00003.ppm") == bytes(dir2 / "images" / "img_00003.ppm"));
  REQUIRE(bytes(dir / "captions.jsonl") == bytes(dir2 / "captions.jsonl"));
}

TEST_CASE("pretrain, eval-retrieval, and the figure commands cooperate") {
  const auto out = work_dir() / "run";
  const auto cfg_path = work_dir() / "tiny.cfg";
  {
    std::ofstream f(cfg_path);
    f << tiny_config(out);
  }
  REQUIRE(run("pretrain --config " + cfg_path.string()) == 0);
  REQUIRE(fs::exists(out / "ckpt_final.bin"));
  REQUIRE(fs::exists(out / "metrics.jsonl"));
  {
    std::ifstream m(out / "metrics.jsonl");
    int lines = 0;
    std::string line;
    while (std::getline(m, line)) ++lines;
    REQUIRE(lines == 6);  // 3 epochs x 2 steps
  }

  const std::string ckpt = (out / "ckpt_final.bin").string();
  const auto eval_dir = work_dir() / "data" / "eval";
  REQUIRE(run("gen-data --out " + eval_dir.string() + " --n 6 --seed 9") == 0);

  SECTION("eval-retrieval writes text and json reports") {
    const auto report = work_dir() / "report.txt";
    REQUIRE(run("eval-retrieval --ckpt " + ckpt + " --data " + (work_dir() / "data").string() +
                " --split eval --out " + report.string()) == 0);
    REQUIRE(fs::exists(report));
    REQUIRE(fs::exists(report.string() + ".json"));
  }

  SECTION("viz-codebook emits grids and a provenance report") {
    const auto viz = work_dir() / "viz";
    REQUIRE(run("viz-codebook --ckpt " + ckpt + " --data " + eval_dir.string() +
                " --codewords 0,1,2 --max-patches 4 --out " + viz.string()) == 0);
    REQUIRE(fs::exists(viz / "report.jsonl"));
    REQUIRE(fs::exists(viz / "codeword_0000.ppm"));
  }

  SECTION("reconstruct writes the triptych") {
    const auto rec = work_dir() / "recon";
    REQUIRE(run("reconstruct --ckpt " + ckpt + " --image " +
                (eval_dir / "images" / "img_00000.ppm").string() + " --seed 3 --out " +
                rec.string()) == 0);
    REQUIRE(fs::exists(rec / "original.ppm"));
    REQUIRE(fs::exists(rec / "masked.ppm"));
    REQUIRE(fs::exists(rec / "reconstruction.ppm"));
  }

  SECTION("gradcam writes the overlay") {
    const auto heat = work_dir() / "heat.ppm";
    REQUIRE(run("gradcam --ckpt " + ckpt + " --image " +
                (eval_dir / "images" / "img_00000.ppm").string() +
                " --caption \"a red circle\" --word 1 --out " + heat.string()) == 0);
    REQUIRE(fs::exists(heat));
  }

  SECTION("resume continues from a checkpoint") {
    REQUIRE(run("pretrain --config " + cfg_path.string() + " --resume " + ckpt) == 0);
  }

  SECTION("exit code 1 on input errors") {
    REQUIRE(run("eval-retrieval --ckpt " + ckpt + " --data /nonexistent --split eval --out " +
                (work_dir() / "r.txt").string()) == 1);
    REQUIRE(run("gradcam --ckpt " + ckpt + " --image " +
                (eval_dir / "images" / "img_00000.ppm").string() +
                " --caption \"a red circle\" --word 99 --out " +
                (work_dir() / "h.ppm").string()) == 1);
    REQUIRE(run("bogus-subcommand") == 1);
    REQUIRE(run("gen-data --out " + (work_dir() / "x").string() + " --n 12") == 1);
  }

  SECTION("exit code 2 on config errors") {
    const auto bad_cfg = work_dir() / "bad.cfg";
    {
      std::ofstream f(bad_cfg);
      f << "no.such.key=1\n";
    }
    REQUIRE(run("pretrain --config " + bad_cfg.string()) == 2);
    const auto bad_dim = work_dir() / "bad_dim.cfg";
    {
      std::ofstream f(bad_dim);
      f << "model.d=33\n";
    }
    REQUIRE(run("pretrain --config " + bad_dim.string()) == 2);
  }

  SECTION("exit code 3 on runtime errors") {
    const auto broken = work_dir() / "broken";
    fs::create_directories(broken / "images");
    {
      std::ofstream f(broken / "captions.jsonl");
      f << "this is not json\n";
    }
    {
      std::ofstream f(broken / "vocab.txt");
      f << "[PAD]\n[CLS]\n[SEP]\n[MASK]\n[UNK]\n";
    }
    REQUIRE(run("eval-retrieval --ckpt " + ckpt + " --data " + broken.string() +
                " --split . --out " + (work_dir() / "r3.txt").string()) == 3);
  }
}

TEST_CASE("help exits zero") { REQUIRE(run("--help") == 0); }
