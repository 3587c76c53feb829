#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mmseg/mmseg.hpp"

#ifndef MMSEG_CLI_PATH
#error "MMSEG_CLI_PATH must point at the mmseg executable"
#endif

using namespace mmseg;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

fs::path work_dir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / "mmseg_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Outcome run_cli(const std::string& args) {
  const auto out = work_dir() / "stdout.txt", err = work_dir() / "stderr.txt";
  const std::string cmd = std::string("MMSEG_LOG=info '") + MMSEG_CLI_PATH + "' " + args + " >'" + out.string() +
                          "' 2>'" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::string tiny_config(const fs::path& root, std::size_t epochs, const std::string& modalities = "rgb,depth") {
  return "[model]\nd = 16\nheads = 1,2,2\nr = 2\nclasses = 3\n\n[data]\nroot = " + root.string() +
         "\nmodalities = " + modalities + "\nheight = 32\nwidth = 32\naugment = true\n\n[optim]\nbase_lr = 1e-3\nbatch = 2\n"
         "epochs = " + std::to_string(epochs) + "\nwarmup_epochs = 0\nseed = 4\n";
}

fs::path dataset(const std::string& name, const std::string& modalities = "rgb,depth") {
  const auto root = work_dir() / name;
  if (!fs::exists(root / "manifest")) {
    const auto r = run_cli("gen-data --out '" + root.string() + "' --count 2 --classes 3 --size 32 --seed 5 --modalities " +
                         modalities);
    EXPECT_EQ(r.code, 0) << r.err;
  }
  return root;
}

fs::path write_config(const std::string& name, const std::string& text) {
  const auto path = work_dir() / name;
  std::ofstream(path) << text;
  return path;
}

void expect_single_error_line(const Outcome& r, const std::string& kind) {
  const auto l = lines(r.err);
  ASSERT_EQ(l.size(), 1u) << r.err;
  EXPECT_EQ(l[0].rfind("mmseg: error[" + kind + "]: ", 0), 0u) << l[0];
}

}  // namespace

TEST(Cli, GenDataIsDeterministic) {
  const auto a = work_dir() / "gen_a", b = work_dir() / "gen_b";
  for (const auto& d : {a, b}) {
    const auto r = run_cli("gen-data --out '" + d.string() + "' --count 4 --classes 3 --size 24x16 --seed 9 --modalities rgb,event");
    ASSERT_EQ(r.code, 0) << r.err;
  }
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    EXPECT_EQ(slurp(e.path()), slurp(b / fs::relative(e.path(), a))) << e.path();
    ++files;
  }
  EXPECT_EQ(files, 6u * 3u + 1u);
  EXPECT_TRUE(fs::exists(a / "train" / "000003" / "event.mmt"));
  EXPECT_FALSE(fs::exists(a / "train" / "000000" / "depth.mmt"));
  const auto label = read_label(a / "val" / "000000" / "label.mmt");
  EXPECT_EQ(label.height, 24u);
  EXPECT_EQ(label.width, 16u);
}

TEST(Cli, UsageErrorsExitTwo) {
  const auto out = (work_dir() / "never").string();
  auto r = run_cli("gen-data --out '" + out + "' --count 0");
  EXPECT_EQ(r.code, 2);
  expect_single_error_line(r, "usage");
  r = run_cli("gen-data --out '" + out + "' --modalities rgb,thermal");
  EXPECT_EQ(r.code, 2);
  expect_single_error_line(r, "usage");
  r = run_cli("gen-data --out '" + out + "' --size 0x4");
  EXPECT_EQ(r.code, 2);
  r = run_cli("frobnicate");
  EXPECT_EQ(r.code, 2);
  r = run_cli("");
  EXPECT_EQ(r.code, 2);
  EXPECT_FALSE(fs::exists(out));
}

TEST(Cli, ConfigAndIoErrorsHaveDistinctCodes) {
  const auto root = dataset("data_rgbd");
  auto cfg = write_config("bad_key.ini", tiny_config(root, 1) + "bogus = 1\n");
  auto r = run_cli("train --config '" + cfg.string() + "' --out '" + (work_dir() / "run_bad").string() + "'");
  EXPECT_EQ(r.code, 3);
  expect_single_error_line(r, "config");
  EXPECT_NE(r.err.find("config line"), std::string::npos);

  r = run_cli("train --config '" + (work_dir() / "absent.ini").string() + "' --out '" + (work_dir() / "run_x").string() + "'");
  EXPECT_EQ(r.code, 4);
  expect_single_error_line(r, "io");

  cfg = write_config("no_data.ini", tiny_config(work_dir() / "no_such_dataset", 1));
  r = run_cli("train --config '" + cfg.string() + "' --out '" + (work_dir() / "run_y").string() + "'");
  EXPECT_EQ(r.code, 4);
  expect_single_error_line(r, "io");

  r = run_cli("eval --checkpoint '" + (work_dir() / "no_ckpt").string() + "'");
  EXPECT_EQ(r.code, 4);
  expect_single_error_line(r, "io");
}

TEST(Cli, ZeroEpochCheckpointHoldsInitialisation) {
  const auto root = dataset("data_rgbd");
  const auto cfg = write_config("zero.ini", tiny_config(root, 0));
  const auto run = work_dir() / "run_zero";
  const auto r = run_cli("train --config '" + cfg.string() + "' --out '" + run.string() + "'");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto config = load_config(cfg);
  Model<float> fresh(config.model_config());
  auto loaded_cfg = config;
  loaded_cfg.seed += 1;  // different initialisation, overwritten by the load
  Model<float> loaded(loaded_cfg.model_config());
  EXPECT_EQ(load_checkpoint(run / "checkpoints" / "last", loaded).step, 0u);
  for (std::size_t i = 0; i < fresh.parameters().all().size(); ++i) {
    EXPECT_EQ(fresh.parameters().all()[i].value.values(), loaded.parameters().all()[i].value.values())
        << fresh.parameters().all()[i].name;
  }
  EXPECT_EQ(lines(slurp(run / "metrics.csv")).size(), 1u);
  EXPECT_EQ(read_checkpoint_config(run / "checkpoints" / "last"), config);
}

TEST(Cli, TrainingIsReproducibleAndEvalReportsScenarios) {
  const auto root = dataset("data_rgbd");
  const auto cfg = write_config("one.ini", tiny_config(root, 2));
  const auto a = work_dir() / "run_a", b = work_dir() / "run_b";
  for (const auto& run : {a, b}) {
    const auto r = run_cli("train --config '" + cfg.string() + "' --out '" + run.string() + "'");
    ASSERT_EQ(r.code, 0) << r.err;
  }
  const auto metrics = slurp(a / "metrics.csv");
  EXPECT_EQ(metrics, slurp(b / "metrics.csv"));
  const auto rows = lines(metrics);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], kMetricsHeader);
  // 2 samples at batch 2 is one step per epoch.
  EXPECT_EQ(read_checkpoint_info(a / "checkpoints" / "last").step, 2u);
  EXPECT_FALSE(fs::exists(a / "checkpoints" / "last.tmp"));

  const auto ckpt = (a / "checkpoints" / "last").string();
  auto r = run_cli("eval --checkpoint '" + ckpt + "' --split test");
  ASSERT_EQ(r.code, 0) << r.err;
  auto csv = lines(r.out);
  ASSERT_EQ(csv.size(), 2u);
  EXPECT_EQ(csv[0], "scenario,kept_modalities,noise,class_0,class_1,class_2,miou,samples");
  EXPECT_EQ(csv[1].rfind("rgb+depth,rgb+depth,none,", 0), 0u) << csv[1];

  r = run_cli("eval --checkpoint '" + ckpt + "' --split test --modalities depth --noise gaussian --noise-modality depth");
  ASSERT_EQ(r.code, 0) << r.err;
  csv = lines(r.out);
  ASSERT_EQ(csv.size(), 2u);
  EXPECT_EQ(csv[1].rfind("depth|gaussian:depth,depth,gaussian:depth,", 0), 0u) << csv[1];

  r = run_cli("eval --checkpoint '" + ckpt + "' --noise gaussian");
  EXPECT_EQ(r.code, 2);
  r = run_cli("eval --checkpoint '" + ckpt + "' --modalities lidar");
  EXPECT_EQ(r.code, 2);
  expect_single_error_line(r, "usage");

  const auto grid = work_dir() / "grid.csv";
  r = run_cli("matrix --checkpoint '" + ckpt + "' --split val --out '" + grid.string() + "'");
  ASSERT_EQ(r.code, 0) << r.err;
  csv = lines(slurp(grid));
  ASSERT_EQ(csv.size(), 4u);
  EXPECT_EQ(csv[1].rfind("depth,", 0), 0u);
  EXPECT_EQ(csv[2].rfind("rgb,", 0), 0u);
  EXPECT_EQ(csv[3].rfind("rgb+depth,", 0), 0u);
}

TEST(Cli, EvalNeedsTheTrainedModalitiesOnDisk) {
  const auto trained_on = dataset("data_rgbd");
  const auto other = dataset("data_rgb", "rgb");
  const auto cfg = write_config("zero_b.ini", tiny_config(trained_on, 0));
  const auto run = work_dir() / "run_zero_b";
  ASSERT_EQ(run_cli("train --config '" + cfg.string() + "' --out '" + run.string() + "'").code, 0);
  const auto r = run_cli("eval --checkpoint '" + (run / "checkpoints" / "last").string() + "' --data '" + other.string() + "'");
  EXPECT_EQ(r.code, 4);
  expect_single_error_line(r, "io");
}
