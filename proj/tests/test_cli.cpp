#include <doctest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nodedrop/checkpoint.hpp"
#include "nodedrop/config.hpp"
#include "nodedrop/data.hpp"
#include "nodedrop/presets.hpp"

using namespace nodedrop;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

// Runs the CLI with stderr folded into stdout.
Result cli(const std::string& args) {
  const std::string cmd = std::string(NODEDROP_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.out += buf.data();
  const int status = ::pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Workdir {
  fs::path path = fs::temp_directory_path() / "nodedrop_test_cli";
  Workdir() {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~Workdir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("config text parsing") {
  const auto kv = parse_kv_text("# comment\n preset = dense240 \n\nlambda=1e-5 # trailing\nmode=bn\n");
  CHECK(kv.size() == 3);
  CHECK(kv.at("preset") == "dense240");
  CHECK(kv.at("lambda") == "1e-5");
  CHECK(kv.at("mode") == "bn");
  CHECK_THROWS_AS(parse_kv_text("lambda 1e-5\n"), ContractError);
  CHECK_THROWS_AS(parse_kv_text("=3\n"), ContractError);
  CHECK_THROWS_AS(parse_kv_file("/nonexistent/run.cfg"), ContractError);
}

TEST_CASE("run config from entries") {
  const RunConfig d = make_run_config({});
  CHECK(d.preset == "dense160");
  CHECK(d.train.optimizer.kind == OptimizerKind::adam);
  CHECK(d.train.optimizer.lr == doctest::Approx(1e-3));
  CHECK(d.train.epochs == 30);
  CHECK(d.train.batch_size == 256);
  CHECK(d.train.nodedrop.C == 1.0);
  CHECK(d.train.nodedrop.mode == NodeDropMode::vanilla);

  const RunConfig c = make_run_config({{"preset", "dense320_bn"},
                                       {"lambda", "1e-4"},
                                       {"epochs", "3"},
                                       {"batch_size", "64"},
                                       {"precision", "float64"},
                                       {"lr_milestones", "2:0.5"}});
  CHECK(c.train.nodedrop.mode == NodeDropMode::batch_norm);
  CHECK(c.train.nodedrop.lambda == 1e-4);
  CHECK(c.train.nodedrop.train_batch_size == 64);
  CHECK(c.train.epochs == 3);
  CHECK(c.precision == Precision::f64);
  CHECK(c.train.lr_at(2) == doctest::Approx(5e-4));

  const RunConfig v = make_run_config({{"preset", "vgg16_cifar"}});
  CHECK(v.train.optimizer.kind == OptimizerKind::sgd);
  CHECK(v.train.augment);
  CHECK(v.train.epochs == 200);
  CHECK(v.train.lr_at(130) == doctest::Approx(0.001));

  CHECK_THROWS_AS(make_run_config({{"lambda", "-1"}}), ContractError);
  CHECK_THROWS_AS(make_run_config({{"lambda", "abc"}}), ContractError);
  CHECK_THROWS_AS(make_run_config({{"epochs", "0"}}), ContractError);
  CHECK_THROWS_AS(make_run_config({{"preset", "dense161"}}), ContractError);
  CHECK_THROWS_AS(make_run_config({{"colour", "blue"}}), ContractError);
  CHECK_THROWS_AS(make_run_config({{"mode", "bn"}}), StructuralError);
  CHECK_THROWS_AS(make_run_config({{"precision", "16"}}), ContractError);
  CHECK_THROWS_AS(make_run_config({{"c", "0"}}), ContractError);
}

TEST_CASE("presets") {
  const std::size_t widths[][5] = {{16, 16, 32, 32, 64}, {24, 24, 48, 48, 96}, {64, 64, 128, 128, 256}};
  const char* names[] = {"dense160", "dense240", "dense640"};
  for (int i = 0; i < 3; ++i) {
    const Preset p = make_preset(names[i]);
    const Model<float> m(p.input_shape, p.layers);
    const auto report = scan_network(m, NodeDropConfig{});
    REQUIRE(report.layers.size() == 5);
    for (int k = 0; k < 5; ++k) CHECK(report.layers[k].node_margins.size() == widths[i][k]);
    CHECK(m.output_shapes().back() == Shape{10});
  }
  const Preset bn = make_preset("dense160_bn");
  CHECK(bn.mode == NodeDropMode::batch_norm);
  CHECK(std::holds_alternative<BatchNormSpec>(bn.layers[1]));

  const Preset vgg = make_preset("vgg16_cifar");
  std::size_t convs = 0, dense = 0;
  for (const auto& s : vgg.layers) {
    convs += std::holds_alternative<Conv2dSpec>(s);
    dense += std::holds_alternative<DenseSpec>(s);
  }
  CHECK(convs == 13);
  CHECK(dense == 2);
  CHECK(vgg.input_shape == Shape{3, 32, 32});
  const Model<float> vm(vgg.input_shape, vgg.layers);
  CHECK(vm.output_shapes()[vm.size() - 3] == Shape{512});
  CHECK(preset_names().size() == 12);
  for (const auto& n : preset_names()) CHECK_NOTHROW(make_preset(n));
}

TEST_CASE("usage and config errors exit 2") {
  CHECK(cli("").code == 2);
  CHECK(cli("frobnicate").code == 2);
  const Result neg = cli("train --lambda -1 --dataset-dir " NODEDROP_TEST_DATA);
  CHECK(neg.code == 2);
  CHECK(neg.out.find("lambda") != std::string::npos);
  CHECK(cli("train --preset dense999 --dataset-dir " NODEDROP_TEST_DATA).code == 2);
  CHECK(cli("train --dataset-dir /nonexistent/mnist --epochs 1").code == 2);
  CHECK(cli("train --config /nonexistent/run.cfg").code == 2);
  CHECK(cli("scan /nonexistent/model.ndck").code == 2);
  CHECK(cli("train --lambda 1e-5 --optimizer rmsprop").code == 2);
}

TEST_CASE("format and version errors exit 3") {
  Workdir dir;
  const Preset p = make_preset("dense160");
  const Model<float> m(p.input_shape, p.layers);
  auto bytes = serialize_checkpoint(m, CheckpointMeta{});
  bytes[4] = 9;
  std::ofstream(dir / "v9.ndck", std::ios::binary)
      .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  const Result r = cli("scan " + (dir / "v9.ndck"));
  CHECK(r.code == 3);
  CHECK(r.out.find("version") != std::string::npos);
  std::ofstream(dir / "junk.ndck") << "not a checkpoint";
  CHECK(cli("eval " + (dir / "junk.ndck") + " --dataset-dir " NODEDROP_TEST_DATA).code == 3);
}

TEST_CASE("end to end: train, scan, compact, eval, report") {
  Workdir dir;
  std::ofstream(dir / "run.cfg") << "# small run\nlambda = 5\nepochs = 2\nbatch_size = 64\n"
                                 << "train_limit = 512\ntest_limit = 200\nseed = 3\n";
  const std::string common = " --dataset-dir " NODEDROP_TEST_DATA " --config " + (dir / "run.cfg");

  // The flag overrides the file's lambda.
  const Result t1 = cli("train --lambda 1e-3 --out-dir " + (dir / "a") + common);
  REQUIRE_MESSAGE(t1.code == 0, t1.out);
  CHECK(t1.out.find("lambda=0.001") != std::string::npos);
  const std::string metrics = slurp(dir / "a/metrics.csv");
  CHECK(metrics.rfind("epoch,train_loss,reg_loss,test_acc,live_nodes,live_params\n", 0) == 0);
  CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 3);
  CHECK(load_checkpoint(dir / "a/model.ndck").meta.nodedrop.lambda == 1e-3);

  const Result t0 = cli("train --lambda 0 --out-dir " + (dir / "b") + common);
  REQUIRE_MESSAGE(t0.code == 0, t0.out);
  CHECK(t0.out.find("160/160 prunable nodes live") != std::string::npos);

  const Result scan = cli("scan " + (dir / "a/model.ndck") + " --out " + (dir / "scan.csv") +
                          " --margins " + (dir / "margins.csv"));
  REQUIRE(scan.code == 0);
  CHECK(slurp(dir / "scan.csv").rfind("layer,name,nodes,", 0) == 0);
  CHECK(slurp(dir / "margins.csv").rfind("layer,node,margin,dead\n", 0) == 0);
  CHECK(scan.out.find("prunable nodes live") != std::string::npos);

  const std::string before = slurp(dir / "a/model.ndck");
  const Result comp = cli("compact " + (dir / "a/model.ndck") + " " + (dir / "small.ndck"));
  REQUIRE_MESSAGE(comp.code == 0, comp.out);
  CHECK(comp.out.find("params_before") != std::string::npos);
  CHECK(slurp(dir / "a/model.ndck") == before);
  CHECK(cli("compact " + (dir / "a/model.ndck") + " " + (dir / "a/model.ndck")).code == 2);

  const Result e1 = cli("eval " + (dir / "a/model.ndck") + " --dataset-dir " NODEDROP_TEST_DATA " --test-limit 500");
  const Result e2 = cli("eval " + (dir / "small.ndck") + " --dataset-dir " NODEDROP_TEST_DATA " --test-limit 500");
  REQUIRE(e1.code == 0);
  CHECK(e1.out.rfind("accuracy ", 0) == 0);
  CHECK(e1.out == e2.out);
  MESSAGE(e1.out);

  const Result rep = cli("report " + (dir / "a/metrics.csv") + " " + (dir / "b/metrics.csv") +
                         " --out " + (dir / "table.csv"));
  REQUIRE_MESSAGE(rep.code == 0, rep.out);
  const std::string table = slurp(dir / "table.csv");
  CHECK(table.rfind("lambda,run,epochs,", 0) == 0);
  // Sorted by lambda: the baseline row comes first.
  CHECK(table.find("\n0,") < table.find("\n0.001,"));
}
