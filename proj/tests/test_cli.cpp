#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "ordbal/transport.hpp"

namespace {

namespace fs = std::filesystem;

const std::string kCli = ORDBAL_CLI_PATH;
const fs::path kConfigs = ORDBAL_CONFIG_DIR;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           (std::string("ordbal-cli-") +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  struct Outcome {
    int code = -1;
    std::string out;
    std::string err;
  };

  Outcome run(const std::string& args) {
    const auto out = dir_ / "stdout.txt";
    const auto err = dir_ / "stderr.txt";
    const std::string cmd = kCli + " " + args + " > " + out.string() + " 2> " + err.string();
    const int status = std::system(cmd.c_str());
    Outcome o;
    o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    o.out = slurp(out);
    o.err = slurp(err);
    return o;
  }

  fs::path write(const std::string& name, const std::string& text) {
    const auto p = dir_ / name;
    std::ofstream(p) << text;
    return p;
  }

  fs::path dir_;
};

std::uint16_t free_port() {
  ordbal::TcpListener probe(ordbal::TcpAddress{"127.0.0.1", 0});
  return probe.port();
}

int count_lines(const std::string& s) {
  return static_cast<int>(std::count(s.begin(), s.end(), '\n'));
}

TEST_F(Cli, MinimalTrainWritesTwoRowsPerSeed) {
  const auto out = dir_ / "run";
  const auto r = run("train --config " + (kConfigs / "train_minimal.ini").string() + " --out " +
                     out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("# resolved configuration"), std::string::npos);
  EXPECT_NE(r.out.find("policy = cdgrab"), std::string::npos);
  for (int seed : {0, 1}) {
    const auto csv = slurp(out / ("metrics_seed" + std::to_string(seed) + ".csv"));
    EXPECT_EQ(count_lines(csv), 3) << csv;
  }
  EXPECT_TRUE(fs::exists(out / "metrics_aggregate.csv"));
  EXPECT_TRUE(fs::exists(out / "manifest.json"));
}

TEST_F(Cli, RerunGivesIdenticalBytes) {
  const std::string config = (kConfigs / "train_minimal.ini").string();
  ASSERT_EQ(run("train --config " + config + " --out " + (dir_ / "a").string()).code, 0);
  ASSERT_EQ(run("train --config " + config + " --out " + (dir_ / "b").string()).code, 0);
  for (const char* file : {"metrics_seed0.csv", "metrics_seed1.csv", "metrics_aggregate.csv",
                           "weights_seed0.csv"}) {
    EXPECT_EQ(slurp(dir_ / "a" / file), slurp(dir_ / "b" / file)) << file;
  }
}

TEST_F(Cli, CentralizedPolicyWithThreeWorkersIsAConfigError) {
  const auto r = run("train --config " + (kConfigs / "train_centralized.ini").string() +
                     " --m 3 --out " + (dir_ / "x").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("run.policy"), std::string::npos) << r.err;
  EXPECT_NE(r.err.find("run.m"), std::string::npos) << r.err;
  EXPECT_FALSE(fs::exists(dir_ / "x"));
}

TEST_F(Cli, BadPolicyListsValidNames) {
  const auto r = run("train --config " + (kConfigs / "train_minimal.ini").string() +
                     " --policy grab9000");
  EXPECT_EQ(r.code, 2);
  for (const char* name : {"cdgrab", "drr", "idgrab_bal", "idgrab_pairbal", "centralized_grab",
                           "centralized_pairbal", "shuffle_once"}) {
    EXPECT_NE(r.err.find(name), std::string::npos) << r.err;
  }
  const auto h = run("herding-bound --config " + (kConfigs / "herding_bound.ini").string() +
                     " --policy grab9000");
  EXPECT_EQ(h.code, 2);
  EXPECT_NE(h.err.find("idgrab_pairbal"), std::string::npos) << h.err;
}

TEST_F(Cli, MissingOrMalformedConfigExitsTwo) {
  EXPECT_EQ(run("train --config " + (dir_ / "none.ini").string()).code, 2);
  const auto bad = write("bad.ini", "[run]\nflavour = vanilla\n");
  EXPECT_EQ(run("train --config " + bad.string()).code, 2);
  EXPECT_EQ(run("validate-config --config " + bad.string()).code, 2);
  EXPECT_EQ(run("train").code, 2);
}

TEST_F(Cli, ValidateConfigAcceptsBothKinds) {
  const auto t = run("validate-config --config " + (kConfigs / "train_minimal.ini").string());
  EXPECT_EQ(t.code, 0) << t.err;
  EXPECT_NE(t.out.find("configuration is valid"), std::string::npos);
  const auto v = run("validate-config --config " + (kConfigs / "herding_bound.ini").string());
  EXPECT_EQ(v.code, 0) << v.err;
  EXPECT_NE(v.out.find("[vectors]"), std::string::npos);
}

TEST_F(Cli, HerdingBoundSmoke) {
  const auto config = write("hb.ini",
                            "[vectors]\ncount = 1000\ndim = 4\nm = 2\nepochs = 1\n"
                            "policies = drr\nseeds = 0, 1\n");
  const auto out = dir_ / "hb";
  const auto r = run("herding-bound --config " + config.string() + " --out " + out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = slurp(out / "herding_bound.csv");
  EXPECT_EQ(csv.rfind("seed,epoch,policy,m,n,herding_bound\n", 0), 0U);
  EXPECT_EQ(count_lines(csv), 3) << csv;
  EXPECT_TRUE(fs::exists(out / "manifest.json"));
}

TEST_F(Cli, RuntimeAbortExitsThreeWithMarker) {
  const auto out = dir_ / "fail";
  const auto r = run("train --config " + (kConfigs / "train_minimal.ini").string() +
                     " --engine thresholded:1e-12 --out " + out.string());
  EXPECT_EQ(r.code, 3) << r.err;
  EXPECT_NE(slurp(out / "metrics_seed0.csv").find("# ERROR"), std::string::npos);
  EXPECT_NE(slurp(out / "metrics_aggregate.csv").find("# ERROR"), std::string::npos);
}

TEST_F(Cli, BoundCheckPrintsThreeLines) {
  const auto r = run("bound-check --trials 50 --seed 3");
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_EQ(count_lines(r.out), 3) << r.out;
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos) << r.out;
}

TEST_F(Cli, WorkerWithoutServerGivesUp) {
  const auto r = run("worker --config " + (kConfigs / "train_tcp.ini").string() +
                     " --worker-id 0 --connect 127.0.0.1:" + std::to_string(free_port()) +
                     " --retries 3 --retry-delay-ms 10");
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("could not connect"), std::string::npos) << r.err;
}

// Runs serve plus worker processes from one shell script; returns the
// script's stdout, which lists the exit codes.
std::string run_session(const fs::path& dir, const std::string& serve_args,
                        const std::vector<std::string>& worker_args) {
  std::ostringstream script;
  script << ORDBAL_CLI_PATH << " serve " << serve_args << " > " << (dir / "serve.out") << " 2> "
         << (dir / "serve.err") << " &\nS=$!\n";
  for (std::size_t i = 0; i < worker_args.size(); ++i) {
    script << ORDBAL_CLI_PATH << " worker " << worker_args[i] << " > /dev/null 2> "
           << (dir / ("worker" + std::to_string(i) + ".err")) << " &\nW" << i << "=$!\n";
  }
  script << "wait $S; echo serve=$?\n";
  for (std::size_t i = 0; i < worker_args.size(); ++i) {
    script << "wait $W" << i << "; echo worker" << i << "=$?\n";
  }
  const auto path = dir / "session.sh";
  std::ofstream(path) << script.str();
  const auto codes = dir / "codes.txt";
  const int status = std::system(("bash " + path.string() + " > " + codes.string()).c_str());
  (void)status;
  return slurp(codes);
}

TEST_F(Cli, LoopbackServeMatchesMemoryRun) {
  const std::string config = (kConfigs / "train_tcp.ini").string();
  const std::string addr = "127.0.0.1:" + std::to_string(free_port());
  const auto tcp_out = dir_ / "tcp";
  const std::string common = "--config " + config + " ";
  const auto codes = run_session(
      dir_, common + "--listen " + addr + " --out " + tcp_out.string(),
      {common + "--connect " + addr + " --worker-id 0",
       common + "--connect " + addr + " --worker-id 1"});
  EXPECT_EQ(codes, "serve=0\nworker0=0\nworker1=0\n") << slurp(dir_ / "serve.err");

  const auto mem_out = dir_ / "memory";
  const auto r = run("train " + common + "--transport memory --out " + mem_out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* file : {"metrics_seed0.csv", "metrics_aggregate.csv", "weights_seed0.csv"}) {
    const auto a = slurp(tcp_out / file);
    EXPECT_FALSE(a.empty()) << file;
    EXPECT_EQ(a, slurp(mem_out / file)) << file;
  }
}

TEST_F(Cli, WorkerWithWrongDimensionIsRejected) {
  const std::string config = (kConfigs / "train_tcp.ini").string();
  const auto wrong = write("wrong_d.ini", slurp(config) + "");
  {
    std::string text = slurp(config);
    const auto pos = text.find("dim = 8");
    ASSERT_NE(pos, std::string::npos);
    text.replace(pos, 7, "dim = 9");
    std::ofstream(wrong) << text;
  }
  const std::string addr = "127.0.0.1:" + std::to_string(free_port());
  const auto codes = run_session(
      dir_, "--config " + config + " --listen " + addr + " --out " + (dir_ / "o").string(),
      {"--config " + config + " --connect " + addr + " --worker-id 0",
       "--config " + wrong.string() + " --connect " + addr + " --worker-id 1"});
  EXPECT_NE(codes.find("serve=4"), std::string::npos) << codes;
  EXPECT_NE(slurp(dir_ / "serve.err").find("d = 9"), std::string::npos)
      << slurp(dir_ / "serve.err");
}

}  // namespace
