// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the command-line tool as a subprocess: artifact
// determinism, report reproducibility, config-file precedence, and the
// documented exit codes. The binary path comes from CIRCUITQUANT_CLI.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "circuitquant/eval.hpp"

using namespace cq;

namespace {

struct CmdResult {
  int code = -1;
  std::string out;  // stdout + stderr
};

std::string scratch_dir() {
  static const std::string dir = [] {
    std::string d = (std::filesystem::temp_directory_path() / "cq_cli_test").string();
    std::filesystem::remove_all(d);
    std::filesystem::create_directories(d);
    return d;
  }();
  return dir;
}

CmdResult run_cli(const std::string& args) {
  const char* bin = std::getenv("CIRCUITQUANT_CLI");
  if (bin == nullptr)
    throw std::runtime_error("run_cli: CIRCUITQUANT_CLI is not set (run under ctest)");
  const std::string log = scratch_dir() + "/last_cmd_output.txt";
  const std::string cmd = std::string(bin) + " " + args + " > " + log + " 2>&1";
  const int raw = std::system(cmd.c_str());
  CmdResult r;
  r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream in(log);
  std::stringstream buf;
  buf << in.rdbuf();
  r.out = buf.str();
  return r;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

int line_count(const std::string& text) {
  int n = 0;
  for (char c : text) n += c == '\n' ? 1 : 0;
  return n;
}

// Generates a task once per preset+seed and caches the directory.
std::string task_dir(const std::string& preset, int seed) {
  const std::string dir = scratch_dir() + "/task_" + preset + "_" + std::to_string(seed);
  if (!std::filesystem::exists(dir + "/task.json")) {
    CmdResult r = run_cli("gen-task --preset " + preset + " --seed " +
                          std::to_string(seed) + " --out " + dir);
    REQUIRE(r.code == 0);
  }
  return dir;
}

}  // namespace

TEST_CASE("gen-task twice into the same directory is byte-identical") {
  const std::string dir = scratch_dir() + "/gen_twice";
  const std::string flags = "gen-task --preset standard --seed 7 --deterministic-report --out ";
  REQUIRE(run_cli(flags + dir).code == 0);
  const std::string w1 = slurp(dir + "/weights.bin");
  const std::string d1 = slurp(dir + "/dataset.jsonl");
  const std::string t1 = slurp(dir + "/task.json");
  const std::string r1 = slurp(dir + "/report.json");
  REQUIRE(run_cli(flags + dir).code == 0);
  CHECK(slurp(dir + "/weights.bin") == w1);
  CHECK(slurp(dir + "/dataset.jsonl") == d1);
  CHECK(slurp(dir + "/task.json") == t1);
  CHECK(slurp(dir + "/report.json") == r1);
}

TEST_CASE("run-acdc recovers the planted circuit and writes score tables") {
  const std::string task = task_dir("standard", 1);
  const std::string out = scratch_dir() + "/run_pahq";
  CmdResult r = run_cli("run-acdc --task " + task + " --method pahq --tau 0.01 --out " + out);
  REQUIRE(r.code == 0);
  const RunReport rep = load_report(out + "/report.json");
  CHECK(rep.command == "run-acdc");
  CHECK(rep.method == "pahq");
  const PlantedTask t = load_task(task);
  CHECK(rep.kept_edges == t.ground_truth);
  CHECK(rep.eps_max >= rep.eps_mean);
  CHECK(rep.auc == -1.0);
  CHECK(std::filesystem::exists(out + "/scores_iter0.csv"));
  const std::string csv = slurp(out + "/scores_iter0.csv");
  CHECK(csv.rfind("edge,src,dst,score,kept", 0) == 0);
  CHECK(line_count(csv) == 10);  // header + nine edges
}

TEST_CASE("run-acdc accepts raw weights and dataset paths") {
  const std::string task = task_dir("standard", 2);
  const std::string out = scratch_dir() + "/run_raw";
  CmdResult r = run_cli("run-acdc --weights " + task + "/weights.bin --dataset " + task +
                        "/dataset.jsonl --tau 0.01 --out " + out);
  REQUIRE(r.code == 0);
  const RunReport rep = load_report(out + "/report.json");
  CHECK(!rep.kept_edges.empty());
  CHECK(rep.eps_mean == 0.0);  // the FP32 method has no precision error
}

TEST_CASE("sweep-roc orders the methods and emits the curve") {
  const std::string task = task_dir("standard", 1);
  CmdResult rtn = run_cli("sweep-roc --task " + task + " --method rtn8 --out " +
                          scratch_dir() + "/roc_rtn8");
  CmdResult pahq = run_cli("sweep-roc --task " + task + " --method pahq --out " +
                           scratch_dir() + "/roc_pahq");
  REQUIRE(rtn.code == 0);
  REQUIRE(pahq.code == 0);
  const RunReport a = load_report(scratch_dir() + "/roc_rtn8/report.json");
  const RunReport b = load_report(scratch_dir() + "/roc_pahq/report.json");
  CHECK(a.auc < b.auc);
  CHECK(b.auc == 1.0);
  CHECK(a.roc.size() == 21);
  const std::string csv = slurp(scratch_dir() + "/roc_pahq/roc.csv");
  CHECK(csv.rfind("tau,tpr,fpr,kept_edges", 0) == 0);
  CHECK(line_count(csv) == 22);
}

TEST_CASE("sweep-roc rerun with a deterministic report is byte-identical") {
  const std::string task = task_dir("standard", 1);
  const std::string out = scratch_dir() + "/roc_repeat";
  const std::string flags =
      "sweep-roc --task " + task + " --method acdc --deterministic-report --out " + out;
  REQUIRE(run_cli(flags).code == 0);
  const std::string rep1 = slurp(out + "/report.json");
  const std::string roc1 = slurp(out + "/roc.csv");
  REQUIRE(run_cli(flags).code == 0);
  CHECK(slurp(out + "/report.json") == rep1);
  CHECK(slurp(out + "/roc.csv") == roc1);
}

TEST_CASE("config file supplies values and explicit flags win") {
  const std::string task = task_dir("standard", 1);
  const std::string ini = scratch_dir() + "/sweep.ini";
  {
    std::ofstream f(ini);
    f << "[sweep-roc]\ntask = \"" << task << "\"\nmethod = \"rtn8\"\n";
  }
  const std::string out1 = scratch_dir() + "/cfg_file";
  const std::string out2 = scratch_dir() + "/cfg_flag";
  REQUIRE(run_cli("--config " + ini + " sweep-roc --out " + out1).code == 0);
  REQUIRE(run_cli("--config " + ini + " sweep-roc --method pahq --out " + out2).code == 0);
  CHECK(load_report(out1 + "/report.json").method == "rtn8");
  CHECK(load_report(out2 + "/report.json").method == "pahq");

  const std::string typo = scratch_dir() + "/typo.ini";
  {
    std::ofstream f(typo);
    f << "[sweep-roc]\nnot_a_flag = 3\n";
  }
  CHECK(run_cli("--config " + typo + " sweep-roc --task " + task + " --out " +
                scratch_dir() + "/cfg_bad")
            .code == 2);
}

TEST_CASE("exit codes distinguish config, io, and numerical failures") {
  const std::string task = task_dir("standard", 1);
  const std::string out = scratch_dir() + "/codes";
  CHECK(run_cli("run-acdc --task " + task + " --no-such-flag --out " + out).code == 2);
  CHECK(run_cli("definitely-not-a-command").code == 2);
  CmdResult bad =
      run_cli("run-acdc --task " + task + " --tau -1 --max-steps 0 --method nope --out " + out);
  CHECK(bad.code == 2);
  // Semantic validation reports every violation, not just the first.
  CHECK(bad.out.find("tau") != std::string::npos);
  CHECK(bad.out.find("max-steps") != std::string::npos);
  CHECK(bad.out.find("method") != std::string::npos);
  CHECK(run_cli("sweep-roc --task " + scratch_dir() + "/nowhere --out " + out).code == 3);
  CHECK(run_cli("gen-task --signal-scale 0 --out " + out).code == 4);
  CHECK(run_cli("--help").code == 0);
}

TEST_CASE("demo-underflow shows the collapse and the bitwise recovery") {
  const std::string out = scratch_dir() + "/demo";
  CmdResult r = run_cli("demo-underflow --seed 1 --out " + out);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("bitwise equal to FP32") != std::string::npos);
  const RunReport rep = load_report(out + "/report.json");
  CHECK(rep.config.at("score_fp8") == "0");
  CHECK(rep.config.at("score_fp32") == rep.config.at("score_elevated"));
}

TEST_CASE("ablate-scheduler writes validated traces and predicted times") {
  const std::string task = task_dir("standard", 1);
  const std::string out = scratch_dir() + "/sched";
  CmdResult r = run_cli("ablate-scheduler --task " + task +
                        " --transfer-ms 5 --low-ms 8 --high-ms 2 --out " + out);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("bitwise identical") != std::string::npos);
  const RunReport rep = load_report(out + "/report.json");
  CHECK(rep.config.at("predicted_ms_none") == "15");
  CHECK(rep.config.at("predicted_ms_load") == "10");
  CHECK(rep.config.at("predicted_ms_compute") == "13");
  CHECK(rep.config.at("predicted_ms_both") == "8");
  for (const char* name : {"none", "load", "compute", "both"})
    CHECK(std::filesystem::exists(out + "/trace_" + std::string(name) + ".csv"));

  const std::string one = scratch_dir() + "/sched_one";
  REQUIRE(run_cli("ablate-scheduler --task " + task + " --streams both --out " + one)
              .code == 0);
  CHECK(std::filesystem::exists(one + "/trace_both.csv"));
  CHECK(!std::filesystem::exists(one + "/trace_none.csv"));
}

TEST_CASE("quant-sweep reports the critical-phase cliff on the underflow task") {
  const std::string task = task_dir("underflow", 1);
  const std::string out = scratch_dir() + "/quant";
  REQUIRE(run_cli("quant-sweep --task " + task + " --out " + out).code == 0);
  const RunReport rep = load_report(out + "/report.json");
  CHECK(rep.config.at("phase1_max_drop") == "0");
  CHECK(rep.config.at("phase2_max_drop") == "1");
  const std::string csv = slurp(out + "/quant_sweep.csv");
  CHECK(csv.rfind("phase,label,accuracy", 0) == 0);
  CHECK(line_count(csv) == 15);  // header + baseline + 3 heads + 10 chunks
}

TEST_CASE("ablate-precision emits the bit-width table") {
  const std::string out = scratch_dir() + "/prec";
  CmdResult r = run_cli("ablate-precision --preset carrier --seed 1 --suite 1 --out " + out);
  REQUIRE(r.code == 0);
  const RunReport rep = load_report(out + "/report.json");
  CHECK(rep.config.at("auc_16") == "1");
  CHECK(rep.config.at("auc_8") == "1");
  CHECK(rep.config.at("auc_4") == "0.5");
  CHECK(rep.config.at("accuracy_4") == "0");
  const std::string csv = slurp(out + "/precision.csv");
  CHECK(csv.rfind("bits,auc,accuracy", 0) == 0);
  CHECK(line_count(csv) == 4);
}

TEST_CASE("worker cap from the environment still gives the same results") {
  const std::string task = task_dir("standard", 1);
  const std::string out = scratch_dir() + "/threads";
  const char* bin = std::getenv("CIRCUITQUANT_CLI");
  REQUIRE(bin != nullptr);
  const std::string cmd = "CIRCUITQUANT_THREADS=1 " + std::string(bin) + " sweep-roc --task " +
                          task + " --method acdc --deterministic-report --out " + out +
                          " > /dev/null 2>&1";
  REQUIRE(std::system(cmd.c_str()) == 0);
  const RunReport rep = load_report(out + "/report.json");
  CHECK(rep.auc == 17.0 / 18.0);
}
