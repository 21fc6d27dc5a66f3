// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <fstream>
#include <sstream>

#include "dqa/cli.hpp"
#include "dqa/error.hpp"
#include "dqa/persistence.hpp"
#include "dqa/plot.hpp"
#include "support.hpp"

using namespace dqa;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  args.insert(args.begin(), "dqa");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path write_cfg(const fs::path& dir, const std::string& name, const std::string& body) {
  const auto p = dir / (name + ".cfg");
  std::ofstream(p) << "name = " << name << "\n" << body;
  return p;
}

std::string value_line(const std::string& text, const std::string& key) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (line.rfind(key + " = ", 0) == 0) return line.substr(key.size() + 3);
  return "";
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("train, eval, export and plot a DQA run") {
    const auto dir = dqa::test::scratch_dir("cli_dqa");
    const auto cfg = write_cfg(dir, "dqa", "train.method = dqa\n");
    const auto run = dir / "run";
    const auto t = cli({"train", "--config", cfg.string(), "--out", run.string()});
    REQUIRE_MESSAGE(t.code == 0, t.err);
    for (const char* f : {"metrics.csv", "quantizers.csv", "checkpoint.bin", "summary.txt", "effective.cfg",
                          "invocation.txt"})
      CHECK_MESSAGE(fs::exists(run / f), f);
    const auto summary = read_summary(run / "summary.txt");
    CHECK(summary.at("layer.0.bits") == "2");
    CHECK(summary.at("layer.1.bits") == "2");
    CHECK(summary.at("status") == "finished");
    CHECK(slurp(run / "invocation.txt").find("train --config") != std::string::npos);
    CHECK(parse_config(run / "effective.cfg") == parse_config(cfg));

    const auto e = cli({"eval", "--checkpoint", (run / "checkpoint.bin").string()});
    REQUIRE(e.code == 0);
    CHECK(value_line(e.out, "val_acc") == summary.at("final_val_acc"));
    CHECK(value_line(e.out, "train_acc") == summary.at("final_train_acc"));

    const auto x = cli({"export", "--checkpoint", (run / "checkpoint.bin").string(), "--out",
                        (run / "model.bin").string()});
    REQUIRE(x.code == 0);
    CHECK(x.out.find("layer.0.bits = 2") != std::string::npos);
    const auto em = cli({"eval", "--model", (run / "model.bin").string()});
    REQUIRE(em.code == 0);
    CHECK(std::abs(std::stod(value_line(em.out, "val_acc")) - std::stod(summary.at("final_val_acc"))) <= 0.005);

    const auto p = cli({"plot", "--metrics", (run / "metrics.csv").string(), "--out", (run / "plot.svg").string(),
                        "--layer", "1"});
    REQUIRE_MESSAGE(p.code == 0, p.err);
    CHECK(slurp(run / "plot.svg").rfind("<?xml", 0) == 0);
    CHECK(slurp(run / "plot.svg").find("version=\"1.1\"") != std::string::npos);
    REQUIRE(fs::exists(run / "plot.csv"));

    // Machine-checkable companion data.
    const auto table = read_metrics_csv(run / "metrics.csv");
    const auto plot = build_plot(table, read_calibration_csv(run / "quantizers.csv"), 1);
    CHECK(std::abs(plot.curves[0].value.back() - 1.0) <= 0.01);
    CHECK(count_levels(plot.staircases.back().q) <= 4);
    CHECK(plot.staircases.front().epoch == 0);

    const auto bad_layer = cli({"plot", "--metrics", (run / "metrics.csv").string(), "--out",
                                (dir / "x.svg").string(), "--layer", "7"});
    CHECK(bad_layer.code == kExitUsage);
    CHECK(bad_layer.err.find("out of range") != std::string::npos);
  }

  TEST_CASE("full-precision runs have no attention columns") {
    const auto dir = dqa::test::scratch_dir("cli_fp");
    const auto cfg = write_cfg(dir, "fp", "train.method = dqa\ntrain.epochs = 3\n");
    const auto run = dir / "run";
    REQUIRE(cli({"train", "--config", cfg.string(), "--out", run.string(), "--method", "fp"}).code == 0);
    std::ifstream in(run / "metrics.csv");
    std::string header;
    std::getline(in, header);
    CHECK(header == "epoch,batch,loss,reg,train_acc,val_acc,temperature,layer,argmax_k,omega");
    const auto p = cli({"plot", "--metrics", (run / "metrics.csv").string(), "--out", (dir / "p.svg").string()});
    CHECK(p.code == kExitUsage);
    CHECK(p.err.find("attention") != std::string::npos);

    const auto x = cli({"export", "--checkpoint", (run / "checkpoint.bin").string(), "--out",
                        (run / "model.bin").string()});
    CHECK(x.code == 0);
    CHECK(x.err.find("warning") != std::string::npos);
    CHECK(fs::exists(run / "model.bin"));
  }

  TEST_CASE("exit codes") {
    const auto dir = dqa::test::scratch_dir("cli_codes");
    const auto bad = write_cfg(dir, "bad", "train.epochz = 3\n");
    const auto r = cli({"train", "--config", bad.string(), "--out", (dir / "r").string()});
    CHECK(r.code == kExitConfig);
    CHECK(r.err.find("train.epochz") != std::string::npos);
    CHECK(cli({"train", "--config", bad.string(), "--method", "nope"}).code == kExitConfig);

    const auto nan = write_cfg(dir, "nan", "train.method = fp\ntrain.lr = 1e300\ntrain.epochs = 2\n");
    const auto n = cli({"train", "--config", nan.string(), "--out", (dir / "n").string()});
    CHECK(n.code == kExitNan);
    CHECK(read_summary(dir / "n" / "summary.txt").at("status") == "nan_abort");

    std::ofstream(dir / "junk.bin") << "not a checkpoint";
    CHECK(cli({"eval", "--checkpoint", (dir / "junk.bin").string()}).code == kExitLoad);
    CHECK(cli({"export", "--checkpoint", (dir / "junk.bin").string(), "--out", (dir / "m.bin").string()}).code ==
          kExitLoad);
    CHECK(cli({}).code == kExitUsage);
    CHECK(cli({"frobnicate"}).code == kExitUsage);
  }

  TEST_CASE("interrupted run resumes to the same metrics") {
    const auto dir = dqa::test::scratch_dir("cli_resume");
    auto cfg = parse_config_text("train.epochs = 8\nmodel.hidden = 8\n");
    run_experiment(cfg, dir / "straight");
    RunOptions stop;
    stop.stop_after_epoch = 3;
    const auto partial = run_experiment(cfg, dir / "resumed", stop);
    CHECK_FALSE(partial.finished);
    CHECK(read_summary(dir / "resumed" / "summary.txt").at("status") == "interrupted");
    RunOptions resume;
    resume.resume = true;
    run_experiment(cfg, dir / "resumed", resume);
    CHECK(slurp(dir / "resumed" / "metrics.csv") == slurp(dir / "straight" / "metrics.csv"));
    CHECK(slurp(dir / "resumed" / "quantizers.csv") == slurp(dir / "straight" / "quantizers.csv"));
    CHECK(slurp(dir / "resumed" / "summary.txt") == slurp(dir / "straight" / "summary.txt"));

    cfg.train.lambda = 1;
    CHECK_THROWS_AS(run_experiment(cfg, dir / "resumed", resume), ConfigError);
  }

  TEST_CASE("compare") {
    const auto dir = dqa::test::scratch_dir("cli_compare");
    const std::string common = "train.epochs = 4\ndata.n = 200\nmodel.hidden = 8\n";
    const auto fp = write_cfg(dir, "fp", common + "train.method = fp\n");
    const auto fixed = write_cfg(dir, "fixed", common + "train.method = fixed\n");
    const auto dqa = write_cfg(dir, "dqa", common + "train.method = dqa\n");
    const auto wide = write_cfg(dir, "wide", "train.epochs = 4\ndata.n = 200\nmodel.hidden = 9\n");
    const auto out = dir / "out";

    const auto c = cli({"compare", "--configs", fp.string(), fixed.string(), dqa.string(), "--out", out.string(),
                        "--seeds", "2"});
    REQUIRE_MESSAGE(c.code == 0, c.err);
    const auto csv = slurp(out / "compare.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
    CHECK(csv.find("fixed,fixed,minmax:2,2,") != std::string::npos);
    CHECK(fs::exists(out / "dqa" / "seed_2" / "metrics.csv"));
    CHECK(slurp(out / "compare.txt").find("+/-") != std::string::npos);

    CHECK(cli({"compare", "--configs", fp.string(), "--out", out.string()}).code == kExitUsage);
    const auto mismatch = cli({"compare", "--configs", fp.string(), wide.string(), "--out", out.string()});
    CHECK(mismatch.code == kExitUsage);
    CHECK(mismatch.err.find("topology") != std::string::npos);

    // Population standard deviation.
    const auto rows = std::vector<CompareRow>{{"a", "fp", "-", {0.9, 1.0}, 0.95, 0.05}};
    CHECK(compare_csv(rows).find("a,fp,-,2,0.94999999999999996,0.050000000000000003,0.90000000000000002;1\n") != std::string::npos);
  }

  TEST_CASE("staircase levels") {
    CalibrationRecord r;
    r.spec = QuantizerSpec::minmax(2);
    r.spec.calibration = Calibration{-1, 1, 0, 0};
    r.weight = 1.0;
    r.w_min = -1;
    r.w_max = 1;
    const std::vector<CalibrationRecord> one{r};
    const auto s = effective_staircase(one, 401);
    CHECK(count_levels(s.q) == 4);
    auto r8 = r;
    r8.spec = QuantizerSpec::minmax(8);
    r8.spec.calibration = r.spec.calibration;
    r.weight = 0.5;
    r8.weight = 0.5;
    const std::vector<CalibrationRecord> mix{r, r8};
    CHECK(count_levels(effective_staircase(mix, 4001).q) > 4);
    CHECK(count_levels(std::vector<double>{1.0, 1.0 + 1e-12, 2.0}) == 2);
  }
}
