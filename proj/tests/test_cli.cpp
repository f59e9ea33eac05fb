#include <catch2/catch_amalgamated.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "noduleid/phantom.hpp"

namespace fs = std::filesystem;

namespace {

std::string cli_path() {
  const char* p = std::getenv("NODULEID_CLI");
  REQUIRE(p != nullptr);
  return p;
}

int run(const std::string& args) {
  const std::string cmd = cli_path() + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

const fs::path kRoot = fs::temp_directory_path() / "noduleid_cli_tests";

}  // namespace

TEST_CASE("phantom subcommand generates a reproducible dataset") {
  fs::remove_all(kRoot);
  const fs::path d1 = kRoot / "d1", d2 = kRoot / "d2";
  REQUIRE(run("phantom --cases 2 --seed 7 --dims 64 --distractors 1 --out " + d1.string()) == 0);
  REQUIRE(fs::exists(d1 / "manifest.json"));
  REQUIRE(fs::exists(d1 / "annotations_t1.csv"));
  REQUIRE(fs::exists(d1 / "annotations_t2.csv"));
  REQUIRE(fs::exists(d1 / "growth_truth.csv"));
  REQUIRE(fs::exists(d1 / "resolved_config.json"));
  const auto m = noduleid::phantom::load_manifest(d1 / "manifest.json");
  REQUIRE(m.cases.size() == 2);
  for (const auto& c : m.cases) {
    REQUIRE(fs::exists(d1 / c.volume_t1));
    REQUIRE(fs::exists(d1 / c.volume_t2));
  }

  SECTION("re-running with the same arguments reproduces identical files") {
    REQUIRE(run("phantom --cases 2 --seed 7 --dims 64 --distractors 1 --out " + d2.string()) ==
            0);
    REQUIRE(slurp(d1 / "annotations_t1.csv") == slurp(d2 / "annotations_t1.csv"));
    REQUIRE(slurp(d1 / "growth_truth.csv") == slurp(d2 / "growth_truth.csv"));
    REQUIRE(slurp(d1 / m.cases[0].volume_t1) == slurp(d2 / m.cases[0].volume_t1));
  }
}

TEST_CASE("missing required option is a usage error (exit 2)") {
  REQUIRE(run("phantom --cases 2") == 2);
  REQUIRE(run("") == 2);          // a subcommand is required
  REQUIRE(run("--help") == 0);
}

TEST_CASE("unknown siamese configuration lists the valid names") {
  const fs::path d = kRoot / "d_cfg";
  run("phantom --cases 2 --seed 3 --dims 64 --distractors 1 --out " + d.string());
  const std::string cmd = cli_path() + " train-siamese --config-name XXXX --data " + d.string() +
                          " --out " + (kRoot / "s").string() + " 2> " +
                          (kRoot / "err.txt").string();
  const int status = std::system(cmd.c_str());
  REQUIRE(WEXITSTATUS(status) == 2);
  const std::string err = slurp(kRoot / "err.txt");
  for (const char* name : {"FIBC", "UIBC", "FIFB", "UIFB", "FICB", "UICB", "FCMB", "UCMB"})
    REQUIRE(err.find(name) != std::string::npos);
}

TEST_CASE("config file supplies values and unknown keys are rejected") {
  fs::create_directories(kRoot);
  const fs::path good = kRoot / "good.json";
  std::ofstream(good) << R"({"cases": 1, "seed": 5, "dims": 64, "distractors": 1, "out": ")"
                      << (kRoot / "from_cfg").string() << R"("})";
  REQUIRE(run("phantom --config " + good.string()) == 0);
  REQUIRE(fs::exists(kRoot / "from_cfg" / "manifest.json"));

  SECTION("flags override the config file") {
    REQUIRE(run("phantom --config " + good.string() + " --out " + (kRoot / "flag_wins").string()) ==
            0);
    REQUIRE(fs::exists(kRoot / "flag_wins" / "manifest.json"));
  }

  SECTION("unknown keys are rejected") {
    const fs::path bad = kRoot / "bad.json";
    std::ofstream(bad) << R"({"cases": 1, "bogus_key": 3})";
    REQUIRE(run("phantom --config " + bad.string() + " --out " + (kRoot / "x").string()) == 2);
  }
}

TEST_CASE("growth-report consumes prediction and truth CSVs") {
  fs::create_directories(kRoot);
  const fs::path pred = kRoot / "pred.csv", truth = kRoot / "truth.csv";
  std::ofstream(pred) << "series_id,diameter_t1,diameter_t2,growth_mm\n"
                         "c0,6.0,8.0,2.0\nc1,7.0,6.5,-0.5\nc2,5.0,7.5,2.5\n";
  std::ofstream(truth) << "series_id,diameter_t1,diameter_t2,growth_mm\n"
                          "c0,6.1,8.2,2.1\nc1,7.2,6.4,-0.8\nc2,5.2,7.3,2.1\n";
  const fs::path out = kRoot / "growth_out";
  REQUIRE(run("growth-report --pred " + pred.string() + " --truth " + truth.string() + " --out " +
              out.string()) == 0);
  REQUIRE(fs::exists(out / "growth_report.csv"));
  REQUIRE(fs::exists(out / "growth_summary.json"));
  REQUIRE(fs::exists(out / "bland_altman.svg"));
  nlohmann::json j;
  std::ifstream(out / "growth_summary.json") >> j;
  REQUIRE(j["confusion"]["tp"].get<int>() == 2);
  REQUIRE(j["confusion"]["tn"].get<int>() == 1);
}

TEST_CASE("eval-froc consumes candidate and annotation CSVs") {
  fs::create_directories(kRoot);
  const fs::path cands = kRoot / "cands.csv", anns = kRoot / "anns.csv";
  std::ofstream(cands) << "series_id,coord_x,coord_y,coord_z,diameter_mm,probability\n"
                          "s0,10,10,10,6,0.9\ns0,40,40,40,5,0.3\ns1,20,20,20,7,0.8\n";
  std::ofstream(anns) << "series_id,coord_x,coord_y,coord_z,diameter_mm,time_point\n"
                         "s0,10,10,10,8,T1\ns1,20,20,20,8,T1\n";
  const fs::path out = kRoot / "froc_out";
  REQUIRE(run("eval-froc --candidates " + cands.string() + " --annotations " + anns.string() +
              " --out " + out.string() + " --bootstrap 200 --seed 3") == 0);
  REQUIRE(fs::exists(out / "froc.csv"));
  REQUIRE(fs::exists(out / "froc.svg"));
  const std::string csv = slurp(out / "froc.csv");
  REQUIRE(csv.find("fp_rate,mean,lower,upper") == 0);
}
