#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fixtures.hpp"
#include "protoloop/cli.hpp"
#include "protoloop/phantom.hpp"

#include <fstream>
#include <map>
#include <sstream>

using namespace protoloop;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome call(std::vector<std::string> args) {
  args.insert(args.begin(), "protoloop");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path small_dataset(const std::string& name) {
  const fs::path dir = fixture::scratch(name);
  PhantomSpec s = calibrated_phantom_spec();
  s.num_volumes = 6;
  s.num_test = 2;
  s.shape = {16, 16, 16};
  s.classes[0].radii = {5, 4, 4};
  s.center_jitter = 1.0;
  std::ofstream(dir / "spec.json") << phantom_spec_to_json(s);
  REQUIRE(call({"synth", "--spec", (dir / "spec.json").string(), "--out", (dir / "data").string()}).code == 0);
  return dir;
}

std::vector<std::string> run_args(const fs::path& dir, const std::string& out) {
  return {"run",    "--manifest", (dir / "data" / "manifest.json").string(),
          "--out",  (dir / out).string(),
          "--rounds", "2", "--iters", "150", "--patch", "4", "--q-unc", "0.6", "--k", "2"};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), {});
}

}  // namespace

TEST_CASE("argument errors") {
  CHECK(call({}).code == 1);
  CHECK(call({"frobnicate"}).code == 1);
  CHECK(call({"run", "--manifest", "m.json", "--out", "o", "--rounds", "0"}).code == 1);
  CHECK(call({"run", "--out", "o"}).code == 1);
  const Outcome missing = call({"run", "--manifest", "/nonexistent/m.json", "--out", "/tmp/protoloop_never"});
  CHECK(missing.code == 2);
  CHECK(!missing.err.empty());
}

TEST_CASE("synth refuses to overwrite") {
  const fs::path dir = small_dataset("cli_synth");
  CHECK(call({"synth", "--spec", (dir / "spec.json").string(), "--out", (dir / "data").string()}).code == 1);
  CHECK(call({"synth", "--spec", (dir / "spec.json").string(), "--out", (dir / "data").string(), "--force"}).code ==
        0);
}

TEST_CASE("eval on identical directories") {
  const fs::path dir = small_dataset("cli_eval");
  const Outcome r = call({"eval", "--pred", (dir / "data" / "truth").string(), "--truth",
                          (dir / "data" / "truth").string(), "--json", (dir / "eval.json").string()});
  CHECK(r.code == 0);
  CHECK(r.out.find("100.00 ± 0.00") != std::string::npos);
  CHECK(fs::exists(dir / "eval.json"));
}

// Both arms are produced once and shared by the cases below.
const fs::path& ablation_runs() {
  static const fs::path dir = [] {
    const fs::path d = small_dataset("cli_run");
    auto with = run_args(d, "refined");
    REQUIRE(call(with).code == 0);
    auto without = run_args(d, "raw");
    without.push_back("--no-refine");
    REQUIRE(call(without).code == 0);
    return d;
  }();
  return dir;
}

TEST_CASE("ablation contract") {
  const fs::path& dir = ablation_runs();
  const DatasetManifest m = load_manifest(dir / "data" / "manifest.json");
  bool later_differs = false;
  for (const auto* v : m.unlabeled()) {
    const std::string f0 = v->id + ".round0.label";
    CHECK(slurp(dir / "refined" / "round_0" / f0) == slurp(dir / "raw" / "round_0" / f0));
    const std::string f2 = v->id + ".round2.label";
    later_differs |= slurp(dir / "refined" / "round_2" / f2) != slurp(dir / "raw" / "round_2" / f2);
  }
  CHECK(later_differs);
  CHECK(fs::exists(dir / "refined" / "report.txt"));
}

TEST_CASE("round commands") {
  const fs::path& dir = ablation_runs();
  const DatasetManifest m = load_manifest(dir / "data" / "manifest.json");
  SUBCASE("round re-run needs --force and reproduces the labels") {
    const std::string prev = (dir / "refined" / "round_0").string();
    CHECK(call({"round", "--r", "1", "--prev", prev}).code == 1);
    std::map<std::string, std::string> before;
    for (const auto* v : m.unlabeled()) before[v->id] = slurp(dir / "refined" / "round_1" / (v->id + ".round1.label"));
    CHECK(call({"round", "--r", "1", "--prev", prev, "--force"}).code == 0);
    for (const auto* v : m.unlabeled())
      CHECK(slurp(dir / "refined" / "round_1" / (v->id + ".round1.label")) == before[v->id]);
    CHECK(call({"round", "--r", "2", "--prev", prev, "--force"}).code == 1);
  }
  SUBCASE("refine and report") {
    CHECK(call({"refine", "--round", (dir / "refined" / "round_1").string()}).code == 1);
    CHECK(call({"refine", "--round", (dir / "refined" / "round_1").string(), "--force"}).code == 0);
    const Outcome rep = call({"report", "--run", (dir / "refined").string(), "--plot"});
    CHECK(rep.code == 0);
    CHECK(fs::exists(dir / "refined" / "curves.csv"));
    CHECK(fs::exists(dir / "refined" / "curves.svg"));
    CHECK(call({"report", "--run", (dir / "refined").string()}).code == 1);
  }
  SUBCASE("eval scores a round directory") {
    const Outcome r = call({"eval", "--pred", (dir / "refined" / "round_2").string(), "--truth",
                            (dir / "data" / "truth").string()});
    CHECK(r.code == 0);
    CHECK(r.out.find("round_2") != std::string::npos);
  }
}

TEST_CASE("encode writes feature grids once") {
  const fs::path dir = small_dataset("cli_encode");
  const std::vector<std::string> args{"encode", "--manifest", (dir / "data" / "manifest.json").string(), "--out",
                                      (dir / "enc").string(), "--patch", "4"};
  CHECK(call(args).code == 0);
  CHECK(fs::exists(dir / "enc" / "features" / "vol000.feat"));
  CHECK(call(args).code == 1);
}
