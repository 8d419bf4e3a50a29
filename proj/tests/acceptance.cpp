// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

#include "fixtures.hpp"
#include "oracles.hpp"
#include "protoloop/phantom.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

using namespace protoloop;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances and budgets.
constexpr int kRound0Instances = 50;
constexpr double kRound0Seconds = 10.0;
constexpr int kRefinePools = 50;
constexpr double kRefineSeconds = 10.0;
constexpr double kEntropyUniformTol = 1e-6;
constexpr double kEntropyOneHotTol = 1e-12;
constexpr int kGradientConfigs = 20;
constexpr double kGradientRelTol = 1e-4;
constexpr double kGradientSeconds = 30.0;
constexpr long double kFiniteDifferenceStep = 1e-7L;
constexpr int kMaskPairs = 200;
constexpr double kMetricTol = 1e-9;
constexpr double kPhantomSeconds = 300.0;
constexpr double kSaturationSlack = 0.01;
constexpr double kAblationMargin = 0.02;
constexpr double kRound0DiceLo = 0.5;
constexpr double kRound0DiceHi = 0.8;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
  std::cout << (ok ? "PASS  " : "FAIL  ") << name << "  (" << detail << ")" << std::endl;
  failures += !ok;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), f, a, b, c, d);
  return buf;
}

void round0_oracle() {
  const auto t0 = Clock::now();
  int exact = 0;
  for (int n = 0; n < kRound0Instances; ++n) {
    const auto inst = fixture::round0_instance(static_cast<std::uint64_t>(n));
    const PseudoLabel pl = initial_pseudo_label(inst.query, compute_prototypes(inst.tmpl, inst.tmpl_labels),
                                                inst.volume);
    exact += pl.labels.data() ==
             oracle::initial_labels(inst.tmpl, inst.tmpl_labels, inst.query, inst.volume, inst.classes);
  }
  const double s = seconds_since(t0);
  report(exact == kRound0Instances && s < kRound0Seconds, "round-0 propagation matches brute force",
         fmt("%.0f/%.0f bit-identical, %.2f s", exact, kRound0Instances, s));
}

void refine_oracle() {
  const auto t0 = Clock::now();
  int exact = 0;
  for (int n = 0; n < kRefinePools; ++n) {
    const auto pool = fixture::refine_pool(static_cast<std::uint64_t>(n));
    const RefineResult got = refine_all(pool.raw, pool.partition, pool.globals, pool.k);
    std::map<std::string, std::vector<double>> g;
    for (const auto& [id, f] : pool.globals) g[id] = {f.vector.data(), f.vector.data() + f.vector.size()};
    std::map<std::string, std::vector<std::uint8_t>> raw;
    for (const auto& [id, l] : pool.raw) raw[id] = l.data();
    const auto want = oracle::refine(g, raw, pool.partition.certain, pool.partition.uncertain, pool.k, pool.classes);
    bool same = got.labels.size() == want.size();
    for (const auto& [id, l] : got.labels) same = same && want.count(id) && want.at(id) == l.data();
    exact += same;
  }
  const double s = seconds_since(t0);
  report(exact == kRefinePools && s < kRefineSeconds, "refinement matches brute-force voting",
         fmt("%.0f/%.0f exact, %.2f s", exact, kRefinePools, s));
}

void entropy_analytics() {
  const ProbVolume uniform({2, 2, 2}, Eigen::MatrixXd::Constant(2, 8, 0.5));
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(2, 8);
  onehot.row(1).setOnes();
  const double u = sample_uncertainty(uniform).value;
  const double o = sample_uncertainty(ProbVolume({2, 2, 2}, onehot)).value;
  report(std::abs(u - std::log(2.0)) < kEntropyUniformTol && std::abs(o) < kEntropyOneHotTol,
         "entropy of uniform and one-hot volumes", fmt("uniform %.9f, one-hot %.1e", u, o));
}

void gradient_check() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (int n = 0; n < kGradientConfigs; ++n) {
    auto inst = fixture::loss_instance(static_cast<std::uint64_t>(n));
    const auto terms = loss_and_grad(inst.params, inst.teacher, inst.batch, inst.alpha, inst.lambda);
    auto probe = [&](long double& x, long double analytic) {
      const long double keep = x;
      x = keep + kFiniteDifferenceStep;
      const long double up = oracle::loss(inst.params, inst.teacher, inst.batch, inst.alpha, inst.lambda);
      x = keep - kFiniteDifferenceStep;
      const long double down = oracle::loss(inst.params, inst.teacher, inst.batch, inst.alpha, inst.lambda);
      x = keep;
      const long double fd = (up - down) / (2 * kFiniteDifferenceStep);
      const long double scale = std::max({std::abs(fd), std::abs(analytic), 1e-6L});
      worst = std::max(worst, static_cast<double>(std::abs(fd - analytic) / scale));
    };
    for (Eigen::Index i = 0; i < inst.params.weight.size(); ++i)
      probe(inst.params.weight.data()[i], terms.grad.weight.data()[i]);
    for (Eigen::Index i = 0; i < inst.params.bias.size(); ++i) probe(inst.params.bias[i], terms.grad.bias[i]);
  }
  const double s = seconds_since(t0);
  report(worst < kGradientRelTol && s < kGradientSeconds, "analytic gradient vs central differences",
         fmt("max rel err %.2e over %.0f configs, %.2f s", worst, kGradientConfigs, s));
}

void metric_oracle() {
  double worst = 0.0, identity = 0.0;
  for (int n = 0; n < kMaskPairs; ++n) {
    const auto [pred, ref] = fixture::mask_pair(static_cast<std::uint64_t>(n));
    const MetricReport got = evaluate(pred, ref);
    const oracle::Metrics want = oracle::binary(pred.data(), ref.data(), pred.shape());
    for (double e : {got.dice - want.dice, got.jaccard - want.jaccard, got.hd95 - want.hd95, got.asd - want.asd})
      worst = std::max(worst, std::abs(e));
    if (got.degenerate != want.degenerate) worst = std::max(worst, 1.0);
    identity = std::max(identity, std::abs(got.dice - 2 * got.jaccard / (1 + got.jaccard)));
  }
  report(worst < kMetricTol && identity < kMetricTol, "metrics match the all-pairs oracle",
         fmt("%.0f pairs, max err %.1e, |D - 2J/(1+J)| %.1e", kMaskPairs, worst, identity));
}

// ---------------------------------------------------------------------------
// Phantom runs

struct RunOutcome {
  std::vector<RoundState> states;
  std::uint64_t later_encodes = 0;
  double seconds = 0.0;
};

RunOutcome run_phantom(const fs::path& data, const fs::path& out, bool refine) {
  PipelineConfig c;
  c.manifest = data / "manifest.json";
  c.output = out;
  c.rounds = 3;
  c.refine = refine;
  c.phantom_mode = true;
  c.threads = 1;
  fs::remove_all(out);
  const auto t0 = Clock::now();
  Pipeline p(c);
  RunOutcome o;
  o.states.push_back(p.run_round0());
  const auto after_round0 = encoder_invocations();
  for (int r = 1; r <= c.rounds; ++r) o.states.push_back(p.run_round(r, o.states.back()));
  o.later_encodes = encoder_invocations() - after_round0;
  p.write_report(o.states);
  o.seconds = seconds_since(t0);
  return o;
}

bool same_label_files(const fs::path& a, const fs::path& b, int rounds, std::size_t& compared) {
  for (int r = 0; r <= rounds; ++r) {
    const fs::path da = a / ("round_" + std::to_string(r)), db = b / ("round_" + std::to_string(r));
    for (const auto& e : fs::directory_iterator(da)) {
      if (e.path().extension() != ".label") continue;
      std::ifstream fa(e.path(), std::ios::binary), fb(db / e.path().filename(), std::ios::binary);
      if (!fb) return false;
      const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
      if (sa != sb) return false;
      ++compared;
    }
  }
  return compared > 0;
}

void phantom_criteria() {
  const fs::path root = fs::temp_directory_path() / "protoloop_acceptance";
  fs::remove_all(root);
  generate(calibrated_phantom_spec(), root / "data");

  const RunOutcome refined = run_phantom(root / "data", root / "refined", true);
  std::vector<double> q;
  for (const auto& s : refined.states) q.push_back(s.pseudo_quality.value_or(-1.0));

  report(q[0] >= kRound0DiceLo && q[0] <= kRound0DiceHi, "phantom fixture calibration",
         fmt("round-0 pseudo Dice %.4f, target [%.1f, %.1f]", q[0], kRound0DiceLo, kRound0DiceHi));
  report(q[1] > q[0] && q[2] >= q[1] - kSaturationSlack && refined.seconds < kPhantomSeconds,
         "pseudo-label Dice rises then saturates",
         fmt("R0 %.4f, R1 %.4f, R2 %.4f, R3 %.4f", q[0], q[1], q[2], q[3]) +
             fmt(", %.1f s", refined.seconds));
  report(refined.later_encodes == 0, "no encoder calls after round 0",
         fmt("%.0f calls in rounds 1-3", static_cast<double>(refined.later_encodes)));

  const RunOutcome raw = run_phantom(root / "data", root / "no_refine", false);
  const double with = refined.states.back().test_metrics->dice.mean;
  const double without = raw.states.back().test_metrics->dice.mean;
  report(with - without >= kAblationMargin, "disabling refinement costs at least 0.02 test Dice",
         fmt("refined %.4f, no-refine %.4f, gap %+.4f", with, without, with - without));

  const RunOutcome again = run_phantom(root / "data", root / "refined_again", true);
  std::size_t compared = 0;
  const bool same = same_label_files(root / "refined", root / "refined_again", 3, compared);
  report(same, "identical seeds give bit-identical label files",
         fmt("%.0f files compared over 4 rounds", static_cast<double>(compared)));
  (void)again;
}

}  // namespace

int main() {
  const std::vector<std::function<void()>> criteria{round0_oracle, refine_oracle, entropy_analytics,
                                                    gradient_check, metric_oracle, phantom_criteria};
  for (const auto& c : criteria) {
    try {
      c();
    } catch (const std::exception& e) {
      report(false, "criterion raised", e.what());
    }
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
