#include "protoloop/cli.hpp"

#include "protoloop/parallel.hpp"
#include "protoloop/phantom.hpp"
#include "protoloop/pipeline.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <fstream>
#include <iostream>
#include <sstream>

namespace protoloop {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunOptions {
  std::string manifest;
  std::string out;
  std::string validation_manifest;
  int rounds = 3;
  int patch = 8;
  bool no_position = false;
  bool no_refine = false;
  int k = kDefaultNeighbors;
  double q_unc = 0.9;
  std::int64_t iters = 3000;
  std::uint64_t seed = 0;
  bool phantom = false;
};

void add_pipeline_options(CLI::App* cmd, RunOptions& o, bool with_rounds) {
  cmd->add_option("--manifest", o.manifest, "Dataset manifest (JSON)")->required();
  cmd->add_option("--out", o.out, "Run output directory")->required();
  cmd->add_option("--validation-manifest", o.validation_manifest, "Labeled volumes for model selection");
  cmd->add_option("--patch", o.patch, "Encoder patch size");
  cmd->add_flag("--no-position", o.no_position, "Drop the encoder position channels");
  cmd->add_option("--k", o.k, "Neighbours for refinement");
  cmd->add_option("--q-unc", o.q_unc, "Uncertainty quantile");
  cmd->add_option("--iters", o.iters, "Training iterations per round");
  cmd->add_option("--seed", o.seed, "Random seed");
  cmd->add_flag("--phantom", o.phantom, "Track pseudo-label quality against ground truth");
  if (with_rounds) {
    cmd->add_option("--rounds", o.rounds, "Rounds after round 0");
    cmd->add_flag("--no-refine", o.no_refine, "Skip uncertainty-guided refinement");
  }
}

PipelineConfig make_config(const RunOptions& o, int threads) {
  PipelineConfig c;
  c.manifest = o.manifest;
  c.output = o.out;
  c.rounds = o.rounds;
  c.encoder.patch_size = o.patch;
  c.encoder.include_position = !o.no_position;
  c.k = o.k;
  c.q_unc = o.q_unc;
  c.train.iterations = o.iters;
  c.refine = !o.no_refine;
  c.seed = o.seed;
  c.threads = threads;
  if (!o.validation_manifest.empty()) c.validation_manifest = fs::path(o.validation_manifest);
  c.phantom_mode = o.phantom;
  if (!c.phantom_mode && fs::exists(c.manifest)) {
    // Ground truth for the whole pool turns quality tracking on.
    const DatasetManifest m = load_manifest(c.manifest);
    const auto pool = m.unlabeled();
    c.phantom_mode = !pool.empty() &&
                     std::all_of(pool.begin(), pool.end(), [](const VolumeEntry* e) { return e->truth.has_value(); });
  }
  validate(c);
  return c;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

PipelineConfig config_of_run(const fs::path& run_dir, int threads) {
  PipelineConfig c = pipeline_config_from_json(read_text(run_dir / "config.json"), run_dir);
  c.output = run_dir;
  c.threads = threads;
  return c;
}

/// Round directories are named round_<r>.
int round_of_dir(const fs::path& dir) {
  const std::string name = fs::path(dir).lexically_normal().filename().string();
  const std::string stem = name.empty() ? fs::path(dir).lexically_normal().parent_path().filename().string() : name;
  if (stem.rfind("round_", 0) != 0) throw ValidationError("not a round directory: " + dir.string());
  try {
    std::size_t used = 0;
    const int r = std::stoi(stem.substr(6), &used);
    if (used != stem.size() - 6 || r < 0) throw std::invalid_argument("round");
    return r;
  } catch (const std::logic_error&) {
    throw ValidationError("not a round directory: " + dir.string());
  }
}

fs::path run_dir_of(const fs::path& round_dir) {
  fs::path p = fs::absolute(round_dir).lexically_normal();
  if (p.filename().empty()) p = p.parent_path();
  return p.parent_path();
}

std::vector<RoundState> load_all_rounds(const Pipeline& p) {
  std::vector<RoundState> states;
  for (int r = 0; fs::exists(p.round_dir(r) / "state.json"); ++r) states.push_back(p.load_round(r));
  return states;
}

/// Maps case id (file name up to the first '.') to path for every label file
/// except intermediate .raw / .refined arrays.
std::map<std::string, fs::path> label_files(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ValidationError("not a directory: " + dir.string());
  std::map<std::string, fs::path> out;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".label") continue;
    const std::string name = entry.path().filename().string();
    if (name.find(".raw.") != std::string::npos || name.find(".refined.") != std::string::npos) continue;
    const std::string id = name.substr(0, name.find('.'));
    if (!out.emplace(id, entry.path()).second) throw ValidationError("duplicate case id '" + id + "' in " + dir.string());
  }
  return out;
}

int cmd_encode(const RunOptions& o, bool force, int threads, std::ostream& out) {
  EncoderParams params;
  params.patch_size = o.patch;
  params.include_position = !o.no_position;
  validate(params);
  const DatasetManifest m = load_manifest(o.manifest);
  const fs::path dir = fs::path(o.out) / "features";
  for (const auto& v : m.volumes) {
    const fs::path f = dir / (v.id + ".feat");
    if (fs::exists(f)) {
      if (!force) throw ValidationError("refusing to overwrite " + f.string() + " (use --force)");
      fs::remove(f);
    }
  }
  FeatureStore store(dir, params);
  store.prepare(m, true, threads);
  out << "encoded " << store.encoded() << " volumes, ingested " << store.external_loads() << " external grids into "
      << dir.string() << "\n";
  return 0;
}

int cmd_init(const RunOptions& o, bool force, int threads, std::ostream& out) {
  Pipeline p(make_config(o, threads));
  p.set_force(force);
  const RoundState s = p.run_round0();
  p.write_report({s});
  out << "round 0: " << s.pseudo_labels.size() << " pseudo-labels -> " << p.round_dir(0).string() << "\n";
  return 0;
}

int cmd_run(const RunOptions& o, bool force, int threads, std::ostream& out) {
  Pipeline p(make_config(o, threads));
  p.set_force(force);
  const auto states = p.run();
  out << read_text(p.config().output / "report.txt");
  return states.empty() ? 2 : 0;
}

int cmd_round(int r, const std::string& prev_dir, bool force, int threads, std::ostream& out) {
  if (r < 1) throw ValidationError("--r must be >= 1");
  if (round_of_dir(prev_dir) != r - 1) {
    throw ValidationError("round " + std::to_string(r) + " needs round_" + std::to_string(r - 1) + " as --prev");
  }
  Pipeline p(config_of_run(run_dir_of(prev_dir), threads));
  p.set_force(force);
  const RoundState prev = p.load_round(r - 1);
  p.run_round(r, prev);
  p.write_report(load_all_rounds(p));
  out << "round " << r << " -> " << p.round_dir(r).string() << "\n";
  return 0;
}

int cmd_refine(const std::string& round_dir, bool force, int threads, std::ostream& out) {
  const int r = round_of_dir(round_dir);
  if (!force) throw ValidationError("refine rewrites " + round_dir + " in place (use --force)");
  Pipeline p(config_of_run(run_dir_of(round_dir), threads));
  p.set_force(true);
  const RoundState s = p.rerun_refinement(r);
  p.write_report(load_all_rounds(p));
  out << "round " << r << ": refined " << s.refine_audit.size() << " uncertain volumes\n";
  return 0;
}

int cmd_eval(const std::string& pred_dir, const std::string& truth_dir, const std::string& json_path, bool force,
             int threads, std::ostream& out) {
  const auto preds = label_files(pred_dir);
  const auto truths = label_files(truth_dir);
  if (preds.empty()) throw ValidationError("no label files in " + pred_dir);
  std::vector<std::pair<std::string, fs::path>> pairs;
  for (const auto& [id, path] : preds) {
    auto it = truths.find(id);
    if (it == truths.end()) throw ValidationError("no ground truth for case '" + id + "'");
    pairs.emplace_back(id, path);
  }
  if (!json_path.empty() && fs::exists(json_path) && !force) {
    throw ValidationError("refusing to overwrite " + json_path + " (use --force)");
  }
  std::vector<CaseMetrics> cases(pairs.size());
  parallel_for(pairs.size(), threads, [&](std::size_t n) {
    const LabelVolume truth = load_labels(truths.at(pairs[n].first));
    const LabelVolume pred = load_labels(pairs[n].second, truth.num_classes());
    cases[n] = {pairs[n].first, evaluate(pred, truth)};
  });
  const MetricSummary summary = summarize(cases);
  std::string method = fs::path(pred_dir).lexically_normal().filename().string();
  if (method.empty()) method = fs::path(pred_dir).lexically_normal().parent_path().filename().string();
  out << format_metric_table({{method, summary}});

  if (!json_path.empty()) {
    json per_case = json::array();
    for (const auto& c : cases) {
      per_case.push_back({{"id", c.id},
                          {"dice", c.report.dice},
                          {"jaccard", c.report.jaccard},
                          {"hd95", c.report.hd95},
                          {"asd", c.report.asd},
                          {"degenerate", c.report.degenerate}});
    }
    auto ms = [](const MeanStd& m) { return json{{"mean", m.mean}, {"std", m.std}}; };
    const json doc = {{"cases", per_case},
                      {"summary",
                       {{"dice", ms(summary.dice)},
                        {"jaccard", ms(summary.jaccard)},
                        {"hd95", ms(summary.hd95)},
                        {"asd", ms(summary.asd)},
                        {"count", summary.cases}}}};
    write_text_atomic(json_path, doc.dump(2) + "\n");
  }
  return 0;
}

int cmd_report(const std::string& run_dir, bool plot, bool force, std::ostream& out) {
  const fs::path dir(run_dir);
  if (!fs::exists(dir / "report.json")) throw ValidationError("no report.json in " + run_dir);
  if (!force && (fs::exists(dir / "curves.csv") || (plot && fs::exists(dir / "curves.svg")))) {
    throw ValidationError("refusing to overwrite curves in " + run_dir + " (use --force)");
  }
  out << write_curves(dir, plot);
  return 0;
}

int cmd_synth(const std::string& spec_path, const std::string& out_dir, std::optional<std::uint64_t> seed, bool force,
              std::ostream& out) {
  PhantomSpec spec = spec_path.empty() ? calibrated_phantom_spec() : phantom_spec_from_json(read_text(spec_path));
  if (seed) spec.seed = *seed;
  validate(spec);
  if (fs::exists(fs::path(out_dir) / "manifest.json") && !force) {
    throw ValidationError("refusing to overwrite " + out_dir + " (use --force)");
  }
  const DatasetManifest m = generate(spec, out_dir);
  out << "wrote " << m.volumes.size() << " volumes to " << out_dir << "\n";
  return 0;
}

}  // namespace

int dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"protoloop: one-shot volumetric segmentation by prototype propagation and self-training"};
  app.require_subcommand(1);
  app.fallthrough();
  bool force = false;
  int threads = 0;
  app.add_flag("--force", force, "Overwrite existing outputs");
  app.add_option("--threads", threads, "Worker threads (default: PROTOLOOP_THREADS or 1)");

  RunOptions encode_opts, init_opts, run_opts;
  auto* encode = app.add_subcommand("encode", "Extract and cache feature grids");
  encode->add_option("--manifest", encode_opts.manifest, "Dataset manifest (JSON)")->required();
  encode->add_option("--out", encode_opts.out, "Run output directory")->required();
  encode->add_option("--patch", encode_opts.patch, "Encoder patch size");
  encode->add_flag("--no-position", encode_opts.no_position, "Drop the encoder position channels");

  auto* init = app.add_subcommand("init", "Round 0: prototype propagation");
  add_pipeline_options(init, init_opts, false);
  auto* run = app.add_subcommand("run", "Round 0 followed by rounds 1..R");
  add_pipeline_options(run, run_opts, true);

  int round_r = 0;
  std::string prev_dir;
  auto* round = app.add_subcommand("round", "Run one round from the previous round's state");
  round->add_option("--r", round_r, "Round to produce")->required();
  round->add_option("--prev", prev_dir, "Directory of round r-1")->required();

  std::string refine_dir;
  auto* refine = app.add_subcommand("refine", "Redo partition and refinement of a round");
  refine->add_option("--round", refine_dir, "Round directory")->required();

  std::string pred_dir, truth_dir, json_path;
  auto* eval = app.add_subcommand("eval", "Score label files against ground truth");
  eval->add_option("--pred", pred_dir, "Directory of predicted label files")->required();
  eval->add_option("--truth", truth_dir, "Directory of ground-truth label files")->required();
  eval->add_option("--json", json_path, "Write per-case and summary metrics as JSON");

  std::string report_dir;
  bool plot = false;
  auto* report = app.add_subcommand("report", "Per-round curves as CSV (and SVG)");
  report->add_option("--run", report_dir, "Run output directory")->required();
  report->add_flag("--plot", plot, "Also write curves.svg");

  std::string spec_path, synth_out;
  std::optional<std::uint64_t> synth_seed;
  auto* synth = app.add_subcommand("synth", "Generate a seeded phantom dataset");
  synth->add_option("--spec", spec_path, "Phantom spec JSON (default: the acceptance fixture)");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_seed, "Override the spec seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  }

  try {
    threads = resolve_threads(threads);
    if (*encode) return cmd_encode(encode_opts, force, threads, out);
    if (*init) return cmd_init(init_opts, force, threads, out);
    if (*run) return cmd_run(run_opts, force, threads, out);
    if (*round) return cmd_round(round_r, prev_dir, force, threads, out);
    if (*refine) return cmd_refine(refine_dir, force, threads, out);
    if (*eval) return cmd_eval(pred_dir, truth_dir, json_path, force, threads, out);
    if (*report) return cmd_report(report_dir, plot, force, out);
    if (*synth) return cmd_synth(spec_path, synth_out, synth_seed, force, out);
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

}  // namespace protoloop
