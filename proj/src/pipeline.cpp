#include "protoloop/pipeline.hpp"

#include "protoloop/parallel.hpp"

#include "json.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace protoloop {

namespace fs = std::filesystem;
using nlohmann::json;

int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("PROTOLOOP_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::string label_name(const std::string& id, int r, const char* kind = "") {
  return id + ".round" + std::to_string(r) + kind + ".label";
}

json mean_std_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}}; }

MeanStd mean_std_from(const json& j) { return {j.at("mean").get<double>(), j.at("std").get<double>()}; }

json summary_json(const MetricSummary& s) {
  return {{"dice", mean_std_json(s.dice)},
          {"jaccard", mean_std_json(s.jaccard)},
          {"hd95", mean_std_json(s.hd95)},
          {"asd", mean_std_json(s.asd)},
          {"cases", s.cases}};
}

MetricSummary summary_from(const json& j) {
  return {mean_std_from(j.at("dice")), mean_std_from(j.at("jaccard")), mean_std_from(j.at("hd95")),
          mean_std_from(j.at("asd")), j.at("cases").get<std::size_t>()};
}

double foreground_fraction(const LabelVolume& l) {
  std::int64_t fg = 0;
  for (auto v : l.data()) fg += v != 0;
  return static_cast<double>(fg) / static_cast<double>(l.shape().voxels());
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void validate(const PipelineConfig& c) {
  if (c.rounds < 1) throw ValidationError("rounds must be >= 1");
  if (c.k < 1) throw ValidationError("K must be >= 1");
  if (!(c.q_unc > 0.0 && c.q_unc <= 1.0)) throw ValidationError("q_unc must be in (0, 1]");
  if (c.stride <= 0) throw ValidationError("stride must be positive");
  require_valid(c.window, "window");
  if (c.output.empty()) throw ValidationError("output directory required");
  validate(c.encoder);
  validate(c.train);
}

std::string pipeline_config_to_json(const PipelineConfig& c) {
  const TrainConfig& t = c.train;
  json doc = {
      {"manifest", fs::absolute(c.manifest).lexically_normal().string()},
      {"output", fs::absolute(c.output).lexically_normal().string()},
      {"rounds", c.rounds},
      {"encoder",
       {{"patch_size", c.encoder.patch_size},
        {"include_position", c.encoder.include_position},
        {"position_weight", c.encoder.position_weight}}},
      {"train",
       {{"iterations", t.iterations},
        {"base_lr", t.base_lr},
        {"lr_power", t.lr_power},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"batch_voxels", t.batch_voxels},
        {"lambda_max", t.lambda_max},
        {"ramp_fraction", t.ramp_fraction},
        {"ema_decay", t.ema_decay},
        {"noise_sigma", t.noise_sigma},
        {"validation_interval", t.validation_interval}}},
      {"k", c.k},
      {"q_unc", c.q_unc},
      {"refine", c.refine},
      {"seed", c.seed},
      {"phantom_mode", c.phantom_mode},
      {"window", {c.window.d, c.window.h, c.window.w}},
      {"stride", c.stride},
  };
  if (c.validation_manifest) {
    doc["validation_manifest"] = fs::absolute(*c.validation_manifest).lexically_normal().string();
  }
  return doc.dump(2) + "\n";
}

PipelineConfig pipeline_config_from_json(const std::string& text, const fs::path& base) {
  PipelineConfig c;
  auto resolve = [&](const std::string& p) {
    fs::path q(p);
    return q.is_absolute() || base.empty() ? q : base / q;
  };
  try {
    const json doc = json::parse(text);
    c.manifest = resolve(doc.at("manifest").get<std::string>());
    c.output = resolve(doc.at("output").get<std::string>());
    c.rounds = doc.value("rounds", c.rounds);
    if (doc.contains("encoder")) {
      const auto& e = doc["encoder"];
      c.encoder.patch_size = e.value("patch_size", c.encoder.patch_size);
      c.encoder.include_position = e.value("include_position", c.encoder.include_position);
      c.encoder.position_weight = e.value("position_weight", c.encoder.position_weight);
    }
    if (doc.contains("train")) {
      const auto& t = doc["train"];
      TrainConfig& tc = c.train;
      tc.iterations = t.value("iterations", tc.iterations);
      tc.base_lr = t.value("base_lr", tc.base_lr);
      tc.lr_power = t.value("lr_power", tc.lr_power);
      tc.momentum = t.value("momentum", tc.momentum);
      tc.weight_decay = t.value("weight_decay", tc.weight_decay);
      tc.batch_voxels = t.value("batch_voxels", tc.batch_voxels);
      tc.lambda_max = t.value("lambda_max", tc.lambda_max);
      tc.ramp_fraction = t.value("ramp_fraction", tc.ramp_fraction);
      tc.ema_decay = t.value("ema_decay", tc.ema_decay);
      tc.noise_sigma = t.value("noise_sigma", tc.noise_sigma);
      tc.validation_interval = t.value("validation_interval", tc.validation_interval);
    }
    c.k = doc.value("k", c.k);
    c.q_unc = doc.value("q_unc", c.q_unc);
    c.refine = doc.value("refine", c.refine);
    c.seed = doc.value("seed", c.seed);
    c.phantom_mode = doc.value("phantom_mode", c.phantom_mode);
    if (doc.contains("window")) {
      const auto w = doc["window"].get<std::vector<std::int64_t>>();
      if (w.size() != 3) throw ValidationError("config: window needs 3 extents");
      c.window = {w[0], w[1], w[2]};
    }
    c.stride = doc.value("stride", c.stride);
    if (doc.contains("validation_manifest")) {
      c.validation_manifest = resolve(doc["validation_manifest"].get<std::string>());
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Feature store

FeatureStore::FeatureStore(fs::path cache_dir, EncoderParams params)
    : cache_dir_(std::move(cache_dir)), params_(params) {}

void FeatureStore::prepare(const DatasetManifest& manifest, bool allow_encode, int threads) {
  struct Job {
    const VolumeEntry* entry;
    enum { External, Cache, Encode } source;
  };
  std::vector<Job> jobs;
  for (const auto& v : manifest.volumes) {
    if (entries_.count(v.id)) {
      ++memory_hits_;
      continue;
    }
    const fs::path cached = cache_dir_ / (v.id + ".feat");
    if (v.features) {
      jobs.push_back({&v, Job::External});
    } else if (fs::exists(cached)) {
      jobs.push_back({&v, Job::Cache});
    } else if (allow_encode) {
      jobs.push_back({&v, Job::Encode});
    } else {
      throw std::logic_error("offline contract: features for '" + v.id +
                             "' are not cached and the encoder may only run in round 0");
    }
  }
  if (jobs.empty()) return;
  fs::create_directories(cache_dir_);

  std::vector<std::unique_ptr<Entry>> built(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t n) {
    const Job& job = jobs[n];
    IntensityVolume vol = load_intensity(job.entry->intensity);
    const fs::path cached = cache_dir_ / (job.entry->id + ".feat");
    std::optional<FeatureGrid> grid;
    switch (job.source) {
      case Job::External:
        grid = ingest_external_features(*job.entry, vol.shape());
        break;
      case Job::Cache:
        grid = load_feature_grid(cached, vol.shape());
        break;
      case Job::Encode:
        grid = extract_feature_grid(vol, params_);
        save_feature_grid(*grid, cached);
        break;
    }
    GlobalFeature g = global_feature(*grid);
    VoxelFeatureSource voxels(vol, *grid);
    built[n] = std::make_unique<Entry>(Entry{std::move(vol), std::move(*grid), std::move(g), std::move(voxels)});
  });

  std::optional<int> channels;
  for (const auto& [id, e] : entries_) channels = e->grid.channels();
  for (std::size_t n = 0; n < jobs.size(); ++n) {
    const int c = built[n]->grid.channels();
    if (channels && *channels != c) {
      throw ValidationError("channel mismatch: '" + jobs[n].entry->id + "' has " + std::to_string(c) +
                            " channels, expected " + std::to_string(*channels));
    }
    channels = c;
    switch (jobs[n].source) {
      case Job::External:
        ++external_loads_;
        break;
      case Job::Cache:
        ++cache_loads_;
        break;
      case Job::Encode:
        ++encoded_;
        break;
    }
    entries_.emplace(jobs[n].entry->id, std::move(built[n]));
  }
}

const FeatureStore::Entry& FeatureStore::at(const std::string& id) const {
  auto it = entries_.find(id);
  if (it == entries_.end()) throw std::logic_error("feature store: unknown id '" + id + "'");
  return *it->second;
}

GlobalFeatures FeatureStore::globals() const {
  GlobalFeatures out;
  for (const auto& [id, e] : entries_) out.emplace(id, e->global);
  return out;
}

// ---------------------------------------------------------------------------
// Pipeline

Pipeline::Pipeline(PipelineConfig config)
    : config_(std::move(config)),
      manifest_(),
      store_(config_.output / "features", config_.encoder) {
  validate(config_);
  manifest_ = load_manifest(config_.manifest);
  if (config_.validation_manifest) {
    DatasetManifest extra = load_manifest(*config_.validation_manifest);
    for (auto& v : extra.volumes) {
      if (!v.label && !v.truth) continue;
      v.split = Split::Validation;
      manifest_.volumes.push_back(std::move(v));
    }
    validate(manifest_);
  }
  manifest_.template_entry();
  if (manifest_.unlabeled().empty()) throw ValidationError("manifest: no unlabeled training volumes");
  if (config_.phantom_mode) {
    for (const auto* v : manifest_.unlabeled()) {
      if (!v->truth) throw ValidationError("phantom mode: no ground truth for '" + v->id + "'");
    }
  }
  config_.threads = resolve_threads(config_.threads);
}

fs::path Pipeline::round_dir(int r) const { return config_.output / ("round_" + std::to_string(r)); }

void Pipeline::ensure_features(bool allow_encode) {
  store_.prepare(manifest_, allow_encode, config_.threads);
  features_ready_ = true;
}

LabelSet Pipeline::truth_labels() const {
  LabelSet out;
  for (const auto* v : manifest_.unlabeled()) {
    if (v->truth) out.emplace(v->id, load_labels(*v->truth, manifest_.num_classes));
  }
  return out;
}

std::optional<MetricSummary> Pipeline::evaluate_split(const SpecialistParams& params, Split split) const {
  const auto entries = manifest_.of_split(split);
  if (entries.empty()) return std::nullopt;
  std::vector<CaseMetrics> cases(entries.size());
  parallel_for(entries.size(), config_.threads, [&](std::size_t n) {
    const VolumeEntry& e = *entries[n];
    const LabelVolume truth = load_labels(e.label ? *e.label : *e.truth, manifest_.num_classes);
    const PseudoLabel pred = infer(params, store_.at(e.id).voxels, config_.window, config_.stride);
    cases[n] = {e.id, evaluate(pred.labels, truth)};
  });
  return summarize(cases);
}

RoundState Pipeline::run_round0() {
  const auto t0 = Clock::now();
  const VolumeEntry& tmpl = manifest_.template_entry();
  const LabelVolume template_labels = load_labels(*tmpl.label, manifest_.num_classes);
  ensure_features(true);
  fs::create_directories(config_.output);
  write_text_atomic(config_.output / "config.json", pipeline_config_to_json(config_));

  const auto& te = store_.at(tmpl.id);
  if (!(template_labels.shape() == te.intensity.shape())) {
    throw ValidationError("template label shape does not match its volume");
  }
  const PrototypeSet protos = compute_prototypes(te.grid, template_labels);

  RoundState state;
  state.round = 0;
  const auto pool = manifest_.unlabeled();
  std::vector<std::optional<LabelVolume>> labels(pool.size());
  parallel_for(pool.size(), config_.threads, [&](std::size_t n) {
    const auto& e = store_.at(pool[n]->id);
    labels[n] = initial_pseudo_label(e.grid, protos, e.intensity.shape()).labels;
  });
  for (std::size_t n = 0; n < pool.size(); ++n) state.pseudo_labels.emplace(pool[n]->id, std::move(*labels[n]));

  // Held-out volumes get the same propagation so round 0 has a test score.
  const auto test = manifest_.of_split(Split::Test);
  if (!test.empty()) {
    std::vector<CaseMetrics> cases(test.size());
    parallel_for(test.size(), config_.threads, [&](std::size_t n) {
      const VolumeEntry& e = *test[n];
      const auto& fe = store_.at(e.id);
      const LabelVolume truth = load_labels(e.label ? *e.label : *e.truth, manifest_.num_classes);
      cases[n] = {e.id, evaluate(initial_pseudo_label(fe.grid, protos, fe.intensity.shape()).labels, truth)};
    });
    state.test_metrics = summarize(cases);
  }
  if (config_.phantom_mode) state.pseudo_quality = pseudo_label_quality(state.pseudo_labels, truth_labels());
  state.timings.features_and_refinement_seconds = seconds_since(t0);
  persist(state);
  return state;
}

void Pipeline::apply_refinement(RoundState& state) const {
  const VolumeEntry& tmpl = manifest_.template_entry();
  state.partition = partition_by_quantile(state.uncertainties, tmpl.id, config_.q_unc);
  state.refine_audit.clear();
  if (!config_.refine) {
    state.pseudo_labels = state.raw_labels;
    state.refined = false;
    return;
  }
  LabelSet voters = state.raw_labels;
  voters.insert_or_assign(tmpl.id, load_labels(*tmpl.label, manifest_.num_classes));
  RefineResult refined = refine_all(voters, *state.partition, store_.globals(), config_.k);
  refined.labels.erase(tmpl.id);
  state.pseudo_labels = std::move(refined.labels);
  state.refine_audit = std::move(refined.audit);
  state.refined = true;
}

RoundState Pipeline::run_round(int r, const RoundState& prev) {
  if (r < 1) throw ValidationError("run_round: round must be >= 1");
  if (prev.round != r - 1) {
    throw ValidationError("run_round: round " + std::to_string(r) + " needs round " + std::to_string(r - 1) +
                          " state, got round " + std::to_string(prev.round));
  }
  const auto pool = manifest_.unlabeled();
  for (const auto* e : pool) {
    if (!prev.pseudo_labels.count(e->id)) throw ValidationError("run_round: no pseudo-label for '" + e->id + "'");
  }
  auto t0 = Clock::now();
  ensure_features(false);
  RoundState state;
  state.round = r;
  double other = seconds_since(t0);

  const VolumeEntry& tmpl = manifest_.template_entry();
  const LabelVolume template_labels = load_labels(*tmpl.label, manifest_.num_classes);
  TrainingSet data;
  data.labeled = {&store_.at(tmpl.id).voxels, &template_labels};
  for (const auto* e : pool) data.pseudo.push_back({&store_.at(e->id).voxels, &prev.pseudo_labels.at(e->id)});
  std::vector<LabelVolume> val_labels;
  const auto val = manifest_.of_split(Split::Validation);
  val_labels.reserve(val.size());
  for (const auto* e : val) {
    val_labels.push_back(load_labels(e->label ? *e->label : *e->truth, manifest_.num_classes));
    data.validation.push_back({&store_.at(e->id).voxels, &val_labels.back()});
  }
  TrainConfig tc = config_.train;
  tc.seed = config_.seed ^ static_cast<std::uint64_t>(r);

  t0 = Clock::now();
  TrainResult trained = train_round(data, tc, manifest_.num_classes);
  state.timings.training_seconds = seconds_since(t0);
  state.params = trained.params;
  state.selected_iteration = trained.selected_iteration;
  state.train_log = std::move(trained.log);

  t0 = Clock::now();
  std::vector<std::optional<PseudoLabel>> preds(pool.size());
  parallel_for(pool.size(), config_.threads, [&](std::size_t n) {
    preds[n] = infer(*state.params, store_.at(pool[n]->id).voxels, config_.window, config_.stride);
  });
  for (std::size_t n = 0; n < pool.size(); ++n) {
    state.uncertainties.push_back(sample_uncertainty(preds[n]->probs, pool[n]->id));
    state.raw_labels.emplace(pool[n]->id, std::move(preds[n]->labels));
  }
  preds.clear();
  apply_refinement(state);
  state.test_metrics = evaluate_split(*state.params, Split::Test);
  if (config_.phantom_mode) state.pseudo_quality = pseudo_label_quality(state.pseudo_labels, truth_labels());
  state.timings.features_and_refinement_seconds = other + seconds_since(t0);

  persist(state);
  return state;
}

std::vector<RoundState> Pipeline::run() {
  std::vector<RoundState> states;
  states.push_back(run_round0());
  for (int r = 1; r <= config_.rounds; ++r) states.push_back(run_round(r, states.back()));
  write_report(states);
  return states;
}

// ---------------------------------------------------------------------------
// Persistence

void Pipeline::persist(const RoundState& state) const {
  const int r = state.round;
  const fs::path final_dir = round_dir(r);
  fs::path tmp = final_dir;
  tmp += ".tmp";
  if (fs::exists(final_dir) && !force_) {
    throw ValidationError("refusing to overwrite " + final_dir.string() + " (use --force)");
  }
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  json ids = json::array();
  json summary = json::array();
  for (const auto& [id, labels] : state.pseudo_labels) {
    ids.push_back(id);
    save_array(labels, tmp / label_name(id, r));
    summary.push_back({{"id", id}, {"foreground_fraction", foreground_fraction(labels)}});
  }
  for (const auto& [id, labels] : state.raw_labels) save_array(labels, tmp / label_name(id, r, ".raw"));
  for (const auto& ns : state.refine_audit) {
    save_array(state.pseudo_labels.at(ns.query), tmp / label_name(ns.query, r, ".refined"));
  }
  if (r == 0) write_text_atomic(tmp / "summary.json", json{{"round", 0}, {"volumes", summary}}.dump(2) + "\n");

  if (state.params) {
    save_params(*state.params, tmp / "params.vxar", r, state.selected_iteration);
    std::ostringstream log;
    for (const auto& e : state.train_log) {
      log << json{{"iter", e.iter},       {"lr", e.lr},           {"alpha", e.alpha},
                  {"lambda", e.lambda},   {"loss", e.loss},       {"l_sup", e.l_sup},
                  {"l_unsup", e.l_unsup}, {"l_pseudo", e.l_pseudo}}
                 .dump()
          << "\n";
    }
    write_text_atomic(tmp / "train_log.jsonl", log.str());
  }

  if (!state.uncertainties.empty()) {
    json samples = json::array();
    for (const auto& u : state.uncertainties) {
      json s = {{"id", u.id}, {"uncertainty", u.value}};
      if (state.partition) s["certain"] = state.partition->certain.count(u.id) > 0;
      samples.push_back(std::move(s));
    }
    json unc = {{"round", r}, {"samples", samples}};
    unc["threshold"] = state.partition ? json(state.partition->threshold) : json(nullptr);
    write_text_atomic(tmp / "uncertainty.json", unc.dump(2) + "\n");
  }
  if (r > 0) {
    json audit = json::array();
    for (const auto& ns : state.refine_audit) {
      json nb = json::array();
      for (const auto& n : ns.neighbors) nb.push_back({{"id", n.id}, {"similarity", n.similarity}, {"weight", n.weight}});
      audit.push_back({{"id", ns.query}, {"neighbors", nb}});
    }
    write_text_atomic(tmp / "refine_audit.json",
                      json{{"round", r}, {"refined", state.refined}, {"uncertain", audit}}.dump(2) + "\n");
  }

  json st = {{"round", r},
             {"ids", ids},
             {"refined", state.refined},
             {"has_params", state.params.has_value()},
             {"selected_iteration", state.selected_iteration},
             {"timings",
              {{"specialist_training_seconds", state.timings.training_seconds},
               {"feature_and_refinement_seconds", state.timings.features_and_refinement_seconds}}}};
  st["pseudo_label_dice"] = state.pseudo_quality ? json(*state.pseudo_quality) : json(nullptr);
  st["test"] = state.test_metrics ? summary_json(*state.test_metrics) : json(nullptr);
  write_text_atomic(tmp / "state.json", st.dump(2) + "\n");

  if (fs::exists(final_dir)) fs::remove_all(final_dir);
  fs::rename(tmp, final_dir);
}

RoundState Pipeline::load_round(int r) const {
  const fs::path dir = round_dir(r);
  if (!fs::exists(dir / "state.json")) throw ValidationError("no persisted state for round " + std::to_string(r));
  const json st = json::parse(read_text(dir / "state.json"));
  RoundState state;
  state.round = st.at("round").get<int>();
  if (state.round != r) throw ValidationError("round directory " + dir.string() + " holds another round");
  state.refined = st.value("refined", false);
  state.selected_iteration = st.value("selected_iteration", std::int64_t{0});
  if (st.contains("pseudo_label_dice") && !st["pseudo_label_dice"].is_null()) {
    state.pseudo_quality = st["pseudo_label_dice"].get<double>();
  }
  if (st.contains("test") && !st["test"].is_null()) state.test_metrics = summary_from(st["test"]);
  if (st.contains("timings")) {
    state.timings.training_seconds = st["timings"].value("specialist_training_seconds", 0.0);
    state.timings.features_and_refinement_seconds = st["timings"].value("feature_and_refinement_seconds", 0.0);
  }
  for (const auto* e : manifest_.unlabeled()) {
    state.pseudo_labels.emplace(e->id, load_labels(dir / label_name(e->id, r), manifest_.num_classes));
    const fs::path raw = dir / label_name(e->id, r, ".raw");
    if (fs::exists(raw)) state.raw_labels.emplace(e->id, load_labels(raw, manifest_.num_classes));
  }
  if (fs::exists(dir / "uncertainty.json")) {
    const json unc = json::parse(read_text(dir / "uncertainty.json"));
    Partition p;
    bool has_partition = !unc.at("threshold").is_null();
    if (has_partition) p.threshold = unc["threshold"].get<double>();
    for (const auto& s : unc.at("samples")) {
      const std::string id = s.at("id").get<std::string>();
      state.uncertainties.push_back({id, s.at("uncertainty").get<double>()});
      if (has_partition) (s.value("certain", true) ? p.certain : p.uncertain).insert(id);
    }
    if (has_partition) {
      p.certain.insert(manifest_.template_entry().id);
      state.partition = std::move(p);
    }
  }
  if (fs::exists(dir / "refine_audit.json")) {
    const json audit = json::parse(read_text(dir / "refine_audit.json"));
    for (const auto& a : audit.at("uncertain")) {
      NeighborSet ns{a.at("id").get<std::string>(), {}};
      for (const auto& n : a.at("neighbors")) {
        ns.neighbors.push_back({n.at("id").get<std::string>(), n.at("similarity").get<double>(),
                                n.at("weight").get<double>()});
      }
      state.refine_audit.push_back(std::move(ns));
    }
  }
  if (st.value("has_params", false)) state.params = load_params(dir / "params.vxar");
  return state;
}

RoundState Pipeline::rerun_refinement(int r) {
  if (r < 1) throw ValidationError("refinement only exists for rounds >= 1");
  RoundState state = load_round(r);
  if (state.raw_labels.size() != manifest_.unlabeled().size() || state.uncertainties.empty()) {
    throw ValidationError("round " + std::to_string(r) + " has no raw predictions to refine");
  }
  ensure_features(false);
  const auto t0 = Clock::now();
  apply_refinement(state);
  if (config_.phantom_mode) state.pseudo_quality = pseudo_label_quality(state.pseudo_labels, truth_labels());
  state.timings.features_and_refinement_seconds = seconds_since(t0);
  const bool force = force_;
  force_ = true;
  persist(state);
  force_ = force;
  return state;
}

void Pipeline::write_report(const std::vector<RoundState>& states) const {
  json rounds = json::array();
  std::vector<std::vector<std::string>> table{{"Round", "Refined", "Pseudo Dice[%]", "Dice[%]", "Jaccard[%]",
                                               "95HD[voxel]", "ASD[voxel]", "Train[s]", "Feat+Refine[s]"}};
  auto fixed2 = [](double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << v;
    return os.str();
  };
  for (const auto& s : states) {
    json row = {{"round", s.round},
                {"refined", s.refined},
                {"num_uncertain", s.partition ? s.partition->uncertain.size() : 0},
                {"specialist_training_seconds", s.timings.training_seconds},
                {"feature_and_refinement_seconds", s.timings.features_and_refinement_seconds}};
    row["pseudo_label_dice"] = s.pseudo_quality ? json(*s.pseudo_quality) : json(nullptr);
    row["test"] = s.test_metrics ? summary_json(*s.test_metrics) : json(nullptr);
    rounds.push_back(std::move(row));

    const auto& m = s.test_metrics;
    table.push_back({std::to_string(s.round), s.refined ? "yes" : "no",
                     s.pseudo_quality ? fixed2(*s.pseudo_quality * 100.0) : "-",
                     m ? format_mean_std(m->dice, 100.0) : "-", m ? format_mean_std(m->jaccard, 100.0) : "-",
                     m ? format_mean_std(m->hd95, 1.0) : "-", m ? format_mean_std(m->asd, 1.0) : "-",
                     fixed2(s.timings.training_seconds), fixed2(s.timings.features_and_refinement_seconds)});
  }
  std::ostringstream txt;
  txt << format_aligned(table);
  double train = 0.0, other = 0.0;
  for (const auto& s : states) {
    train += s.timings.training_seconds;
    other += s.timings.features_and_refinement_seconds;
  }
  txt << "\nspecialist training: " << std::fixed << std::setprecision(2) << train
      << " s; feature extraction + refinement: " << other << " s\n";
  json report = {{"rounds", rounds},
                 {"config", json::parse(pipeline_config_to_json(config_))},
                 {"timings", {{"specialist_training_seconds", train}, {"feature_and_refinement_seconds", other}}},
                 {"features",
                  {{"encoded", store_.encoded()},
                   {"cache_loads", store_.cache_loads()},
                   {"external_loads", store_.external_loads()},
                   {"memory_hits", store_.memory_hits()}}}};
  fs::create_directories(config_.output);
  write_text_atomic(config_.output / "report.json", report.dump(2) + "\n");
  write_text_atomic(config_.output / "report.txt", txt.str());
}

// ---------------------------------------------------------------------------
// Curves

std::string write_curves(const fs::path& run_dir, bool plot) {
  const json report = json::parse(read_text(run_dir / "report.json"));
  std::ostringstream csv;
  csv << "round,pseudo_label_dice,test_dice,test_jaccard,test_hd95,test_asd\n";
  struct Point {
    int round;
    std::optional<double> pseudo, test;
  };
  std::vector<Point> points;
  auto num = [](const json& j) {
    std::ostringstream os;
    os << std::setprecision(10) << j.get<double>();
    return os.str();
  };
  for (const auto& r : report.at("rounds")) {
    Point p{r.at("round").get<int>(), std::nullopt, std::nullopt};
    csv << p.round << ",";
    if (!r["pseudo_label_dice"].is_null()) {
      p.pseudo = r["pseudo_label_dice"].get<double>();
      csv << num(r["pseudo_label_dice"]);
    }
    csv << ",";
    if (!r["test"].is_null()) {
      const auto& t = r["test"];
      p.test = t["dice"]["mean"].get<double>();
      csv << num(t["dice"]["mean"]) << "," << num(t["jaccard"]["mean"]) << "," << num(t["hd95"]["mean"]) << ","
          << num(t["asd"]["mean"]);
    } else {
      csv << ",,,";
    }
    csv << "\n";
    points.push_back(p);
  }
  write_text_atomic(run_dir / "curves.csv", csv.str());

  if (plot) {
    const double width = 480, height = 320, left = 60, right = 20, top = 30, bottom = 50;
    const int max_round = points.empty() ? 1 : std::max(1, points.back().round);
    auto x_of = [&](int r) { return left + (width - left - right) * r / max_round; };
    auto y_of = [&](double v) { return top + (height - top - bottom) * (1.0 - v); };
    std::ostringstream svg;
    svg << std::fixed << std::setprecision(1);
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
    svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg << "<line x1=\"" << left << "\" y1=\"" << y_of(0) << "\" x2=\"" << width - right << "\" y2=\"" << y_of(0)
        << "\" stroke=\"black\"/>\n";
    svg << "<line x1=\"" << left << "\" y1=\"" << y_of(0) << "\" x2=\"" << left << "\" y2=\"" << y_of(1)
        << "\" stroke=\"black\"/>\n";
    for (int t = 0; t <= 10; t += 2) {
      const double v = t / 10.0;
      svg << "<text x=\"" << left - 8 << "\" y=\"" << y_of(v) + 4 << "\" font-size=\"11\" text-anchor=\"end\">"
          << t * 10 << "</text>\n";
    }
    for (int r = 0; r <= max_round; ++r) {
      svg << "<text x=\"" << x_of(r) << "\" y=\"" << y_of(0) + 16 << "\" font-size=\"11\" text-anchor=\"middle\">R"
          << r << "</text>\n";
    }
    svg << "<text x=\"" << (left + width - right) / 2 << "\" y=\"" << height - 10
        << "\" font-size=\"12\" text-anchor=\"middle\">Round</text>\n";
    svg << "<text x=\"14\" y=\"" << (top + height - bottom) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 "
        << (top + height - bottom) / 2 << ")\" text-anchor=\"middle\">Dice [%]</text>\n";
    auto series = [&](std::optional<double> Point::*field, const char* color, const char* name, double ly) {
      std::ostringstream path;
      bool any = false;
      for (const auto& p : points) {
        if (!(p.*field)) continue;
        path << (any ? " L" : "M") << x_of(p.round) << " " << y_of(*(p.*field));
        svg << "<circle cx=\"" << x_of(p.round) << "\" cy=\"" << y_of(*(p.*field)) << "\" r=\"3\" fill=\"" << color
            << "\"/>\n";
        any = true;
      }
      if (!any) return;
      svg << "<path d=\"" << path.str() << "\" fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
      svg << "<text x=\"" << width - right - 150 << "\" y=\"" << ly << "\" font-size=\"11\" fill=\"" << color << "\">"
          << name << "</text>\n";
    };
    series(&Point::pseudo, "#1f77b4", "pseudo-label Dice", top + 12);
    series(&Point::test, "#d62728", "test Dice", top + 26);
    svg << "</svg>\n";
    write_text_atomic(run_dir / "curves.svg", svg.str());
  }
  return csv.str();
}

}  // namespace protoloop
