#ifndef PROTOLOOP_PIPELINE_HPP
#define PROTOLOOP_PIPELINE_HPP

#include "protoloop/encoder.hpp"
#include "protoloop/metrics.hpp"
#include "protoloop/prototype.hpp"
#include "protoloop/refine.hpp"
#include "protoloop/specialist.hpp"
#include "protoloop/uncertainty.hpp"

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace protoloop {

struct PipelineConfig {
  std::filesystem::path manifest;
  std::filesystem::path output;
  int rounds = 3;
  EncoderParams encoder;
  TrainConfig train;
  int k = kDefaultNeighbors;
  double q_unc = 0.9;
  bool refine = true;
  std::uint64_t seed = 0;
  std::optional<std::filesystem::path> validation_manifest;
  /// Track pseudo-label quality against per-volume ground truth.
  bool phantom_mode = false;
  Shape3 window{16, 16, 16};
  std::int64_t stride = 8;
  int threads = 1;
};

void validate(const PipelineConfig& c);

std::string pipeline_config_to_json(const PipelineConfig& c);
/// Relative paths resolve against `base`.
PipelineConfig pipeline_config_from_json(const std::string& text, const std::filesystem::path& base = {});

struct RoundTimings {
  double training_seconds = 0.0;
  double features_and_refinement_seconds = 0.0;
};

struct RoundState {
  int round = 0;
  LabelSet pseudo_labels;  // every unlabeled training id
  LabelSet raw_labels;     // model predictions before refinement (rounds >= 1)
  std::vector<SampleUncertainty> uncertainties;
  std::optional<Partition> partition;
  std::vector<NeighborSet> refine_audit;
  bool refined = false;
  std::optional<SpecialistParams> params;
  std::vector<TrainLogEntry> train_log;
  std::int64_t selected_iteration = 0;
  std::optional<double> pseudo_quality;
  std::optional<MetricSummary> test_metrics;
  std::optional<MetricSummary> train_metrics;  // pseudo-labels vs truth, phantom mode
  RoundTimings timings;
};

/// Per-volume feature grids and global features. Grids are computed at most
/// once per run; later reads come from memory or from the on-disk cache.
class FeatureStore {
 public:
  FeatureStore(std::filesystem::path cache_dir, EncoderParams params);

  struct Entry {
    IntensityVolume intensity;
    FeatureGrid grid;
    GlobalFeature global;
    VoxelFeatureSource voxels;
  };

  /// Makes every volume of the manifest available. When `allow_encode` is
  /// false the encoder may not run and missing cache files are an error.
  void prepare(const DatasetManifest& manifest, bool allow_encode, int threads);

  const Entry& at(const std::string& id) const;
  GlobalFeatures globals() const;

  std::size_t encoded() const { return encoded_; }
  std::size_t cache_loads() const { return cache_loads_; }
  std::size_t external_loads() const { return external_loads_; }
  std::size_t memory_hits() const { return memory_hits_; }

 private:
  std::filesystem::path cache_dir_;
  EncoderParams params_;
  std::map<std::string, std::unique_ptr<Entry>> entries_;
  std::size_t encoded_ = 0;
  std::size_t cache_loads_ = 0;
  std::size_t external_loads_ = 0;
  std::size_t memory_hits_ = 0;
};

/// Orchestrates round 0 (prototype propagation) and rounds 1..R (train,
/// predict, refine) with every round persisted under `output/round_<r>/`.
class Pipeline {
 public:
  explicit Pipeline(PipelineConfig config);

  const PipelineConfig& config() const { return config_; }
  const DatasetManifest& manifest() const { return manifest_; }
  const FeatureStore& features() const { return store_; }

  RoundState run_round0();
  RoundState run_round(int r, const RoundState& prev);
  std::vector<RoundState> run();

  /// Reads a persisted round back from disk.
  RoundState load_round(int r) const;
  std::filesystem::path round_dir(int r) const;

  /// Re-runs partition and refinement of round `r` from its persisted raw
  /// predictions and uncertainties, overwriting the round's final labels.
  RoundState rerun_refinement(int r);

  /// Overwrite existing round directories instead of failing.
  void set_force(bool force) { force_ = force; }

  /// Writes report.json and report.txt for the given rounds.
  void write_report(const std::vector<RoundState>& states) const;

 private:
  void ensure_features(bool allow_encode);
  void persist(const RoundState& state) const;
  LabelSet truth_labels() const;
  std::optional<MetricSummary> evaluate_split(const SpecialistParams& params, Split split) const;
  void apply_refinement(RoundState& state) const;

  PipelineConfig config_;
  DatasetManifest manifest_;
  FeatureStore store_;
  bool features_ready_ = false;
  bool force_ = false;
};

/// Loads `report.json` of a run directory and writes `curves.csv` (and
/// `curves.svg` when `plot` is set). Returns the CSV text.
std::string write_curves(const std::filesystem::path& run_dir, bool plot);

}  // namespace protoloop

#endif  // PROTOLOOP_PIPELINE_HPP
