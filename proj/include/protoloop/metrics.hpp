#ifndef PROTOLOOP_METRICS_HPP
#define PROTOLOOP_METRICS_HPP

#include "protoloop/volume.hpp"

#include <map>
#include <string>
#include <vector>

namespace protoloop {

struct OverlapResult {
  double dice = 0.0;
  double jaccard = 0.0;
  bool both_empty = false;
};

struct DistanceResult {
  double hd95 = 0.0;
  double asd = 0.0;
  bool degenerate = false;  // an empty surface; distances hold the volume diagonal
};

struct ClassMetrics {
  int class_id = 0;
  OverlapResult overlap;
  DistanceResult distance;
};

/// Per-class metrics plus the mean over foreground classes (1..C-1).
struct MetricReport {
  std::vector<ClassMetrics> per_class;
  double dice = 0.0;
  double jaccard = 0.0;
  double hd95 = 0.0;
  double asd = 0.0;
  bool degenerate = false;
};

/// Binary mask of voxels equal to `class_id`.
std::vector<std::uint8_t> class_mask(const LabelVolume& labels, int class_id);

OverlapResult overlap_metrics(const LabelVolume& pred, const LabelVolume& ref, int class_id);

/// Foreground voxels with at least one 6-connected background neighbour; the
/// volume border counts as background.
std::vector<std::int64_t> surface_voxels(const std::vector<std::uint8_t>& mask, const Shape3& shape);

/// Exact Euclidean distance (voxel units) from every voxel to the nearest
/// voxel with `seeds[v] != 0`; +inf everywhere when there are no seeds.
std::vector<double> distance_transform(const std::vector<std::uint8_t>& seeds, const Shape3& shape);

DistanceResult distance_metrics(const LabelVolume& pred, const LabelVolume& ref, int class_id);

MetricReport evaluate(const LabelVolume& pred, const LabelVolume& ref);

/// Mean foreground Dice over the ids of `pseudo`; every id must exist in `truth`.
double pseudo_label_quality(const std::map<std::string, LabelVolume>& pseudo,
                            const std::map<std::string, LabelVolume>& truth);

/// Mean and population standard deviation.
struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

MeanStd mean_std(const std::vector<double>& values);

struct CaseMetrics {
  std::string id;
  MetricReport report;
};

struct MetricSummary {
  MeanStd dice, jaccard, hd95, asd;
  std::size_t cases = 0;
};

MetricSummary summarize(const std::vector<CaseMetrics>& cases);

/// "12.34 ± 0.56" with both values multiplied by `scale`.
std::string format_mean_std(const MeanStd& v, double scale);

/// Left-aligned columns separated by two spaces; the first row is the header.
std::string format_aligned(const std::vector<std::vector<std::string>>& table);

/// Aligned text table: Dice[%], Jaccard[%], 95HD[voxel], ASD[voxel] as mean ± std.
std::string format_metric_table(const std::vector<std::pair<std::string, MetricSummary>>& rows);

}  // namespace protoloop

#endif  // PROTOLOOP_METRICS_HPP
