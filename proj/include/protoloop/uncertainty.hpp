#ifndef PROTOLOOP_UNCERTAINTY_HPP
#define PROTOLOOP_UNCERTAINTY_HPP

#include "protoloop/volume.hpp"

#include <set>
#include <string>
#include <vector>

namespace protoloop {

struct SampleUncertainty {
  std::string id;
  double value = 0.0;  // mean voxel entropy, nats
};

struct Partition {
  std::set<std::string> certain;
  std::set<std::string> uncertain;
  double threshold = 0.0;
};

/// Per-voxel Shannon entropy in nats, with 0 log 0 = 0.
Eigen::ArrayXd entropy_map(const ProbVolume& p);

/// Mean of entropy_map over all voxels.
SampleUncertainty sample_uncertainty(const ProbVolume& p, std::string id = {});

/// Nearest-rank `q_unc` quantile split of the unlabeled pool. Samples at or
/// below the threshold are certain; the labeled id is always certain.
Partition partition_by_quantile(const std::vector<SampleUncertainty>& uncertainties,
                                const std::string& labeled_id, double q_unc);

}  // namespace protoloop

#endif  // PROTOLOOP_UNCERTAINTY_HPP
