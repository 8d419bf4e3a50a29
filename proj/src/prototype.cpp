#include "protoloop/prototype.hpp"

#include <cmath>
#include <limits>

namespace protoloop {

PrototypeSet compute_prototypes(const FeatureGrid& grid_labeled, const LabelVolume& labels) {
  const Shape3& gs = grid_labeled.grid_shape();
  const Shape3& ls = labels.shape();
  if (gs.d > ls.d || gs.h > ls.h || gs.w > ls.w) {
    throw ValidationError("compute_prototypes: grid " + to_string(gs) + " larger than labels " +
                          to_string(ls));
  }
  const LabelVolume coarse = nearest_downsample_labels(labels, gs);
  const int classes = labels.num_classes();
  const Eigen::Index channels = grid_labeled.channels();

  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(channels, classes);
  std::vector<std::int64_t> counts(static_cast<std::size_t>(classes), 0);
  for (std::int64_t c = 0; c < gs.voxels(); ++c) {
    const int k = coarse[c];
    sums.col(k) += grid_labeled.cell(c).cast<double>();
    ++counts[static_cast<std::size_t>(k)];
  }

  PrototypeSet out{Eigen::MatrixXd::Zero(channels, classes),
                   std::vector<bool>(static_cast<std::size_t>(classes), false)};
  for (int k = 0; k < classes; ++k) {
    const auto n = counts[static_cast<std::size_t>(k)];
    if (n == 0) continue;
    const Eigen::VectorXd mean = sums.col(k) / (static_cast<double>(n) + kPrototypeEpsilon);
    const double norm = mean.norm();
    out.vectors.col(k) = norm > 0.0 ? Eigen::VectorXd(mean / norm) : mean;
    out.present[static_cast<std::size_t>(k)] = true;
  }
  return out;
}

ClassMaps similarity_maps(const FeatureGrid& grid, const PrototypeSet& protos) {
  if (grid.channels() != protos.vectors.rows()) {
    throw ValidationError("similarity_maps: channel mismatch (" + std::to_string(grid.channels()) +
                          " vs " + std::to_string(protos.vectors.rows()) + ")");
  }
  const Shape3& gs = grid.grid_shape();
  const int classes = protos.num_classes();
  ClassMaps out{gs, Eigen::MatrixXd(classes, gs.voxels())};
  for (std::int64_t c = 0; c < gs.voxels(); ++c) {
    const Eigen::VectorXd f = grid.cell(c).cast<double>();
    const double norm = f.norm();
    for (int k = 0; k < classes; ++k) {
      if (!protos.present[static_cast<std::size_t>(k)]) {
        out.values(k, c) = -std::numeric_limits<double>::infinity();
      } else if (norm > 0.0) {
        out.values(k, c) = (f / norm).dot(protos.vectors.col(k));
      } else {
        out.values(k, c) = 0.0;
      }
    }
  }
  return out;
}

PseudoLabel initial_pseudo_label(const FeatureGrid& grid, const PrototypeSet& protos,
                                 const Shape3& vol_shape) {
  const ClassMaps coarse = similarity_maps(grid, protos);
  const ClassMaps fine = nearest_upsample_maps(coarse, vol_shape);
  Eigen::MatrixXd probs = column_softmax(fine.values);
  auto labels = column_argmax(probs);
  return {LabelVolume(vol_shape, protos.num_classes(), std::move(labels)),
          ProbVolume(vol_shape, std::move(probs))};
}

}  // namespace protoloop
