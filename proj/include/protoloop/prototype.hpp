#ifndef PROTOLOOP_PROTOTYPE_HPP
#define PROTOLOOP_PROTOTYPE_HPP

#include "protoloop/encoder.hpp"

namespace protoloop {

inline constexpr double kPrototypeEpsilon = 1e-8;

/// Unit-norm class prototypes; column c is the prototype of class c.
struct PrototypeSet {
  Eigen::MatrixXd vectors;    // channels x num_classes
  std::vector<bool> present;  // per class

  int num_classes() const { return static_cast<int>(present.size()); }
};

/// Masked mean of the template's cell features per class (labels are
/// nearest-downsampled to the grid), L2-normalised.
PrototypeSet compute_prototypes(const FeatureGrid& grid_labeled, const LabelVolume& labels);

/// Cosine similarity of every cell with every prototype (num_classes x cells).
/// Absent classes get -inf; zero-norm cells get 0 for every present class.
ClassMaps similarity_maps(const FeatureGrid& grid, const PrototypeSet& protos);

/// Numerically stable softmax of each column; -inf entries map to 0.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> column_softmax(
    const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  const auto maxes = logits.colwise().maxCoeff();
  Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic> e =
      (logits.rowwise() - maxes).array().exp().matrix();
  const auto sums = e.colwise().sum();
  for (Eigen::Index c = 0; c < e.cols(); ++c) e.col(c) /= sums(c);
  return e;
}

/// Index of the largest entry of each column; the lowest index wins ties.
template <typename Derived>
std::vector<std::uint8_t> column_argmax(const Eigen::MatrixBase<Derived>& m) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    Eigen::Index best = 0;
    for (Eigen::Index r = 1; r < m.rows(); ++r) {
      if (m(r, c) > m(best, c)) best = r;
    }
    out[static_cast<std::size_t>(c)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

struct PseudoLabel {
  LabelVolume labels;
  ProbVolume probs;
};

/// Round-0 pseudo-label: similarity maps upsampled to `vol_shape`, softmax
/// across classes, argmax.
PseudoLabel initial_pseudo_label(const FeatureGrid& grid, const PrototypeSet& protos,
                                 const Shape3& vol_shape);

}  // namespace protoloop

#endif  // PROTOLOOP_PROTOTYPE_HPP
