#ifndef PROTOLOOP_REFINE_HPP
#define PROTOLOOP_REFINE_HPP

#include "protoloop/encoder.hpp"
#include "protoloop/uncertainty.hpp"

#include <map>

namespace protoloop {

inline constexpr double kVoteEpsilon = 1e-8;
inline constexpr int kDefaultNeighbors = 5;

struct Neighbor {
  std::string id;
  double similarity = 0.0;
  double weight = 0.0;  // max(0, similarity)
};

struct NeighborSet {
  std::string query;
  std::vector<Neighbor> neighbors;  // descending similarity, ties by ascending id
};

using GlobalFeatures = std::map<std::string, GlobalFeature>;
using LabelSet = std::map<std::string, LabelVolume>;

NeighborSet knn_certain_neighbors(const GlobalFeatures& globals, const std::set<std::string>& certain,
                                  const std::string& query, int k);

/// Weighted per-voxel vote of the neighbours' labels. When the total weight
/// is below epsilon the query's own raw label is kept.
LabelVolume refine_pseudo_label(const NeighborSet& neighbors, const LabelSet& raw_labels);

struct RefineResult {
  LabelSet labels;
  std::vector<NeighborSet> audit;  // one entry per uncertain id, in id order
};

/// Certain ids keep their raw labels; uncertain ids are replaced by the vote
/// of their K nearest certain neighbours. `raw` must also hold the labeled
/// template's ground truth under its id.
RefineResult refine_all(const LabelSet& raw, const Partition& partition, const GlobalFeatures& globals,
                        int k = kDefaultNeighbors);

}  // namespace protoloop

#endif  // PROTOLOOP_REFINE_HPP
