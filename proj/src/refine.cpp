#include "protoloop/refine.hpp"

#include <algorithm>

namespace protoloop {

namespace {

const GlobalFeature& global_of(const GlobalFeatures& globals, const std::string& id) {
  auto it = globals.find(id);
  if (it == globals.end()) throw ValidationError("no global feature for '" + id + "'");
  return it->second;
}

const LabelVolume& labels_of(const LabelSet& labels, const std::string& id) {
  auto it = labels.find(id);
  if (it == labels.end()) throw ValidationError("no label volume for '" + id + "'");
  return it->second;
}

}  // namespace

NeighborSet knn_certain_neighbors(const GlobalFeatures& globals, const std::set<std::string>& certain,
                                  const std::string& query, int k) {
  if (k < 1) throw ValidationError("knn: K must be >= 1");
  if (certain.empty()) throw ValidationError("knn: empty certain set");
  if (certain.count(query)) throw ValidationError("knn: query '" + query + "' is in the certain set");

  const Eigen::VectorXd& q = global_of(globals, query).vector;
  std::vector<Neighbor> all;
  all.reserve(certain.size());
  for (const auto& id : certain) {
    const Eigen::VectorXd& f = global_of(globals, id).vector;
    if (f.size() != q.size()) throw ValidationError("knn: global feature size mismatch for '" + id + "'");
    const double s = q.dot(f);
    all.push_back({id, s, std::max(0.0, s)});
  }
  std::sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.id < b.id;
  });
  all.resize(std::min(all.size(), static_cast<std::size_t>(k)));
  return {query, std::move(all)};
}

LabelVolume refine_pseudo_label(const NeighborSet& neighbors, const LabelSet& raw_labels) {
  if (neighbors.neighbors.empty()) throw ValidationError("refine: no neighbours for '" + neighbors.query + "'");
  const LabelVolume& own = labels_of(raw_labels, neighbors.query);

  double total = 0.0;
  for (const auto& n : neighbors.neighbors) total += n.weight;
  if (total < kVoteEpsilon) return own;

  const Shape3& shape = own.shape();
  const int classes = own.num_classes();
  std::vector<LabelVolume> votes;
  votes.reserve(neighbors.neighbors.size());
  for (const auto& n : neighbors.neighbors) {
    const LabelVolume& l = labels_of(raw_labels, n.id);
    if (l.num_classes() != classes) throw ValidationError("refine: class count mismatch for '" + n.id + "'");
    votes.push_back(l.shape() == shape ? l : nearest_resample_labels(l, shape));
  }

  const double denom = total + kVoteEpsilon;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(shape.voxels()));
  std::vector<double> score(static_cast<std::size_t>(classes));
  for (std::int64_t v = 0; v < shape.voxels(); ++v) {
    std::fill(score.begin(), score.end(), 0.0);
    for (std::size_t j = 0; j < votes.size(); ++j) score[votes[j][v]] += neighbors.neighbors[j].weight;
    int best = 0;
    for (int c = 0; c < classes; ++c) {
      score[static_cast<std::size_t>(c)] /= denom;
      if (score[static_cast<std::size_t>(c)] > score[static_cast<std::size_t>(best)]) best = c;
    }
    out[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(best);
  }
  return LabelVolume(shape, classes, std::move(out));
}

RefineResult refine_all(const LabelSet& raw, const Partition& partition, const GlobalFeatures& globals,
                        int k) {
  RefineResult out;
  for (const auto& [id, labels] : raw) {
    if (!partition.uncertain.count(id)) out.labels.emplace(id, labels);
  }
  for (const auto& id : partition.uncertain) {
    NeighborSet ns = knn_certain_neighbors(globals, partition.certain, id, k);
    out.labels.insert_or_assign(id, refine_pseudo_label(ns, raw));
    out.audit.push_back(std::move(ns));
  }
  return out;
}

}  // namespace protoloop
