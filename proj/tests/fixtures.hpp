#ifndef PROTOLOOP_TESTS_FIXTURES_HPP
#define PROTOLOOP_TESTS_FIXTURES_HPP

#include "protoloop/pipeline.hpp"

#include <filesystem>
#include <random>
#include <string>

namespace fixture {

using namespace protoloop;

inline std::int64_t uniform_int(std::mt19937_64& rng, std::int64_t lo, std::int64_t hi) {
  return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng);
}

inline FeatureGrid random_grid(std::mt19937_64& rng, const Shape3& g, const Shape3& patch, int channels) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  Eigen::MatrixXf m(channels, g.voxels());
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return FeatureGrid(g, patch, std::move(m));
}

inline LabelVolume random_labels(std::mt19937_64& rng, const Shape3& s, int classes) {
  std::vector<std::uint8_t> d(static_cast<std::size_t>(s.voxels()));
  for (auto& x : d) x = static_cast<std::uint8_t>(uniform_int(rng, 0, classes - 1));
  return LabelVolume(s, classes, std::move(d));
}

/// Template grid + labels and a query grid for prototype propagation.
struct Round0Instance {
  FeatureGrid tmpl;
  LabelVolume tmpl_labels;
  FeatureGrid query;
  Shape3 volume;
  int classes;
};

inline Round0Instance round0_instance(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Shape3 g{uniform_int(rng, 1, 4), uniform_int(rng, 1, 4), uniform_int(rng, 1, 4)};
  const std::int64_t p = uniform_int(rng, 2, 3);
  const Shape3 vol{g.d * p - uniform_int(rng, 0, 1), g.h * p, g.w * p - uniform_int(rng, 0, 1)};
  const int channels = static_cast<int>(uniform_int(rng, 1, 8));
  const int classes = static_cast<int>(uniform_int(rng, 2, 3));
  return {random_grid(rng, g, {p, p, p}, channels), random_labels(rng, vol, classes),
          random_grid(rng, g, {p, p, p}, channels), vol, classes};
}

/// Pool of raw labels with unit-norm global features and a random partition.
struct RefinePool {
  GlobalFeatures globals;
  LabelSet raw;
  Partition partition;
  int k;
  int classes;
};

inline RefinePool refine_pool(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  RefinePool pool;
  const int n = static_cast<int>(uniform_int(rng, 2, 10));
  const Shape3 s{uniform_int(rng, 1, 4), uniform_int(rng, 1, 4), uniform_int(rng, 1, 4)};
  const int dims = static_cast<int>(uniform_int(rng, 1, 6));
  pool.classes = static_cast<int>(uniform_int(rng, 2, 4));
  pool.k = static_cast<int>(uniform_int(rng, 1, 6));
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) {
    const std::string id = "s" + std::to_string(i);
    ids.push_back(id);
    Eigen::VectorXd v(dims);
    for (int f = 0; f < dims; ++f) v[f] = gauss(rng);
    // Occasional duplicates exercise the tie-breaking rule.
    if (i > 0 && uniform_int(rng, 0, 4) == 0) v = pool.globals.at(ids[0]).vector;
    pool.globals[id] = {v.normalized(), false};
    pool.raw.emplace(id, random_labels(rng, s, pool.classes));
  }
  std::shuffle(ids.begin(), ids.end(), rng);
  const int uncertain = static_cast<int>(uniform_int(rng, 1, n - 1));
  for (int i = 0; i < n; ++i) (i < uncertain ? pool.partition.uncertain : pool.partition.certain).insert(ids[i]);
  return pool;
}

/// Binary mask pair inside a volume of at most 6^3; blobs or noise.
inline std::pair<LabelVolume, LabelVolume> mask_pair(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Shape3 s{uniform_int(rng, 1, 6), uniform_int(rng, 1, 6), uniform_int(rng, 1, 6)};
  auto make = [&] {
    std::vector<std::uint8_t> d(static_cast<std::size_t>(s.voxels()), 0);
    const int mode = static_cast<int>(uniform_int(rng, 0, 3));
    if (mode == 0) {
      const double fill = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      for (auto& x : d) x = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < fill;
    } else if (mode == 1) {
      const double ci = uniform_int(rng, 0, s.d - 1), cj = uniform_int(rng, 0, s.h - 1),
                   ck = uniform_int(rng, 0, s.w - 1), r = std::uniform_real_distribution<double>(0.5, 3.0)(rng);
      for (std::int64_t i = 0; i < s.d; ++i)
        for (std::int64_t j = 0; j < s.h; ++j)
          for (std::int64_t k = 0; k < s.w; ++k)
            d[static_cast<std::size_t>(s.index(i, j, k))] =
                (i - ci) * (i - ci) + (j - cj) * (j - cj) + (k - ck) * (k - ck) <= r * r;
    } else if (mode == 2) {
      std::fill(d.begin(), d.end(), 1);
    }
    return LabelVolume(s, 2, std::move(d));
  };
  auto a = make();
  auto b = make();
  return {std::move(a), std::move(b)};
}

/// A small seeded loss configuration in long double.
struct LossInstance {
  LinearSoftmax<long double> params, teacher;
  VoxelBatch<long double> batch;
  long double alpha, lambda;
};

inline LossInstance loss_instance(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Eigen::Index classes = uniform_int(rng, 2, 4), features = uniform_int(rng, 2, 6);
  const Eigen::Index nl = uniform_int(rng, 3, 12), np = uniform_int(rng, 3, 12);
  auto matrix = [&](Eigen::Index r, Eigen::Index c, double scale) {
    Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic> m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * gauss(rng);
    return m;
  };
  auto targets = [&](Eigen::Index n) {
    std::vector<std::uint8_t> t(static_cast<std::size_t>(n));
    for (auto& x : t) x = static_cast<std::uint8_t>(uniform_int(rng, 0, classes - 1));
    return t;
  };
  LossInstance out;
  out.params = {matrix(classes, features, 0.7), matrix(classes, 1, 0.3)};
  out.teacher = {matrix(classes, features, 0.7), matrix(classes, 1, 0.3)};
  out.batch.labeled_features = matrix(features, nl, 1.0);
  out.batch.labeled_targets = targets(nl);
  out.batch.pseudo_features = matrix(features, np, 1.0);
  out.batch.pseudo_targets = targets(np);
  out.batch.pseudo_noise = matrix(features, np, 0.1);
  out.alpha = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  out.lambda = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return out;
}

/// Scratch directory under the build tree, emptied on creation.
inline std::filesystem::path scratch(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("protoloop_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fixture

#endif  // PROTOLOOP_TESTS_FIXTURES_HPP
