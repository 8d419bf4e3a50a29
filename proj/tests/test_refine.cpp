#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fixtures.hpp"
#include "oracles.hpp"

using namespace protoloop;

namespace {

GlobalFeature unit(std::initializer_list<double> v) {
  Eigen::VectorXd x(static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double d : v) x[i++] = d;
  return {x.normalized(), false};
}

std::map<std::string, std::vector<double>> plain(const GlobalFeatures& g) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [id, f] : g) out[id] = std::vector<double>(f.vector.data(), f.vector.data() + f.vector.size());
  return out;
}

std::map<std::string, std::vector<std::uint8_t>> plain(const LabelSet& l) {
  std::map<std::string, std::vector<std::uint8_t>> out;
  for (const auto& [id, v] : l) out[id] = v.data();
  return out;
}

}  // namespace

TEST_CASE("neighbour selection") {
  GlobalFeatures g{{"q", unit({1, 0})}, {"a", unit({-1, 0})}, {"b", unit({0, 1})}, {"c", unit({1, 0})},
                   {"d", unit({0, 1})}};

  SUBCASE("forced choice with negative similarity") {
    const NeighborSet n = knn_certain_neighbors(g, {"a"}, "q", 3);
    REQUIRE(n.neighbors.size() == 1);
    CHECK(n.neighbors[0].id == "a");
    CHECK(n.neighbors[0].similarity == doctest::Approx(-1.0));
    CHECK(n.neighbors[0].weight == 0.0);
  }
  SUBCASE("identical feature comes first") {
    const NeighborSet n = knn_certain_neighbors(g, {"a", "b", "c", "d"}, "q", 3);
    REQUIRE(n.neighbors.size() == 3);
    CHECK(n.neighbors[0].id == "c");
    CHECK(n.neighbors[0].weight == doctest::Approx(1.0));
    CHECK(n.neighbors[1].id == "b");
    CHECK(n.neighbors[2].id == "d");
  }
  SUBCASE("preconditions") {
    CHECK_THROWS_AS(knn_certain_neighbors(g, {}, "q", 3), ValidationError);
    CHECK_THROWS_AS(knn_certain_neighbors(g, {"a"}, "q", 0), ValidationError);
    CHECK_THROWS_AS(knn_certain_neighbors(g, {"q", "a"}, "q", 1), ValidationError);
  }
}

TEST_CASE("neighbour order matches a brute-force sort") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(500 + seed);
    std::normal_distribution<double> n(0.0, 1.0);
    GlobalFeatures g;
    for (int i = 0; i < 10; ++i) {
      Eigen::VectorXd v(3);
      for (int f = 0; f < 3; ++f) v[f] = std::round(2.0 * n(rng)) / 2.0;
      if (v.isZero()) v[0] = 1.0;
      g["s" + std::to_string(i)] = {v.normalized(), false};
    }
    std::set<std::string> certain;
    for (int i = 1; i < 10; ++i) certain.insert("s" + std::to_string(i));
    const NeighborSet got = knn_certain_neighbors(g, certain, "s0", 5);

    std::vector<std::pair<double, std::string>> all;
    for (const auto& id : certain) all.push_back({-g.at("s0").vector.dot(g.at(id).vector), id});
    std::sort(all.begin(), all.end());
    REQUIRE(got.neighbors.size() == 5);
    for (int i = 0; i < 5; ++i) {
      CHECK(got.neighbors[i].id == all[i].second);
      CHECK(got.neighbors[i].weight == std::max(0.0, -all[i].first));
    }
  }
}

TEST_CASE("weighted vote") {
  const LabelVolume a({1, 1, 3}, 3, {0, 1, 2});
  const LabelVolume b({1, 1, 3}, 3, {2, 1, 0});
  const LabelSet raw{{"a", a}, {"b", b}, {"q", LabelVolume::filled({1, 1, 3}, 3, 1)}};

  CHECK(refine_pseudo_label({"q", {{"a", 0.4, 0.4}}}, raw) == a);
  CHECK(refine_pseudo_label({"q", {{"a", 0.9, 0.9}, {"b", 0.1, 0.1}}}, raw) == a);
  CHECK(refine_pseudo_label({"q", {{"a", 0.1, 0.1}, {"b", 0.9, 0.9}}}, raw) == b);
  // Zero total weight keeps the query's own label.
  CHECK(refine_pseudo_label({"q", {{"a", -0.5, 0.0}}}, raw) == raw.at("q"));

  std::mt19937_64 rng(41);
  LabelSet three;
  for (const char* id : {"n1", "n2", "n3", "q"}) three.emplace(id, fixture::random_labels(rng, {2, 2, 2}, 3));
  const NeighborSet ns{"q", {{"n1", 0.7, 0.7}, {"n2", 0.5, 0.5}, {"n3", 0.2, 0.2}}};
  const LabelVolume got = refine_pseudo_label(ns, three);
  for (std::int64_t v = 0; v < 8; ++v) {
    double score[3] = {0, 0, 0};
    for (const auto& n : ns.neighbors) score[three.at(n.id)[v]] += n.weight;
    int best = 0;
    for (int c = 1; c < 3; ++c)
      if (score[c] > score[best]) best = c;
    CHECK(got[v] == best);
  }
}

TEST_CASE("refine_all") {
  SUBCASE("no uncertain samples is the identity") {
    const fixture::RefinePool pool = fixture::refine_pool(77);
    Partition p = pool.partition;
    p.certain.insert(p.uncertain.begin(), p.uncertain.end());
    p.uncertain.clear();
    const RefineResult r = refine_all(pool.raw, p, pool.globals, pool.k);
    CHECK(r.labels == pool.raw);
    CHECK(r.audit.empty());
  }
  SUBCASE("equal features give an equal-weight vote") {
    GlobalFeatures g{{"a", unit({1, 1})}, {"b", unit({1, 1})}, {"q", unit({1, 1})}};
    const LabelSet raw{{"a", LabelVolume({1, 1, 3}, 2, {1, 1, 0})},
                       {"b", LabelVolume({1, 1, 3}, 2, {1, 0, 0})},
                       {"q", LabelVolume({1, 1, 3}, 2, {0, 1, 1})}};
    Partition p;
    p.certain = {"a", "b"};
    p.uncertain = {"q"};
    const RefineResult r = refine_all(raw, p, g, 5);
    // Agreement wins; the 1-1 tie at voxel 1 goes to the lower class.
    CHECK(r.labels.at("q").data() == std::vector<std::uint8_t>{1, 0, 0});
    CHECK(r.labels.at("a") == raw.at("a"));
    REQUIRE(r.audit.size() == 1);
    CHECK(r.audit[0].neighbors.size() == 2);
  }
  SUBCASE("seeded pools match the brute-force vote") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      const fixture::RefinePool pool = fixture::refine_pool(900 + seed);
      const RefineResult r = refine_all(pool.raw, pool.partition, pool.globals, pool.k);
      CHECK(plain(r.labels) == oracle::refine(plain(pool.globals), plain(pool.raw), pool.partition.certain,
                                              pool.partition.uncertain, pool.k, pool.classes));
    }
  }
}
