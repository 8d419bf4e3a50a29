#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fixtures.hpp"

#include <fstream>

using namespace protoloop;

TEST_CASE("shape invariants") {
  CHECK(Shape3{2, 3, 4}.voxels() == 24);
  CHECK(Shape3{2, 3, 4}.index(1, 2, 3) == 23);
  CHECK_THROWS_AS(require_valid(Shape3{0, 1, 1}, "s"), ValidationError);
  CHECK_THROWS_AS(IntensityVolume(Shape3{2, 2, 2}, Eigen::ArrayXf::Zero(7)), ValidationError);
  Eigen::ArrayXf bad = Eigen::ArrayXf::Zero(8);
  bad[3] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(IntensityVolume(Shape3{2, 2, 2}, bad), ValidationError);
  CHECK_THROWS_AS(LabelVolume(Shape3{1, 1, 2}, 2, {0, 2}), ValidationError);
  CHECK_THROWS_AS(LabelVolume(Shape3{1, 1, 2}, 1, {0, 0}), ValidationError);
}

TEST_CASE("probability volume checks the simplex") {
  Eigen::MatrixXd p(2, 2);
  p << 0.5, 1.0, 0.5, 0.0;
  CHECK_NOTHROW(ProbVolume(Shape3{1, 1, 2}, p));
  p(0, 0) = 0.6;
  CHECK_THROWS_AS(ProbVolume(Shape3{1, 1, 2}, p), ValidationError);
  p << -0.5, 1.0, 1.5, 0.0;
  CHECK_THROWS_AS(ProbVolume(Shape3{1, 1, 2}, p), ValidationError);
}

TEST_CASE("nearest neighbour index rule") {
  CHECK(nearest_source_index(0, 4, 2) == 1);
  CHECK(nearest_source_index(1, 4, 2) == 3);
  CHECK(nearest_source_index(0, 2, 4) == 0);
  CHECK(nearest_source_index(1, 2, 4) == 0);
  CHECK(nearest_source_index(2, 2, 4) == 1);
  CHECK(nearest_source_index(3, 2, 4) == 1);
  CHECK(nearest_source_index(2, 3, 3) == 2);
}

TEST_CASE("label downsampling") {
  const LabelVolume ones = LabelVolume::filled({4, 4, 4}, 2, 1);
  CHECK(nearest_downsample_labels(ones, {2, 2, 2}) == LabelVolume::filled({2, 2, 2}, 2, 1));

  const LabelVolume line({4, 1, 1}, 2, {0, 0, 1, 1});
  CHECK(nearest_downsample_labels(line, {2, 1, 1}).data() == std::vector<std::uint8_t>{0, 1});

  std::mt19937_64 rng(7);
  const LabelVolume r = fixture::random_labels(rng, {3, 4, 5}, 3);
  CHECK(nearest_downsample_labels(r, r.shape()) == r);
  CHECK_THROWS_AS(nearest_downsample_labels(r, {4, 4, 5}), ValidationError);
}

TEST_CASE("map upsampling") {
  ClassMaps one{{1, 1, 1}, Eigen::MatrixXd::Constant(1, 1, 0.7)};
  const ClassMaps up = nearest_upsample_maps(one, {3, 3, 3});
  CHECK(up.values.cols() == 27);
  CHECK((up.values.array() == 0.7).all());

  ClassMaps two{{2, 1, 1}, Eigen::MatrixXd(1, 2)};
  two.values << 1.5, -2.0;
  const ClassMaps four = nearest_upsample_maps(two, {4, 1, 1});
  CHECK(four.values(0, 0) == 1.5);
  CHECK(four.values(0, 1) == 1.5);
  CHECK(four.values(0, 2) == -2.0);
  CHECK(four.values(0, 3) == -2.0);
  CHECK(nearest_upsample_maps(two, two.shape).values == two.values);
}

TEST_CASE("array round trip") {
  const auto dir = fixture::scratch("volume_io");
  SUBCASE("constant intensity") {
    save_array(IntensityVolume({2, 2, 2}, Eigen::ArrayXf::Ones(8)), dir / "a.img");
    const IntensityVolume v = load_intensity(dir / "a.img");
    CHECK(v.shape() == Shape3{2, 2, 2});
    CHECK((v.data() == 1.0f).all());
  }
  SUBCASE("seeded intensity is bit identical") {
    std::mt19937_64 rng(11);
    std::normal_distribution<float> n(0.0f, 3.0f);
    Eigen::ArrayXf d(64);
    for (auto& x : d) x = n(rng);
    save_array(IntensityVolume({4, 4, 4}, d), dir / "b.img");
    CHECK((load_intensity(dir / "b.img").data() == d).all());
  }
  SUBCASE("labels keep their class count") {
    std::mt19937_64 rng(12);
    const LabelVolume l = fixture::random_labels(rng, {3, 2, 5}, 4);
    save_array(l, dir / "c.label");
    const LabelVolume back = load_labels(dir / "c.label");
    CHECK(back == l);
    CHECK(back.num_classes() == 4);
  }
  SUBCASE("dtype is checked") {
    save_array(LabelVolume::filled({2, 2, 2}, 2, 1), dir / "d.label");
    CHECK_THROWS_AS(load_intensity(dir / "d.label"), IoError);
  }
}

TEST_CASE("malformed array files") {
  const auto dir = fixture::scratch("volume_bad");
  const std::vector<float> eight(8, 1.0f);
  write_raw_array(dir / "ok.img", DType::F32, {2, 2, 2}, "{}", eight.data(), 32);

  SUBCASE("shape disagrees with payload") {
    std::ifstream in(dir / "ok.img", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    bytes.resize(bytes.size() - 4);
    std::ofstream(dir / "short.img", std::ios::binary) << bytes;
    try {
      load_intensity(dir / "short.img");
      FAIL("expected an error");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find("shape/payload mismatch") != std::string::npos);
    }
  }
  SUBCASE("bad magic") {
    std::ofstream(dir / "junk.img", std::ios::binary) << "not an array file at all";
    CHECK_THROWS_AS(load_intensity(dir / "junk.img"), IoError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_intensity(dir / "none.img"), IoError); }
  SUBCASE("empty extent refuses to save") {
    CHECK_THROWS_AS(write_raw_array(dir / "e.img", DType::F32, {2, 0, 2}, "{}", eight.data(), 0), ValidationError);
  }
}

TEST_CASE("manifest rules") {
  const auto dir = fixture::scratch("manifest");
  DatasetManifest m;
  m.num_classes = 3;
  m.volumes.push_back({"t", dir / "t.img", dir / "t.label", std::nullopt, std::nullopt, Split::Train});
  m.volumes.push_back({"u1", dir / "u1.img", std::nullopt, std::nullopt, dir / "u1.label", Split::Train});
  m.volumes.push_back({"x", dir / "x.img", dir / "x.label", std::nullopt, std::nullopt, Split::Test});
  CHECK_NOTHROW(validate(m));
  save_manifest(m, dir / "manifest.json");
  const DatasetManifest back = load_manifest(dir / "manifest.json");
  REQUIRE(back.volumes.size() == 3);
  CHECK(back.template_entry().id == "t");
  CHECK(back.unlabeled().size() == 1);
  CHECK(back.unlabeled()[0]->truth.value() == dir / "u1.label");
  CHECK(back.of_split(Split::Test).size() == 1);
  CHECK(back.volumes[0].intensity == dir / "t.img");
  CHECK(back.num_classes == 3);

  SUBCASE("two labeled training volumes") {
    m.volumes[1].label = dir / "u1.label";
    CHECK_THROWS_AS(validate(m), ValidationError);
  }
  SUBCASE("missing template label") {
    m.volumes[0].label.reset();
    CHECK_THROWS_WITH_AS(validate(m), doctest::Contains("missing template label"), ValidationError);
  }
  SUBCASE("duplicate ids") {
    m.volumes[1].id = "t";
    CHECK_THROWS_AS(validate(m), ValidationError);
  }
}
