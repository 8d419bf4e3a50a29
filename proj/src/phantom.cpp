#include "protoloop/phantom.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

namespace protoloop {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Ellipsoid {
  std::array<double, 3> center;
  std::array<double, 3> radii;

  bool contains(double x, double y, double z) const {
    const double a = (x - center[0]) / radii[0];
    const double b = (y - center[1]) / radii[1];
    const double c = (z - center[2]) / radii[2];
    return a * a + b * b + c * c <= 1.0;
  }
};

std::string make_id(const char* prefix, int n) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s%03d", prefix, n);
  return buf;
}

}  // namespace

void validate(const PhantomSpec& spec) {
  require_valid(spec.shape, "phantom shape");
  if (spec.num_volumes < 2) throw ValidationError("phantom: need at least 2 training volumes");
  if (spec.num_test < 0 || spec.num_validation < 0) throw ValidationError("phantom: negative split size");
  if (spec.num_classes < 2 || spec.num_classes > 256) throw ValidationError("phantom: num_classes must be in [2, 256]");
  if (static_cast<int>(spec.classes.size()) != spec.num_classes - 1) {
    throw ValidationError("phantom: need one geometry entry per foreground class");
  }
  if (static_cast<int>(spec.class_means.size()) != spec.num_classes) {
    throw ValidationError("phantom: need one intensity mean per class");
  }
  if (!(spec.noise_sigma[0] >= 0.0 && spec.noise_sigma[1] >= spec.noise_sigma[0])) {
    throw ValidationError("phantom: noise sigma range must satisfy 0 <= lo <= hi");
  }
  if (!(spec.outlier_fraction >= 0.0 && spec.outlier_fraction <= 1.0)) {
    throw ValidationError("phantom: outlier_fraction must be in [0, 1]");
  }
  if (spec.outlier_fraction > 0.0 &&
      !(spec.outlier_noise_sigma[0] >= 0.0 && spec.outlier_noise_sigma[1] >= spec.outlier_noise_sigma[0])) {
    throw ValidationError("phantom: outlier sigma range must satisfy 0 <= lo <= hi");
  }
  if (!(spec.center_jitter >= 0.0 && spec.radius_jitter >= 0.0 && spec.radius_jitter < 1.0)) {
    throw ValidationError("phantom: jitter must be >= 0 (radius jitter < 1)");
  }
  if (spec.max_attempts < 1) throw ValidationError("phantom: max_attempts must be >= 1");
  for (const auto& c : spec.classes) {
    auto check = [&](const std::array<double, 3>& center, const std::array<double, 3>& radii) {
      for (int a = 0; a < 3; ++a) {
        const double extent = static_cast<double>(spec.shape[a]);
        const double reach = radii[a] * (1.0 + spec.radius_jitter) + spec.center_jitter;
        if (!(radii[a] > 0.0) || center[a] - reach < 0.0 || center[a] + reach > extent) {
          throw ValidationError("phantom: infeasible geometry (radii do not fit inside the volume after jitter)");
        }
      }
    };
    const std::array<double, 3> c0{c.center[0] * spec.shape.d, c.center[1] * spec.shape.h,
                                   c.center[2] * spec.shape.w};
    check(c0, c.radii);
    if (c.family == ShapeFamily::TwoEllipsoids) {
      check({c0[0] + c.offset[0], c0[1] + c.offset[1], c0[2] + c.offset[2]}, c.second_radii);
    }
  }
}

PhantomSpec phantom_spec_from_json(const std::string& text) {
  PhantomSpec spec;
  try {
    const json doc = json::parse(text);
    spec.num_volumes = doc.value("num_volumes", spec.num_volumes);
    spec.num_test = doc.value("num_test", spec.num_test);
    spec.num_validation = doc.value("num_validation", spec.num_validation);
    if (doc.contains("shape")) {
      const auto s = doc["shape"].get<std::vector<std::int64_t>>();
      if (s.size() != 3) throw ValidationError("phantom: shape needs 3 extents");
      spec.shape = {s[0], s[1], s[2]};
    }
    spec.num_classes = doc.value("num_classes", spec.num_classes);
    spec.center_jitter = doc.value("center_jitter", spec.center_jitter);
    spec.radius_jitter = doc.value("radius_jitter", spec.radius_jitter);
    spec.class_means = doc.value("class_means", spec.class_means);
    if (doc.contains("noise_sigma")) {
      const auto n = doc["noise_sigma"].get<std::vector<double>>();
      if (n.size() != 2) throw ValidationError("phantom: noise_sigma is [lo, hi]");
      spec.noise_sigma = {n[0], n[1]};
    }
    spec.outlier_fraction = doc.value("outlier_fraction", spec.outlier_fraction);
    if (doc.contains("outlier_noise_sigma")) {
      const auto n = doc["outlier_noise_sigma"].get<std::vector<double>>();
      if (n.size() != 2) throw ValidationError("phantom: outlier_noise_sigma is [lo, hi]");
      spec.outlier_noise_sigma = {n[0], n[1]};
    }
    spec.seed = doc.value("seed", spec.seed);
    spec.max_attempts = doc.value("max_attempts", spec.max_attempts);
    for (const auto& c : doc.at("classes")) {
      PhantomClass pc;
      const std::string family = c.value("family", std::string("ellipsoid"));
      if (family == "ellipsoid") {
        pc.family = ShapeFamily::Ellipsoid;
      } else if (family == "two_ellipsoids") {
        pc.family = ShapeFamily::TwoEllipsoids;
      } else {
        throw ValidationError("phantom: unknown shape family '" + family + "'");
      }
      pc.center = c.value("center", pc.center);
      pc.radii = c.value("radii", pc.radii);
      pc.offset = c.value("offset", pc.offset);
      pc.second_radii = c.value("second_radii", pc.second_radii);
      spec.classes.push_back(pc);
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("phantom spec: ") + e.what());
  }
  validate(spec);
  return spec;
}

std::string phantom_spec_to_json(const PhantomSpec& spec) {
  json classes = json::array();
  for (const auto& c : spec.classes) {
    classes.push_back({{"family", c.family == ShapeFamily::Ellipsoid ? "ellipsoid" : "two_ellipsoids"},
                       {"center", c.center},
                       {"radii", c.radii},
                       {"offset", c.offset},
                       {"second_radii", c.second_radii}});
  }
  json doc = {{"num_volumes", spec.num_volumes},
              {"num_test", spec.num_test},
              {"num_validation", spec.num_validation},
              {"shape", {spec.shape.d, spec.shape.h, spec.shape.w}},
              {"num_classes", spec.num_classes},
              {"classes", classes},
              {"center_jitter", spec.center_jitter},
              {"radius_jitter", spec.radius_jitter},
              {"class_means", spec.class_means},
              {"noise_sigma", {spec.noise_sigma[0], spec.noise_sigma[1]}},
              {"outlier_fraction", spec.outlier_fraction},
              {"outlier_noise_sigma", {spec.outlier_noise_sigma[0], spec.outlier_noise_sigma[1]}},
              {"seed", spec.seed},
              {"max_attempts", spec.max_attempts}};
  return doc.dump(2) + "\n";
}

PhantomSpec calibrated_phantom_spec() {
  PhantomSpec spec;
  spec.num_volumes = 24;
  spec.num_test = 8;
  spec.shape = {32, 32, 32};
  spec.num_classes = 2;
  PhantomClass fg;
  fg.family = ShapeFamily::Ellipsoid;
  fg.center = {0.5, 0.5, 0.5};
  fg.radii = {9.0, 7.0, 8.0};
  spec.classes = {fg};
  spec.center_jitter = 2.0;
  spec.radius_jitter = 0.15;
  spec.class_means = {0.0, 1.0};
  spec.noise_sigma = {0.2, 0.6};
  spec.seed = 20241016;
  return spec;
}

std::vector<PhantomVolume> generate_volumes(const PhantomSpec& spec) {
  validate(spec);
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::uniform_real_distribution<double> sigma_dist(spec.noise_sigma[0], spec.noise_sigma[1]);
  std::uniform_real_distribution<double> outlier_sigma_dist(spec.outlier_noise_sigma[0], spec.outlier_noise_sigma[1]);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Shape3& s = spec.shape;
  const int total = spec.num_volumes + spec.num_validation + spec.num_test;

  std::vector<PhantomVolume> out;
  out.reserve(static_cast<std::size_t>(total));
  for (int n = 0; n < total; ++n) {
    std::vector<std::uint8_t> labels;
    bool ok = false;
    for (int attempt = 0; attempt < spec.max_attempts && !ok; ++attempt) {
      std::vector<std::vector<Ellipsoid>> shapes;
      for (const auto& c : spec.classes) {
        std::array<double, 3> center{}, radii{};
        for (int a = 0; a < 3; ++a) {
          center[a] = c.center[static_cast<std::size_t>(a)] * static_cast<double>(s[a]) +
                      spec.center_jitter * unit(rng);
          radii[a] = c.radii[static_cast<std::size_t>(a)] * (1.0 + spec.radius_jitter * unit(rng));
        }
        std::vector<Ellipsoid> lobes{{center, radii}};
        if (c.family == ShapeFamily::TwoEllipsoids) {
          std::array<double, 3> c2{}, r2{};
          for (int a = 0; a < 3; ++a) {
            c2[a] = center[a] + c.offset[static_cast<std::size_t>(a)];
            r2[a] = c.second_radii[static_cast<std::size_t>(a)] * (1.0 + spec.radius_jitter * unit(rng));
          }
          lobes.push_back({c2, r2});
        }
        shapes.push_back(std::move(lobes));
      }
      labels.assign(static_cast<std::size_t>(s.voxels()), 0);
      std::vector<std::int64_t> counts(static_cast<std::size_t>(spec.num_classes), 0);
      for (std::int64_t i = 0; i < s.d; ++i)
        for (std::int64_t j = 0; j < s.h; ++j)
          for (std::int64_t k = 0; k < s.w; ++k) {
            const double x = static_cast<double>(i) + 0.5;
            const double y = static_cast<double>(j) + 0.5;
            const double z = static_cast<double>(k) + 0.5;
            std::uint8_t cls = 0;
            for (std::size_t c = 0; c < shapes.size(); ++c) {
              for (const auto& e : shapes[c]) {
                if (e.contains(x, y, z)) cls = static_cast<std::uint8_t>(c + 1);
              }
            }
            labels[static_cast<std::size_t>(s.index(i, j, k))] = cls;
            ++counts[cls];
          }
      ok = std::all_of(counts.begin(), counts.end(), [](std::int64_t c) { return c > 0; });
    }
    if (!ok) throw ValidationError("phantom: infeasible geometry (a class vanished after retries)");

    const bool outlier = coin(rng) < spec.outlier_fraction && n > 0;
    const double sigma = outlier ? outlier_sigma_dist(rng) : sigma_dist(rng);
    Eigen::ArrayXf intensity(s.voxels());
    for (std::int64_t v = 0; v < s.voxels(); ++v) {
      const double mean = spec.class_means[labels[static_cast<std::size_t>(v)]];
      intensity[v] = static_cast<float>(mean + sigma * gauss(rng));
    }

    PhantomVolume pv{
        n < spec.num_volumes ? make_id("vol", n)
        : n < spec.num_volumes + spec.num_validation ? make_id("val", n - spec.num_volumes)
                                                     : make_id("test", n - spec.num_volumes - spec.num_validation),
        n < spec.num_volumes ? Split::Train
        : n < spec.num_volumes + spec.num_validation ? Split::Validation
                                                     : Split::Test,
        IntensityVolume(s, std::move(intensity)), LabelVolume(s, spec.num_classes, std::move(labels)), sigma};
    out.push_back(std::move(pv));
  }
  return out;
}

DatasetManifest generate(const PhantomSpec& spec, const fs::path& out_dir) {
  const auto volumes = generate_volumes(spec);
  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "truth");

  DatasetManifest m;
  m.num_classes = spec.num_classes;
  m.exactly_one_labeled = true;
  for (std::size_t n = 0; n < volumes.size(); ++n) {
    const auto& pv = volumes[n];
    VolumeEntry e;
    e.id = pv.id;
    e.split = pv.split;
    e.intensity = out_dir / "images" / (pv.id + ".img");
    const fs::path truth = out_dir / "truth" / (pv.id + ".label");
    save_array(pv.intensity, e.intensity);
    save_array(pv.truth, truth);
    if (n == 0 || pv.split != Split::Train) {
      e.label = truth;
    } else {
      e.truth = truth;
    }
    m.volumes.push_back(std::move(e));
  }
  save_manifest(m, out_dir / "manifest.json");
  write_text_atomic(out_dir / "phantom_spec.json", phantom_spec_to_json(spec));
  return m;
}

}  // namespace protoloop
