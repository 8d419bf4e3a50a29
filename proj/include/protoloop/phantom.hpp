#ifndef PROTOLOOP_PHANTOM_HPP
#define PROTOLOOP_PHANTOM_HPP

#include "protoloop/volume.hpp"

#include <array>
#include <filesystem>
#include <map>

namespace protoloop {

enum class ShapeFamily { Ellipsoid, TwoEllipsoids };

/// Geometry of one foreground class. Centers are fractions of the volume
/// extent (continuous coordinates, voxel v has center v + 0.5); radii are in
/// voxels. `offset` places the second lobe of a TwoEllipsoids shape relative
/// to the first, in voxels.
struct PhantomClass {
  ShapeFamily family = ShapeFamily::Ellipsoid;
  std::array<double, 3> center{0.5, 0.5, 0.5};
  std::array<double, 3> radii{8.0, 8.0, 8.0};
  std::array<double, 3> offset{0.0, 0.0, 0.0};
  std::array<double, 3> second_radii{4.0, 4.0, 4.0};
};

struct PhantomSpec {
  int num_volumes = 24;  // training pool, the first one is the labeled template
  int num_test = 0;      // extra held-out volumes with ground truth
  int num_validation = 0;
  Shape3 shape{32, 32, 32};
  int num_classes = 2;
  std::vector<PhantomClass> classes;  // num_classes - 1 foreground entries
  double center_jitter = 0.0;         // voxels, uniform in [-j, j] per axis
  double radius_jitter = 0.0;         // relative, uniform in [-j, j] per axis
  std::vector<double> class_means{0.0, 1.0};
  std::array<double, 2> noise_sigma{0.0, 0.0};  // per-volume sigma, uniform in range
  /// Probability that a volume draws its sigma from `outlier_noise_sigma`
  /// instead. The template (first volume) never does.
  double outlier_fraction = 0.0;
  std::array<double, 2> outlier_noise_sigma{0.0, 0.0};
  std::uint64_t seed = 0;
  int max_attempts = 100;
};

void validate(const PhantomSpec& spec);

PhantomSpec phantom_spec_from_json(const std::string& text);
std::string phantom_spec_to_json(const PhantomSpec& spec);

/// The acceptance fixture: binary task, 24 training volumes of 32^3.
PhantomSpec calibrated_phantom_spec();

struct PhantomVolume {
  std::string id;
  Split split = Split::Train;
  IntensityVolume intensity;
  LabelVolume truth;
  double noise_sigma = 0.0;
};

/// Deterministic in (spec, seed).
std::vector<PhantomVolume> generate_volumes(const PhantomSpec& spec);

/// Writes volumes, labels and manifest.json into `out_dir`; returns the manifest.
/// Ground truth of every volume is written under truth/; only the template
/// carries a "label" entry.
DatasetManifest generate(const PhantomSpec& spec, const std::filesystem::path& out_dir);

}  // namespace protoloop

#endif  // PROTOLOOP_PHANTOM_HPP
