#ifndef PROTOLOOP_VOLUME_HPP
#define PROTOLOOP_VOLUME_HPP

#include <Eigen/Core>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace protoloop {

/// Raised when an input violates a documented precondition or type invariant.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for IO and format failures.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Voxel extents of a 3D lattice. Row-major, `d` is the slowest axis.
struct Shape3 {
  std::int64_t d = 1;
  std::int64_t h = 1;
  std::int64_t w = 1;

  std::int64_t voxels() const { return d * h * w; }
  bool valid() const { return d >= 1 && h >= 1 && w >= 1; }
  std::int64_t index(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return (i * h + j) * w + k;
  }
  std::int64_t operator[](int axis) const { return axis == 0 ? d : (axis == 1 ? h : w); }

  friend bool operator==(const Shape3&, const Shape3&) = default;
};

std::string to_string(const Shape3& s);

/// Throws ValidationError unless every extent is at least one.
void require_valid(const Shape3& s, const char* what);

/// Real-valued scalar volume stored as 32-bit floats.
class IntensityVolume {
 public:
  IntensityVolume(Shape3 shape, Eigen::ArrayXf data);

  const Shape3& shape() const { return shape_; }
  const Eigen::ArrayXf& data() const { return data_; }
  float at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data_[shape_.index(i, j, k)];
  }

 private:
  Shape3 shape_;
  Eigen::ArrayXf data_;
};

/// Integer class map with ids in [0, num_classes).
class LabelVolume {
 public:
  LabelVolume(Shape3 shape, int num_classes, std::vector<std::uint8_t> data);

  /// Volume filled with a single class.
  static LabelVolume filled(Shape3 shape, int num_classes, std::uint8_t value);

  const Shape3& shape() const { return shape_; }
  int num_classes() const { return num_classes_; }
  const std::vector<std::uint8_t>& data() const { return data_; }
  std::uint8_t operator[](std::int64_t v) const { return data_[static_cast<std::size_t>(v)]; }

  friend bool operator==(const LabelVolume&, const LabelVolume&) = default;

 private:
  Shape3 shape_;
  int num_classes_;
  std::vector<std::uint8_t> data_;
};

/// Per-voxel class probabilities, one column per voxel (num_classes x voxels).
class ProbVolume {
 public:
  ProbVolume(Shape3 shape, Eigen::MatrixXd probs);

  const Shape3& shape() const { return shape_; }
  int num_classes() const { return static_cast<int>(probs_.rows()); }
  const Eigen::MatrixXd& probs() const { return probs_; }

 private:
  Shape3 shape_;
  Eigen::MatrixXd probs_;
};

/// Per-class real field over a lattice, one column per cell. Values may be
/// -inf (used for absent classes).
struct ClassMaps {
  Shape3 shape;
  Eigen::MatrixXd values;
};

/// Center-aligned nearest-neighbour source index: floor((i + 0.5) * src / dst),
/// clamped to [0, src).
inline std::int64_t nearest_source_index(std::int64_t i, std::int64_t src, std::int64_t dst) {
  const std::int64_t idx = ((2 * i + 1) * src) / (2 * dst);
  return idx < src ? idx : src - 1;
}

/// Per-voxel source cell under center-aligned nearest-neighbour mapping from
/// `target` voxels onto `source` cells.
std::vector<std::int64_t> nearest_cell_map(const Shape3& source, const Shape3& target);

LabelVolume nearest_downsample_labels(const LabelVolume& labels, const Shape3& target);

/// Nearest-neighbour resample to any shape (used when neighbour label volumes
/// differ in shape from the query).
LabelVolume nearest_resample_labels(const LabelVolume& labels, const Shape3& target);

ClassMaps nearest_upsample_maps(const ClassMaps& maps, const Shape3& target);

// ---------------------------------------------------------------------------
// Array files
// ---------------------------------------------------------------------------

enum class DType { F32, U8 };

/// Decoded array file: dtype, shape, full JSON header text, raw payload bytes.
struct RawArray {
  DType dtype = DType::F32;
  std::vector<std::int64_t> shape;
  std::string header_json;
  std::vector<std::uint8_t> payload;

  std::int64_t elements() const;
  std::vector<float> as_f32() const;
};

/// Serialize `extra` JSON keys (may be "{}") together with dtype/shape/order.
void write_raw_array(const std::filesystem::path& path, DType dtype,
                     const std::vector<std::int64_t>& shape, const std::string& extra_json,
                     const void* payload, std::size_t payload_bytes);

RawArray read_raw_array(const std::filesystem::path& path);

void save_array(const IntensityVolume& vol, const std::filesystem::path& path);
void save_array(const LabelVolume& labels, const std::filesystem::path& path);

IntensityVolume load_intensity(const std::filesystem::path& path);

/// `num_classes` overrides the header; when neither is present it is
/// max(label) + 1, at least 2.
LabelVolume load_labels(const std::filesystem::path& path,
                        std::optional<int> num_classes = std::nullopt);

/// Writes `text` to `path` through a temporary file and rename.
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

enum class Split { Train, Validation, Test };

std::string to_string(Split s);

struct VolumeEntry {
  std::string id;
  std::filesystem::path intensity;
  std::optional<std::filesystem::path> label;
  std::optional<std::filesystem::path> features;
  /// Ground truth of an unlabeled volume; used only for quality tracking.
  std::optional<std::filesystem::path> truth;
  Split split = Split::Train;
};

struct DatasetManifest {
  std::vector<VolumeEntry> volumes;
  bool exactly_one_labeled = true;
  int num_classes = 2;

  /// The single labeled training volume. Throws if there is not exactly one.
  const VolumeEntry& template_entry() const;
  std::vector<const VolumeEntry*> unlabeled() const;
  std::vector<const VolumeEntry*> of_split(Split s) const;
  const VolumeEntry& find(const std::string& id) const;
};

/// Checks unique ids, the one-labeled rule and class count.
void validate(const DatasetManifest& m);

/// Relative paths are resolved against the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path);

/// Paths are written relative to the manifest's directory when possible.
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

}  // namespace protoloop

#endif  // PROTOLOOP_VOLUME_HPP
