#ifndef PROTOLOOP_ENCODER_HPP
#define PROTOLOOP_ENCODER_HPP

#include "protoloop/volume.hpp"

#include <atomic>
#include <filesystem>

namespace protoloop {

/// Dense per-cell features, one column per grid cell in row-major cell order.
/// Stored as float so that saved and freshly computed grids are identical.
class FeatureGrid {
 public:
  FeatureGrid(Shape3 grid_shape, Shape3 patch_size, Eigen::MatrixXf data);

  int channels() const { return static_cast<int>(data_.rows()); }
  const Shape3& grid_shape() const { return grid_shape_; }
  const Shape3& patch_size() const { return patch_size_; }
  const Eigen::MatrixXf& data() const { return data_; }
  auto cell(std::int64_t c) const { return data_.col(c); }

  friend bool operator==(const FeatureGrid& a, const FeatureGrid& b) {
    return a.grid_shape_ == b.grid_shape_ && a.patch_size_ == b.patch_size_ &&
           a.data_.rows() == b.data_.rows() && a.data_.cols() == b.data_.cols() &&
           a.data_ == b.data_;
  }

 private:
  Shape3 grid_shape_;
  Shape3 patch_size_;
  Eigen::MatrixXf data_;
};

/// L2-normalised global average pooled feature. `degenerate` marks an
/// all-zero pooled vector, in which case `vector` is zero.
struct GlobalFeature {
  Eigen::VectorXd vector;
  bool degenerate = false;
};

struct EncoderParams {
  int patch_size = 8;
  bool include_position = true;
  double position_weight = 0.25;
};

void validate(const EncoderParams& p);

/// Number of channels the built-in encoder emits for `p` (8 or 11).
int encoder_channels(const EncoderParams& p);

/// Per-volume z-score; a constant volume maps to all zeros.
Eigen::ArrayXd zscore(const IntensityVolume& vol);

/// Patch-statistics encoder. Channels per cell, in order: mean, std, min, max,
/// median, mean |d/dx|, mean |d/dy|, mean |d/dz| of the z-scored intensities,
/// then optionally three position channels.
FeatureGrid extract_feature_grid(const IntensityVolume& vol, const EncoderParams& params);

/// Total number of extract_feature_grid calls in this process.
std::uint64_t encoder_invocations();

GlobalFeature global_feature(const FeatureGrid& grid);

void save_feature_grid(const FeatureGrid& grid, const std::filesystem::path& path);

/// Loads a grid file. Without a "patch_size" header key the patch size is
/// ceil(volume extent / grid extent) per axis, which requires `volume_shape`.
FeatureGrid load_feature_grid(const std::filesystem::path& path,
                              std::optional<Shape3> volume_shape = std::nullopt);

/// Loads the externally computed grid named by `entry.features`.
/// `expected_channels`, when set, must match the file.
FeatureGrid ingest_external_features(const VolumeEntry& entry, const Shape3& volume_shape,
                                     std::optional<int> expected_channels = std::nullopt);

}  // namespace protoloop

#endif  // PROTOLOOP_ENCODER_HPP
