#include "protoloop/encoder.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>

namespace protoloop {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::atomic<std::uint64_t> g_encoder_calls{0};

constexpr int kStatChannels = 8;

// np.gradient convention: central differences inside, one-sided at the borders.
Eigen::ArrayXd abs_gradient(const Eigen::ArrayXd& z, const Shape3& s, int axis) {
  Eigen::ArrayXd g = Eigen::ArrayXd::Zero(z.size());
  const std::int64_t n = s[axis];
  if (n < 2) return g;
  const std::int64_t stride = axis == 0 ? s.h * s.w : (axis == 1 ? s.w : 1);
  for (std::int64_t i = 0; i < s.d; ++i) {
    for (std::int64_t j = 0; j < s.h; ++j) {
      for (std::int64_t k = 0; k < s.w; ++k) {
        const std::int64_t v = s.index(i, j, k);
        const std::int64_t pos = axis == 0 ? i : (axis == 1 ? j : k);
        double d = 0.0;
        if (pos == 0) {
          d = z[v + stride] - z[v];
        } else if (pos == n - 1) {
          d = z[v] - z[v - stride];
        } else {
          d = 0.5 * (z[v + stride] - z[v - stride]);
        }
        g[v] = std::abs(d);
      }
    }
  }
  return g;
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

}  // namespace

void validate(const EncoderParams& p) {
  if (p.patch_size < 2) throw ValidationError("encoder: patch_size must be >= 2");
  if (!(p.position_weight >= 0.0)) throw ValidationError("encoder: position_weight must be >= 0");
}

int encoder_channels(const EncoderParams& p) { return kStatChannels + (p.include_position ? 3 : 0); }

FeatureGrid::FeatureGrid(Shape3 grid_shape, Shape3 patch_size, Eigen::MatrixXf data)
    : grid_shape_(grid_shape), patch_size_(patch_size), data_(std::move(data)) {
  require_valid(grid_shape_, "FeatureGrid");
  require_valid(patch_size_, "FeatureGrid patch size");
  if (data_.rows() < 1 || data_.cols() != grid_shape_.voxels()) {
    throw ValidationError("FeatureGrid: shape/payload mismatch");
  }
  if (!data_.allFinite()) throw ValidationError("FeatureGrid: non-finite feature");
}

Eigen::ArrayXd zscore(const IntensityVolume& vol) {
  const Eigen::ArrayXd x = vol.data().cast<double>();
  const double mean = x.mean();
  const double var = (x - mean).square().mean();
  const double sd = std::sqrt(var);
  if (!(sd > 0.0)) return Eigen::ArrayXd::Zero(x.size());
  return (x - mean) / sd;
}

FeatureGrid extract_feature_grid(const IntensityVolume& vol, const EncoderParams& params) {
  validate(params);
  g_encoder_calls.fetch_add(1, std::memory_order_relaxed);

  const Shape3& s = vol.shape();
  const std::int64_t p = params.patch_size;
  const Shape3 grid{ceil_div(s.d, p), ceil_div(s.h, p), ceil_div(s.w, p)};
  const int channels = encoder_channels(params);

  const Eigen::ArrayXd z = zscore(vol);
  const Eigen::ArrayXd gx = abs_gradient(z, s, 2);
  const Eigen::ArrayXd gy = abs_gradient(z, s, 1);
  const Eigen::ArrayXd gz = abs_gradient(z, s, 0);

  Eigen::MatrixXf out(channels, grid.voxels());
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(p * p * p));

  for (std::int64_t ci = 0; ci < grid.d; ++ci) {
    for (std::int64_t cj = 0; cj < grid.h; ++cj) {
      for (std::int64_t ck = 0; ck < grid.w; ++ck) {
        const std::int64_t i0 = ci * p, i1 = std::min(s.d, i0 + p);
        const std::int64_t j0 = cj * p, j1 = std::min(s.h, j0 + p);
        const std::int64_t k0 = ck * p, k1 = std::min(s.w, k0 + p);

        values.clear();
        double sx = 0.0, sy = 0.0, sz = 0.0;
        for (std::int64_t i = i0; i < i1; ++i)
          for (std::int64_t j = j0; j < j1; ++j)
            for (std::int64_t k = k0; k < k1; ++k) {
              const std::int64_t v = s.index(i, j, k);
              values.push_back(z[v]);
              sx += gx[v];
              sy += gy[v];
              sz += gz[v];
            }
        const double n = static_cast<double>(values.size());
        double sum = 0.0;
        for (double x : values) sum += x;
        const double mean = sum / n;
        double ss = 0.0;
        for (double x : values) ss += (x - mean) * (x - mean);
        std::sort(values.begin(), values.end());
        const std::size_t m = values.size() / 2;
        const double median = values.size() % 2 ? values[m] : 0.5 * (values[m - 1] + values[m]);

        const std::int64_t c = grid.index(ci, cj, ck);
        out(0, c) = static_cast<float>(mean);
        out(1, c) = static_cast<float>(std::sqrt(ss / n));
        out(2, c) = static_cast<float>(values.front());
        out(3, c) = static_cast<float>(values.back());
        out(4, c) = static_cast<float>(median);
        out(5, c) = static_cast<float>(sx / n);
        out(6, c) = static_cast<float>(sy / n);
        out(7, c) = static_cast<float>(sz / n);
        if (params.include_position) {
          const double wgt = params.position_weight;
          out(8, c) = static_cast<float>(wgt * (0.5 * static_cast<double>(i0 + i1)) / static_cast<double>(s.d));
          out(9, c) = static_cast<float>(wgt * (0.5 * static_cast<double>(j0 + j1)) / static_cast<double>(s.h));
          out(10, c) = static_cast<float>(wgt * (0.5 * static_cast<double>(k0 + k1)) / static_cast<double>(s.w));
        }
      }
    }
  }
  return FeatureGrid(grid, Shape3{p, p, p}, std::move(out));
}

std::uint64_t encoder_invocations() { return g_encoder_calls.load(std::memory_order_relaxed); }

GlobalFeature global_feature(const FeatureGrid& grid) {
  const Eigen::VectorXd pooled = grid.data().cast<double>().rowwise().mean();
  const double norm = pooled.norm();
  if (!(norm > 0.0)) return {Eigen::VectorXd::Zero(pooled.size()), true};
  return {pooled / norm, false};
}

void save_feature_grid(const FeatureGrid& grid, const fs::path& path) {
  const Shape3& g = grid.grid_shape();
  const Shape3& p = grid.patch_size();
  // Row-major C x D' x H' x W': channel is the slowest axis.
  const Eigen::MatrixXf row_major = grid.data().transpose();
  json extra = {{"channels", grid.channels()}, {"patch_size", {p.d, p.h, p.w}}};
  write_raw_array(path, DType::F32, {grid.channels(), g.d, g.h, g.w}, extra.dump(), row_major.data(),
                  static_cast<std::size_t>(row_major.size()) * sizeof(float));
}

FeatureGrid load_feature_grid(const fs::path& path, std::optional<Shape3> volume_shape) {
  const RawArray arr = read_raw_array(path);
  if (arr.dtype != DType::F32) throw IoError("dtype mismatch: expected f32 in " + path.string());
  if (arr.shape.size() != 4) throw IoError("feature grid must be 4-D in " + path.string());
  const json header = json::parse(arr.header_json);
  const std::int64_t channels = arr.shape[0];
  if (header.contains("channels") && header["channels"].get<std::int64_t>() != channels) {
    throw IoError("malformed header: channels disagrees with shape in " + path.string());
  }
  const Shape3 grid{arr.shape[1], arr.shape[2], arr.shape[3]};

  Shape3 patch;
  if (header.contains("patch_size")) {
    const auto ps = header["patch_size"].get<std::vector<std::int64_t>>();
    if (ps.size() != 3) throw IoError("malformed header: patch_size in " + path.string());
    patch = {ps[0], ps[1], ps[2]};
  } else {
    if (!volume_shape) throw ValidationError("feature grid without patch_size needs the volume shape");
    patch = {ceil_div(volume_shape->d, grid.d), ceil_div(volume_shape->h, grid.h),
             ceil_div(volume_shape->w, grid.w)};
  }
  if (volume_shape && (grid.d > volume_shape->d || grid.h > volume_shape->h || grid.w > volume_shape->w)) {
    throw ValidationError("feature grid " + to_string(grid) + " larger than volume " +
                          to_string(*volume_shape));
  }

  const std::vector<float> flat = arr.as_f32();
  Eigen::Map<const Eigen::MatrixXf> row_major(flat.data(), grid.voxels(), channels);
  return FeatureGrid(grid, patch, row_major.transpose());
}

FeatureGrid ingest_external_features(const VolumeEntry& entry, const Shape3& volume_shape,
                                     std::optional<int> expected_channels) {
  if (!entry.features) throw ValidationError("volume '" + entry.id + "' has no feature path");
  const FeatureGrid loaded = load_feature_grid(*entry.features, volume_shape);
  if (expected_channels && loaded.channels() != *expected_channels) {
    throw ValidationError("channel mismatch: '" + entry.id + "' has " +
                          std::to_string(loaded.channels()) + " channels, expected " +
                          std::to_string(*expected_channels));
  }
  const Shape3& grid = loaded.grid_shape();
  const Shape3 patch{ceil_div(volume_shape.d, grid.d), ceil_div(volume_shape.h, grid.h),
                     ceil_div(volume_shape.w, grid.w)};
  return FeatureGrid(grid, patch, loaded.data());
}

}  // namespace protoloop
