#include "protoloop/specialist.hpp"

#include "protoloop/metrics.hpp"

#include "json.hpp"

#include <algorithm>
#include <cstring>
#include <random>

namespace protoloop {

namespace fs = std::filesystem;
using nlohmann::json;

double ramp_up_alpha(std::int64_t iter, std::int64_t total, double fraction) {
  if (total <= 0) throw ValidationError("ramp_up_alpha: total must be positive");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ValidationError("ramp_up_alpha: fraction must be in (0, 1]");
  if (iter <= 0) return 0.0;
  return std::min(1.0, static_cast<double>(iter) / (fraction * static_cast<double>(total)));
}

double poly_lr(double base_lr, std::int64_t iter, std::int64_t total, double power) {
  if (total <= 0) throw ValidationError("poly_lr: total must be positive");
  const double frac = std::clamp(1.0 - static_cast<double>(iter) / static_cast<double>(total), 0.0, 1.0);
  return base_lr * std::pow(frac, power);
}

void EmaTeacher::update(const SpecialistParams& student) {
  shadow.weight = decay * shadow.weight + (1.0 - decay) * student.weight;
  shadow.bias = decay * shadow.bias + (1.0 - decay) * student.bias;
}

// ---------------------------------------------------------------------------

VoxelFeatureSource::VoxelFeatureSource(const IntensityVolume& vol, const FeatureGrid& grid)
    : shape_(vol.shape()),
      cells_(grid.data().cast<double>()),
      intensity_(zscore(vol)),
      cell_of_(nearest_cell_map(grid.grid_shape(), vol.shape())) {
  const Shape3& g = grid.grid_shape();
  if (g.d > shape_.d || g.h > shape_.h || g.w > shape_.w) {
    throw ValidationError("feature grid " + to_string(g) + " larger than volume " + to_string(shape_));
  }
}

Eigen::VectorXd VoxelFeatureSource::feature(std::int64_t voxel) const {
  if (voxel < 0 || voxel >= voxels()) throw ValidationError("voxel index out of range");
  Eigen::VectorXd f(dims());
  f.head(cells_.rows()) = cells_.col(cell_of_[static_cast<std::size_t>(voxel)]);
  f(cells_.rows()) = intensity_[voxel];
  return f;
}

void VoxelFeatureSource::gather(std::span<const std::int64_t> voxels, Eigen::Ref<Eigen::MatrixXd> out) const {
  const Eigen::Index c = cells_.rows();
  for (std::size_t n = 0; n < voxels.size(); ++n) {
    const auto v = voxels[n];
    const auto col = static_cast<Eigen::Index>(n);
    out.col(col).head(c) = cells_.col(cell_of_[static_cast<std::size_t>(v)]);
    out(c, col) = intensity_[v];
  }
}

Eigen::MatrixXd VoxelFeatureSource::range(std::int64_t first, std::int64_t count) const {
  Eigen::MatrixXd out(dims(), count);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
  for (std::int64_t n = 0; n < count; ++n) idx[static_cast<std::size_t>(n)] = first + n;
  gather(idx, out);
  return out;
}

Eigen::VectorXd per_voxel_features(const IntensityVolume& vol, const FeatureGrid& grid, std::int64_t i,
                                   std::int64_t j, std::int64_t k) {
  const Shape3& s = vol.shape();
  if (i < 0 || j < 0 || k < 0 || i >= s.d || j >= s.h || k >= s.w) {
    throw ValidationError("per_voxel_features: voxel outside volume");
  }
  return VoxelFeatureSource(vol, grid).feature(s.index(i, j, k));
}

// ---------------------------------------------------------------------------

void validate(const TrainConfig& c) {
  if (c.iterations < 1) throw ValidationError("train: iterations must be >= 1");
  if (!(c.base_lr >= 0.0)) throw ValidationError("train: base_lr must be >= 0");
  if (!(c.ramp_fraction > 0.0 && c.ramp_fraction <= 1.0)) {
    throw ValidationError("train: ramp fraction must be in (0, 1]");
  }
  if (!(c.ema_decay >= 0.0 && c.ema_decay < 1.0)) throw ValidationError("train: EMA decay must be in [0, 1)");
  if (c.batch_voxels < 2) throw ValidationError("train: batch_voxels must be >= 2");
  if (!(c.noise_sigma >= 0.0)) throw ValidationError("train: noise sigma must be >= 0");
  if (!(c.momentum >= 0.0 && c.momentum < 1.0)) throw ValidationError("train: momentum must be in [0, 1)");
  if (!(c.weight_decay >= 0.0)) throw ValidationError("train: weight decay must be >= 0");
  if (c.validation_interval < 1) throw ValidationError("train: validation interval must be >= 1");
}

namespace {

double validation_dice(const SpecialistParams& params, const std::vector<LabeledSource>& sets) {
  double sum = 0.0;
  for (const auto& s : sets) {
    const Shape3& shape = s.features->shape();
    const PseudoLabel pred = infer(params, *s.features, shape, shape.d);
    const MetricReport r = evaluate(pred.labels, *s.labels);
    sum += r.dice;
  }
  return sum / static_cast<double>(sets.size());
}

void check_source(const LabeledSource& s, Eigen::Index dims, int classes, const char* what) {
  if (!s.features || !s.labels) throw ValidationError(std::string("train: missing ") + what);
  if (!(s.features->shape() == s.labels->shape())) {
    throw ValidationError(std::string("train: ") + what + " labels do not match the volume shape");
  }
  if (s.features->dims() != dims) throw ValidationError(std::string("train: ") + what + " feature size mismatch");
  if (s.labels->num_classes() != classes) throw ValidationError(std::string("train: ") + what + " class count mismatch");
}

}  // namespace

TrainResult train_round(const TrainingSet& data, const TrainConfig& config, int num_classes) {
  validate(config);
  if (data.pseudo.empty()) throw ValidationError("train: no pseudo-labeled volumes");
  if (!data.labeled.features) throw ValidationError("train: missing labeled volume");
  const Eigen::Index dims = data.labeled.features->dims();
  check_source(data.labeled, dims, num_classes, "labeled volume");
  for (const auto& p : data.pseudo) check_source(p, dims, num_classes, "pseudo-labeled volume");
  for (const auto& v : data.validation) check_source(v, dims, num_classes, "validation volume");

  std::mt19937_64 rng(config.seed);
  const std::int64_t n_lab = config.batch_voxels / 2;
  const std::int64_t n_pseudo = config.batch_voxels - n_lab;
  std::uniform_int_distribution<std::size_t> pick_volume(0, data.pseudo.size() - 1);
  std::normal_distribution<double> noise(0.0, 1.0);

  TrainResult out;
  SpecialistParams params = SpecialistParams::zeros(num_classes, dims);
  SpecialistParams velocity = SpecialistParams::zeros(num_classes, dims);
  out.teacher = {SpecialistParams::zeros(num_classes, dims), config.ema_decay};
  out.log.reserve(static_cast<std::size_t>(config.iterations));

  VoxelBatch<double> batch;
  batch.labeled_features.resize(dims, n_lab);
  batch.labeled_targets.resize(static_cast<std::size_t>(n_lab));
  batch.pseudo_features.resize(dims, n_pseudo);
  batch.pseudo_targets.resize(static_cast<std::size_t>(n_pseudo));
  batch.pseudo_noise.resize(dims, n_pseudo);
  std::vector<std::int64_t> idx_lab(static_cast<std::size_t>(n_lab));
  std::vector<std::int64_t> idx_pseudo(static_cast<std::size_t>(n_pseudo));

  const bool validating = !data.validation.empty();
  std::optional<double> best;
  SpecialistParams best_params = params;
  std::int64_t best_iter = 0;

  for (std::int64_t t = 0; t < config.iterations; ++t) {
    std::uniform_int_distribution<std::int64_t> pick_lab(0, data.labeled.features->voxels() - 1);
    for (auto& v : idx_lab) v = pick_lab(rng);
    const LabeledSource& src = data.pseudo[pick_volume(rng)];
    std::uniform_int_distribution<std::int64_t> pick_voxel(0, src.features->voxels() - 1);
    for (auto& v : idx_pseudo) v = pick_voxel(rng);

    data.labeled.features->gather(idx_lab, batch.labeled_features);
    for (std::size_t n = 0; n < idx_lab.size(); ++n) batch.labeled_targets[n] = (*data.labeled.labels)[idx_lab[n]];
    src.features->gather(idx_pseudo, batch.pseudo_features);
    for (std::size_t n = 0; n < idx_pseudo.size(); ++n) batch.pseudo_targets[n] = (*src.labels)[idx_pseudo[n]];
    for (Eigen::Index n = 0; n < batch.pseudo_noise.size(); ++n) {
      batch.pseudo_noise.data()[n] = config.noise_sigma * noise(rng);
    }

    const double alpha = ramp_up_alpha(t, config.iterations, config.ramp_fraction);
    const double lambda = config.lambda_max * alpha;
    const double lr = poly_lr(config.base_lr, t, config.iterations, config.lr_power);
    const LossTerms<double> terms = loss_and_grad(params, out.teacher.shadow, batch, alpha, lambda);

    velocity.weight = config.momentum * velocity.weight + terms.grad.weight + config.weight_decay * params.weight;
    velocity.bias = config.momentum * velocity.bias + terms.grad.bias + config.weight_decay * params.bias;
    params.weight -= lr * velocity.weight;
    params.bias -= lr * velocity.bias;
    out.teacher.update(params);

    out.log.push_back({t, lr, alpha, lambda, terms.total, terms.sup, terms.unsup, terms.pseudo});

    if (validating && ((t + 1) % config.validation_interval == 0 || t + 1 == config.iterations)) {
      const double dice = validation_dice(params, data.validation);
      if (!best || dice > *best) {
        best = dice;
        best_params = params;
        best_iter = t + 1;
      }
    }
  }
  if (!params.all_finite()) throw std::runtime_error("train: parameters diverged");

  out.final_student = params;
  if (validating) {
    out.params = best_params;
    out.selected_iteration = best_iter;
    out.best_validation_dice = best;
  } else {
    out.params = params;
    out.selected_iteration = config.iterations;
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<std::int64_t> window_starts(std::int64_t extent, std::int64_t window, std::int64_t stride) {
  if (stride <= 0) throw ValidationError("infer: stride must be positive");
  window = std::min(window, extent);
  std::vector<std::int64_t> out;
  for (std::int64_t s = 0; s + window < extent; s += stride) out.push_back(s);
  if (out.empty() || out.back() != extent - window) out.push_back(extent - window);
  return out;
}

PseudoLabel infer(const SpecialistParams& params, const VoxelFeatureSource& source, const Shape3& window,
                  std::int64_t stride) {
  if (stride <= 0) throw ValidationError("infer: stride must be positive");
  require_valid(window, "infer window");
  if (params.features() != source.dims()) throw ValidationError("infer: feature size mismatch");
  const Shape3& s = source.shape();
  const Shape3 win{std::min(window.d, s.d), std::min(window.h, s.h), std::min(window.w, s.w)};
  const auto si = window_starts(s.d, win.d, stride);
  const auto sj = window_starts(s.h, win.h, stride);
  const auto sk = window_starts(s.w, win.w, stride);

  Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(params.classes(), s.voxels());
  std::vector<std::int32_t> hits(static_cast<std::size_t>(s.voxels()), 0);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(win.w));
  Eigen::MatrixXd feats(source.dims(), win.w);

  for (auto i0 : si)
    for (auto j0 : sj)
      for (auto k0 : sk)
        for (std::int64_t i = i0; i < i0 + win.d; ++i)
          for (std::int64_t j = j0; j < j0 + win.h; ++j) {
            for (std::int64_t k = 0; k < win.w; ++k) idx[static_cast<std::size_t>(k)] = s.index(i, j, k0 + k);
            source.gather(idx, feats);
            const Eigen::MatrixXd p = forward(params, feats);
            for (std::int64_t k = 0; k < win.w; ++k) {
              const auto v = idx[static_cast<std::size_t>(k)];
              acc.col(v) += p.col(k);
              ++hits[static_cast<std::size_t>(v)];
            }
          }

  for (Eigen::Index v = 0; v < acc.cols(); ++v) {
    if (hits[static_cast<std::size_t>(v)] > 1) {
      acc.col(v) /= static_cast<double>(hits[static_cast<std::size_t>(v)]);
      acc.col(v) /= acc.col(v).sum();
    }
  }
  auto labels = column_argmax(acc);
  return {LabelVolume(s, static_cast<int>(params.classes()), std::move(labels)), ProbVolume(s, std::move(acc))};
}

PseudoLabel infer(const SpecialistParams& params, const IntensityVolume& vol, const FeatureGrid& grid,
                  const Shape3& window, std::int64_t stride) {
  return infer(params, VoxelFeatureSource(vol, grid), window, stride);
}

// ---------------------------------------------------------------------------

void save_params(const SpecialistParams& params, const fs::path& path, int round, std::int64_t iteration) {
  const Eigen::Index rows = params.classes();
  const Eigen::Index cols = params.features() + 1;
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> packed(rows, cols);
  packed.leftCols(cols - 1) = params.weight.cast<float>();
  packed.col(cols - 1) = params.bias.cast<float>();
  json meta = {{"features", params.features()}, {"num_classes", rows}, {"round", round}, {"iteration", iteration}};
  write_raw_array(path, DType::F32, {rows, cols}, meta.dump(), packed.data(),
                  static_cast<std::size_t>(packed.size()) * sizeof(float));
}

SpecialistParams load_params(const fs::path& path) {
  const RawArray arr = read_raw_array(path);
  if (arr.dtype != DType::F32 || arr.shape.size() != 2 || arr.shape[1] < 2) {
    throw IoError("malformed parameter file " + path.string());
  }
  const std::vector<float> flat = arr.as_f32();
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> packed(
      flat.data(), arr.shape[0], arr.shape[1]);
  const Eigen::Index cols = packed.cols();
  return {packed.leftCols(cols - 1).cast<double>(), packed.col(cols - 1).cast<double>()};
}

}  // namespace protoloop
