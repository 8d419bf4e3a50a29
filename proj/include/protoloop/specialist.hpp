#ifndef PROTOLOOP_SPECIALIST_HPP
#define PROTOLOOP_SPECIALIST_HPP

#include "protoloop/encoder.hpp"
#include "protoloop/prototype.hpp"

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace protoloop {

inline constexpr double kDiceSmooth = 1e-5;

/// Linear softmax classifier over per-voxel features: softmax(W f + b).
template <typename Scalar>
struct LinearSoftmax {
  using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Matrix weight;  // classes x features
  Vector bias;    // classes

  static LinearSoftmax zeros(Eigen::Index classes, Eigen::Index features) {
    return {Matrix::Zero(classes, features), Vector::Zero(classes)};
  }

  Eigen::Index classes() const { return weight.rows(); }
  Eigen::Index features() const { return weight.cols(); }

  template <typename T>
  LinearSoftmax<T> cast() const {
    return {weight.template cast<T>(), bias.template cast<T>()};
  }

  bool all_finite() const { return weight.allFinite() && bias.allFinite(); }
};

using SpecialistParams = LinearSoftmax<double>;

template <typename Scalar, typename Derived>
typename LinearSoftmax<Scalar>::Matrix logits(const LinearSoftmax<Scalar>& params,
                                              const Eigen::MatrixBase<Derived>& features) {
  typename LinearSoftmax<Scalar>::Matrix z = params.weight * features;
  z.colwise() += params.bias;
  return z;
}

/// Class probabilities, one column per feature column.
template <typename Scalar, typename Derived>
typename LinearSoftmax<Scalar>::Matrix forward(const LinearSoftmax<Scalar>& params,
                                               const Eigen::MatrixBase<Derived>& features) {
  return column_softmax(logits(params, features));
}

/// One optimisation batch. Labeled voxels come from the template, pseudo
/// voxels from one pseudo-labeled volume; `pseudo_noise` perturbs the student
/// input for the consistency term.
template <typename Scalar>
struct VoxelBatch {
  using Matrix = typename LinearSoftmax<Scalar>::Matrix;
  Matrix labeled_features;
  std::vector<std::uint8_t> labeled_targets;
  Matrix pseudo_features;
  std::vector<std::uint8_t> pseudo_targets;
  Matrix pseudo_noise;
};

template <typename Scalar>
struct LossTerms {
  Scalar total{};
  Scalar sup{};
  Scalar unsup{};
  Scalar pseudo{};
  LinearSoftmax<Scalar> grad;
};

namespace detail {

/// Backpropagates dL/dp through a column softmax: dz = p .* (g - <g, p>).
template <typename Matrix>
Matrix softmax_backward(const Matrix& probs, const Matrix& grad_probs) {
  Matrix dz = grad_probs;
  for (Eigen::Index i = 0; i < probs.cols(); ++i) {
    const auto inner = grad_probs.col(i).dot(probs.col(i));
    dz.col(i) = (probs.col(i).array() * (grad_probs.col(i).array() - inner)).matrix();
  }
  return dz;
}

/// 0.5 * (mean cross-entropy + soft Dice loss averaged over classes), and its
/// gradient with respect to the logits.
template <typename Matrix>
typename Matrix::Scalar segmentation_loss(const Matrix& z, const std::vector<std::uint8_t>& targets,
                                          Matrix& grad_z) {
  using Scalar = typename Matrix::Scalar;
  using std::exp;
  using std::log;
  const Eigen::Index classes = z.rows();
  const Eigen::Index n = z.cols();
  const Scalar inv_n = Scalar(1) / Scalar(n);
  const Scalar smooth = Scalar(kDiceSmooth);

  Matrix probs(classes, n);
  Scalar ce = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const Scalar m = z.col(i).maxCoeff();
    Scalar s = 0;
    for (Eigen::Index c = 0; c < classes; ++c) s += exp(z(c, i) - m);
    const Scalar lse = m + log(s);
    for (Eigen::Index c = 0; c < classes; ++c) probs(c, i) = exp(z(c, i) - lse);
    ce += lse - z(targets[static_cast<std::size_t>(i)], i);
  }
  ce *= inv_n;

  Matrix onehot = Matrix::Zero(classes, n);
  for (Eigen::Index i = 0; i < n; ++i) onehot(targets[static_cast<std::size_t>(i)], i) = Scalar(1);

  Matrix grad_p(classes, n);
  Scalar dice_sum = 0;
  for (Eigen::Index c = 0; c < classes; ++c) {
    const Scalar inter = probs.row(c).dot(onehot.row(c));
    const Scalar denom = probs.row(c).sum() + onehot.row(c).sum() + smooth;
    const Scalar numer = Scalar(2) * inter + smooth;
    dice_sum += numer / denom;
    for (Eigen::Index i = 0; i < n; ++i) {
      grad_p(c, i) = -(Scalar(2) * onehot(c, i) * denom - numer) / (denom * denom) / Scalar(classes);
    }
  }
  const Scalar dice_loss = Scalar(1) - dice_sum / Scalar(classes);

  grad_z = Scalar(0.5) * ((probs - onehot) * inv_n + softmax_backward(probs, grad_p));
  return Scalar(0.5) * (ce + dice_loss);
}

}  // namespace detail

/// L = L_sup + lambda * L_unsup + alpha * L_pseudo with analytic gradient.
/// L_sup and L_pseudo are 0.5 * (CE + soft Dice); L_unsup is the mean squared
/// difference between the student on perturbed pseudo features and the
/// teacher on clean ones.
template <typename Scalar>
LossTerms<Scalar> loss_and_grad(const LinearSoftmax<Scalar>& params, const LinearSoftmax<Scalar>& teacher,
                                const VoxelBatch<Scalar>& batch, Scalar alpha, Scalar lambda) {
  using Matrix = typename LinearSoftmax<Scalar>::Matrix;
  if (batch.labeled_features.cols() == 0 || batch.pseudo_features.cols() == 0) {
    throw ValidationError("loss_and_grad: empty batch partition");
  }
  if (static_cast<std::size_t>(batch.labeled_features.cols()) != batch.labeled_targets.size() ||
      static_cast<std::size_t>(batch.pseudo_features.cols()) != batch.pseudo_targets.size() ||
      batch.pseudo_noise.rows() != batch.pseudo_features.rows() ||
      batch.pseudo_noise.cols() != batch.pseudo_features.cols()) {
    throw ValidationError("loss_and_grad: inconsistent batch");
  }

  LossTerms<Scalar> out;
  Matrix grad_sup, grad_pseudo;
  out.sup = detail::segmentation_loss(Matrix(logits(params, batch.labeled_features)), batch.labeled_targets,
                                      grad_sup);
  out.pseudo = detail::segmentation_loss(Matrix(logits(params, batch.pseudo_features)),
                                         batch.pseudo_targets, grad_pseudo);

  const Matrix noisy = batch.pseudo_features + batch.pseudo_noise;
  const Matrix student = forward(params, noisy);
  const Matrix target = forward(teacher, batch.pseudo_features);
  const Matrix diff = student - target;
  const Scalar scale = Scalar(1) / Scalar(diff.size());
  out.unsup = diff.squaredNorm() * scale;
  const Matrix grad_unsup = detail::softmax_backward(student, Matrix(Scalar(2) * scale * diff));

  out.total = out.sup + lambda * out.unsup + alpha * out.pseudo;
  out.grad.weight = grad_sup * batch.labeled_features.transpose() +
                    lambda * (grad_unsup * noisy.transpose()) +
                    alpha * (grad_pseudo * batch.pseudo_features.transpose());
  out.grad.bias = grad_sup.rowwise().sum() + lambda * grad_unsup.rowwise().sum() +
                  alpha * grad_pseudo.rowwise().sum();
  return out;
}

/// min(1, iter / (fraction * total)).
double ramp_up_alpha(std::int64_t iter, std::int64_t total, double fraction = 0.3);

/// base_lr * (1 - iter / total)^power.
double poly_lr(double base_lr, std::int64_t iter, std::int64_t total, double power = 0.9);

/// Exponential moving average teacher.
struct EmaTeacher {
  SpecialistParams shadow;
  double decay = 0.99;

  /// shadow = decay * shadow + (1 - decay) * student
  void update(const SpecialistParams& student);
};

// ---------------------------------------------------------------------------
// Per-voxel features

/// Per-voxel feature source for one volume: the enclosing grid cell's feature
/// vector (center-aligned nearest mapping) followed by the voxel's z-scored
/// intensity.
class VoxelFeatureSource {
 public:
  VoxelFeatureSource(const IntensityVolume& vol, const FeatureGrid& grid);

  const Shape3& shape() const { return shape_; }
  std::int64_t voxels() const { return shape_.voxels(); }
  Eigen::Index dims() const { return cells_.rows() + 1; }

  Eigen::VectorXd feature(std::int64_t voxel) const;
  void gather(std::span<const std::int64_t> voxels, Eigen::Ref<Eigen::MatrixXd> out) const;
  /// Features of the voxels in [first, first + count).
  Eigen::MatrixXd range(std::int64_t first, std::int64_t count) const;

 private:
  Shape3 shape_;
  Eigen::MatrixXd cells_;
  Eigen::ArrayXd intensity_;
  std::vector<std::int64_t> cell_of_;
};

Eigen::VectorXd per_voxel_features(const IntensityVolume& vol, const FeatureGrid& grid, std::int64_t i,
                                   std::int64_t j, std::int64_t k);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::int64_t iterations = 3000;
  double base_lr = 0.01;
  double lr_power = 0.9;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::int64_t batch_voxels = 4096;
  double lambda_max = 0.1;
  double ramp_fraction = 0.3;
  double ema_decay = 0.99;
  double noise_sigma = 0.1;
  std::int64_t validation_interval = 100;
  std::uint64_t seed = 0;
};

void validate(const TrainConfig& c);

struct LabeledSource {
  const VoxelFeatureSource* features = nullptr;
  const LabelVolume* labels = nullptr;
};

struct TrainingSet {
  LabeledSource labeled;
  std::vector<LabeledSource> pseudo;
  std::vector<LabeledSource> validation;  // optional
};

struct TrainLogEntry {
  std::int64_t iter = 0;
  double lr = 0.0;
  double alpha = 0.0;
  double lambda = 0.0;
  double loss = 0.0;
  double l_sup = 0.0;
  double l_unsup = 0.0;
  double l_pseudo = 0.0;
};

struct TrainResult {
  SpecialistParams params;         // selected model (best validation or final)
  SpecialistParams final_student;
  EmaTeacher teacher;
  std::vector<TrainLogEntry> log;
  std::int64_t selected_iteration = 0;
  std::optional<double> best_validation_dice;
};

/// Trains a zero-initialised specialist for one round with SGD (momentum,
/// weight decay, polynomial decay) and an EMA teacher.
TrainResult train_round(const TrainingSet& data, const TrainConfig& config, int num_classes);

// ---------------------------------------------------------------------------
// Inference

/// Sliding-window inference. Window extents are clamped to the volume; the
/// last window on each axis is aligned to the volume end. Overlapping window
/// probabilities are averaged in window order and renormalised.
PseudoLabel infer(const SpecialistParams& params, const VoxelFeatureSource& source, const Shape3& window,
                  std::int64_t stride);

PseudoLabel infer(const SpecialistParams& params, const IntensityVolume& vol, const FeatureGrid& grid,
                  const Shape3& window, std::int64_t stride);

/// Window start offsets along one axis.
std::vector<std::int64_t> window_starts(std::int64_t extent, std::int64_t window, std::int64_t stride);

/// Params as a classes x (features + 1) f32 tensor, bias in the last column.
void save_params(const SpecialistParams& params, const std::filesystem::path& path, int round,
                 std::int64_t iteration);
SpecialistParams load_params(const std::filesystem::path& path);

}  // namespace protoloop

#endif  // PROTOLOOP_SPECIALIST_HPP
