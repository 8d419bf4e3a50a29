#include "protoloop/uncertainty.hpp"

#include <algorithm>
#include <cmath>

namespace protoloop {

Eigen::ArrayXd entropy_map(const ProbVolume& p) {
  const Eigen::MatrixXd& probs = p.probs();
  Eigen::ArrayXd out(probs.cols());
  for (Eigen::Index v = 0; v < probs.cols(); ++v) {
    double h = 0.0;
    for (Eigen::Index c = 0; c < probs.rows(); ++c) {
      const double q = probs(c, v);
      if (q < -1e-5 || q > 1.0 + 1e-5) throw ValidationError("entropy_map: probability outside [0, 1]");
      if (q > 0.0) h -= q * std::log(q);
    }
    out[v] = std::max(0.0, h);
  }
  return out;
}

SampleUncertainty sample_uncertainty(const ProbVolume& p, std::string id) {
  return {std::move(id), entropy_map(p).mean()};
}

Partition partition_by_quantile(const std::vector<SampleUncertainty>& uncertainties,
                                const std::string& labeled_id, double q_unc) {
  if (!(q_unc > 0.0 && q_unc <= 1.0)) throw ValidationError("q_unc must be in (0, 1]");
  std::vector<double> values;
  for (const auto& u : uncertainties) {
    if (u.id != labeled_id) values.push_back(u.value);
  }
  if (values.empty()) throw ValidationError("partition_by_quantile: empty pool");
  std::sort(values.begin(), values.end());

  const auto n = static_cast<double>(values.size());
  auto rank = static_cast<std::size_t>(std::ceil(q_unc * n - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, values.size());

  Partition out;
  out.threshold = values[rank - 1];
  out.certain.insert(labeled_id);
  for (const auto& u : uncertainties) {
    if (u.id == labeled_id) continue;
    (u.value <= out.threshold ? out.certain : out.uncertain).insert(u.id);
  }
  return out;
}

}  // namespace protoloop
