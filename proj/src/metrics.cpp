#include "protoloop/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

namespace protoloop {

namespace {

void require_same_shape(const LabelVolume& a, const LabelVolume& b) {
  if (!(a.shape() == b.shape())) {
    throw ValidationError("shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

// Squared distance transform of a 1-D sampled function (lower envelope of
// parabolas, Felzenszwalb & Huttenlocher).
void edt_1d(const double* f, double* d, std::int64_t n, std::vector<std::int64_t>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  auto at = [](auto& vec, std::int64_t i) -> auto& { return vec[static_cast<std::size_t>(i)]; };
  auto intersect = [&](std::int64_t q, std::int64_t p) {
    return ((f[q] + static_cast<double>(q * q)) - (f[p] + static_cast<double>(p * p))) /
           (2.0 * static_cast<double>(q - p));
  };
  std::int64_t k = 0;
  at(v, 0) = 0;
  at(z, 0) = -inf;
  at(z, 1) = inf;
  for (std::int64_t q = 1; q < n; ++q) {
    double s = intersect(q, at(v, k));
    while (s <= at(z, k)) {
      --k;
      s = intersect(q, at(v, k));
    }
    ++k;
    at(v, k) = q;
    at(z, k) = s;
    at(z, k + 1) = inf;
  }
  k = 0;
  for (std::int64_t q = 0; q < n; ++q) {
    while (at(z, k + 1) < static_cast<double>(q)) ++k;
    const std::int64_t p = at(v, k);
    d[q] = static_cast<double>((q - p) * (q - p)) + f[p];
  }
}

double percentile95(std::vector<double> d) {
  std::sort(d.begin(), d.end());
  auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(d.size()) - 1e-9));
  rank = std::clamp<std::size_t>(rank, 1, d.size());
  return d[rank - 1];
}

}  // namespace

std::vector<std::uint8_t> class_mask(const LabelVolume& labels, int class_id) {
  std::vector<std::uint8_t> m(labels.data().size());
  for (std::size_t v = 0; v < m.size(); ++v) m[v] = labels.data()[v] == class_id ? 1 : 0;
  return m;
}

OverlapResult overlap_metrics(const LabelVolume& pred, const LabelVolume& ref, int class_id) {
  require_same_shape(pred, ref);
  std::int64_t p = 0, r = 0, both = 0;
  for (std::size_t v = 0; v < pred.data().size(); ++v) {
    const bool a = pred.data()[v] == class_id;
    const bool b = ref.data()[v] == class_id;
    p += a;
    r += b;
    both += a && b;
  }
  if (p + r == 0) return {1.0, 1.0, true};
  const double dice = 2.0 * static_cast<double>(both) / static_cast<double>(p + r);
  const double jaccard = static_cast<double>(both) / static_cast<double>(p + r - both);
  return {dice, jaccard, false};
}

std::vector<std::int64_t> surface_voxels(const std::vector<std::uint8_t>& mask, const Shape3& s) {
  std::vector<std::int64_t> out;
  for (std::int64_t i = 0; i < s.d; ++i)
    for (std::int64_t j = 0; j < s.h; ++j)
      for (std::int64_t k = 0; k < s.w; ++k) {
        const std::int64_t v = s.index(i, j, k);
        if (!mask[static_cast<std::size_t>(v)]) continue;
        const bool border = i == 0 || j == 0 || k == 0 || i == s.d - 1 || j == s.h - 1 || k == s.w - 1;
        if (border || !mask[static_cast<std::size_t>(s.index(i - 1, j, k))] ||
            !mask[static_cast<std::size_t>(s.index(i + 1, j, k))] ||
            !mask[static_cast<std::size_t>(s.index(i, j - 1, k))] ||
            !mask[static_cast<std::size_t>(s.index(i, j + 1, k))] ||
            !mask[static_cast<std::size_t>(s.index(i, j, k - 1))] ||
            !mask[static_cast<std::size_t>(s.index(i, j, k + 1))]) {
          out.push_back(v);
        }
      }
  return out;
}

std::vector<double> distance_transform(const std::vector<std::uint8_t>& seeds, const Shape3& s) {
  const std::size_t n = static_cast<std::size_t>(s.voxels());
  if (std::none_of(seeds.begin(), seeds.end(), [](std::uint8_t x) { return x != 0; })) {
    return std::vector<double>(n, std::numeric_limits<double>::infinity());
  }
  // Large finite stand-in for infinity keeps the parabola intersections finite.
  const double big = 1e20;
  std::vector<double> g(n);
  for (std::size_t v = 0; v < n; ++v) g[v] = seeds[v] ? 0.0 : big;

  const std::int64_t longest = std::max({s.d, s.h, s.w});
  std::vector<double> f(static_cast<std::size_t>(longest)), d(static_cast<std::size_t>(longest));
  std::vector<std::int64_t> v(static_cast<std::size_t>(longest));
  std::vector<double> z(static_cast<std::size_t>(longest) + 1);

  auto pass = [&](std::int64_t len, std::int64_t stride, auto&& starts) {
    for (std::int64_t base : starts) {
      for (std::int64_t t = 0; t < len; ++t) f[static_cast<std::size_t>(t)] = g[static_cast<std::size_t>(base + t * stride)];
      edt_1d(f.data(), d.data(), len, v, z);
      for (std::int64_t t = 0; t < len; ++t) g[static_cast<std::size_t>(base + t * stride)] = d[static_cast<std::size_t>(t)];
    }
  };
  std::vector<std::int64_t> starts;
  for (std::int64_t i = 0; i < s.d; ++i)
    for (std::int64_t j = 0; j < s.h; ++j) starts.push_back(s.index(i, j, 0));
  pass(s.w, 1, starts);
  starts.clear();
  for (std::int64_t i = 0; i < s.d; ++i)
    for (std::int64_t k = 0; k < s.w; ++k) starts.push_back(s.index(i, 0, k));
  pass(s.h, s.w, starts);
  starts.clear();
  for (std::int64_t j = 0; j < s.h; ++j)
    for (std::int64_t k = 0; k < s.w; ++k) starts.push_back(s.index(0, j, k));
  pass(s.d, s.h * s.w, starts);

  for (auto& x : g) x = std::sqrt(x);
  return g;
}

DistanceResult distance_metrics(const LabelVolume& pred, const LabelVolume& ref, int class_id) {
  require_same_shape(pred, ref);
  const Shape3& s = pred.shape();
  const auto pm = class_mask(pred, class_id);
  const auto rm = class_mask(ref, class_id);
  const auto ps = surface_voxels(pm, s);
  const auto rs = surface_voxels(rm, s);
  if (ps.empty() || rs.empty()) {
    const double diag = std::sqrt(static_cast<double>(s.d * s.d + s.h * s.h + s.w * s.w));
    return {diag, diag, true};
  }
  auto seeds = [&](const std::vector<std::int64_t>& surf) {
    std::vector<std::uint8_t> m(static_cast<std::size_t>(s.voxels()), 0);
    for (auto v : surf) m[static_cast<std::size_t>(v)] = 1;
    return m;
  };
  const auto to_ref = distance_transform(seeds(rs), s);
  const auto to_pred = distance_transform(seeds(ps), s);

  std::vector<double> a, b;
  a.reserve(ps.size());
  b.reserve(rs.size());
  for (auto v : ps) a.push_back(to_ref[static_cast<std::size_t>(v)]);
  for (auto v : rs) b.push_back(to_pred[static_cast<std::size_t>(v)]);

  double total = 0.0;
  for (double x : a) total += x;
  for (double x : b) total += x;
  const double asd = total / static_cast<double>(a.size() + b.size());
  const double hd95 = std::max(percentile95(std::move(a)), percentile95(std::move(b)));
  return {hd95, asd, false};
}

MetricReport evaluate(const LabelVolume& pred, const LabelVolume& ref) {
  require_same_shape(pred, ref);
  const int classes = std::max(pred.num_classes(), ref.num_classes());
  MetricReport out;
  for (int c = 1; c < classes; ++c) {
    ClassMetrics m{c, overlap_metrics(pred, ref, c), distance_metrics(pred, ref, c)};
    out.dice += m.overlap.dice;
    out.jaccard += m.overlap.jaccard;
    out.hd95 += m.distance.hd95;
    out.asd += m.distance.asd;
    out.degenerate = out.degenerate || m.distance.degenerate || m.overlap.both_empty;
    out.per_class.push_back(m);
  }
  const double fg = static_cast<double>(classes - 1);
  out.dice /= fg;
  out.jaccard /= fg;
  out.hd95 /= fg;
  out.asd /= fg;
  return out;
}

double pseudo_label_quality(const std::map<std::string, LabelVolume>& pseudo,
                            const std::map<std::string, LabelVolume>& truth) {
  if (pseudo.empty()) throw ValidationError("pseudo_label_quality: empty pool");
  double sum = 0.0;
  for (const auto& [id, labels] : pseudo) {
    auto it = truth.find(id);
    if (it == truth.end()) throw ValidationError("pseudo_label_quality: no truth for '" + id + "'");
    const int classes = std::max(labels.num_classes(), it->second.num_classes());
    double d = 0.0;
    for (int c = 1; c < classes; ++c) d += overlap_metrics(labels, it->second, c).dice;
    sum += d / static_cast<double>(classes - 1);
  }
  return sum / static_cast<double>(pseudo.size());
}

MeanStd mean_std(const std::vector<double>& values) {
  if (values.empty()) return {};
  double m = 0.0;
  for (double x : values) m += x;
  m /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double x : values) ss += (x - m) * (x - m);
  return {m, std::sqrt(ss / static_cast<double>(values.size()))};
}

MetricSummary summarize(const std::vector<CaseMetrics>& cases) {
  std::vector<double> d, j, h, a;
  for (const auto& c : cases) {
    d.push_back(c.report.dice);
    j.push_back(c.report.jaccard);
    h.push_back(c.report.hd95);
    a.push_back(c.report.asd);
  }
  return {mean_std(d), mean_std(j), mean_std(h), mean_std(a), cases.size()};
}

std::string format_aligned(const std::vector<std::vector<std::string>>& table) {
  if (table.empty()) return {};
  // "±" is two bytes in UTF-8 but one column wide.
  auto width = [](const std::string& x) {
    std::size_t w = 0;
    for (unsigned char ch : x) w += (ch & 0xC0) != 0x80;
    return w;
  };
  std::vector<std::size_t> widths(table.front().size(), 0);
  for (const auto& row : table)
    for (std::size_t c = 0; c < row.size() && c < widths.size(); ++c) widths[c] = std::max(widths[c], width(row[c]));
  std::ostringstream os;
  for (const auto& row : table) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      os << row[c];
      if (c + 1 < row.size()) os << std::string(widths[c] - width(row[c]) + 2, ' ');
    }
    os << "\n";
  }
  return os.str();
}

std::string format_metric_table(const std::vector<std::pair<std::string, MetricSummary>>& rows) {
  std::vector<std::vector<std::string>> table;
  table.push_back({"Method", "Dice[%]", "Jaccard[%]", "95HD[voxel]", "ASD[voxel]"});
  for (const auto& [name, s] : rows) {
    table.push_back({name, format_mean_std(s.dice, 100.0), format_mean_std(s.jaccard, 100.0),
                     format_mean_std(s.hd95, 1.0), format_mean_std(s.asd, 1.0)});
  }
  return format_aligned(table);
}

std::string format_mean_std(const MeanStd& v, double scale) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << v.mean * scale << " ± " << v.std * scale;
  return os.str();
}

}  // namespace protoloop
