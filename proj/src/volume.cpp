#include "protoloop/volume.hpp"

#include "json.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace protoloop {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::array<char, 6> kMagic = {'V', 'X', 'A', 'R', '\x01', '\x00'};

static_assert(std::endian::native == std::endian::little,
              "array IO assumes a little-endian host");

std::int64_t product(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

}  // namespace

std::string to_string(const Shape3& s) {
  std::ostringstream os;
  os << s.d << "x" << s.h << "x" << s.w;
  return os.str();
}

void require_valid(const Shape3& s, const char* what) {
  if (!s.valid()) {
    throw ValidationError(std::string(what) + ": empty extent in shape " + to_string(s));
  }
}

IntensityVolume::IntensityVolume(Shape3 shape, Eigen::ArrayXf data)
    : shape_(shape), data_(std::move(data)) {
  require_valid(shape_, "IntensityVolume");
  if (data_.size() != shape_.voxels()) {
    throw ValidationError("IntensityVolume: shape/payload mismatch");
  }
  if (!data_.isFinite().all()) {
    throw ValidationError("IntensityVolume: non-finite intensity");
  }
}

LabelVolume::LabelVolume(Shape3 shape, int num_classes, std::vector<std::uint8_t> data)
    : shape_(shape), num_classes_(num_classes), data_(std::move(data)) {
  require_valid(shape_, "LabelVolume");
  if (num_classes_ < 2 || num_classes_ > 256) {
    throw ValidationError("LabelVolume: num_classes must be in [2, 256]");
  }
  if (static_cast<std::int64_t>(data_.size()) != shape_.voxels()) {
    throw ValidationError("LabelVolume: shape/payload mismatch");
  }
  for (auto v : data_) {
    if (v >= num_classes_) {
      throw ValidationError("LabelVolume: class id " + std::to_string(v) + " >= num_classes " +
                            std::to_string(num_classes_));
    }
  }
}

LabelVolume LabelVolume::filled(Shape3 shape, int num_classes, std::uint8_t value) {
  require_valid(shape, "LabelVolume");
  return LabelVolume(shape, num_classes,
                     std::vector<std::uint8_t>(static_cast<std::size_t>(shape.voxels()), value));
}

ProbVolume::ProbVolume(Shape3 shape, Eigen::MatrixXd probs) : shape_(shape), probs_(std::move(probs)) {
  require_valid(shape_, "ProbVolume");
  if (probs_.cols() != shape_.voxels() || probs_.rows() < 2) {
    throw ValidationError("ProbVolume: shape/payload mismatch");
  }
  if ((probs_.array() < -1e-5).any() || (probs_.array() > 1.0 + 1e-5).any() ||
      !probs_.allFinite()) {
    throw ValidationError("ProbVolume: probability outside [0, 1]");
  }
  const Eigen::ArrayXd sums = probs_.colwise().sum().transpose().array();
  if (((sums - 1.0).abs() > 1e-5).any()) {
    throw ValidationError("ProbVolume: class probabilities do not sum to 1");
  }
}

std::vector<std::int64_t> nearest_cell_map(const Shape3& source, const Shape3& target) {
  std::vector<std::int64_t> map(static_cast<std::size_t>(target.voxels()));
  std::vector<std::int64_t> ii(target.d), jj(target.h), kk(target.w);
  for (std::int64_t i = 0; i < target.d; ++i) ii[i] = nearest_source_index(i, source.d, target.d);
  for (std::int64_t j = 0; j < target.h; ++j) jj[j] = nearest_source_index(j, source.h, target.h);
  for (std::int64_t k = 0; k < target.w; ++k) kk[k] = nearest_source_index(k, source.w, target.w);
  std::size_t v = 0;
  for (std::int64_t i = 0; i < target.d; ++i)
    for (std::int64_t j = 0; j < target.h; ++j)
      for (std::int64_t k = 0; k < target.w; ++k) map[v++] = source.index(ii[i], jj[j], kk[k]);
  return map;
}

LabelVolume nearest_resample_labels(const LabelVolume& labels, const Shape3& target) {
  require_valid(target, "nearest_resample_labels");
  const auto map = nearest_cell_map(labels.shape(), target);
  std::vector<std::uint8_t> out(map.size());
  for (std::size_t v = 0; v < map.size(); ++v) out[v] = labels[map[v]];
  return LabelVolume(target, labels.num_classes(), std::move(out));
}

LabelVolume nearest_downsample_labels(const LabelVolume& labels, const Shape3& target) {
  require_valid(target, "nearest_downsample_labels");
  const Shape3& src = labels.shape();
  if (target.d > src.d || target.h > src.h || target.w > src.w) {
    throw ValidationError("nearest_downsample_labels: target " + to_string(target) +
                          " larger than source " + to_string(src));
  }
  return nearest_resample_labels(labels, target);
}

ClassMaps nearest_upsample_maps(const ClassMaps& maps, const Shape3& target) {
  require_valid(target, "nearest_upsample_maps");
  const Shape3& src = maps.shape;
  if (target.d < src.d || target.h < src.h || target.w < src.w) {
    throw ValidationError("nearest_upsample_maps: target " + to_string(target) +
                          " smaller than source " + to_string(src));
  }
  if (maps.values.cols() != src.voxels()) {
    throw ValidationError("nearest_upsample_maps: shape/payload mismatch");
  }
  const auto map = nearest_cell_map(src, target);
  ClassMaps out{target, Eigen::MatrixXd(maps.values.rows(), target.voxels())};
  for (std::size_t v = 0; v < map.size(); ++v) {
    out.values.col(static_cast<Eigen::Index>(v)) = maps.values.col(map[v]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Array files

std::int64_t RawArray::elements() const { return product(shape); }

std::vector<float> RawArray::as_f32() const {
  if (dtype != DType::F32) throw ValidationError("dtype mismatch: expected f32");
  std::vector<float> out(payload.size() / sizeof(float));
  std::memcpy(out.data(), payload.data(), out.size() * sizeof(float));
  return out;
}

void write_raw_array(const fs::path& path, DType dtype, const std::vector<std::int64_t>& shape,
                     const std::string& extra_json, const void* payload, std::size_t payload_bytes) {
  if (shape.empty()) throw ValidationError("save_array: empty shape");
  for (auto s : shape) {
    if (s < 1) throw ValidationError("save_array: empty extent in shape");
  }
  const std::size_t elem = dtype == DType::F32 ? 4 : 1;
  if (static_cast<std::size_t>(product(shape)) * elem != payload_bytes) {
    throw ValidationError("save_array: shape/payload mismatch");
  }
  json header = extra_json.empty() ? json::object() : json::parse(extra_json);
  header["dtype"] = dtype == DType::F32 ? "f32" : "u8";
  header["shape"] = shape;
  header["order"] = "row-major";
  const std::string text = header.dump();
  const auto len = static_cast<std::uint32_t>(text.size());

  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(kMagic.data(), kMagic.size());
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(static_cast<const char*>(payload), static_cast<std::streamsize>(payload_bytes));
    if (!out) throw IoError("write failed: " + path.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename into " + path.string() + ": " + ec.message());
}

RawArray read_raw_array(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::array<char, 6> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw IoError("malformed header: bad magic in " + path.string());
  std::uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!in || len > (1u << 24)) throw IoError("malformed header: bad length in " + path.string());
  std::string text(len, '\0');
  in.read(text.data(), len);
  if (!in) throw IoError("malformed header: truncated in " + path.string());

  RawArray arr;
  try {
    const json header = json::parse(text);
    const std::string dtype = header.at("dtype").get<std::string>();
    if (dtype == "f32") {
      arr.dtype = DType::F32;
    } else if (dtype == "u8") {
      arr.dtype = DType::U8;
    } else {
      throw IoError("malformed header: unknown dtype " + dtype);
    }
    if (header.value("order", std::string("row-major")) != "row-major") {
      throw IoError("malformed header: unsupported order");
    }
    arr.shape = header.at("shape").get<std::vector<std::int64_t>>();
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed header: ") + e.what());
  }
  if (arr.shape.empty()) throw IoError("malformed header: empty shape");
  for (auto s : arr.shape) {
    if (s < 1) throw IoError("malformed header: empty extent in shape");
  }
  arr.header_json = std::move(text);

  const std::size_t elem = arr.dtype == DType::F32 ? 4 : 1;
  const std::size_t expected = static_cast<std::size_t>(arr.elements()) * elem;
  const auto start = in.tellg();
  in.seekg(0, std::ios::end);
  const auto end = in.tellg();
  if (static_cast<std::size_t>(end - start) != expected) {
    throw IoError("shape/payload mismatch in " + path.string());
  }
  in.seekg(start);
  arr.payload.resize(expected);
  in.read(reinterpret_cast<char*>(arr.payload.data()), static_cast<std::streamsize>(expected));
  if (!in) throw IoError("truncated payload in " + path.string());
  return arr;
}

void save_array(const IntensityVolume& vol, const fs::path& path) {
  const Shape3& s = vol.shape();
  write_raw_array(path, DType::F32, {s.d, s.h, s.w}, "{}", vol.data().data(),
                  static_cast<std::size_t>(vol.data().size()) * sizeof(float));
}

void save_array(const LabelVolume& labels, const fs::path& path) {
  const Shape3& s = labels.shape();
  json extra = {{"num_classes", labels.num_classes()}};
  write_raw_array(path, DType::U8, {s.d, s.h, s.w}, extra.dump(), labels.data().data(),
                  labels.data().size());
}

namespace {

Shape3 shape3_of(const RawArray& arr, const fs::path& path) {
  if (arr.shape.size() != 3) throw IoError("expected a 3-D array in " + path.string());
  return {arr.shape[0], arr.shape[1], arr.shape[2]};
}

}  // namespace

IntensityVolume load_intensity(const fs::path& path) {
  const RawArray arr = read_raw_array(path);
  if (arr.dtype != DType::F32) throw IoError("dtype mismatch: expected f32 in " + path.string());
  const Shape3 shape = shape3_of(arr, path);
  Eigen::ArrayXf data(arr.elements());
  std::memcpy(data.data(), arr.payload.data(), arr.payload.size());
  if (!data.isFinite().all()) throw IoError("non-finite intensity in " + path.string());
  return IntensityVolume(shape, std::move(data));
}

LabelVolume load_labels(const fs::path& path, std::optional<int> num_classes) {
  const RawArray arr = read_raw_array(path);
  if (arr.dtype != DType::U8) throw IoError("dtype mismatch: expected u8 in " + path.string());
  const Shape3 shape = shape3_of(arr, path);
  std::vector<std::uint8_t> data(arr.payload.begin(), arr.payload.end());
  int classes = 0;
  if (num_classes) {
    classes = *num_classes;
  } else {
    const json header = json::parse(arr.header_json);
    if (header.contains("num_classes")) {
      classes = header["num_classes"].get<int>();
    } else {
      const auto mx = data.empty() ? 0 : *std::max_element(data.begin(), data.end());
      classes = std::max(2, static_cast<int>(mx) + 1);
    }
  }
  return LabelVolume(shape, classes, std::move(data));
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename into " + path.string() + ": " + ec.message());
}

// ---------------------------------------------------------------------------
// Manifest

std::string to_string(Split s) {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Validation:
      return "val";
    case Split::Test:
      return "test";
  }
  return "train";
}

namespace {

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val" || s == "validation") return Split::Validation;
  if (s == "test") return Split::Test;
  throw ValidationError("manifest: unknown split '" + s + "'");
}

}  // namespace

const VolumeEntry& DatasetManifest::template_entry() const {
  const VolumeEntry* found = nullptr;
  for (const auto& v : volumes) {
    if (v.split == Split::Train && v.label) {
      if (found) throw ValidationError("manifest: more than one labeled training volume");
      found = &v;
    }
  }
  if (!found) throw ValidationError("manifest: missing template label");
  return *found;
}

std::vector<const VolumeEntry*> DatasetManifest::unlabeled() const {
  std::vector<const VolumeEntry*> out;
  for (const auto& v : volumes) {
    if (v.split == Split::Train && !v.label) out.push_back(&v);
  }
  return out;
}

std::vector<const VolumeEntry*> DatasetManifest::of_split(Split s) const {
  std::vector<const VolumeEntry*> out;
  for (const auto& v : volumes) {
    if (v.split == s) out.push_back(&v);
  }
  return out;
}

const VolumeEntry& DatasetManifest::find(const std::string& id) const {
  for (const auto& v : volumes) {
    if (v.id == id) return v;
  }
  throw ValidationError("manifest: unknown id '" + id + "'");
}

void validate(const DatasetManifest& m) {
  if (m.num_classes < 2 || m.num_classes > 256) {
    throw ValidationError("manifest: num_classes must be in [2, 256]");
  }
  std::set<std::string> ids;
  for (const auto& v : m.volumes) {
    if (v.id.empty()) throw ValidationError("manifest: empty id");
    if (!ids.insert(v.id).second) throw ValidationError("manifest: duplicate id '" + v.id + "'");
    if (v.split != Split::Train && !v.label && !v.truth) {
      throw ValidationError("manifest: evaluation volume '" + v.id + "' has no label");
    }
  }
  if (m.exactly_one_labeled) {
    std::size_t labeled = 0;
    for (const auto& v : m.volumes) labeled += (v.split == Split::Train && v.label) ? 1 : 0;
    if (labeled == 0) throw ValidationError("manifest: missing template label");
    if (labeled > 1) throw ValidationError("manifest: more than one labeled training volume");
  }
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("manifest: ") + e.what());
  }
  const fs::path base = path.parent_path();
  auto resolve = [&](const std::string& p) -> fs::path {
    fs::path q(p);
    return q.is_absolute() ? q : base / q;
  };
  DatasetManifest m;
  try {
    m.num_classes = doc.value("num_classes", 2);
    m.exactly_one_labeled = doc.value("exactly_one_labeled", true);
    for (const auto& e : doc.at("volumes")) {
      VolumeEntry v;
      v.id = e.at("id").get<std::string>();
      v.intensity = resolve(e.at("intensity").get<std::string>());
      if (e.contains("label") && !e["label"].is_null()) v.label = resolve(e["label"].get<std::string>());
      if (e.contains("features") && !e["features"].is_null()) {
        v.features = resolve(e["features"].get<std::string>());
      }
      if (e.contains("truth") && !e["truth"].is_null()) v.truth = resolve(e["truth"].get<std::string>());
      v.split = parse_split(e.value("split", std::string("train")));
      m.volumes.push_back(std::move(v));
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("manifest: ") + e.what());
  }
  validate(m);
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  const fs::path base = path.parent_path();
  auto rel = [&](const fs::path& p) {
    std::error_code ec;
    auto r = fs::relative(p, base.empty() ? fs::path(".") : base, ec);
    return (ec || r.empty()) ? p.string() : r.generic_string();
  };
  json vols = json::array();
  for (const auto& v : m.volumes) {
    json e = {{"id", v.id}, {"intensity", rel(v.intensity)}, {"split", to_string(v.split)}};
    if (v.label) e["label"] = rel(*v.label);
    if (v.features) e["features"] = rel(*v.features);
    if (v.truth) e["truth"] = rel(*v.truth);
    vols.push_back(std::move(e));
  }
  json doc = {{"num_classes", m.num_classes},
              {"exactly_one_labeled", m.exactly_one_labeled},
              {"volumes", std::move(vols)}};
  write_text_atomic(path, doc.dump(2) + "\n");
}

}  // namespace protoloop
