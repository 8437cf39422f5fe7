#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "lolab/rng.hpp"
#include "lolab/tensor.hpp"

namespace lolab {

enum class SplitTag { Unsplit, MetaTrain, MetaTestTrain, MetaTestTest };

inline const char* split_name(SplitTag t) {
  switch (t) {
    case SplitTag::Unsplit: return "unsplit";
    case SplitTag::MetaTrain: return "meta_train";
    case SplitTag::MetaTestTrain: return "meta_test_train";
    case SplitTag::MetaTestTest: return "meta_test_test";
  }
  return "?";
}

/// Samples along the first axis of inputs. For classification, labels hold
/// class indices in [0, num_classes); for regression, real targets and
/// num_classes == 0.
struct Dataset {
  Tensor inputs;
  Tensor labels;
  std::size_t num_classes = 0;
  SplitTag split = SplitTag::Unsplit;
  std::vector<double> coefficients;  // generating polynomial, when synthetic

  std::size_t size() const { return labels.size(); }
  bool is_classification() const { return num_classes > 0; }

  std::size_t sample_width() const { return inputs.size() / inputs.dim(0); }

  std::vector<std::size_t> class_labels() const {
    std::vector<std::size_t> out(labels.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<std::size_t>(labels[i]);
    return out;
  }

  void validate() const {
    if (inputs.rank() == 0 || inputs.dim(0) != labels.size())
      throw ShapeError("dataset inputs and labels disagree on sample count");
    if (num_classes > 0)
      for (double v : labels.data())
        if (v < 0 || v >= static_cast<double>(num_classes) || v != static_cast<double>(static_cast<std::size_t>(v)))
          throw FormatError("class label out of range");
  }

  Dataset subset(const std::vector<std::size_t>& idx) const {
    if (idx.empty()) throw ShapeError("empty subset");
    const std::size_t w = sample_width();
    Shape s = inputs.shape();
    s[0] = idx.size();
    Tensor x(s);
    Tensor y(Shape{idx.size()});
    for (std::size_t i = 0; i < idx.size(); ++i) {
      if (idx[i] >= size()) throw ShapeError("subset index out of range");
      std::copy_n(inputs.data().data() + idx[i] * w, w, x.data().data() + i * w);
      y[i] = labels[idx[i]];
    }
    Dataset d{std::move(x), std::move(y), num_classes, split, coefficients};
    return d;
  }

  /// First k samples (desk-scale cap); the whole set when k == 0 or k >= size.
  Dataset head(std::size_t k) const {
    if (k == 0 || k >= size()) return *this;
    std::vector<std::size_t> idx(k);
    for (std::size_t i = 0; i < k; ++i) idx[i] = i;
    return subset(idx);
  }
};

// ---- IDX ------------------------------------------------------------------

struct IdxArray {
  Shape shape;
  std::vector<std::uint8_t> data;
};

/// Parses an unsigned-byte IDX file: two zero bytes, type code 0x08, rank,
/// big-endian u32 dimensions, then the payload.
inline IdxArray parse_idx_bytes(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError("idx: truncated header");
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError("idx: bad magic");
  if (bytes[2] != 0x08) throw FormatError("idx: unsupported element type 0x" + std::to_string(bytes[2]));
  const std::size_t rank = bytes[3];
  if (rank == 0) throw FormatError("idx: zero-rank array");
  if (bytes.size() < 4 + 4 * rank) throw FormatError("idx: truncated header");
  IdxArray out;
  std::size_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    const std::uint8_t* p = bytes.data() + 4 + 4 * i;
    const std::size_t d = (std::size_t{p[0]} << 24) | (std::size_t{p[1]} << 16) |
                          (std::size_t{p[2]} << 8) | std::size_t{p[3]};
    if (d == 0) throw FormatError("idx: zero-length dimension");
    out.shape.push_back(d);
    count *= d;
  }
  const std::size_t off = 4 + 4 * rank;
  if (bytes.size() - off < count) throw FormatError("idx: truncated payload");
  if (bytes.size() - off > count) throw FormatError("idx: trailing bytes after payload");
  out.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off), bytes.end());
  return out;
}

/// IDX payload as reals in [0,1].
inline Tensor parse_idx(std::span<const std::uint8_t> bytes) {
  IdxArray a = parse_idx_bytes(bytes);
  std::vector<double> v(a.data.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.data[i] / 255.0;
  return Tensor(a.shape, std::move(v));
}

inline std::vector<std::uint8_t> write_idx(const IdxArray& a) {
  if (a.shape.empty() || a.shape.size() > 255) throw FormatError("idx: rank must be 1..255");
  if (shape_size(a.shape) != a.data.size()) throw ShapeError("idx: shape/data mismatch");
  std::vector<std::uint8_t> out{0, 0, 0x08, static_cast<std::uint8_t>(a.shape.size())};
  for (std::size_t d : a.shape) {
    if (d == 0 || d > 0xffffffffULL) throw FormatError("idx: dimension out of range");
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(d >> s));
  }
  out.insert(out.end(), a.data.begin(), a.data.end());
  return out;
}

// ---- CIFAR-10 binary ------------------------------------------------------

inline constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;

inline Dataset parse_cifar_binary(std::span<const std::uint8_t> bytes) {
  if (bytes.empty() || bytes.size() % kCifarRecord != 0)
    throw FormatError("cifar: length " + std::to_string(bytes.size()) +
                      " is not a positive multiple of 3073");
  const std::size_t n = bytes.size() / kCifarRecord;
  Tensor x(Shape{n, 3, 32, 32});
  Tensor y(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecord;
    if (rec[0] >= 10) throw FormatError("cifar: label " + std::to_string(rec[0]) + " >= 10");
    y[i] = rec[0];
    for (std::size_t j = 0; j < kCifarRecord - 1; ++j) x[i * (kCifarRecord - 1) + j] = rec[1 + j] / 255.0;
  }
  return Dataset{std::move(x), std::move(y), 10, SplitTag::Unsplit, {}};
}

/// Inverse of parse_cifar_binary for inputs that are exact multiples of 1/255.
inline std::vector<std::uint8_t> write_cifar_binary(const Dataset& d) {
  if (d.inputs.rank() != 4 || d.inputs.dim(1) != 3 || d.inputs.dim(2) != 32 || d.inputs.dim(3) != 32)
    throw ShapeError("cifar: inputs must be [N,3,32,32]");
  std::vector<std::uint8_t> out;
  out.reserve(d.size() * kCifarRecord);
  for (std::size_t i = 0; i < d.size(); ++i) {
    out.push_back(static_cast<std::uint8_t>(d.labels[i]));
    for (std::size_t j = 0; j < kCifarRecord - 1; ++j)
      out.push_back(static_cast<std::uint8_t>(std::lround(d.inputs[i * (kCifarRecord - 1) + j] * 255.0)));
  }
  return out;
}

// ---- files ----------------------------------------------------------------

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& p, std::span<const std::uint8_t> bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed: " + p.string());
}

/// Dataset root from LOLAB_DATA_DIR, or "data" when unset.
inline std::filesystem::path data_dir() {
  const char* env = std::getenv("LOLAB_DATA_DIR");
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("data");
}

/// Loads an IDX image/label pair, e.g. MNIST's train-images-idx3-ubyte and
/// train-labels-idx1-ubyte, keeping the first max_samples (0 = all). Images
/// become [N,1,H,W] in [0,1].
inline Dataset load_idx_pair(const std::filesystem::path& images, const std::filesystem::path& labels,
                             std::size_t max_samples = 0) {
  for (const auto& p : {images, labels})
    if (!std::filesystem::exists(p)) throw Error("dataset file not found: " + p.string());
  const IdxArray x = parse_idx_bytes(read_file(images));
  const IdxArray y = parse_idx_bytes(read_file(labels));
  if (x.shape.size() != 3 || y.shape.size() != 1 || y.shape[0] != x.shape[0])
    throw FormatError("idx image/label files disagree: " + images.string());
  const std::size_t n = max_samples ? std::min(max_samples, x.shape[0]) : x.shape[0];
  const std::size_t w = x.shape[1] * x.shape[2];
  Tensor img(Shape{n, 1, x.shape[1], x.shape[2]});
  for (std::size_t i = 0; i < n * w; ++i) img[i] = x.data[i] / 255.0;
  Tensor lab(Shape{n});
  for (std::size_t i = 0; i < n; ++i) lab[i] = y.data[i];
  Dataset d{std::move(img), std::move(lab), 10, SplitTag::Unsplit, {}};
  d.validate();
  return d;
}

// ---- split protocol -------------------------------------------------------

struct SplitData {
  Dataset meta_train;
  Dataset meta_test_train;
  Dataset meta_test_test;
};

/// Random halves of train (odd extra sample to MetaTrain); test becomes
/// MetaTestTest untouched.
inline SplitData split_dataset(const Dataset& train, const Dataset& test, RngStream& rng) {
  if (train.size() < 2) throw Error("split_dataset: need at least 2 training samples");
  if (test.size() == 0) throw Error("split_dataset: empty test set");
  const auto perm = rng.permutation(train.size());
  const std::size_t first = (train.size() + 1) / 2;
  std::vector<std::size_t> a(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(first));
  std::vector<std::size_t> b(perm.begin() + static_cast<std::ptrdiff_t>(first), perm.end());
  SplitData out{train.subset(a), train.subset(b), test};
  out.meta_train.split = SplitTag::MetaTrain;
  out.meta_test_train.split = SplitTag::MetaTestTrain;
  out.meta_test_test.split = SplitTag::MetaTestTest;
  return out;
}

// ---- synthetic tasks ------------------------------------------------------

struct PolyTaskFamily {
  std::size_t degree = 3;
  double coeff_lo = -1.0, coeff_hi = 1.0;
  double noise_std = 0.1;
  std::size_t points_per_task = 100;
  double x_lo = -1.0, x_hi = 1.0;

  void validate() const {
    if (degree != 3) throw Error("poly family: degree is fixed at 3");
    if (!(coeff_lo <= coeff_hi) || !(x_lo < x_hi)) throw Error("poly family: empty interval");
    if (!(noise_std >= 0)) throw Error("poly family: negative noise");
    if (points_per_task < 4 * (degree + 1)) throw Error("poly family: need >= 16 points per task");
  }
};

inline std::vector<double> cubic_features(double x) { return {1.0, x, x * x, x * x * x}; }

/// Uses the given coefficients when supplied, otherwise draws them.
inline Dataset sample_poly_task(const PolyTaskFamily& fam, RngStream& rng,
                                std::optional<std::vector<double>> coeffs = std::nullopt) {
  fam.validate();
  std::vector<double> c;
  if (coeffs) {
    if (coeffs->size() != fam.degree + 1) throw ShapeError("poly task: wrong coefficient count");
    c = *coeffs;
  } else {
    for (std::size_t i = 0; i <= fam.degree; ++i) c.push_back(rng.uniform(fam.coeff_lo, fam.coeff_hi));
  }
  const std::size_t n = fam.points_per_task;
  Tensor x(Shape{n, fam.degree + 1});
  Tensor y(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    const double xi = rng.uniform(fam.x_lo, fam.x_hi);
    const auto f = cubic_features(xi);
    double v = 0.0;
    for (std::size_t k = 0; k <= fam.degree; ++k) {
      x[i * (fam.degree + 1) + k] = f[k];
      v += c[k] * f[k];
    }
    if (fam.noise_std > 0) v += rng.normal(0.0, fam.noise_std);
    y[i] = v;
  }
  return Dataset{std::move(x), std::move(y), 0, SplitTag::Unsplit, std::move(c)};
}

/// Gaussian blobs: class centres from centre_seed (shared by every draw of
/// the family), samples centre + N(0, noise_std^2) per feature.
struct BlobFamily {
  std::size_t dim = 16;
  std::size_t num_classes = 10;
  double centre_scale = 1.0;
  double noise_std = 1.0;
  std::uint64_t centre_seed = 7;
};

inline Dataset make_blobs(const BlobFamily& fam, std::size_t n, RngStream& rng) {
  if (n == 0 || fam.dim == 0 || fam.num_classes < 2) throw Error("blobs: invalid family");
  RngStream crng(fam.centre_seed);
  std::vector<double> centres(fam.num_classes * fam.dim);
  for (double& c : centres) c = crng.normal(0.0, fam.centre_scale);
  Tensor x(Shape{n, fam.dim});
  Tensor y(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = static_cast<std::size_t>(rng.uniform_int(fam.num_classes));
    y[i] = static_cast<double>(k);
    for (std::size_t j = 0; j < fam.dim; ++j)
      x[i * fam.dim + j] = centres[k * fam.dim + j] + rng.normal(0.0, fam.noise_std);
  }
  return Dataset{std::move(x), std::move(y), fam.num_classes, SplitTag::Unsplit, {}};
}

}  // namespace lolab
