#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <set>

#include "fd_oracle.hpp"
#include "lolab/data.hpp"
#include "lolab/optimizee.hpp"

using namespace lolab;
using namespace lolab::testing;

namespace {

std::vector<std::uint8_t> idx_bytes(std::vector<std::uint32_t> dims, std::size_t payload) {
  std::vector<std::uint8_t> b{0, 0, 0x08, static_cast<std::uint8_t>(dims.size())};
  for (auto d : dims)
    for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(d >> s));
  for (std::size_t i = 0; i < payload; ++i) b.push_back(static_cast<std::uint8_t>(i * 7));
  return b;
}

Dataset tiny_classification(std::size_t n, Shape sample, std::size_t classes, RngStream& r) {
  Shape s{n};
  s.insert(s.end(), sample.begin(), sample.end());
  Tensor x(s);
  for (double& v : x.raw()) v = r.normal();
  Tensor y(Shape{n});
  for (double& v : y.raw()) v = static_cast<double>(r.uniform_int(classes));
  return Dataset{x, y, classes, SplitTag::Unsplit, {}};
}

}  // namespace

// ---- IDX ------------------------------------------------------------------

TEST(Idx, ImageHeaderGivesShape) {
  const auto a = parse_idx_bytes(idx_bytes({2, 28, 28}, 1568));
  EXPECT_EQ(a.shape, (Shape{2, 28, 28}));
  EXPECT_EQ(parse_idx(idx_bytes({2, 28, 28}, 1568)).shape(), (Shape{2, 28, 28}));
}

TEST(Idx, LabelHeaderGivesVector) {
  EXPECT_EQ(parse_idx_bytes(idx_bytes({5}, 5)).data.size(), 5u);
}

TEST(Idx, MalformedInputsAreRejected) {
  auto b = idx_bytes({3, 2}, 6);
  auto bad_magic = b;
  bad_magic[0] = 1;
  EXPECT_THROW(parse_idx_bytes(bad_magic), FormatError);
  auto bad_type = b;
  bad_type[2] = 0x0D;
  EXPECT_THROW(parse_idx_bytes(bad_type), FormatError);
  EXPECT_THROW(parse_idx_bytes(std::vector<std::uint8_t>(b.begin(), b.begin() + 6)), FormatError);
  EXPECT_THROW(parse_idx_bytes(std::vector<std::uint8_t>(b.begin(), b.end() - 1)), FormatError);
  auto trailing = b;
  trailing.push_back(0);
  EXPECT_THROW(parse_idx_bytes(trailing), FormatError);
  EXPECT_THROW(parse_idx_bytes(idx_bytes({0, 2}, 0)), FormatError);
}

TEST(Idx, RoundTripPreservesBytes) {
  RngStream rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    IdxArray a;
    const std::size_t rank = 1 + rng.uniform_int(3);
    for (std::size_t i = 0; i < rank; ++i) a.shape.push_back(1 + rng.uniform_int(5));
    a.data.resize(shape_size(a.shape));
    for (auto& v : a.data) v = static_cast<std::uint8_t>(rng.uniform_int(256));
    const auto bytes = write_idx(a);
    const auto back = parse_idx_bytes(bytes);
    EXPECT_EQ(back.shape, a.shape);
    EXPECT_EQ(back.data, a.data);
    EXPECT_EQ(write_idx(back), bytes);
  }
}

TEST(Idx, LoadPairFromDisk) {
  const auto dir = std::filesystem::temp_directory_path() / "lolab_idx_pair";
  std::filesystem::create_directories(dir);
  write_file(dir / "img", idx_bytes({3, 4, 5}, 60));
  auto lab = idx_bytes({3}, 0);
  for (std::uint8_t v : {1, 9, 0}) lab.push_back(v);
  write_file(dir / "lab", lab);
  const Dataset d = load_idx_pair(dir / "img", dir / "lab");
  EXPECT_EQ(d.inputs.shape(), (Shape{3, 1, 4, 5}));
  EXPECT_EQ(d.labels, Tensor::vector({1, 9, 0}));
  EXPECT_THROW(load_idx_pair(dir / "missing", dir / "lab"), Error);
}

// ---- CIFAR ----------------------------------------------------------------

TEST(Cifar, ZeroRecordsAreBlackImages) {
  const Dataset d = parse_cifar_binary(std::vector<std::uint8_t>(2 * kCifarRecord, 0));
  EXPECT_EQ(d.inputs.shape(), (Shape{2, 3, 32, 32}));
  EXPECT_EQ(d.labels, Tensor::vector({0, 0}));
  EXPECT_TRUE(std::all_of(d.inputs.raw().begin(), d.inputs.raw().end(), [](double v) { return v == 0.0; }));
}

TEST(Cifar, TruncatedRecordIsRejected) {
  EXPECT_THROW(parse_cifar_binary(std::vector<std::uint8_t>(3072, 0)), FormatError);
  std::vector<std::uint8_t> bad(kCifarRecord, 0);
  bad[0] = 10;
  EXPECT_THROW(parse_cifar_binary(bad), FormatError);
}

TEST(Cifar, RoundTripPreservesBytes) {
  RngStream rng(32);
  std::vector<std::uint8_t> bytes(3 * kCifarRecord);
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<std::uint8_t>(i % kCifarRecord == 0 ? rng.uniform_int(10) : rng.uniform_int(256));
  EXPECT_EQ(write_cifar_binary(parse_cifar_binary(bytes)), bytes);
}

// ---- splits ---------------------------------------------------------------

TEST(Split, EvenAndOddSizes) {
  RngStream rng(33);
  auto make = [](std::size_t n) {
    Tensor x(Shape{n, 1});
    Tensor y(Shape{n});
    for (std::size_t i = 0; i < n; ++i) x[i] = static_cast<double>(i);
    return Dataset{x, y, 2, SplitTag::Unsplit, {}};
  };
  const Dataset test = make(3);
  const SplitData s100 = split_dataset(make(100), test, rng);
  EXPECT_EQ(s100.meta_train.size(), 50u);
  EXPECT_EQ(s100.meta_test_train.size(), 50u);
  const SplitData s101 = split_dataset(make(101), test, rng);
  EXPECT_EQ(s101.meta_train.size(), 51u);
  EXPECT_EQ(s101.meta_test_train.size(), 50u);
  EXPECT_EQ(s101.meta_test_test.split, SplitTag::MetaTestTest);
  EXPECT_EQ(s101.meta_test_test.inputs, test.inputs);
}

TEST(Split, HalvesAreDisjointAndCoverTrain) {
  RngStream rng(34);
  for (std::size_t n = 2; n <= 10000; n = n < 40 ? n + 1 : n * 3 / 2) {
    Tensor x(Shape{n, 1});
    for (std::size_t i = 0; i < n; ++i) x[i] = static_cast<double>(i);
    const Dataset train{x, Tensor(Shape{n}), 2, SplitTag::Unsplit, {}};
    const SplitData s = split_dataset(train, train.head(1), rng);
    std::set<double> a(s.meta_train.inputs.raw().begin(), s.meta_train.inputs.raw().end());
    std::set<double> b(s.meta_test_train.inputs.raw().begin(), s.meta_test_train.inputs.raw().end());
    ASSERT_EQ(a.size(), (n + 1) / 2);
    ASSERT_EQ(b.size(), n / 2);
    for (double v : a) ASSERT_EQ(b.count(v), 0u);
    ASSERT_EQ(a.size() + b.size(), n);
  }
}

TEST(Split, RejectsDegenerateInputs) {
  RngStream rng(35);
  const Dataset one{Tensor({1, 1}), Tensor({1}), 2, SplitTag::Unsplit, {}};
  EXPECT_THROW(split_dataset(one, one, rng), Error);
}

// ---- synthetic tasks ------------------------------------------------------

TEST(Poly, NoiselessCubicEvaluatesExactly) {
  const auto f = cubic_features(2.0);
  EXPECT_DOUBLE_EQ(f[3], 8.0);
  PolyTaskFamily fam;
  fam.noise_std = 0;
  RngStream rng(36);
  const Dataset d = sample_poly_task(fam, rng, std::vector<double>{0, 0, 0, 1});
  EXPECT_EQ(d.inputs.shape(), (Shape{100, 4}));
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double x = d.inputs[i * 4 + 1];
    EXPECT_DOUBLE_EQ(d.labels[i], x * x * x);
  }
}

TEST(Poly, FamilyValidation) {
  PolyTaskFamily fam;
  fam.degree = 2;
  EXPECT_THROW(fam.validate(), Error);
  fam = {};
  fam.points_per_task = 15;
  EXPECT_THROW(fam.validate(), Error);
}

TEST(Poly, CoefficientsWithinRange) {
  PolyTaskFamily fam;
  RngStream rng(37);
  for (int i = 0; i < 20; ++i) {
    const Dataset d = sample_poly_task(fam, rng);
    ASSERT_EQ(d.coefficients.size(), 4u);
    for (double c : d.coefficients) EXPECT_TRUE(c >= fam.coeff_lo && c <= fam.coeff_hi);
  }
}

TEST(Blobs, SharedCentresAndValidLabels) {
  BlobFamily fam;
  RngStream r1(1), r2(2);
  const Dataset a = make_blobs(fam, 200, r1);
  const Dataset b = make_blobs(fam, 200, r2);
  a.validate();
  b.validate();
  EXPECT_EQ(a.inputs.shape(), (Shape{200, 16}));
  EXPECT_FALSE(a.inputs == b.inputs);
}

// ---- models ---------------------------------------------------------------

TEST(Optimizee, ParameterCounts) {
  EXPECT_EQ(param_count(OptimizeeSpec::mlp({1, 28, 28}, 10)), 15910u);
  EXPECT_EQ(param_count(OptimizeeSpec::poly()), 4u);
  // 3x3 conv to 26x26, pool to 13x13, 5x5 conv to 9x9.
  const std::size_t cnn = 16 * 9 + 16 + 32 * 16 * 25 + 32 + 32 * 81 * 10 + 10;
  EXPECT_EQ(param_count(OptimizeeSpec::cnn({1, 28, 28}, 10)), cnn);
  EXPECT_THROW(param_count(OptimizeeSpec::cnn({1, 8, 8}, 10)), ShapeError);
}

TEST(Optimizee, InitZeroesBiasesAndBoundsWeights) {
  RngStream rng(38);
  const auto spec = OptimizeeSpec::mlp({16}, 10);
  const Tensor th = init_optimizee(spec, rng);
  for (const auto& b : param_layout(spec)) {
    const double lim = b.bias ? 0.0 : std::sqrt(6.0 / static_cast<double>(b.fan_in + b.fan_out));
    for (std::size_t i = 0; i < b.size(); ++i) EXPECT_LE(std::abs(th[b.offset + i]), lim);
  }
}

TEST(Optimizee, PolyLossIsLeastSquares) {
  PolyTaskFamily fam;
  RngStream rng(39);
  const Dataset d = sample_poly_task(fam, rng);
  const Tensor th = Tensor::vector({0.1, -0.2, 0.3, 0.4});
  double expect = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    double p = 0.0;
    for (std::size_t k = 0; k < 4; ++k) p += d.inputs[i * 4 + k] * th[k];
    expect += (p - d.labels[i]) * (p - d.labels[i]);
  }
  EXPECT_NEAR(loss_value(OptimizeeSpec::poly(), th, d), expect / static_cast<double>(d.size()), 1e-12);
}

class OptimizeeGradient : public ::testing::TestWithParam<int> {};

TEST_P(OptimizeeGradient, MatchesCentralDifferences) {
  RngStream rng(40 + GetParam());
  OptimizeeSpec spec;
  Dataset d;
  switch (GetParam()) {
    case 0:
      spec = OptimizeeSpec::poly();
      d = sample_poly_task(PolyTaskFamily{}, rng);
      break;
    case 1:
      spec = OptimizeeSpec::mlp({5}, 3);
      d = tiny_classification(6, {5}, 3, rng);
      break;
    case 2:
      spec = OptimizeeSpec::mlp({5}, 3, true);
      d = tiny_classification(6, {5}, 3, rng);
      break;
    default:
      spec = OptimizeeSpec::cnn({1, 14, 14}, 3);
      d = tiny_classification(2, {1, 14, 14}, 3, rng);
      break;
  }
  const Tensor th = init_optimizee(spec, rng);
  Tensor g;
  loss_and_grad(spec, th, d, g);
  ForwardFn f = [&](const std::vector<Tensor>& xs) { return loss_value(spec, xs[0], d); };
  const Tensor num = central_difference(f, {th}, 1e-5)[0];
  std::size_t bad = 0;
  for (std::size_t i = 0; i < th.size(); ++i) bad += close(g[i], num[i], 1e-4, 1e-7) ? 0 : 1;
  EXPECT_EQ(bad, 0u) << arch_name(spec.arch) << " worst rel " << worst_rel(g, num, 1e-7);
}

INSTANTIATE_TEST_SUITE_P(Architectures, OptimizeeGradient, ::testing::Values(0, 1, 2, 3));

TEST(Optimizee, ClassifyCountsArgmax) {
  const auto spec = OptimizeeSpec::mlp({2}, 2);
  Tensor th(Shape{param_count(spec)});
  // Output bias favours class 1 for every input.
  th[th.size() - 1] = 5.0;
  const Dataset d{Tensor({3, 2}), Tensor::vector({1, 0, 1}), 2, SplitTag::Unsplit, {}};
  const ClassCounts cc = classify(spec, th, d);
  EXPECT_EQ(cc.correct, 2u);
  EXPECT_EQ(cc.total, 3u);
}

TEST(Optimizee, RegressionDataRejectedForCrossEntropy) {
  RngStream rng(44);
  const auto d = sample_poly_task(PolyTaskFamily{}, rng);
  const auto spec = OptimizeeSpec::mlp({4}, 2);
  EXPECT_THROW(loss_value(spec, init_optimizee(spec, rng), d), Error);
}
