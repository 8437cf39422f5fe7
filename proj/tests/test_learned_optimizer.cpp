#include <gtest/gtest.h>

#include <cmath>

#include "fd_oracle.hpp"
#include "lolab/learned_optimizer.hpp"

using namespace lolab;
using namespace lolab::testing;

namespace {

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Plain-loop LSTM for one coordinate, reading phi through the documented layout.
double reference_update(const CoordinatewiseLSTM& lo, std::vector<double> x, std::vector<std::vector<double>>& h,
                        std::vector<std::vector<double>>& c) {
  const auto& cfg = lo.config();
  const auto& phi = lo.phi();
  const std::size_t H = cfg.hidden;
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const auto wx = lo.wx(l).offset, wh = lo.wh(l).offset, b = lo.bias(l).offset;
    std::vector<double> z(4 * H);
    for (std::size_t k = 0; k < 4 * H; ++k) {
      double s = phi[b + k];
      for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * phi[wx + i * 4 * H + k];
      for (std::size_t i = 0; i < H; ++i) s += h[l][i] * phi[wh + i * 4 * H + k];
      z[k] = s;
    }
    std::vector<double> hn(H);
    for (std::size_t j = 0; j < H; ++j) {
      const double ig = sig(z[j]), fg = sig(z[H + j]), gg = std::tanh(z[2 * H + j]), og = sig(z[3 * H + j]);
      c[l][j] = fg * c[l][j] + ig * gg;
      hn[j] = og * std::tanh(c[l][j]);
    }
    h[l] = hn;
    x = hn;
  }
  double o = phi[lo.bout().offset];
  for (std::size_t j = 0; j < H; ++j) o += x[j] * phi[lo.wout().offset + j];
  return cfg.output_scale * o;
}

}  // namespace

TEST(Preprocess, WorkedValues) {
  const std::vector<double> g{1.0, 0.0, -std::exp(-5.0)};
  const Tensor z = preprocess(g, 10.0);
  EXPECT_NEAR(z[0], 0.0, 1e-15);
  EXPECT_EQ(z[1], 1.0);
  EXPECT_EQ(z[2], -1.0);
  EXPECT_EQ(z[3], 0.0);
  EXPECT_NEAR(z[4], -0.5, 1e-12);
  EXPECT_EQ(z[5], -1.0);
}

TEST(Preprocess, BranchesMeetAtThreshold) {
  const double tau = std::exp(-10.0);
  const Tensor above = preprocess(std::vector<double>{tau}, 10.0);
  const Tensor below = preprocess(std::vector<double>{std::nextafter(tau, 0.0)}, 10.0);
  EXPECT_NEAR(above[0], below[0], 1e-9);
  EXPECT_NEAR(above[1], below[1], 1e-9);
}

TEST(Preprocess, OutputsAreBounded) {
  RngStream rng(51);
  for (int i = 0; i < 1000; ++i) {
    const double g = rng.normal() * std::pow(10.0, rng.uniform(-8, 3));
    const Tensor z = preprocess(std::vector<double>{g}, 10.0);
    EXPECT_GE(z[0], -1.0);
    EXPECT_LE(std::abs(z[1]), 1.0);
  }
}

TEST(LearnedOptimizer, ParameterLayout) {
  CoordinatewiseLSTM lo;
  // Two layers of Wx, Wh, b plus the output projection.
  EXPECT_EQ(lo.param_count(), (2 * 80 + 20 * 80 + 80) + (20 * 80 + 20 * 80 + 80) + 20 + 1);
  EXPECT_EQ(lo.param_count(), 5141u);
}

TEST(LearnedOptimizer, MatchesReferenceLoops) {
  RngStream rng(52);
  LoConfig cfg;
  cfg.hidden = 5;
  CoordinatewiseLSTM lo(cfg, rng);
  const std::size_t n = 7;
  OptState st = OptState::zeros(n, cfg);
  std::vector<std::vector<std::vector<double>>> h(n, std::vector<std::vector<double>>(2, std::vector<double>(5)));
  auto c = h;
  for (int t = 0; t < 4; ++t) {
    Tensor g(Shape{n});
    for (double& v : g.raw()) v = rng.normal() * std::pow(10.0, rng.uniform(-6, 1));
    auto [upd, next] = lo.step(g, st);
    const Tensor in = preprocess(g.data(), cfg.p);
    for (std::size_t i = 0; i < n; ++i) {
      const double ref = reference_update(lo, {in[2 * i], in[2 * i + 1]}, h[i], c[i]);
      EXPECT_NEAR(upd[i], ref, 1e-12);
    }
    st = next;
  }
}

TEST(LearnedOptimizer, ZeroOutputProjectionGivesZeroUpdate) {
  RngStream rng(53);
  CoordinatewiseLSTM lo(LoConfig{}, rng);
  Tensor phi = lo.phi();
  for (std::size_t i = 0; i < lo.wout().size(); ++i) phi[lo.wout().offset + i] = 0.0;
  phi[lo.bout().offset] = 0.0;
  lo.set_phi(phi);
  Tensor g(Shape{15910});
  for (double& v : g.raw()) v = rng.normal();
  auto [upd, st] = lo.step(g, OptState::zeros(15910, lo.config()));
  EXPECT_EQ(upd, Tensor(Shape{15910}));
  EXPECT_EQ(st.h.shape(), (Shape{15910, 2, 20}));
}

TEST(LearnedOptimizer, PermutationEquivariant) {
  RngStream rng(54);
  LoConfig cfg;
  cfg.hidden = 6;
  CoordinatewiseLSTM lo(cfg, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.uniform_int(10);
    Tensor g(Shape{n});
    for (double& v : g.raw()) v = rng.normal();
    const auto perm = rng.permutation(n);
    Tensor gp(Shape{n});
    for (std::size_t i = 0; i < n; ++i) gp[i] = g[perm[i]];
    const OptState z = OptState::zeros(n, cfg);
    auto a = lo.step(g, z);
    auto b = lo.step(gp, z);
    a = lo.step(g, a.second);
    b = lo.step(gp, b.second);
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(b.first[i], a.first[perm[i]]);
  }
}

TEST(LearnedOptimizer, PhiGradientMatchesCentralDifferences) {
  RngStream rng(55);
  LoConfig cfg;
  cfg.hidden = 3;
  CoordinatewiseLSTM lo(cfg, rng);
  const std::size_t n = 4;
  Tensor g(Shape{n});
  for (double& v : g.raw()) v = rng.normal();
  const Tensor w = [&] {
    Tensor t(Shape{n});
    for (double& v : t.raw()) v = rng.normal();
    return t;
  }();
  auto build = [&](Tape& t, Var phi) {
    Var in = t.constant(lo.make_input(g.data()));
    auto s1 = lo.step_on_tape(phi, in, lo.state_constants(t, OptState::zeros(n, cfg)));
    auto s2 = lo.step_on_tape(phi, in, s1.state);
    return sum(mul(add(s1.update, s2.update), t.constant(w)));
  };
  Tape t;
  Var phi = t.variable(lo.phi());
  const Tensor an = t.backward(build(t, phi)).wrt(phi);
  ForwardFn f = [&](const std::vector<Tensor>& xs) {
    Tape t2;
    return build(t2, t2.constant(xs[0])).item();
  };
  const Tensor num = central_difference(f, {lo.phi()}, 1e-5)[0];
  for (std::size_t i = 0; i < an.size(); ++i) EXPECT_TRUE(close(an[i], num[i], 1e-4, 1e-8)) << i;
}

TEST(LearnedOptimizer, RejectsBadInputs) {
  CoordinatewiseLSTM lo;
  const OptState st = OptState::zeros(3, lo.config());
  EXPECT_THROW(lo.step(Tensor::vector({1, 2}), st), ShapeError);
  EXPECT_THROW(lo.step(Tensor::vector({1, std::nan(""), 2}), st), NonFiniteError);
  EXPECT_THROW(lo.set_phi(Tensor(Shape{3})), ShapeError);
  LoConfig bad;
  bad.hidden = 0;
  EXPECT_THROW(CoordinatewiseLSTM{bad}, Error);
}

TEST(LearnedOptimizer, ThetaConditionedInput) {
  LoConfig cfg;
  cfg.theta_input = true;
  CoordinatewiseLSTM lo(cfg);
  EXPECT_EQ(cfg.input_dim(), 3u);
  const std::vector<double> g{1.0}, th{0.25};
  const Tensor in = lo.make_input(g, th);
  EXPECT_EQ(in.shape(), (Shape{1, 3}));
  EXPECT_EQ(in[2], 0.25);
  EXPECT_THROW(lo.make_input(g), ShapeError);
}

TEST(Checkpoint, RoundTripIsExact) {
  RngStream rng(56);
  for (bool theta_in : {false, true}) {
    LoConfig cfg;
    cfg.theta_input = theta_in;
    cfg.hidden = 7;
    cfg.output_scale = 0.037;
    CoordinatewiseLSTM lo(cfg, rng);
    const auto bytes = serialize_lo(lo);
    const CoordinatewiseLSTM back = deserialize_lo(bytes);
    EXPECT_EQ(back.phi(), lo.phi());
    EXPECT_EQ(back.config().hidden, 7u);
    EXPECT_EQ(back.config().theta_input, theta_in);
    EXPECT_EQ(back.config().output_scale, 0.037);
    EXPECT_EQ(serialize_lo(back), bytes);
  }
}

TEST(Checkpoint, TruncationAndCorruptionAreRejected) {
  RngStream rng(57);
  CoordinatewiseLSTM lo(LoConfig{}, rng);
  const auto bytes = serialize_lo(lo);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_THROW(deserialize_lo(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + cut)), FormatError);
  auto flipped = bytes;
  flipped[100] ^= 0x40;
  EXPECT_THROW(deserialize_lo(flipped), FormatError);
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(deserialize_lo(magic), FormatError);
  auto extra = bytes;
  extra.push_back(0);
  EXPECT_THROW(deserialize_lo(extra), FormatError);
}

TEST(Checkpoint, UnknownVersionIsRejected) {
  CoordinatewiseLSTM lo;
  auto bytes = serialize_lo(lo);
  bytes[4] = 2;
  EXPECT_THROW(deserialize_lo(bytes), VersionError);
}
