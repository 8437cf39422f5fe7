#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <utility>
#include <vector>

#include "lolab/rng.hpp"
#include "lolab/tape.hpp"

namespace lolab {

struct LoConfig {
  std::size_t num_layers = 2;
  std::size_t hidden = 20;
  bool preprocess = true;
  double p = 10.0;
  double output_scale = 0.1;
  bool theta_input = false;  // append theta_t to each coordinate's input

  std::size_t input_dim() const { return (preprocess ? 2 : 1) + (theta_input ? 1 : 0); }

  void validate() const {
    if (num_layers == 0 || hidden == 0) throw Error("learned optimizer needs >= 1 layer and hidden units");
    if (!(p > 0)) throw Error("preprocessing exponent must be positive");
  }
};

/// Gradient preprocessing, one row per coordinate:
///   |g| >= e^-p : (log(|g| + 1e-16) / p, sign(g))
///   otherwise   : (-1, e^p * g)
inline Tensor preprocess(std::span<const double> g, double p) {
  if (!(p > 0)) throw Error("preprocess: p must be positive");
  const double tau = std::exp(-p);
  const double ep = std::exp(p);
  Tensor z(Shape{g.size(), 2});
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double x = g[i];
    if (std::abs(x) >= tau) {
      z[2 * i] = std::log(std::abs(x) + kLogEps) / p;
      z[2 * i + 1] = x > 0 ? 1.0 : -1.0;
    } else {
      z[2 * i] = -1.0;
      z[2 * i + 1] = ep * x;
    }
  }
  return z;
}

/// Recurrent state per coordinate: h and c are [num_coords, L, H].
struct OptState {
  Tensor h, c;

  static OptState zeros(std::size_t coords, const LoConfig& cfg) {
    return {Tensor(Shape{coords, cfg.num_layers, cfg.hidden}), Tensor(Shape{coords, cfg.num_layers, cfg.hidden})};
  }
  std::size_t num_coords() const { return h.dim(0); }
};

/// Per-layer [N,H] views of an OptState on a tape.
struct LstmVars {
  std::vector<Var> h, c;
};

/// Coordinatewise LSTM optimizer: one set of weights phi shared by every
/// optimizee coordinate. phi is flat; per layer l it holds Wx[in_l,4H],
/// Wh[H,4H], b[4H] (gate order i, f, g, o), then Wout[H,1] and bout[1].
class CoordinatewiseLSTM {
 public:
  struct Block {
    std::size_t offset;
    Shape shape;
    std::size_t size() const { return shape_size(shape); }
  };

  CoordinatewiseLSTM() : CoordinatewiseLSTM(LoConfig{}) {}

  explicit CoordinatewiseLSTM(LoConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    build_layout();
    phi_ = Tensor(Shape{count_});
  }

  CoordinatewiseLSTM(LoConfig cfg, RngStream& rng) : CoordinatewiseLSTM(cfg) { init(rng); }

  const LoConfig& config() const { return cfg_; }
  const Tensor& phi() const { return phi_; }
  std::size_t param_count() const { return count_; }

  void set_phi(Tensor phi) {
    if (phi.size() != count_) throw ShapeError("phi length does not match optimizer layout");
    phi_ = phi.reshaped({count_});
  }

  /// U(-1/sqrt(H), 1/sqrt(H)) for every weight and bias.
  void init(RngStream& rng) {
    const double k = 1.0 / std::sqrt(static_cast<double>(cfg_.hidden));
    for (double& v : phi_.raw()) v = rng.uniform(-k, k);
  }

  const Block& wx(std::size_t l) const { return blocks_[3 * l]; }
  const Block& wh(std::size_t l) const { return blocks_[3 * l + 1]; }
  const Block& bias(std::size_t l) const { return blocks_[3 * l + 2]; }
  const Block& wout() const { return blocks_[3 * cfg_.num_layers]; }
  const Block& bout() const { return blocks_[3 * cfg_.num_layers + 1]; }

  /// Per-coordinate input rows [N, input_dim].
  Tensor make_input(std::span<const double> grads, std::span<const double> theta = {}) const {
    const std::size_t n = grads.size();
    const std::size_t d = cfg_.input_dim();
    Tensor base = cfg_.preprocess ? preprocess(grads, cfg_.p) : Tensor(Shape{n, 1}, std::vector<double>(grads.begin(), grads.end()));
    if (!cfg_.theta_input) return base;
    if (theta.size() != n) throw ShapeError("theta-conditioned optimizer needs theta");
    Tensor out(Shape{n, d});
    const std::size_t bw = d - 1;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < bw; ++j) out[i * d + j] = base[i * bw + j];
      out[i * d + bw] = theta[i];
    }
    return out;
  }

  struct StepVars {
    Var update;  // [N]
    LstmVars state;
  };

  /// One recurrent step recorded on phi's tape. input is [N, input_dim].
  StepVars step_on_tape(Var phi, Var input, const LstmVars& st) const {
    if (phi.value().size() != count_) throw ShapeError("phi length does not match optimizer layout");
    const std::size_t n = input.shape().at(0);
    if (input.shape() != Shape{n, cfg_.input_dim()}) throw ShapeError("optimizer input must be [N, input_dim]");
    if (st.h.size() != cfg_.num_layers || st.c.size() != cfg_.num_layers) throw ShapeError("state layer count");
    auto view = [&](const Block& b) { return reshape(slice(phi, b.offset, b.offset + b.size()), b.shape); };
    const std::size_t h = cfg_.hidden;
    StepVars out;
    Var x = input;
    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
      if (st.h[l].shape() != Shape{n, h} || st.c[l].shape() != Shape{n, h})
        throw ShapeError("optimizer state shape mismatch");
      Var gates = add(add(matmul(x, view(wx(l))), matmul(st.h[l], view(wh(l)))), view(bias(l)));
      Var ig = sigmoid(slice(gates, 0, h));
      Var fg = sigmoid(slice(gates, h, 2 * h));
      Var gg = tanh(slice(gates, 2 * h, 3 * h));
      Var og = sigmoid(slice(gates, 3 * h, 4 * h));
      Var c = add(mul(fg, st.c[l]), mul(ig, gg));
      Var hn = mul(og, tanh(c));
      out.state.h.push_back(hn);
      out.state.c.push_back(c);
      x = hn;
    }
    Var o = add(matmul(x, view(wout())), view(bout()));
    out.update = reshape(scale(o, cfg_.output_scale), {n});
    return out;
  }

  LstmVars state_constants(Tape& t, const OptState& s) const {
    check_state(s);
    const std::size_t n = s.num_coords(), h = cfg_.hidden, L = cfg_.num_layers;
    LstmVars v;
    for (std::size_t l = 0; l < L; ++l) {
      Tensor hl(Shape{n, h}), cl(Shape{n, h});
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < h; ++j) {
          hl[i * h + j] = s.h[(i * L + l) * h + j];
          cl[i * h + j] = s.c[(i * L + l) * h + j];
        }
      v.h.push_back(t.constant(std::move(hl)));
      v.c.push_back(t.constant(std::move(cl)));
    }
    return v;
  }

  OptState state_values(const LstmVars& v) const {
    const std::size_t n = v.h.at(0).shape().at(0), h = cfg_.hidden, L = cfg_.num_layers;
    OptState s = OptState::zeros(n, cfg_);
    for (std::size_t l = 0; l < L; ++l) {
      const Tensor& hl = v.h[l].value();
      const Tensor& cl = v.c[l].value();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < h; ++j) {
          s.h[(i * L + l) * h + j] = hl[i * h + j];
          s.c[(i * L + l) * h + j] = cl[i * h + j];
        }
    }
    return s;
  }

  /// Update o_t for the given gradients and the successor state. The caller
  /// applies theta + o_t. Throws NonFiniteError on non-finite gradients.
  std::pair<Tensor, OptState> step(const Tensor& grads, const OptState& state, const Tensor* theta = nullptr) const {
    if (!grads.all_finite()) throw NonFiniteError("learned optimizer received non-finite gradients");
    if (grads.size() != state.num_coords())
      throw ShapeError("gradient length " + std::to_string(grads.size()) + " vs state for " +
                       std::to_string(state.num_coords()) + " coordinates");
    Tape t;
    Var phi = t.constant(phi_);
    Var in = t.constant(make_input(grads.data(), theta ? theta->data() : std::span<const double>{}));
    auto r = step_on_tape(phi, in, state_constants(t, state));
    return {r.update.value(), state_values(r.state)};
  }

  void check_state(const OptState& s) const {
    if (s.h.rank() != 3 || s.h.dim(1) != cfg_.num_layers || s.h.dim(2) != cfg_.hidden || s.c.shape() != s.h.shape())
      throw ShapeError("optimizer state must be [N, L, H] for both h and c");
  }

 private:
  void build_layout() {
    const std::size_t h = cfg_.hidden;
    std::size_t off = 0;
    auto add = [&](Shape s) {
      blocks_.push_back({off, s});
      off += shape_size(s);
    };
    for (std::size_t l = 0; l < cfg_.num_layers; ++l) {
      add({l == 0 ? cfg_.input_dim() : h, 4 * h});
      add({h, 4 * h});
      add({4 * h});
    }
    add({h, 1});
    add({1});
    count_ = off;
  }

  LoConfig cfg_;
  std::vector<Block> blocks_;
  std::size_t count_ = 0;
  Tensor phi_;
};

// ---- checkpoint format ----------------------------------------------------
//
// Little-endian throughout:
//   "LOLB" | u32 version | u32 layers | u32 hidden | u32 flags
//   | f64 p | f64 output_scale | u64 count | f64 phi[count] | u64 fnv1a
// flags bit 0 = preprocess, bit 1 = theta_input. The trailing FNV-1a hash
// covers every preceding byte.

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline std::uint64_t fnv1a(std::span<const std::uint8_t> b) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t x : b) {
    h ^= x;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline void put_u(std::vector<std::uint8_t>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_u(std::span<const std::uint8_t> in, std::size_t& pos, int bytes) {
  if (pos + static_cast<std::size_t>(bytes) > in.size()) throw FormatError("checkpoint: corrupt payload (truncated)");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= std::uint64_t{in[pos + i]} << (8 * i);
  pos += static_cast<std::size_t>(bytes);
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_lo(const CoordinatewiseLSTM& lo) {
  const auto& c = lo.config();
  std::vector<std::uint8_t> out{'L', 'O', 'L', 'B'};
  detail::put_u(out, kCheckpointVersion, 4);
  detail::put_u(out, c.num_layers, 4);
  detail::put_u(out, c.hidden, 4);
  detail::put_u(out, (c.preprocess ? 1u : 0u) | (c.theta_input ? 2u : 0u), 4);
  detail::put_u(out, std::bit_cast<std::uint64_t>(c.p), 8);
  detail::put_u(out, std::bit_cast<std::uint64_t>(c.output_scale), 8);
  detail::put_u(out, lo.param_count(), 8);
  for (double v : lo.phi().data()) detail::put_u(out, std::bit_cast<std::uint64_t>(v), 8);
  detail::put_u(out, detail::fnv1a(out), 8);
  return out;
}

inline CoordinatewiseLSTM deserialize_lo(std::span<const std::uint8_t> in) {
  if (in.size() < 4 || std::memcmp(in.data(), "LOLB", 4) != 0)
    throw FormatError("checkpoint: corrupt payload (bad magic)");
  std::size_t pos = 4;
  const auto version = static_cast<std::uint32_t>(detail::get_u(in, pos, 4));
  if (version != kCheckpointVersion)
    throw VersionError("checkpoint: version " + std::to_string(version) + " != supported " +
                       std::to_string(kCheckpointVersion));
  LoConfig c;
  c.num_layers = detail::get_u(in, pos, 4);
  c.hidden = detail::get_u(in, pos, 4);
  const auto flags = detail::get_u(in, pos, 4);
  c.preprocess = flags & 1u;
  c.theta_input = flags & 2u;
  c.p = std::bit_cast<double>(detail::get_u(in, pos, 8));
  c.output_scale = std::bit_cast<double>(detail::get_u(in, pos, 8));
  const auto count = detail::get_u(in, pos, 8);
  if (flags > 3u || c.num_layers == 0 || c.hidden == 0 || c.num_layers > 64 || c.hidden > 4096)
    throw FormatError("checkpoint: corrupt payload (header)");
  if (count > in.size() || in.size() != pos + 8 * count + 8) throw FormatError("checkpoint: corrupt payload (length)");
  const std::uint64_t want = detail::fnv1a(in.subspan(0, in.size() - 8));
  std::size_t tail = in.size() - 8;
  if (detail::get_u(in, tail, 8) != want) throw FormatError("checkpoint: corrupt payload (checksum)");
  CoordinatewiseLSTM lo(c);
  if (lo.param_count() != count) throw FormatError("checkpoint: corrupt payload (parameter count)");
  Tensor phi(Shape{count});
  for (std::size_t i = 0; i < count; ++i) phi[i] = std::bit_cast<double>(detail::get_u(in, pos, 8));
  lo.set_phi(std::move(phi));
  return lo;
}

}  // namespace lolab
