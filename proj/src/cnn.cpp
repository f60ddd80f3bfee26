#include "meshdensity/cnn.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <limits>
#include <map>
#include <random>
#include <sstream>

#include "meshdensity/rng.hpp"

namespace meshdensity::cnn {

template <class S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// ---------------------------------------------------------------------------
// Configuration

void validate(const NetworkConfig& cfg) {
  if (cfg.depth < 1) throw ShapeError("depth must be at least 1");
  if (cfg.base_channels < 1 || cfg.convs_per_depth < 1 || cfg.kernel_size < 1 || cfg.in_channels < 1)
    throw ShapeError("channel, conv and kernel counts must be positive");
  if (!(cfg.leaky_slope >= 0.0 && cfg.leaky_slope < 1.0)) throw ShapeError("leaky slope must be in [0, 1)");
  for (const int d : cfg.skip_depths)
    if (d < 1 || d > cfg.depth) throw ShapeError("skip depth " + std::to_string(d) + " outside [1, depth]");
}

int stage_channels(const NetworkConfig& cfg, int d) {
  const int cap = 8 * cfg.base_channels;
  int c = cfg.base_channels;
  for (int k = 1; k < d && c < cap; ++k) c *= 2;
  return std::min(c, cap);
}

namespace {

template <class E>
struct EnumNames;
template <>
struct EnumNames<LeakyPlacement> {
  static constexpr std::array<std::pair<LeakyPlacement, const char*>, 3> items{
      {{LeakyPlacement::All, "all"}, {LeakyPlacement::DownOnly, "down_only"}, {LeakyPlacement::None, "none"}}};
};
template <>
struct EnumNames<BatchNormMode> {
  static constexpr std::array<std::pair<BatchNormMode, const char*>, 2> items{
      {{BatchNormMode::None, "none"}, {BatchNormMode::Middle, "middle"}}};
};
template <>
struct EnumNames<SkipType> {
  static constexpr std::array<std::pair<SkipType, const char*>, 3> items{
      {{SkipType::None, "none"}, {SkipType::Scalar, "scalar"}, {SkipType::Tensor, "tensor"}}};
};
template <>
struct EnumNames<LossKind> {
  static constexpr std::array<std::pair<LossKind, const char*>, 2> items{{{LossKind::L1, "l1"}, {LossKind::L2, "l2"}}};
};

template <class E>
std::string enum_name(E e) {
  for (const auto& [v, s] : EnumNames<E>::items)
    if (v == e) return s;
  return "?";
}

template <class E>
E enum_value(const std::string& s) {
  for (const auto& [v, name] : EnumNames<E>::items)
    if (s == name) return v;
  throw Error("unknown option '" + s + "'");
}

template <class T>
void read(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

template <class E>
void read_enum(const Json& j, const char* key, E& out) {
  if (j.contains(key)) out = enum_value<E>(j.at(key).get<std::string>());
}

}  // namespace

Json to_json(const NetworkConfig& c) {
  return {{"depth", c.depth},
          {"base_channels", c.base_channels},
          {"convs_per_depth", c.convs_per_depth},
          {"kernel_size", c.kernel_size},
          {"leaky_slope", c.leaky_slope},
          {"leaky_placement", enum_name(c.leaky_placement)},
          {"batchnorm", enum_name(c.batchnorm)},
          {"skip_type", enum_name(c.skip_type)},
          {"skip_depths", c.skip_depths},
          {"constrained_output", c.constrained_output},
          {"loss", enum_name(c.loss)},
          {"in_channels", c.in_channels}};
}

NetworkConfig network_config_from_json(const Json& j) {
  NetworkConfig c;
  read(j, "depth", c.depth);
  read(j, "base_channels", c.base_channels);
  read(j, "convs_per_depth", c.convs_per_depth);
  read(j, "kernel_size", c.kernel_size);
  read(j, "leaky_slope", c.leaky_slope);
  read_enum(j, "leaky_placement", c.leaky_placement);
  read_enum(j, "batchnorm", c.batchnorm);
  read_enum(j, "skip_type", c.skip_type);
  if (j.contains("skip_depths")) c.skip_depths = j.at("skip_depths").get<std::set<int>>();
  read(j, "constrained_output", c.constrained_output);
  read_enum(j, "loss", c.loss);
  read(j, "in_channels", c.in_channels);
  validate(c);
  return c;
}

void validate(const OptimizerConfig& c) {
  if (!(c.lr0 > 0.0)) throw Error("lr0 must be positive");
  if (!(c.beta1 > 0.0 && c.beta1 < 1.0 && c.beta2 > 0.0 && c.beta2 < 1.0)) throw Error("betas must be in (0, 1)");
  if (!(c.eps > 0.0) || !(c.decay_factor > 0.0) || c.decay_every < 1) throw Error("invalid optimizer configuration");
}

Json to_json(const OptimizerConfig& c) {
  return {{"lr0", c.lr0},   {"beta1", c.beta1},
          {"beta2", c.beta2}, {"eps", c.eps},
          {"decay_factor", c.decay_factor}, {"decay_every", c.decay_every}};
}

OptimizerConfig optimizer_config_from_json(const Json& j) {
  OptimizerConfig c;
  read(j, "lr0", c.lr0);
  read(j, "beta1", c.beta1);
  read(j, "beta2", c.beta2);
  read(j, "eps", c.eps);
  read(j, "decay_factor", c.decay_factor);
  read(j, "decay_every", c.decay_every);
  validate(c);
  return c;
}

double learning_rate(const OptimizerConfig& cfg, long step) {
  return cfg.lr0 * std::pow(cfg.decay_factor, static_cast<double>(step / cfg.decay_every));
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct Geometry {
  int h, w, ho, wo, pad_top, pad_left;
};

Geometry conv_geometry(int h, int w, int k, int stride) {
  Geometry g{h, w, (h + stride - 1) / stride, (w + stride - 1) / stride, 0, 0};
  g.pad_top = std::max((g.ho - 1) * stride + k - h, 0) / 2;
  g.pad_left = std::max((g.wo - 1) * stride + k - w, 0) / 2;
  return g;
}

// Writes the patch matrix of one image into `col`, whose rows are `ld` apart.
template <class S>
void im2col(const S* img, int cin, int k, int stride, const Geometry& g, S* col, Eigen::Index ld) {
  for (int ci = 0; ci < cin; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        S* row = col + ((Eigen::Index{ci} * k + ky) * k + kx) * ld;
        for (int oy = 0; oy < g.ho; ++oy) {
          S* dst = row + Eigen::Index{oy} * g.wo;
          const int iy = oy * stride + ky - g.pad_top;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, S(0));
            continue;
          }
          const S* src = img + (Eigen::Index{ci} * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * stride + kx - g.pad_left;
            dst[ox] = (ix >= 0 && ix < g.w) ? src[ix] : S(0);
          }
        }
      }
}

template <class S>
void col2im(const S* col, Eigen::Index ld, int cin, int k, int stride, const Geometry& g, S* img) {
  for (int ci = 0; ci < cin; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const S* row = col + ((Eigen::Index{ci} * k + ky) * k + kx) * ld;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * stride + ky - g.pad_top;
          if (iy < 0 || iy >= g.h) continue;
          const S* src = row + Eigen::Index{oy} * g.wo;
          S* dst = img + (Eigen::Index{ci} * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * stride + kx - g.pad_left;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
}

template <class S>
RowMatrix<S> patches(const Tensor<S>& x, int k, int stride, const Geometry& g) {
  const Eigen::Index p = Eigen::Index{g.ho} * g.wo;
  RowMatrix<S> col(Eigen::Index{x.c()} * k * k, p * x.n());
  for (int n = 0; n < x.n(); ++n)
    im2col(x.data() + n * Eigen::Index{x.c()} * x.shape().plane(), x.c(), k, stride, g, col.data() + n * p,
           col.cols());
  return col;
}

}  // namespace

template <class S>
Conv2d<S>::Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride)
    : cin_(in_channels), cout_(out_channels), k_(kernel), stride_(stride) {
  weight = {name + ".weight", Tensor<S>(out_channels, in_channels, kernel, kernel),
            Tensor<S>(out_channels, in_channels, kernel, kernel), true};
  bias = {name + ".bias", Tensor<S>(1, out_channels, 1, 1), Tensor<S>(1, out_channels, 1, 1), true};
}

template <class S>
Tensor<S> Conv2d<S>::forward(const Tensor<S>& x, bool) {
  if (x.c() != cin_)
    throw ShapeError(weight.name + ": input " + x.shape().str() + " has " + std::to_string(x.c()) +
                     " channels, expected " + std::to_string(cin_));
  x_ = x;
  const Geometry g = conv_geometry(x.h(), x.w(), k_, stride_);
  const Eigen::Index p = Eigen::Index{g.ho} * g.wo;
  const RowMatrix<S> col = patches(x, k_, stride_, g);
  const Eigen::Map<const RowMatrix<S>> wm(weight.value.data(), cout_, Eigen::Index{cin_} * k_ * k_);
  RowMatrix<S> out = wm * col;
  out.colwise() += bias.value.values().matrix();
  Tensor<S> y(x.n(), cout_, g.ho, g.wo);
  for (int n = 0; n < x.n(); ++n) y.image(n) = out.middleCols(n * p, p);
  return y;
}

template <class S>
Tensor<S> Conv2d<S>::backward(const Tensor<S>& dy) {
  const Geometry g = conv_geometry(x_.h(), x_.w(), k_, stride_);
  const Eigen::Index p = Eigen::Index{g.ho} * g.wo;
  require_same_shape(dy.shape(), Shape{x_.n(), cout_, g.ho, g.wo}, weight.name + " backward");
  RowMatrix<S> dout(cout_, p * x_.n());
  for (int n = 0; n < x_.n(); ++n) dout.middleCols(n * p, p) = dy.image(n);

  const RowMatrix<S> col = patches(x_, k_, stride_, g);
  const Eigen::Index ck = Eigen::Index{cin_} * k_ * k_;
  Eigen::Map<RowMatrix<S>> dw(weight.grad.data(), cout_, ck);
  dw.noalias() += dout * col.transpose();
  bias.grad.values() += dout.rowwise().sum().array();

  const Eigen::Map<const RowMatrix<S>> wm(weight.value.data(), cout_, ck);
  const RowMatrix<S> dcol = wm.transpose() * dout;
  Tensor<S> dx(x_.shape());
  for (int n = 0; n < x_.n(); ++n)
    col2im(dcol.data() + n * p, dcol.cols(), cin_, k_, stride_, g,
           dx.data() + n * Eigen::Index{cin_} * x_.shape().plane());
  return dx;
}

template <class S>
void Conv2d<S>::parameters(std::vector<Param<S>*>& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

// ---------------------------------------------------------------------------

template <class S>
Tensor<S> Upsample2x<S>::forward(const Tensor<S>& x, bool) {
  in_ = x.shape();
  Tensor<S> y(x.n(), x.c(), 2 * x.h(), 2 * x.w());
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int i = 0; i < y.h(); ++i)
        for (int j = 0; j < y.w(); ++j) y(n, c, i, j) = x(n, c, i / 2, j / 2);
  return y;
}

template <class S>
Tensor<S> Upsample2x<S>::backward(const Tensor<S>& dy) {
  require_same_shape(dy.shape(), Shape{in_.n, in_.c, 2 * in_.h, 2 * in_.w}, "upsample backward");
  Tensor<S> dx(in_);
  for (int n = 0; n < dy.n(); ++n)
    for (int c = 0; c < dy.c(); ++c)
      for (int i = 0; i < dy.h(); ++i)
        for (int j = 0; j < dy.w(); ++j) dx(n, c, i / 2, j / 2) += dy(n, c, i, j);
  return dx;
}

template <class S>
Tensor<S> LeakyRelu<S>::forward(const Tensor<S>& x, bool) {
  x_ = x;
  Tensor<S> y(x.shape());
  y.values() = (x.values() > S(0)).select(x.values(), slope_ * x.values());
  return y;
}

template <class S>
Tensor<S> LeakyRelu<S>::backward(const Tensor<S>& dy) {
  require_same_shape(dy.shape(), x_.shape(), "leaky relu backward");
  Tensor<S> dx(dy.shape());
  dx.values() = (x_.values() > S(0)).select(dy.values(), slope_ * dy.values());
  return dx;
}

// ---------------------------------------------------------------------------

template <class S>
BatchNorm2d<S>::BatchNorm2d(std::string name, int channels) {
  gamma = {name + ".gamma", Tensor<S>(1, channels, 1, 1, S(1)), Tensor<S>(1, channels, 1, 1), true};
  beta = {name + ".beta", Tensor<S>(1, channels, 1, 1), Tensor<S>(1, channels, 1, 1), true};
  running_mean = {name + ".running_mean", Tensor<S>(1, channels, 1, 1), Tensor<S>(1, channels, 1, 1), false};
  running_var = {name + ".running_var", Tensor<S>(1, channels, 1, 1, S(1)), Tensor<S>(1, channels, 1, 1), false};
}

template <class S>
Tensor<S> BatchNorm2d<S>::forward(const Tensor<S>& x, bool training) {
  const int C = gamma.value.c();
  if (x.c() != C) throw ShapeError(gamma.name + ": input " + x.shape().str() + " has the wrong channel count");
  training_ = training;
  const Eigen::Index hw = x.shape().plane();
  const double m = static_cast<double>(x.n()) * static_cast<double>(hw);
  xhat_ = Tensor<S>(x.shape());
  inv_std_.resize(C);
  Tensor<S> y(x.shape());
  for (int c = 0; c < C; ++c) {
    S mean, var;
    if (training) {
      double sum = 0.0;
      for (int n = 0; n < x.n(); ++n) sum += static_cast<double>(x.image(n).row(c).sum());
      const double mu = sum / m;
      double sq = 0.0;
      for (int n = 0; n < x.n(); ++n) sq += static_cast<double>((x.image(n).row(c).array() - S(mu)).square().sum());
      mean = static_cast<S>(mu);
      var = static_cast<S>(sq / m);
      const double unbiased = m > 1.0 ? sq / (m - 1.0) : sq;
      running_mean.value.values()[c] = static_cast<S>(momentum * running_mean.value.values()[c] + (1.0 - momentum) * mu);
      running_var.value.values()[c] =
          static_cast<S>(momentum * running_var.value.values()[c] + (1.0 - momentum) * unbiased);
    } else {
      mean = running_mean.value.values()[c];
      var = running_var.value.values()[c];
    }
    const S inv = S(1) / std::sqrt(var + S(eps));
    inv_std_[c] = inv;
    const S g = gamma.value.values()[c], b = beta.value.values()[c];
    for (int n = 0; n < x.n(); ++n) {
      xhat_.image(n).row(c) = (x.image(n).row(c).array() - mean) * inv;
      y.image(n).row(c) = (g * xhat_.image(n).row(c).array() + b).matrix();
    }
  }
  return y;
}

template <class S>
Tensor<S> BatchNorm2d<S>::backward(const Tensor<S>& dy) {
  require_same_shape(dy.shape(), xhat_.shape(), gamma.name + " backward");
  const int C = gamma.value.c();
  const S m = static_cast<S>(dy.n()) * static_cast<S>(dy.shape().plane());
  Tensor<S> dx(dy.shape());
  for (int c = 0; c < C; ++c) {
    S sum_dy(0), sum_dy_xhat(0);
    for (int n = 0; n < dy.n(); ++n) {
      sum_dy += dy.image(n).row(c).sum();
      sum_dy_xhat += dy.image(n).row(c).dot(xhat_.image(n).row(c));
    }
    gamma.grad.values()[c] += sum_dy_xhat;
    beta.grad.values()[c] += sum_dy;
    const S scale = gamma.value.values()[c] * inv_std_[c];
    for (int n = 0; n < dy.n(); ++n) {
      if (training_)
        dx.image(n).row(c) =
            (scale / m) * (m * dy.image(n).row(c).array() - sum_dy - xhat_.image(n).row(c).array() * sum_dy_xhat);
      else
        dx.image(n).row(c) = scale * dy.image(n).row(c);
    }
  }
  return dx;
}

template <class S>
void BatchNorm2d<S>::parameters(std::vector<Param<S>*>& out) {
  out.push_back(&gamma);
  out.push_back(&beta);
  out.push_back(&running_mean);
  out.push_back(&running_var);
}

// ---------------------------------------------------------------------------

template <class S>
Tensor<S> Sigmoid<S>::forward(const Tensor<S>& x, bool) {
  // Clamped so the output stays strictly inside (0, 1) in finite precision.
  const S lo = std::numeric_limits<S>::min();
  const S hi = S(1) - std::numeric_limits<S>::epsilon() / S(2);
  y_ = Tensor<S>(x.shape());
  y_.values() = (S(1) / (S(1) + (-x.values()).exp())).max(lo).min(hi);
  return y_;
}

template <class S>
Tensor<S> Sigmoid<S>::backward(const Tensor<S>& dy) {
  require_same_shape(dy.shape(), y_.shape(), "sigmoid backward");
  Tensor<S> dx(dy.shape());
  dx.values() = dy.values() * y_.values() * (S(1) - y_.values());
  return dx;
}

template <class S>
Tensor<S> Sequential<S>::forward(const Tensor<S>& x, bool training) {
  Tensor<S> t = x;
  for (auto& l : layers_) t = l->forward(t, training);
  return t;
}

template <class S>
Tensor<S> Sequential<S>::backward(const Tensor<S>& dy) {
  Tensor<S> g = dy;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

template <class S>
void Sequential<S>::parameters(std::vector<Param<S>*>& out) {
  for (auto& l : layers_) l->parameters(out);
}

// ---------------------------------------------------------------------------
// Skips

template <class S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
    throw ShapeError("concat: shape " + a.shape().str() + " does not match " + b.shape().str());
  Tensor<S> y(a.n(), a.c() + b.c(), a.h(), a.w());
  for (int n = 0; n < a.n(); ++n) {
    y.image(n).topRows(a.c()) = a.image(n);
    y.image(n).bottomRows(b.c()) = b.image(n);
  }
  return y;
}

template <class S>
std::pair<Tensor<S>, Tensor<S>> split_channels(const Tensor<S>& x, int channels_a) {
  if (channels_a < 0 || channels_a > x.c()) throw ShapeError("split: bad channel count for " + x.shape().str());
  Tensor<S> a(x.n(), channels_a, x.h(), x.w()), b(x.n(), x.c() - channels_a, x.h(), x.w());
  for (int n = 0; n < x.n(); ++n) {
    a.image(n) = x.image(n).topRows(channels_a);
    b.image(n) = x.image(n).bottomRows(x.c() - channels_a);
  }
  return {std::move(a), std::move(b)};
}

template <class S>
ScalarSkip<S>::ScalarSkip(std::string name) {
  gate = {name + ".gate", Tensor<S>(1, 1, 1, 1), Tensor<S>(1, 1, 1, 1), true};
}

template <class S>
Tensor<S> ScalarSkip<S>::forward(const Tensor<S>& decoder, const Tensor<S>& encoder) {
  require_same_shape(decoder.shape(), encoder.shape(), gate.name);
  encoder_ = encoder;
  Tensor<S> y(decoder.shape());
  y.values() = decoder.values() + gate.value.values()[0] * encoder.values();
  return y;
}

template <class S>
std::pair<Tensor<S>, Tensor<S>> ScalarSkip<S>::backward(const Tensor<S>& dy) {
  require_same_shape(dy.shape(), encoder_.shape(), gate.name + " backward");
  gate.grad.values()[0] += (dy.values() * encoder_.values()).sum();
  Tensor<S> de(dy.shape());
  de.values() = gate.value.values()[0] * dy.values();
  return {dy, std::move(de)};
}

template <class S>
TensorSkip<S>::TensorSkip(std::string name, int channels) : mix(name + ".mix", 2 * channels, channels, 1), channels_(channels) {}

template <class S>
Tensor<S> TensorSkip<S>::forward(const Tensor<S>& decoder, const Tensor<S>& encoder, bool training) {
  require_same_shape(decoder.shape(), encoder.shape(), mix.weight.name);
  return mix.forward(concat_channels(decoder, encoder), training);
}

template <class S>
std::pair<Tensor<S>, Tensor<S>> TensorSkip<S>::backward(const Tensor<S>& dy) {
  return split_channels(mix.backward(dy), channels_);
}

// ---------------------------------------------------------------------------
// UNet

namespace {

template <class S>
void add_block(Sequential<S>& seq, const std::string& name, int cin, int cout, int k, int stride, bool bn, bool act,
               double slope) {
  seq.add(std::make_unique<Conv2d<S>>(name, cin, cout, k, stride));
  if (bn) seq.add(std::make_unique<BatchNorm2d<S>>(name + ".bn", cout));
  if (act) seq.add(std::make_unique<LeakyRelu<S>>(slope));
}

}  // namespace

template <class S>
UNet<S>::UNet(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  validate(cfg_);
  const int D = cfg_.depth, K = cfg_.convs_per_depth, k = cfg_.kernel_size;
  const bool middle = cfg_.batchnorm == BatchNormMode::Middle;
  const bool act_down = cfg_.leaky_placement != LeakyPlacement::None;
  const bool act_up = cfg_.leaky_placement == LeakyPlacement::All;
  const double slope = cfg_.leaky_slope;

  encoder_.resize(static_cast<std::size_t>(D));
  down_.resize(static_cast<std::size_t>(D));
  decoder_.resize(static_cast<std::size_t>(D));
  for (int d = 1; d <= D; ++d) {
    const int c = stage_channels(cfg_, d);
    const int cin = d == 1 ? cfg_.in_channels : stage_channels(cfg_, d - 1);
    const std::string p = "enc" + std::to_string(d);
    auto& enc = encoder_[static_cast<std::size_t>(d - 1)];
    for (int i = 0; i < K; ++i)
      add_block(enc, p + ".conv" + std::to_string(i), i == 0 ? cin : c, c, k, 1, middle && d != 1, act_down, slope);
    add_block(down_[static_cast<std::size_t>(d - 1)], "down" + std::to_string(d), c, c, k, 2, middle && d != 1,
              act_down, slope);
  }
  const int cd = stage_channels(cfg_, D);
  for (int i = 0; i < K; ++i)
    add_block(bottleneck_, "bottleneck.conv" + std::to_string(i), cd, cd, k, 1, middle, act_up, slope);
  for (int d = D; d >= 1; --d) {
    const int c = stage_channels(cfg_, d);
    const int cin = d == D ? cd : stage_channels(cfg_, d + 1);
    const std::string p = "dec" + std::to_string(d);
    auto& st = decoder_[static_cast<std::size_t>(d - 1)];
    st.up.add(std::make_unique<Upsample2x<S>>());
    add_block(st.up, p + ".up", cin, c, k, 1, middle && d != 1, act_up, slope);
    if (cfg_.skip_depths.count(d)) {
      if (cfg_.skip_type == SkipType::Scalar) st.scalar_skip = std::make_unique<ScalarSkip<S>>(p + ".skip");
      if (cfg_.skip_type == SkipType::Tensor) st.tensor_skip = std::make_unique<TensorSkip<S>>(p + ".skip", c);
    }
    for (int i = 0; i < K; ++i)
      add_block(st.convs, p + ".conv" + std::to_string(i), c, c, k, 1, middle && d != 1, act_up, slope);
  }
  head_.add(std::make_unique<Conv2d<S>>("head", stage_channels(cfg_, 1), 1, 1, 1));
  if (cfg_.constrained_output) head_.add(std::make_unique<Sigmoid<S>>());

  std::mt19937_64 rng(derive_seed(seed, 7));
  for (Param<S>* p : parameters()) {
    const std::string& n = p->name;
    if (n.size() < 7 || n.compare(n.size() - 7, 7, ".weight") != 0) continue;
    const double fan_in = static_cast<double>(p->value.c()) * p->value.h() * p->value.w();
    std::uniform_real_distribution<double> u(-std::sqrt(6.0 / fan_in), std::sqrt(6.0 / fan_in));
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.values()[i] = static_cast<S>(u(rng));
  }
}

template <class S>
Tensor<S> UNet<S>::forward(const Tensor<S>& x, bool training) {
  const int D = cfg_.depth;
  const int unit = 1 << D;
  if (x.c() != cfg_.in_channels || x.h() < unit || x.w() < unit || x.h() % unit != 0 || x.w() % unit != 0)
    throw ShapeError("network input " + x.shape().str() + " needs " + std::to_string(cfg_.in_channels) +
                     " channels and a spatial size that is a positive multiple of 2^depth = " + std::to_string(unit));
  std::vector<Tensor<S>> skips(static_cast<std::size_t>(D));
  Tensor<S> t = x;
  for (int d = 1; d <= D; ++d) {
    const auto i = static_cast<std::size_t>(d - 1);
    t = encoder_[i].forward(t, training);
    if (decoder_[i].scalar_skip || decoder_[i].tensor_skip) skips[i] = t;
    t = down_[i].forward(t, training);
  }
  t = bottleneck_.forward(t, training);
  for (int d = D; d >= 1; --d) {
    const auto i = static_cast<std::size_t>(d - 1);
    auto& st = decoder_[i];
    t = st.up.forward(t, training);
    if (st.scalar_skip) t = st.scalar_skip->forward(t, skips[i]);
    if (st.tensor_skip) t = st.tensor_skip->forward(t, skips[i], training);
    t = st.convs.forward(t, training);
  }
  return head_.forward(t, training);
}

template <class S>
Tensor<S> UNet<S>::backward(const Tensor<S>& dy) {
  const int D = cfg_.depth;
  std::vector<Tensor<S>> skip_grads(static_cast<std::size_t>(D));
  Tensor<S> g = head_.backward(dy);
  for (int d = 1; d <= D; ++d) {
    const auto i = static_cast<std::size_t>(d - 1);
    auto& st = decoder_[i];
    g = st.convs.backward(g);
    if (st.scalar_skip || st.tensor_skip) {
      auto [gd, ge] = st.scalar_skip ? st.scalar_skip->backward(g) : st.tensor_skip->backward(g);
      g = std::move(gd);
      skip_grads[i] = std::move(ge);
    }
    g = st.up.backward(g);
  }
  g = bottleneck_.backward(g);
  for (int d = D; d >= 1; --d) {
    const auto i = static_cast<std::size_t>(d - 1);
    g = down_[i].backward(g);
    if (skip_grads[i].size() > 0) g.values() += skip_grads[i].values();
    g = encoder_[i].backward(g);
  }
  return g;
}

template <class S>
std::vector<Param<S>*> UNet<S>::state() {
  std::vector<Param<S>*> out;
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    encoder_[i].parameters(out);
    down_[i].parameters(out);
  }
  bottleneck_.parameters(out);
  for (auto it = decoder_.rbegin(); it != decoder_.rend(); ++it) {
    it->up.parameters(out);
    if (it->scalar_skip) out.push_back(&it->scalar_skip->gate);
    if (it->tensor_skip) it->tensor_skip->mix.parameters(out);
    it->convs.parameters(out);
  }
  head_.parameters(out);
  return out;
}

template <class S>
std::vector<Param<S>*> UNet<S>::parameters() {
  auto all = state();
  std::vector<Param<S>*> out;
  for (auto* p : all)
    if (p->trainable) out.push_back(p);
  return out;
}

template <class S>
std::size_t UNet<S>::parameter_count() {
  std::size_t n = 0;
  for (auto* p : parameters()) n += static_cast<std::size_t>(p->value.size());
  return n;
}

template <class S>
void UNet<S>::zero_grad() {
  for (auto* p : state()) p->grad.set_zero();
}

template <class To, class From>
void copy_state(UNet<From>& from, UNet<To>& to) {
  std::map<std::string, Param<From>*> src;
  for (auto* p : from.state()) src[p->name] = p;
  for (auto* p : to.state()) {
    const auto it = src.find(p->name);
    if (it == src.end()) throw ShapeError("source network lacks tensor '" + p->name + "'");
    require_same_shape(it->second->value.shape(), p->value.shape(), "tensor '" + p->name + "'");
    p->value = it->second->value.template cast<To>();
  }
}

// ---------------------------------------------------------------------------
// Loss, metric, optimizer

template <class S>
LossResult<S> masked_loss(const Tensor<S>& pred, const Tensor<S>& target, const Tensor<S>& mask, LossKind kind) {
  require_same_shape(pred.shape(), target.shape(), "loss target");
  require_same_shape(pred.shape(), mask.shape(), "loss mask");
  LossResult<S> r;
  r.grad = Tensor<S>(pred.shape());
  double sum = 0.0;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    if (mask.values()[i] != S(0)) continue;
    const double d = static_cast<double>(pred.values()[i]) - static_cast<double>(target.values()[i]);
    sum += kind == LossKind::L1 ? std::abs(d) : d * d;
    ++r.count;
  }
  if (r.count == 0) return r;
  const double inv = 1.0 / static_cast<double>(r.count);
  r.loss = static_cast<S>(sum * inv);
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    if (mask.values()[i] != S(0)) continue;
    const double d = static_cast<double>(pred.values()[i]) - static_cast<double>(target.values()[i]);
    const double g = kind == LossKind::L1 ? (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0)) : 2.0 * d;
    r.grad.values()[i] = static_cast<S>(g * inv);
  }
  return r;
}

template <class S>
double accuracy(const Tensor<S>& pred, const Tensor<S>& target, const Tensor<S>& mask) {
  require_same_shape(pred.shape(), target.shape(), "accuracy target");
  require_same_shape(pred.shape(), mask.shape(), "accuracy mask");
  double sum = 0.0;
  std::size_t count = 0;
  for (Eigen::Index i = 0; i < pred.size(); ++i) {
    if (mask.values()[i] != S(0)) continue;
    sum += std::abs(static_cast<double>(pred.values()[i]) - static_cast<double>(target.values()[i]));
    ++count;
  }
  return count == 0 ? 100.0 : 100.0 * (1.0 - sum / static_cast<double>(count));
}

template <class S>
void Adam<S>::step(const std::vector<Param<S>*>& params) {
  if (m_.size() != params.size()) {
    m_.clear();
    v_.clear();
    for (auto* p : params) {
      m_.push_back(Eigen::Array<S, Eigen::Dynamic, 1>::Zero(p->value.size()));
      v_.push_back(Eigen::Array<S, Eigen::Dynamic, 1>::Zero(p->value.size()));
    }
  }
  const double lr = learning_rate(cfg_, t_);
  ++t_;
  const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
  const S c1 = static_cast<S>(1.0 - std::pow(cfg_.beta1, static_cast<double>(t_)));
  const S c2 = static_cast<S>(1.0 - std::pow(cfg_.beta2, static_cast<double>(t_)));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& g = params[i]->grad.values();
    m_[i] = b1 * m_[i] + (S(1) - b1) * g;
    v_[i] = b2 * v_[i] + (S(1) - b2) * g.square();
    params[i]->value.values() -= static_cast<S>(lr) * (m_[i] / c1) / ((v_[i] / c2).sqrt() + static_cast<S>(cfg_.eps));
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const fs::path& path, UNet<float>& net, const Json& extra) {
  dataset::Container c;
  Json shapes = Json::object();
  for (auto* p : net.state()) {
    const Shape& s = p->value.shape();
    shapes[p->name] = {s.n, s.c, s.h, s.w};
    c.names.push_back(p->name);
    c.arrays.emplace_back(p->value.data(), p->value.data() + p->value.size());
  }
  c.metadata = {{"kind", "checkpoint"}, {"network", to_json(net.config())}, {"shapes", shapes}, {"extra", extra}};
  dataset::write_bytes_atomic(path, dataset::encode(c));
}

void load_state(const dataset::Container& c, UNet<float>& net) {
  std::map<std::string, std::size_t> index;
  for (std::size_t k = 0; k < c.names.size(); ++k) index[c.names[k]] = k;
  const Json& shapes = c.metadata.at("shapes");
  for (auto* p : net.state()) {
    const auto it = index.find(p->name);
    if (it == index.end()) throw ShapeError("checkpoint lacks tensor '" + p->name + "'");
    const auto dims = shapes.at(p->name).get<std::vector<int>>();
    const Shape s = dims.size() == 4 ? Shape{dims[0], dims[1], dims[2], dims[3]} : Shape{};
    if (!(s == p->value.shape()))
      throw ShapeError("tensor '" + p->name + "' is " + s.str() + " in the checkpoint but " + p->value.shape().str() +
                       " in the network");
    const auto& a = c.arrays[it->second];
    std::copy(a.begin(), a.end(), p->value.data());
  }
}

UNet<float> load_checkpoint(const fs::path& path, Json* metadata) {
  const auto c = dataset::decode(dataset::read_bytes(path));
  if (metadata) *metadata = c.metadata;
  if (c.metadata.value("kind", std::string()) != "checkpoint" || !c.metadata.contains("network"))
    throw FormatError("not a checkpoint container", 0);
  UNet<float> net(network_config_from_json(c.metadata.at("network")), 0);
  load_state(c, net);
  return net;
}

// ---------------------------------------------------------------------------
// Training

Metrics evaluate(UNet<float>& net, dataset::SampleStore& store, const std::vector<std::string>& ids,
                 const TrainConfig& cfg) {
  if (ids.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double loss_sum = 0.0, abs_sum = 0.0;
  std::size_t count = 0;
  for (const auto& chunk : dataset::chunk(ids, static_cast<std::size_t>(cfg.batch_size))) {
    const auto b = dataset::make_batch(store, chunk, cfg.input, cfg.mask);
    const Tensor<float> y = net.forward(b.input, false);
    const auto l = masked_loss(y, b.target, b.mask, net.config().loss);
    loss_sum += static_cast<double>(l.loss) * static_cast<double>(l.count);
    for (Eigen::Index i = 0; i < y.size(); ++i)
      if (b.mask.values()[i] == 0.0f)
        abs_sum += std::abs(static_cast<double>(y.values()[i]) - static_cast<double>(b.target.values()[i]));
    count += l.count;
  }
  if (count == 0) return {0.0, 100.0};
  return {loss_sum / static_cast<double>(count), 100.0 * (1.0 - abs_sum / static_cast<double>(count))};
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,step,loss_train,loss_val,acc_val,lr\n" << std::setprecision(9);
  for (const auto& r : history)
    os << r.epoch << ',' << r.step << ',' << r.loss_train << ',' << r.loss_val << ',' << r.acc_val << ',' << r.lr
       << '\n';
  return os.str();
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  dataset::write_bytes_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::vector<Tensor<float>> snapshot(UNet<float>& net) {
  std::vector<Tensor<float>> out;
  for (auto* p : net.state()) out.push_back(p->value);
  return out;
}

void restore(UNet<float>& net, const std::vector<Tensor<float>>& values) {
  const auto st = net.state();
  for (std::size_t i = 0; i < st.size(); ++i) st[i]->value = values[i];
}

}  // namespace

TrainResult train(dataset::SampleStore& store, const dataset::Split& split, const NetworkConfig& net_cfg,
                  const OptimizerConfig& opt_cfg, const TrainConfig& cfg) {
  validate(net_cfg);
  validate(opt_cfg);
  if (split.train.empty()) throw Error("training split is empty");
  if (cfg.batch_size < 1 || cfg.epochs < 0 || cfg.max_steps < 0) throw Error("invalid training configuration");

  TrainResult result{UNet<float>(net_cfg, derive_seed(cfg.seed, 1)), {}, {}, 0, 0, false};
  UNet<float>& net = result.net;
  Adam<float> adam(opt_cfg);
  const bool has_val = !split.val.empty();
  const auto& monitor_ids = has_val ? split.val : split.train;
  result.initial = evaluate(net, store, monitor_ids, cfg);
  double best = result.initial.loss;
  auto best_state = snapshot(net);
  const bool persist = !cfg.out_dir.empty();
  if (persist) fs::create_directories(cfg.out_dir);
  Json extra = cfg.checkpoint_extra.is_object() ? cfg.checkpoint_extra : Json::object();
  extra.update({{"optimizer", to_json(opt_cfg)},
                 {"seed", cfg.seed},
                 {"input", dataset::channel_name(cfg.input)},
                 {"mask", dataset::channel_name(cfg.mask)}});

  for (int epoch = 1; epoch <= cfg.epochs && !result.diverged; ++epoch) {
    std::vector<std::string> order = split.train;
    std::mt19937_64 rng(derive_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    bool stepped = false;
    for (const auto& chunk : dataset::chunk(order, static_cast<std::size_t>(cfg.batch_size))) {
      if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) break;
      const auto b = dataset::make_batch(store, chunk, cfg.input, cfg.mask);
      net.zero_grad();
      const Tensor<float> y = net.forward(b.input, true);
      const auto l = masked_loss(y, b.target, b.mask, net_cfg.loss);
      if (!std::isfinite(l.loss)) {
        result.diverged = true;
        if (persist) save_checkpoint(cfg.out_dir / "last_finite.mshd", net, extra);
        break;
      }
      net.backward(l.grad);
      adam.step(net.parameters());
      ++result.steps;
      stepped = true;
      loss_sum += static_cast<double>(l.loss) * static_cast<double>(l.count);
      loss_count += l.count;
    }
    if (!stepped) break;
    const Metrics m = evaluate(net, store, monitor_ids, cfg);
    result.history.push_back({epoch, result.steps, loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0,
                              has_val ? m.loss : std::numeric_limits<double>::quiet_NaN(),
                              has_val ? m.accuracy : std::numeric_limits<double>::quiet_NaN(), adam.current_lr()});
    if (m.loss < best) {
      best = m.loss;
      best_state = snapshot(net);
      result.best_epoch = epoch;
      if (persist) save_checkpoint(cfg.out_dir / "best.mshd", net, extra);
    }
    if (persist) write_text(cfg.out_dir / "history.csv", history_csv(result.history));
  }
  restore(net, best_state);
  if (persist && result.best_epoch == 0) save_checkpoint(cfg.out_dir / "best.mshd", net, extra);
  return result;
}

dataset::FloatChannel predict(UNet<float>& net, const dataset::Sample& sample, dataset::InputChannel input) {
  const auto& ch = sample.channel(dataset::channel_name(input));
  Tensor<float> x(1, 1, sample.height, sample.width);
  x.image(0).row(0) = ch.reshaped<Eigen::RowMajor>().transpose();
  const Tensor<float> y = net.forward(x, false);
  dataset::FloatChannel out(sample.height, sample.width);
  out.reshaped<Eigen::RowMajor>() = y.image(0).row(0).transpose();
  return out;
}

// ---------------------------------------------------------------------------

#define MESHDENSITY_INSTANTIATE(S)                                                                           \
  template class Conv2d<S>;                                                                                  \
  template class Upsample2x<S>;                                                                              \
  template class LeakyRelu<S>;                                                                               \
  template class BatchNorm2d<S>;                                                                             \
  template class Sigmoid<S>;                                                                                 \
  template class Sequential<S>;                                                                              \
  template class ScalarSkip<S>;                                                                              \
  template class TensorSkip<S>;                                                                              \
  template class UNet<S>;                                                                                    \
  template class Adam<S>;                                                                                    \
  template Tensor<S> concat_channels(const Tensor<S>&, const Tensor<S>&);                                    \
  template std::pair<Tensor<S>, Tensor<S>> split_channels(const Tensor<S>&, int);                            \
  template LossResult<S> masked_loss(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, LossKind);        \
  template double accuracy(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&);

MESHDENSITY_INSTANTIATE(float)
MESHDENSITY_INSTANTIATE(double)
#undef MESHDENSITY_INSTANTIATE

template void copy_state(UNet<float>&, UNet<double>&);
template void copy_state(UNet<double>&, UNet<float>&);
template void copy_state(UNet<float>&, UNet<float>&);
template void copy_state(UNet<double>&, UNet<double>&);

}  // namespace meshdensity::cnn
