#pragma once

// Network building blocks: padded convolution, squeeze-and-excitation,
// drop path, layer scale, the ConvNeXt-style block and the depth-scaling layer.
// All layers keep the spatial extent (H, W) of their input.

#include <cassert>
#include <cmath>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "karina/engine/conv.hpp"
#include "karina/engine/ops.hpp"
#include "karina/engine/tensor.hpp"
#include "karina/padding.hpp"

namespace karina {

enum class Mode { Train, Eval };

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

/// Hands out named parameters in registration order. Either draws fresh
/// values from a seeded rng, or binds tensors that already exist (checkpoint
/// load, precision cast, per-thread replicas), checking name and shape.
template <class T>
class ParamFactory {
 public:
  ParamFactory(std::vector<Parameter<T>>& sink, std::mt19937_64& rng) : sink_(sink), rng_(&rng) {}
  ParamFactory(std::vector<Parameter<T>>& sink, const std::map<std::string, Tensor<T>>& bound)
      : sink_(sink), bound_(&bound) {}

  /// Normal(0, std) truncated to +-2 std by redrawing.
  Tensor<T> trunc_normal(const std::string& name, Shape shape, double std = 0.02) {
    if (bound_) return bind(name, shape);
    std::normal_distribution<double> dist(0.0, std);
    std::vector<T> v(karina::numel(shape));
    for (auto& x : v) {
      double d;
      do d = dist(*rng_);
      while (std::abs(d) > 2.0 * std);
      x = static_cast<T>(d);
    }
    return add(name, std::move(shape), std::move(v));
  }

  Tensor<T> constant(const std::string& name, Shape shape, double value) {
    if (bound_) return bind(name, shape);
    std::vector<T> v(karina::numel(shape), static_cast<T>(value));
    return add(name, std::move(shape), std::move(v));
  }

 private:
  Tensor<T> add(const std::string& name, Shape shape, std::vector<T> v) {
    check_unique(name);
    auto t = Tensor<T>::parameter(std::move(shape), std::move(v));
    sink_.push_back({name, t});
    return t;
  }

  Tensor<T> bind(const std::string& name, const Shape& shape) {
    check_unique(name);
    auto it = bound_->find(name);
    if (it == bound_->end()) throw std::invalid_argument("missing parameter '" + name + "'");
    if (it->second.shape() != shape)
      throw ShapeError("parameter '" + name + "' has shape " + to_string(it->second.shape()) +
                       ", expected " + to_string(shape));
    sink_.push_back({name, it->second});
    return it->second;
  }

  void check_unique(const std::string& name) const {
    for (const auto& p : sink_)
      if (p.name == name) throw std::logic_error("duplicate parameter name " + name);
  }

  std::vector<Parameter<T>>& sink_;
  std::mt19937_64* rng_ = nullptr;
  const std::map<std::string, Tensor<T>>* bound_ = nullptr;
};

struct Conv2dSpec {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 3;
  std::size_t groups = 1;
  PaddingMode padding_mode = PaddingMode::Geocyclic;

  std::size_t pad() const { return (kernel - 1) / 2; }

  void validate() const {
    if (kernel % 2 == 0) throw std::invalid_argument("conv2d: kernel must be odd, got " + std::to_string(kernel));
    if (groups == 0 || in_channels % groups != 0 || out_channels % groups != 0)
      throw std::invalid_argument("conv2d: channels " + std::to_string(in_channels) + "->" +
                                  std::to_string(out_channels) + " not divisible by groups " +
                                  std::to_string(groups));
  }
};

/// Cross-correlation over the field padded by (kernel-1)/2 in `spec.padding_mode`.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Conv2dSpec& spec, const Tensor<T>& weight,
                 const Tensor<T>& bias) {
  spec.validate();
  if (x.rank() != 3 || x.dim(0) != spec.in_channels)
    throw ShapeError("conv2d: expected [" + std::to_string(spec.in_channels) + ",H,W] input, got " +
                     to_string(x.shape()));
  const Shape wshape{spec.out_channels, spec.in_channels / spec.groups, spec.kernel, spec.kernel};
  if (weight.shape() != wshape)
    throw ShapeError("conv2d: weight must be " + to_string(wshape) + ", got " +
                     to_string(weight.shape()));
  Tensor<T> y = spec.pad() > 0 ? conv2d_valid(pad(x, spec.pad(), spec.padding_mode), weight, bias, spec.groups)
                               : conv2d_valid(x, weight, bias, spec.groups);
  assert(y.dim(1) == x.dim(1) && y.dim(2) == x.dim(2));
  return y;
}

template <class T>
struct Conv2d {
  Conv2dSpec spec;
  Tensor<T> weight, bias;

  static Conv2d build(const Conv2dSpec& spec, ParamFactory<T>& f, const std::string& prefix) {
    spec.validate();
    Conv2d c;
    c.spec = spec;
    c.weight = f.trunc_normal(prefix + ".weight",
                              {spec.out_channels, spec.in_channels / spec.groups, spec.kernel, spec.kernel});
    c.bias = f.constant(prefix + ".bias", {spec.out_channels}, 0.0);
    return c;
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, spec, weight, bias); }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma, beta;
  T eps = T(1e-6);

  static LayerNorm build(std::size_t channels, ParamFactory<T>& f, const std::string& prefix) {
    return {f.constant(prefix + ".weight", {channels}, 1.0), f.constant(prefix + ".bias", {channels}, 0.0)};
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm_channels(x, gamma, beta, eps); }
};

struct SESpec {
  std::size_t channels = 1;
  std::size_t reduction_ratio = 4;
  std::size_t reduced() const { return std::max<std::size_t>(channels / reduction_ratio, 1); }
};

template <class T>
struct SEParams {
  Tensor<T> fc1_weight, fc1_bias;  // [r,C], [r]
  Tensor<T> fc2_weight, fc2_bias;  // [C,r], [C]

  static SEParams build(const SESpec& s, ParamFactory<T>& f, const std::string& prefix) {
    if (s.reduction_ratio < 1) throw std::invalid_argument("SE: reduction ratio must be >= 1");
    const std::size_t r = s.reduced();
    return {f.trunc_normal(prefix + ".fc1.weight", {r, s.channels}),
            f.constant(prefix + ".fc1.bias", {r}, 0.0),
            f.trunc_normal(prefix + ".fc2.weight", {s.channels, r}),
            f.constant(prefix + ".fc2.bias", {s.channels}, 0.0)};
  }
};

/// Channel gates sigmoid(W2 relu(W1 gap(x) + b1) + b2) applied to x[C,H,W].
template <class T>
Tensor<T> se_block(const Tensor<T>& x, const SEParams<T>& p) {
  const auto gates = sigmoid(linear(relu(linear(global_avg_pool(x), p.fc1_weight, p.fc1_bias)),
                                    p.fc2_weight, p.fc2_bias));
  return mul(x, gates);
}

/// Residual add with stochastic depth: x + residual * mask / (1 - rate),
/// mask ~ Bernoulli(1 - rate) drawn once per call (one sample). Eval mode and
/// rate 0 are the plain sum.
template <class T>
Tensor<T> drop_path(const Tensor<T>& x, const Tensor<T>& residual, double rate, Mode mode,
                    std::mt19937_64* rng) {
  if (!(rate >= 0.0 && rate < 1.0))
    throw std::invalid_argument("drop_path: rate must lie in [0, 1), got " + std::to_string(rate));
  if (x.shape() != residual.shape())
    throw ShapeError("drop_path: shape mismatch " + to_string(x.shape()) + " vs " +
                     to_string(residual.shape()));
  if (mode == Mode::Eval || rate == 0.0) return add(x, residual);
  if (!rng) throw std::invalid_argument("drop_path: train mode with rate > 0 needs an rng");
  std::bernoulli_distribution keep(1.0 - rate);
  const T factor = keep(*rng) ? static_cast<T>(1.0 / (1.0 - rate)) : T(0);
  return add(x, scale(residual, factor));
}

template <class T>
Tensor<T> layer_scale(const Tensor<T>& x, const Tensor<T>& gamma) {
  if (gamma.rank() != 1 || x.rank() < 1 || gamma.dim(0) != x.dim(0))
    throw ShapeError("layer_scale: gamma " + to_string(gamma.shape()) + " does not match " +
                     std::to_string(x.rank() ? x.dim(0) : 0) + " channels");
  return mul(x, gamma);
}

struct BlockSpec {
  std::size_t dim = 8;
  std::size_t kernel = 7;
  std::size_t expansion = 4;
  double layer_scale_init = 1e-6;
  double drop_path_rate = 0.0;
  bool se_enabled = true;
  std::size_t reduction_ratio = 4;
  PaddingMode padding_mode = PaddingMode::Geocyclic;

  void validate() const {
    if (!(drop_path_rate >= 0.0 && drop_path_rate < 1.0))
      throw std::invalid_argument("block: drop_path_rate must lie in [0, 1)");
    if (expansion < 1) throw std::invalid_argument("block: expansion must be >= 1");
    if (dim < 1) throw std::invalid_argument("block: dim must be >= 1");
  }
};

/// Depthwise conv -> SE -> channel norm -> pointwise expand -> GELU ->
/// pointwise project -> layer scale, added to the block input through drop path.
template <class T>
struct ConvNextBlock {
  BlockSpec spec;
  Conv2d<T> dwconv;
  bool has_se = false;
  SEParams<T> se;
  LayerNorm<T> norm;
  Conv2d<T> pwconv1, pwconv2;
  Tensor<T> gamma;

  static ConvNextBlock build(const BlockSpec& s, ParamFactory<T>& f, const std::string& prefix) {
    s.validate();
    ConvNextBlock b;
    b.spec = s;
    b.dwconv = Conv2d<T>::build({s.dim, s.dim, s.kernel, s.dim, s.padding_mode}, f, prefix + ".dwconv");
    b.has_se = s.se_enabled;
    if (s.se_enabled) b.se = SEParams<T>::build({s.dim, s.reduction_ratio}, f, prefix + ".se");
    b.norm = LayerNorm<T>::build(s.dim, f, prefix + ".norm");
    b.pwconv1 = Conv2d<T>::build({s.dim, s.expansion * s.dim, 1, 1, s.padding_mode}, f, prefix + ".pwconv1");
    b.pwconv2 = Conv2d<T>::build({s.expansion * s.dim, s.dim, 1, 1, s.padding_mode}, f, prefix + ".pwconv2");
    b.gamma = f.constant(prefix + ".gamma", {s.dim}, s.layer_scale_init);
    return b;
  }

  Tensor<T> operator()(const Tensor<T>& x, Mode mode, std::mt19937_64* rng = nullptr) const {
    if (x.rank() != 3 || x.dim(0) != spec.dim)
      throw ShapeError("convnext_block: expected " + std::to_string(spec.dim) + " channels, got " +
                       to_string(x.shape()));
    Tensor<T> y = dwconv(x);
    if (has_se) y = se_block(y, se);
    y = norm(y);
    y = gelu(pwconv1(y));
    y = layer_scale(pwconv2(y), gamma);
    return drop_path(x, y, spec.drop_path_rate, mode, rng);
  }
};

/// Channel norm followed by a kernel-3 convolution widening Cin -> Cout.
template <class T>
struct DepthScale {
  LayerNorm<T> norm;
  Conv2d<T> conv;

  static DepthScale build(std::size_t cin, std::size_t cout, PaddingMode mode, ParamFactory<T>& f,
                          const std::string& prefix) {
    if (cout <= cin)
      throw std::invalid_argument("depth_scale_layer: output channels must exceed input channels");
    return {LayerNorm<T>::build(cin, f, prefix + ".norm"),
            Conv2d<T>::build({cin, cout, 3, 1, mode}, f, prefix + ".conv")};
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return conv(norm(x)); }
};

}  // namespace karina
