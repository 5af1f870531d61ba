#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepclust/nn/gemm.hpp"
#include "deepclust/random.hpp"
#include "deepclust/tensor.hpp"

namespace deepclust::nn {

enum class LayerKind : std::uint32_t {
  dense = 1,
  conv2d = 2,
  conv2d_transpose = 3,
  relu = 4,
  sigmoid = 5,
  batchnorm = 6,
  reshape = 7,
};

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::conv2d_transpose: return "conv2d_transpose";
    case LayerKind::relu: return "relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::reshape: return "reshape";
  }
  return "unknown";
}

enum class Mode { train, eval };

// A trainable tensor and its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
  bool decay = true;  // subject to L2 regularization

  Parameter() = default;
  Parameter(std::string n, Tensor v, bool d = true)
      : name(std::move(n)), value(std::move(v)), grad(Tensor::like(value)), decay(d) {}

  void zero_grad() { grad.fill(0.0); }
};

inline Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  Tensor t(std::move(shape));
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.values()) v = rng.uniform(-limit, limit);
  return t;
}

// Shapes passed to layers exclude the batch axis.
class Layer {
 public:
  virtual ~Layer() = default;

  virtual LayerKind kind() const = 0;
  virtual Shape output_shape(const Shape& input) const = 0;
  virtual Tensor forward(const Tensor& input, Mode mode) = 0;
  virtual Tensor backward(const Tensor& output_grad) = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;

  virtual std::vector<Parameter*> parameters() { return {}; }
  // Everything that must be persisted: parameters, then non-trained state.
  virtual std::vector<Tensor*> state() {
    std::vector<Tensor*> out;
    for (Parameter* p : parameters()) out.push_back(&p->value);
    return out;
  }

 protected:
  void require_cache(bool have) const {
    if (!have) {
      throw std::logic_error(std::string(to_string(kind())) +
                             ": backward called without a preceding forward");
    }
  }
  void require_input(const Shape& expected, const Shape& got) const {
    if (expected != got) {
      throw std::invalid_argument(std::string(to_string(kind())) + ": expected input " +
                                  shape_str(expected) + ", got " + shape_str(got));
    }
  }
  static Shape sample_shape(const Tensor& t) {
    if (t.rank() < 2) throw std::invalid_argument("layer input must have a batch axis");
    return Shape(t.shape().begin() + 1, t.shape().end());
  }
  static Shape with_batch(std::size_t n, const Shape& s) {
    Shape out{n};
    out.insert(out.end(), s.begin(), s.end());
    return out;
  }
};

// y = x W^T + b over inputs of shape [in].
class Dense final : public Layer {
 public:
  Dense(std::size_t in, std::size_t out, Rng& rng)
      : in_(in), out_(out),
        weight_("weight", glorot_uniform({out, in}, in, out, rng)),
        bias_("bias", Tensor({out})) {}

  Dense(Tensor weight, Tensor bias)
      : in_(weight.dim(1)), out_(weight.dim(0)),
        weight_("weight", std::move(weight)), bias_("bias", std::move(bias)) {
    if (bias_.value.shape() != Shape{out_}) throw std::invalid_argument("dense: bias shape");
  }

  LayerKind kind() const override { return LayerKind::dense; }
  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

  Shape output_shape(const Shape& input) const override {
    require_input({in_}, input);
    return {out_};
  }

  Tensor forward(const Tensor& x, Mode) override {
    require_input({in_}, sample_shape(x));
    const std::size_t n = x.dim(0);
    Tensor y({n, out_});
    detail::gemm_nt(n, out_, in_, x.data(), weight_.value.data(), y.data(), false);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < out_; ++j) y(i, j) += bias_.value[j];
    }
    input_ = x;
    return y;
  }

  Tensor backward(const Tensor& dy) override {
    require_cache(input_.has_value());
    const Tensor& x = *input_;
    const std::size_t n = x.dim(0);
    if (dy.shape() != Shape{n, out_}) {
      throw std::invalid_argument("dense: gradient shape " + shape_str(dy.shape()));
    }
    detail::gemm_tn(out_, in_, n, dy.data(), x.data(), weight_.grad.data(), true);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < out_; ++j) bias_.grad[j] += dy(i, j);
    }
    Tensor dx({n, in_});
    detail::gemm_nn(n, in_, out_, dy.data(), weight_.value.data(), dx.data(), false);
    input_.reset();
    return dx;
  }

  std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }

 private:
  std::size_t in_, out_;
  Parameter weight_, bias_;
  std::optional<Tensor> input_;
};

struct ConvConfig {
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

inline std::size_t conv_out_extent(std::size_t in, const ConvConfig& c) {
  if (in + 2 * c.padding < c.kernel) {
    throw std::invalid_argument("conv2d: kernel " + std::to_string(c.kernel) +
                                " larger than padded input " + std::to_string(in));
  }
  return (in + 2 * c.padding - c.kernel) / c.stride + 1;
}

// 2-D convolution over [channels, h, w] with zero padding.
class Conv2d final : public Layer {
 public:
  Conv2d(const ConvConfig& cfg, Rng& rng)
      : cfg_(validated(cfg)),
        weight_("weight", glorot_uniform({cfg.out_channels, cfg.in_channels, cfg.kernel, cfg.kernel},
                                         cfg.in_channels * cfg.kernel * cfg.kernel,
                                         cfg.out_channels * cfg.kernel * cfg.kernel, rng)),
        bias_("bias", Tensor({cfg.out_channels})) {}

  Conv2d(const ConvConfig& cfg, Tensor weight, Tensor bias)
      : cfg_(validated(cfg)), weight_("weight", std::move(weight)), bias_("bias", std::move(bias)) {
    if (weight_.value.shape() != Shape{cfg.out_channels, cfg.in_channels, cfg.kernel, cfg.kernel}) {
      throw std::invalid_argument("conv2d: weight shape " + shape_str(weight_.value.shape()));
    }
  }

  LayerKind kind() const override { return LayerKind::conv2d; }
  const ConvConfig& config() const { return cfg_; }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 3 || in[0] != cfg_.in_channels) {
      throw std::invalid_argument("conv2d: expected input [" + std::to_string(cfg_.in_channels) +
                                  ",h,w], got " + shape_str(in));
    }
    return {cfg_.out_channels, conv_out_extent(in[1], cfg_), conv_out_extent(in[2], cfg_)};
  }

  Tensor forward(const Tensor& x, Mode) override {
    const Shape out = output_shape(sample_shape(x));
    const std::size_t n = x.dim(0);
    geom_ = {cfg_.in_channels, x.dim(2), x.dim(3), cfg_.kernel, cfg_.stride,
             cfg_.padding,     out[1],   out[2]};
    const std::size_t rows = geom_.col_rows(), cols = geom_.col_cols();
    cols_ = Tensor({n, rows, cols});
    Tensor y(with_batch(n, out));
    for (std::size_t s = 0; s < n; ++s) {
      double* col = cols_.data() + s * rows * cols;
      detail::im2col(geom_, x.data() + s * x.row_size(), col);
      double* ys = y.data() + s * y.row_size();
      detail::gemm_nn(cfg_.out_channels, cols, rows, weight_.value.data(), col, ys, false);
      for (std::size_t c = 0; c < cfg_.out_channels; ++c) {
        for (std::size_t j = 0; j < cols; ++j) ys[c * cols + j] += bias_.value[c];
      }
    }
    input_shape_ = x.shape();
    return y;
  }

  Tensor backward(const Tensor& dy) override {
    require_cache(input_shape_.has_value());
    const std::size_t n = (*input_shape_)[0];
    const std::size_t rows = geom_.col_rows(), cols = geom_.col_cols();
    if (dy.shape() != Shape{n, cfg_.out_channels, geom_.out_height, geom_.out_width}) {
      throw std::invalid_argument("conv2d: gradient shape " + shape_str(dy.shape()));
    }
    Tensor dx(*input_shape_);
    std::vector<double> dcol(rows * cols);
    for (std::size_t s = 0; s < n; ++s) {
      const double* dys = dy.data() + s * dy.row_size();
      const double* col = cols_.data() + s * rows * cols;
      detail::gemm_nt(cfg_.out_channels, rows, cols, dys, col, weight_.grad.data(), true);
      for (std::size_t c = 0; c < cfg_.out_channels; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < cols; ++j) acc += dys[c * cols + j];
        bias_.grad[c] += acc;
      }
      detail::gemm_tn(rows, cols, cfg_.out_channels, weight_.value.data(), dys, dcol.data(), false);
      detail::col2im(geom_, dcol.data(), dx.data() + s * dx.row_size());
    }
    input_shape_.reset();
    cols_ = Tensor();
    return dx;
  }

  std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }

 private:
  static ConvConfig validated(const ConvConfig& c) {
    if (c.in_channels == 0 || c.out_channels == 0 || c.kernel == 0 || c.stride == 0) {
      throw std::invalid_argument("conv2d: channels, kernel and stride must be positive");
    }
    return c;
  }

  ConvConfig cfg_;
  Parameter weight_, bias_;
  detail::ConvGeometry geom_{};
  Tensor cols_;
  std::optional<Shape> input_shape_;
};

// Adjoint of a Conv2d with the same configuration: maps the conv's output
// shape back onto its input shape. `cfg` describes the matching forward
// convolution, so in/out channels are swapped relative to this layer's
// data flow. output_padding selects among the input extents that the
// matching convolution maps onto the same output extent.
class Conv2dTranspose final : public Layer {
 public:
  Conv2dTranspose(const ConvConfig& cfg, std::size_t output_padding, Rng& rng)
      : cfg_(cfg), output_padding_(output_padding),
        weight_("weight", glorot_uniform({cfg.out_channels, cfg.in_channels, cfg.kernel, cfg.kernel},
                                         cfg.out_channels * cfg.kernel * cfg.kernel,
                                         cfg.in_channels * cfg.kernel * cfg.kernel, rng)),
        bias_("bias", Tensor({cfg.in_channels})) {
    validate();
  }

  Conv2dTranspose(const ConvConfig& cfg, std::size_t output_padding, Tensor weight, Tensor bias)
      : cfg_(cfg), output_padding_(output_padding),
        weight_("weight", std::move(weight)), bias_("bias", std::move(bias)) {
    validate();
    if (weight_.value.shape() != Shape{cfg.out_channels, cfg.in_channels, cfg.kernel, cfg.kernel}) {
      throw std::invalid_argument("conv2d_transpose: weight shape " +
                                  shape_str(weight_.value.shape()));
    }
  }

  // Builds the transpose that restores `conv_input` (a [c,h,w] shape) from conv's output.
  static Conv2dTranspose matching(const ConvConfig& conv, const Shape& conv_input, Rng& rng) {
    return Conv2dTranspose(conv, padding_for(conv, conv_input), rng);
  }

  static std::size_t padding_for(const ConvConfig& conv, const Shape& conv_input) {
    const std::size_t oh = conv_out_extent(conv_input.at(1), conv);
    const std::size_t ow = conv_out_extent(conv_input.at(2), conv);
    const std::size_t ph = conv_input[1] - base_extent(oh, conv);
    const std::size_t pw = conv_input[2] - base_extent(ow, conv);
    if (ph != pw) throw std::invalid_argument("conv2d_transpose: non-square output padding");
    return ph;
  }

  LayerKind kind() const override { return LayerKind::conv2d_transpose; }
  const ConvConfig& config() const { return cfg_; }
  std::size_t output_padding() const { return output_padding_; }

  Shape output_shape(const Shape& in) const override {
    if (in.size() != 3 || in[0] != cfg_.out_channels) {
      throw std::invalid_argument("conv2d_transpose: expected input [" +
                                  std::to_string(cfg_.out_channels) + ",h,w], got " +
                                  shape_str(in));
    }
    return {cfg_.in_channels, base_extent(in[1], cfg_) + output_padding_,
            base_extent(in[2], cfg_) + output_padding_};
  }

  Tensor forward(const Tensor& x, Mode) override {
    const Shape out = output_shape(sample_shape(x));
    const std::size_t n = x.dim(0);
    geom_ = {cfg_.in_channels, out[1], out[2], cfg_.kernel, cfg_.stride, cfg_.padding,
             x.dim(2),         x.dim(3)};
    const std::size_t rows = geom_.col_rows(), cols = geom_.col_cols();
    Tensor y(with_batch(n, out));
    std::vector<double> col(rows * cols);
    const std::size_t plane = out[1] * out[2];
    for (std::size_t s = 0; s < n; ++s) {
      detail::gemm_tn(rows, cols, cfg_.out_channels, weight_.value.data(),
                      x.data() + s * x.row_size(), col.data(), false);
      double* ys = y.data() + s * y.row_size();
      detail::col2im(geom_, col.data(), ys);
      for (std::size_t c = 0; c < cfg_.in_channels; ++c) {
        for (std::size_t j = 0; j < plane; ++j) ys[c * plane + j] += bias_.value[c];
      }
    }
    input_ = x;
    return y;
  }

  Tensor backward(const Tensor& dy) override {
    require_cache(input_.has_value());
    const Tensor& x = *input_;
    const std::size_t n = x.dim(0);
    if (dy.shape() != Shape{n, cfg_.in_channels, geom_.height, geom_.width}) {
      throw std::invalid_argument("conv2d_transpose: gradient shape " + shape_str(dy.shape()));
    }
    const std::size_t rows = geom_.col_rows(), cols = geom_.col_cols();
    const std::size_t plane = geom_.height * geom_.width;
    Tensor dx(x.shape());
    std::vector<double> dcol(rows * cols);
    for (std::size_t s = 0; s < n; ++s) {
      const double* dys = dy.data() + s * dy.row_size();
      for (std::size_t c = 0; c < cfg_.in_channels; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j < plane; ++j) acc += dys[c * plane + j];
        bias_.grad[c] += acc;
      }
      detail::im2col(geom_, dys, dcol.data());
      const double* xs = x.data() + s * x.row_size();
      detail::gemm_nn(cfg_.out_channels, cols, rows, weight_.value.data(), dcol.data(),
                      dx.data() + s * dx.row_size(), false);
      detail::gemm_nt(cfg_.out_channels, rows, cols, xs, dcol.data(), weight_.grad.data(), true);
    }
    input_.reset();
    return dx;
  }

  std::vector<Parameter*> parameters() override { return {&weight_, &bias_}; }
  std::unique_ptr<Layer> clone() const override {
    return std::make_unique<Conv2dTranspose>(*this);
  }

 private:
  static std::size_t base_extent(std::size_t conv_out, const ConvConfig& c) {
    const std::size_t full = (conv_out - 1) * c.stride + c.kernel;
    if (full < 2 * c.padding) throw std::invalid_argument("conv2d_transpose: padding too large");
    return full - 2 * c.padding;
  }

  void validate() const {
    if (cfg_.in_channels == 0 || cfg_.out_channels == 0 || cfg_.kernel == 0 || cfg_.stride == 0) {
      throw std::invalid_argument("conv2d_transpose: channels, kernel and stride must be positive");
    }
    if (output_padding_ >= cfg_.stride) {
      throw std::invalid_argument("conv2d_transpose: output padding must be below stride");
    }
  }

  ConvConfig cfg_;
  std::size_t output_padding_;
  Parameter weight_, bias_;
  detail::ConvGeometry geom_{};
  std::optional<Tensor> input_;
};

class Relu final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::relu; }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor forward(const Tensor& x, Mode) override {
    Tensor y = x;
    for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
    input_ = x;
    return y;
  }

  Tensor backward(const Tensor& dy) override {
    require_cache(input_.has_value());
    input_->require_same_shape(dy, "relu backward");
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (!((*input_)[i] > 0.0)) dx[i] = 0.0;
    }
    input_.reset();
    return dx;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Relu>(*this); }

 private:
  std::optional<Tensor> input_;
};

class Sigmoid final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::sigmoid; }
  Shape output_shape(const Shape& in) const override { return in; }

  Tensor forward(const Tensor& x, Mode) override {
    Tensor y = x;
    for (double& v : y.values()) v = 1.0 / (1.0 + std::exp(-v));
    output_ = y;
    return y;
  }

  Tensor backward(const Tensor& dy) override {
    require_cache(output_.has_value());
    output_->require_same_shape(dy, "sigmoid backward");
    Tensor dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) {
      const double s = (*output_)[i];
      dx[i] *= s * (1.0 - s);
    }
    output_.reset();
    return dx;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Sigmoid>(*this); }

 private:
  std::optional<Tensor> output_;
};

// Per-feature normalization for [features] inputs, per-channel for [c,h,w].
class BatchNorm final : public Layer {
 public:
  static constexpr double kEpsilon = 1e-5;
  static constexpr double kDecay = 0.9;

  explicit BatchNorm(std::size_t features)
      : features_(features),
        scale_("scale", Tensor({features}, 1.0)),
        shift_("shift", Tensor({features})),
        running_mean_({features}),
        running_var_({features}, 1.0) {}

  LayerKind kind() const override { return LayerKind::batchnorm; }
  std::size_t features() const { return features_; }
  Parameter& scale() { return scale_; }
  Parameter& shift() { return shift_; }
  const Tensor& running_mean() const { return running_mean_; }
  const Tensor& running_var() const { return running_var_; }

  Shape output_shape(const Shape& in) const override {
    if ((in.size() != 1 && in.size() != 3) || in[0] != features_) {
      throw std::invalid_argument("batchnorm: expected [" + std::to_string(features_) +
                                  "] or [" + std::to_string(features_) + ",h,w], got " +
                                  shape_str(in));
    }
    return in;
  }

  Tensor forward(const Tensor& x, Mode mode) override {
    output_shape(sample_shape(x));
    const std::size_t n = x.dim(0);
    const std::size_t plane = x.row_size() / features_;
    const double count = static_cast<double>(n * plane);
    Tensor y(x.shape());
    Cache cache{Tensor(x.shape()), std::vector<double>(features_), mode};
    for (std::size_t c = 0; c < features_; ++c) {
      double mean, var;
      if (mode == Mode::train) {
        double s = 0.0;
        for_each(x, c, plane, [&](std::size_t i) { s += x[i]; });
        mean = s / count;
        double ss = 0.0;
        for_each(x, c, plane, [&](std::size_t i) { ss += (x[i] - mean) * (x[i] - mean); });
        var = ss / count;
        running_mean_[c] = kDecay * running_mean_[c] + (1.0 - kDecay) * mean;
        running_var_[c] = kDecay * running_var_[c] + (1.0 - kDecay) * var;
      } else {
        mean = running_mean_[c];
        var = running_var_[c];
      }
      const double inv_std = 1.0 / std::sqrt(var + kEpsilon);
      cache.inv_std[c] = inv_std;
      const double g = scale_.value[c], b = shift_.value[c];
      for_each(x, c, plane, [&](std::size_t i) {
        const double xh = (x[i] - mean) * inv_std;
        cache.normalized[i] = xh;
        y[i] = g * xh + b;
      });
    }
    cache_ = std::move(cache);
    return y;
  }

  Tensor backward(const Tensor& dy) override {
    require_cache(cache_.has_value());
    const Tensor& xh = cache_->normalized;
    xh.require_same_shape(dy, "batchnorm backward");
    const std::size_t plane = dy.row_size() / features_;
    const double count = static_cast<double>(dy.dim(0) * plane);
    Tensor dx(dy.shape());
    for (std::size_t c = 0; c < features_; ++c) {
      double sum_dy = 0.0, sum_dy_xh = 0.0;
      for_each(dy, c, plane, [&](std::size_t i) {
        sum_dy += dy[i];
        sum_dy_xh += dy[i] * xh[i];
      });
      scale_.grad[c] += sum_dy_xh;
      shift_.grad[c] += sum_dy;
      const double g = scale_.value[c], inv_std = cache_->inv_std[c];
      if (cache_->mode == Mode::train) {
        for_each(dy, c, plane, [&](std::size_t i) {
          dx[i] = g * inv_std * (dy[i] - sum_dy / count - xh[i] * sum_dy_xh / count);
        });
      } else {
        for_each(dy, c, plane, [&](std::size_t i) { dx[i] = g * inv_std * dy[i]; });
      }
    }
    cache_.reset();
    return dx;
  }

  std::vector<Parameter*> parameters() override { return {&scale_, &shift_}; }
  std::vector<Tensor*> state() override {
    return {&scale_.value, &shift_.value, &running_mean_, &running_var_};
  }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNorm>(*this); }

 private:
  struct Cache {
    Tensor normalized;
    std::vector<double> inv_std;
    Mode mode;
  };

  template <typename F>
  void for_each(const Tensor& t, std::size_t c, std::size_t plane, F&& f) const {
    const std::size_t w = t.row_size();
    for (std::size_t s = 0; s < t.dim(0); ++s) {
      const std::size_t base = s * w + c * plane;
      for (std::size_t j = 0; j < plane; ++j) f(base + j);
    }
  }

  std::size_t features_;
  Parameter scale_, shift_;
  Tensor running_mean_, running_var_;
  std::optional<Cache> cache_;
};

// Reinterprets each sample with a new shape of the same size.
class Reshape final : public Layer {
 public:
  Reshape(Shape from, Shape to) : from_(std::move(from)), to_(std::move(to)) {
    if (shape_size(from_) != shape_size(to_)) {
      throw std::invalid_argument("reshape: " + shape_str(from_) + " -> " + shape_str(to_));
    }
  }

  LayerKind kind() const override { return LayerKind::reshape; }
  const Shape& target() const { return to_; }

  Shape output_shape(const Shape& in) const override {
    require_input(from_, in);
    return to_;
  }

  Tensor forward(const Tensor& x, Mode) override {
    require_input(from_, sample_shape(x));
    batch_ = x.dim(0);
    return x.reshaped(with_batch(x.dim(0), to_));
  }

  Tensor backward(const Tensor& dy) override {
    require_cache(batch_.has_value());
    Tensor dx = dy.reshaped(with_batch(*batch_, from_));
    batch_.reset();
    return dx;
  }

  std::unique_ptr<Layer> clone() const override { return std::make_unique<Reshape>(*this); }

 private:
  Shape from_, to_;
  std::optional<std::size_t> batch_;
};

}  // namespace deepclust::nn
