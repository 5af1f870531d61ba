#pragma once

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepclust/nn/layers.hpp"

namespace deepclust::nn {

// Ordered stack of layers with a declared per-sample input shape.
class Network {
 public:
  Network() = default;
  explicit Network(Shape input_shape) : input_shape_(std::move(input_shape)) {}

  Network(const Network& other) : input_shape_(other.input_shape_) {
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
  }
  Network& operator=(const Network& other) {
    if (this != &other) *this = Network(other);
    return *this;
  }
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    push(std::move(layer));
    return ref;
  }

  void push(std::unique_ptr<Layer> layer) {
    // Validates the chain eagerly so a bad architecture fails at build time.
    const Shape in = output_shape();
    try {
      layer->output_shape(in);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("layer " + std::to_string(layers_.size()) + ": " + e.what());
    }
    layers_.push_back(std::move(layer));
  }

  const Shape& input_shape() const { return input_shape_; }
  std::size_t depth() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_.at(i); }
  const Layer& layer(std::size_t i) const { return *layers_.at(i); }

  // Per-sample output shape of layer `upto - 1` (input shape for upto = 0).
  Shape output_shape(std::size_t upto) const {
    Shape s = input_shape_;
    for (std::size_t i = 0; i < upto; ++i) s = layers_[i]->output_shape(s);
    return s;
  }
  Shape output_shape() const { return output_shape(layers_.size()); }

  // Runs every layer; when keep_outputs is set the per-layer outputs stay
  // available through layer_output().
  Tensor forward(const Tensor& input, Mode mode = Mode::train, bool keep_outputs = false) {
    Shape got(input.shape().begin() + (input.rank() ? 1 : 0), input.shape().end());
    if (input.rank() < 2 || got != input_shape_) {
      throw std::invalid_argument("network input: expected [n]" + shape_str(input_shape_) +
                                  ", got " + shape_str(input.shape()));
    }
    outputs_.clear();
    Tensor x = input;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      try {
        x = layers_[i]->forward(x, mode);
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("layer " + std::to_string(i) + " (" +
                                    to_string(layers_[i]->kind()) + "): " + e.what());
      }
      if (keep_outputs) outputs_.push_back(x);
    }
    forwarded_ = true;
    batch_ = input.dim(0);
    return x;
  }

  const Tensor& layer_output(std::size_t i) const {
    if (i >= outputs_.size()) throw std::out_of_range("layer output " + std::to_string(i) + " not kept");
    return outputs_[i];
  }

  // Backpropagates `output_grad` (empty tensor = zero gradient at the output).
  // `injections` adds extra gradient to the output of the given layers.
  Tensor backward(const Tensor& output_grad, const std::map<std::size_t, Tensor>& injections = {}) {
    if (!forwarded_) throw std::logic_error("network backward called without forward");
    forwarded_ = false;
    Tensor g = output_grad;
    if (g.empty()) {
      g = Tensor([&] {
        Shape s{batch_};
        const Shape o = output_shape();
        s.insert(s.end(), o.begin(), o.end());
        return s;
      }());
    }
    for (std::size_t i = layers_.size(); i-- > 0;) {
      if (auto it = injections.find(i); it != injections.end()) {
        try {
          g += it->second;
        } catch (const std::invalid_argument& e) {
          throw std::invalid_argument("layer " + std::to_string(i) + " injected gradient: " + e.what());
        }
      }
      try {
        g = layers_[i]->backward(g);
      } catch (const std::invalid_argument& e) {
        throw std::invalid_argument("layer " + std::to_string(i) + " (" +
                                    to_string(layers_[i]->kind()) + ") backward: " + e.what());
      }
    }
    outputs_.clear();
    return g;
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    for (auto& l : layers_) {
      for (Parameter* p : l->parameters()) out.push_back(p);
    }
    return out;
  }

  void zero_grad() {
    for (Parameter* p : parameters()) p->zero_grad();
  }

 private:
  Shape input_shape_;
  std::vector<std::unique_ptr<Layer>> layers_;
  std::vector<Tensor> outputs_;
  bool forwarded_ = false;
  std::size_t batch_ = 0;
};

}  // namespace deepclust::nn
