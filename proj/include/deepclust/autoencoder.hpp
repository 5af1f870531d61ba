#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "deepclust/binary_io.hpp"
#include "deepclust/nn/network.hpp"

namespace deepclust {

enum class Architecture { mlp, conv };
enum class OutputActivation { linear, sigmoid };

struct ConvStage {
  std::size_t channels = 32;
  std::size_t kernel = 3;
  std::size_t stride = 2;
};

struct AutoencoderSpec {
  Architecture architecture = Architecture::mlp;
  Shape input_shape;                         // per sample, e.g. {10} or {1, 28, 28}
  std::vector<std::size_t> hidden;           // mlp hidden widths
  std::vector<ConvStage> conv_stages;        // conv encoder stages
  std::size_t latent_dim = 10;
  bool batchnorm = false;
  OutputActivation output = OutputActivation::linear;

  // The stock convolutional case-study layout: three stride-2 3x3 stages.
  static AutoencoderSpec case_study(Shape input, std::size_t latent) {
    AutoencoderSpec s;
    s.architecture = Architecture::conv;
    s.input_shape = std::move(input);
    s.conv_stages = {{32, 3, 2}, {64, 3, 2}, {128, 3, 2}};
    s.latent_dim = latent;
    s.batchnorm = true;
    s.output = OutputActivation::sigmoid;
    return s;
  }

  void validate(std::size_t clusters = 1) const {
    if (input_shape.empty() || shape_size(input_shape) == 0) {
      throw std::invalid_argument("autoencoder: input shape must be non-empty");
    }
    if (latent_dim == 0) throw std::invalid_argument("autoencoder: latent_dim must be positive");
    if (latent_dim < clusters) {
      throw std::invalid_argument("autoencoder: latent_dim " + std::to_string(latent_dim) +
                                  " is smaller than the " + std::to_string(clusters) +
                                  " requested clusters");
    }
    if (architecture == Architecture::conv) {
      if (input_shape.size() != 3) {
        throw std::invalid_argument("conv autoencoder needs [c,h,w] input, got " +
                                    shape_str(input_shape));
      }
      if (conv_stages.empty()) throw std::invalid_argument("conv autoencoder needs at least one stage");
    }
    for (std::size_t h : hidden) {
      if (h == 0) throw std::invalid_argument("autoencoder: zero hidden width");
    }
  }
};

enum class FeatureMode { one_layer, several_layers };

// Which encoder stages feed the clustering. Stage i is the (flattened)
// output of the i-th encoder block; the last stage is the latent code.
struct FeatureSelector {
  FeatureMode mode = FeatureMode::one_layer;
  std::vector<std::size_t> stages;  // empty = last stage

  static FeatureSelector last() { return {}; }
};

class Autoencoder {
 public:
  Autoencoder(const AutoencoderSpec& spec, std::uint64_t seed) : spec_(spec) {
    spec_.validate();
    Rng rng(seed);
    if (spec_.architecture == Architecture::mlp) {
      build_mlp(rng);
    } else {
      build_conv(rng);
    }
  }

  const AutoencoderSpec& spec() const { return spec_; }
  nn::Network& encoder() { return encoder_; }
  nn::Network& decoder() { return decoder_; }
  const nn::Network& encoder() const { return encoder_; }
  const nn::Network& decoder() const { return decoder_; }

  std::size_t stage_count() const { return stage_ends_.size(); }
  // Index of the encoder layer whose output is stage i.
  std::size_t stage_layer(std::size_t i) const { return stage_ends_.at(i); }
  std::size_t stage_width(std::size_t i) const {
    return shape_size(encoder_.output_shape(stage_ends_.at(i) + 1));
  }

  std::vector<nn::Parameter*> parameters() {
    auto out = encoder_.parameters();
    for (nn::Parameter* p : decoder_.parameters()) out.push_back(p);
    return out;
  }

  Tensor encode(const Tensor& batch, nn::Mode mode = nn::Mode::eval) {
    return encoder_.forward(batch, mode).flattened();
  }

  Tensor reconstruct(const Tensor& batch, nn::Mode mode = nn::Mode::eval) {
    return decoder_.forward(encoder_.forward(batch, mode), mode);
  }

  void validate(const FeatureSelector& sel) const {
    if (sel.stages.empty()) return;
    if (sel.mode == FeatureMode::one_layer && sel.stages.size() != 1) {
      throw std::invalid_argument("one_layer feature mode takes exactly one stage index");
    }
    for (std::size_t i = 0; i < sel.stages.size(); ++i) {
      if (sel.stages[i] >= stage_count()) {
        throw std::invalid_argument("feature stage " + std::to_string(sel.stages[i]) +
                                    " out of range (encoder has " +
                                    std::to_string(stage_count()) + " stages)");
      }
      if (i && sel.stages[i] <= sel.stages[i - 1]) {
        throw std::invalid_argument("feature stage indices must be strictly increasing");
      }
    }
  }

  std::vector<std::size_t> selected_stages(const FeatureSelector& sel) const {
    validate(sel);
    if (sel.stages.empty()) return {stage_count() - 1};
    return sel.stages;
  }

  std::size_t feature_dim(const FeatureSelector& sel) const {
    std::size_t d = 0;
    for (std::size_t s : selected_stages(sel)) d += stage_width(s);
    return d;
  }

  // Result of a feature-producing encoder pass; keeps enough state to push
  // feature gradients back into the encoder.
  struct FeaturePass {
    Tensor features;  // [n, feature_dim]
    Tensor latent;    // raw encoder output, the decoder's input
    std::vector<std::size_t> stages;
    std::vector<Tensor> parts;                 // flattened (normalized) stage outputs
    std::vector<std::vector<double>> norms;    // per stage, per row; empty when unnormalized
  };

  // Runs the encoder, keeping its caches for a subsequent backward.
  // Selections of two or more stages L2-normalize each stage per sample
  // before concatenation; an all-zero stage output stays zero and passes no
  // gradient.
  FeaturePass forward_features(const Tensor& batch, const FeatureSelector& sel, nn::Mode mode) {
    FeaturePass pass;
    pass.stages = selected_stages(sel);
    pass.latent = encoder_.forward(batch, mode, /*keep_outputs=*/true);
    const std::size_t n = batch.dim(0);
    const bool normalize = pass.stages.size() > 1;
    std::size_t total = 0;
    for (std::size_t s : pass.stages) {
      Tensor part = encoder_.layer_output(stage_ends_[s]).flattened();
      std::vector<double> norms;
      if (normalize) {
        norms.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
          auto r = part.row(i);
          double ss = 0.0;
          for (double v : r) ss += v * v;
          norms[i] = std::sqrt(ss);
          if (norms[i] > 0.0) {
            for (double& v : r) v /= norms[i];
          }
        }
      }
      total += part.row_size();
      pass.parts.push_back(std::move(part));
      pass.norms.push_back(std::move(norms));
    }
    if (pass.parts.size() == 1) {
      pass.features = pass.parts.front();
    } else {
      pass.features = Tensor({n, total});
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t off = 0;
        for (const Tensor& part : pass.parts) {
          auto r = part.row(i);
          std::copy(r.begin(), r.end(), pass.features.row(i).begin() + static_cast<long>(off));
          off += r.size();
        }
      }
    }
    return pass;
  }

  // Maps d(loss)/d(features) onto gradient injections at the stage layers.
  std::map<std::size_t, Tensor> feature_injections(const FeaturePass& pass,
                                                   const Tensor& grad_features) const {
    pass.features.require_same_shape(grad_features, "feature gradient");
    std::map<std::size_t, Tensor> out;
    const std::size_t n = grad_features.dim(0);
    std::size_t off = 0;
    for (std::size_t k = 0; k < pass.stages.size(); ++k) {
      const Tensor& part = pass.parts[k];
      const std::size_t w = part.row_size();
      Tensor g({n, w});
      for (std::size_t i = 0; i < n; ++i) {
        auto gi = g.row(i);
        auto src = grad_features.row(i).subspan(off, w);
        if (pass.norms[k].empty()) {
          std::copy(src.begin(), src.end(), gi.begin());
        } else if (pass.norms[k][i] > 0.0) {
          // y = x / |x|  =>  dx = (dy - y (y . dy)) / |x|
          auto y = part.row(i);
          double dot = 0.0;
          for (std::size_t j = 0; j < w; ++j) dot += y[j] * src[j];
          for (std::size_t j = 0; j < w; ++j) gi[j] = (src[j] - y[j] * dot) / pass.norms[k][i];
        }
      }
      off += w;
      const std::size_t layer = stage_ends_[pass.stages[k]];
      Shape s{n};
      const Shape o = encoder_.output_shape(layer + 1);
      s.insert(s.end(), o.begin(), o.end());
      out.emplace(layer, g.reshaped(s));
    }
    return out;
  }

  Tensor extract_features(const Tensor& batch, const FeatureSelector& sel,
                          nn::Mode mode = nn::Mode::eval) {
    return forward_features(batch, sel, mode).features;
  }

  // DCAE binary format:
  //   "DCAE" | version u32 | layer count u32 |
  //   per layer: kind u32 | tensor count u32 |
  //              per tensor: rank u32 | dims u32 x rank | f64 LE x size
  void save(std::ostream& os) {
    binary::write_magic(os, "DCAE");
    binary::write_u32(os, kFormatVersion);
    binary::write_u32(os, static_cast<std::uint32_t>(encoder_.depth() + decoder_.depth()));
    for_each_layer([&](nn::Layer& layer) {
      binary::write_u32(os, static_cast<std::uint32_t>(layer.kind()));
      const auto state = layer.state();
      binary::write_u32(os, static_cast<std::uint32_t>(state.size()));
      for (const Tensor* t : state) {
        binary::write_u32(os, static_cast<std::uint32_t>(t->rank()));
        for (std::size_t d : t->shape()) binary::write_u32(os, static_cast<std::uint32_t>(d));
        for (double v : t->values()) binary::write_f64(os, v);
      }
    });
    if (!os) throw std::runtime_error("DCAE: write failed");
  }

  // Loads weights into an autoencoder built from the same spec.
  void load(std::istream& is) {
    binary::expect_magic(is, "DCAE");
    const std::uint32_t version = binary::read_u32(is);
    if (version != kFormatVersion) {
      throw std::runtime_error("DCAE: unsupported version " + std::to_string(version));
    }
    const std::uint32_t layers = binary::read_u32(is);
    if (layers != encoder_.depth() + decoder_.depth()) {
      throw std::runtime_error("DCAE: file has " + std::to_string(layers) +
                               " layers, architecture has " +
                               std::to_string(encoder_.depth() + decoder_.depth()));
    }
    std::size_t index = 0;
    for_each_layer([&](nn::Layer& layer) {
      const auto kind = binary::read_u32(is);
      if (kind != static_cast<std::uint32_t>(layer.kind())) {
        throw std::runtime_error("DCAE: layer " + std::to_string(index) + " kind mismatch");
      }
      auto state = layer.state();
      if (binary::read_u32(is) != state.size()) {
        throw std::runtime_error("DCAE: layer " + std::to_string(index) + " tensor count mismatch");
      }
      for (Tensor* t : state) {
        const std::uint32_t rank = binary::read_u32(is);
        Shape shape(rank);
        for (auto& d : shape) d = binary::read_u32(is);
        if (shape != t->shape()) {
          throw std::runtime_error("DCAE: layer " + std::to_string(index) + " shape " +
                                   shape_str(shape) + " vs " + shape_str(t->shape()));
        }
        for (double& v : t->values()) v = binary::read_f64(is);
      }
      ++index;
    });
  }

  void save(const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    save(os);
  }

  void load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    load(is);
  }

 private:
  static constexpr std::uint32_t kFormatVersion = 1;

  template <typename F>
  void for_each_layer(F&& f) {
    for (std::size_t i = 0; i < encoder_.depth(); ++i) f(encoder_.layer(i));
    for (std::size_t i = 0; i < decoder_.depth(); ++i) f(decoder_.layer(i));
  }

  void mark_stage() { stage_ends_.push_back(encoder_.depth() - 1); }

  void add_output_activation() {
    if (spec_.output == OutputActivation::sigmoid) decoder_.add<nn::Sigmoid>();
  }

  void build_mlp(Rng& rng) {
    const std::size_t d = shape_size(spec_.input_shape);
    const Shape flat{d};
    encoder_ = nn::Network(spec_.input_shape);
    if (spec_.input_shape != flat) encoder_.add<nn::Reshape>(spec_.input_shape, flat);
    std::size_t width = d;
    for (std::size_t h : spec_.hidden) {
      encoder_.add<nn::Dense>(width, h, rng);
      if (spec_.batchnorm) encoder_.add<nn::BatchNorm>(h);
      encoder_.add<nn::Relu>();
      mark_stage();
      width = h;
    }
    encoder_.add<nn::Dense>(width, spec_.latent_dim, rng);
    mark_stage();

    decoder_ = nn::Network({spec_.latent_dim});
    width = spec_.latent_dim;
    for (auto it = spec_.hidden.rbegin(); it != spec_.hidden.rend(); ++it) {
      decoder_.add<nn::Dense>(width, *it, rng);
      if (spec_.batchnorm) decoder_.add<nn::BatchNorm>(*it);
      decoder_.add<nn::Relu>();
      width = *it;
    }
    decoder_.add<nn::Dense>(width, d, rng);
    add_output_activation();
    if (spec_.input_shape != flat) decoder_.add<nn::Reshape>(flat, spec_.input_shape);
  }

  void build_conv(Rng& rng) {
    encoder_ = nn::Network(spec_.input_shape);
    std::vector<nn::ConvConfig> configs;
    std::vector<Shape> stage_inputs;
    for (const ConvStage& st : spec_.conv_stages) {
      const Shape in = encoder_.output_shape();
      nn::ConvConfig cfg{in[0], st.channels, st.kernel, st.stride, st.kernel / 2};
      encoder_.add<nn::Conv2d>(cfg, rng);
      if (spec_.batchnorm) encoder_.add<nn::BatchNorm>(st.channels);
      encoder_.add<nn::Relu>();
      mark_stage();
      configs.push_back(cfg);
      stage_inputs.push_back(in);
    }
    const Shape spatial = encoder_.output_shape();
    const std::size_t flat = shape_size(spatial);
    encoder_.add<nn::Reshape>(spatial, Shape{flat});
    encoder_.add<nn::Dense>(flat, spec_.latent_dim, rng);
    mark_stage();

    decoder_ = nn::Network({spec_.latent_dim});
    decoder_.add<nn::Dense>(spec_.latent_dim, flat, rng);
    decoder_.add<nn::Relu>();
    decoder_.add<nn::Reshape>(Shape{flat}, spatial);
    for (std::size_t k = configs.size(); k-- > 0;) {
      decoder_.push(std::make_unique<nn::Conv2dTranspose>(
          nn::Conv2dTranspose::matching(configs[k], stage_inputs[k], rng)));
      if (k > 0) {
        if (spec_.batchnorm) decoder_.add<nn::BatchNorm>(configs[k].in_channels);
        decoder_.add<nn::Relu>();
      }
    }
    add_output_activation();
  }

  AutoencoderSpec spec_;
  nn::Network encoder_, decoder_;
  std::vector<std::size_t> stage_ends_;
};

}  // namespace deepclust
