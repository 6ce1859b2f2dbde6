#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "edmips/bit_pool.hpp"
#include "edmips/checkpoint.hpp"
#include "edmips/complexity.hpp"
#include "edmips/mps_layer.hpp"
#include "edmips/ops.hpp"
#include "edmips/tensor.hpp"

namespace edmips {

enum class LayerKind { conv, linear, batch_norm, relu, max_pool, avg_pool, residual_block, flatten };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::linear: return "linear";
    case LayerKind::batch_norm: return "bn";
    case LayerKind::relu: return "relu";
    case LayerKind::max_pool: return "maxpool";
    case LayerKind::avg_pool: return "avgpool";
    case LayerKind::residual_block: return "residual_block";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

/// One entry of a network description. `channels` is the output channel count
/// for conv and residual blocks and the output width for linear layers.
struct LayerDesc {
  LayerKind kind = LayerKind::relu;
  std::size_t channels = 0;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
  bool searchable = false;
  std::optional<BitPool> pool;
  std::string name;

  static LayerDesc conv(std::string name, std::size_t cout, std::size_t k, std::size_t stride,
                        std::size_t pad, bool searchable) {
    return {LayerKind::conv, cout, k, stride, pad, searchable, {}, std::move(name)};
  }
  static LayerDesc linear(std::string name, std::size_t dout, bool searchable = false) {
    return {LayerKind::linear, dout, 1, 1, 0, searchable, {}, std::move(name)};
  }
  static LayerDesc bn(std::string name) { return {LayerKind::batch_norm, 0, 0, 0, 0, false, {}, std::move(name)}; }
  static LayerDesc relu() { return {LayerKind::relu, 0, 0, 0, 0, false, {}, "relu"}; }
  static LayerDesc max_pool(std::size_t k, std::size_t s) {
    return {LayerKind::max_pool, 0, k, s, 0, false, {}, "maxpool"};
  }
  static LayerDesc avg_pool(std::size_t k, std::size_t s) {
    return {LayerKind::avg_pool, 0, k, s, 0, false, {}, "avgpool"};
  }
  static LayerDesc flatten() { return {LayerKind::flatten, 0, 0, 0, 0, false, {}, "flatten"}; }
  static LayerDesc residual(std::string name, std::size_t channels, std::size_t stride,
                            bool searchable = true) {
    return {LayerKind::residual_block, channels, 3, stride, 1, searchable, {}, std::move(name)};
  }
};

struct NetworkSpec {
  std::string name;
  Shape input_shape;  // per sample, e.g. {1, 28, 28}
  std::size_t num_classes = 10;
  std::vector<LayerDesc> layers;
};

/// Fixed stem, three searchable 3x3 convolutions, linear classifier.
inline NetworkSpec smallcnn(std::size_t num_classes = 10, std::size_t width = 8) {
  NetworkSpec s{"smallcnn", {1, 28, 28}, num_classes, {}};
  s.layers = {
      LayerDesc::conv("stem", width, 3, 1, 1, false),
      LayerDesc::bn("stem.bn"),
      LayerDesc::conv("conv1", 2 * width, 3, 2, 1, true),
      LayerDesc::bn("conv1.bn"),
      LayerDesc::conv("conv2", 4 * width, 3, 2, 1, true),
      LayerDesc::bn("conv2.bn"),
      LayerDesc::conv("conv3", 4 * width, 3, 1, 1, true),
      LayerDesc::bn("conv3.bn"),
      LayerDesc::relu(),
      LayerDesc::avg_pool(7, 7),
      LayerDesc::flatten(),
      LayerDesc::linear("fc", num_classes),
  };
  return s;
}

/// Fixed stem, three stages of two residual blocks each, linear classifier.
/// Stages 2 and 3 halve the resolution and open with a 1x1 shortcut conv.
inline NetworkSpec resnet_desk(std::size_t num_classes = 10, std::size_t width = 8) {
  NetworkSpec s{"resnet-desk", {3, 32, 32}, num_classes, {}};
  s.layers.push_back(LayerDesc::conv("stem", width, 3, 1, 1, false));
  s.layers.push_back(LayerDesc::bn("stem.bn"));
  std::size_t c = width;
  for (int stage = 1; stage <= 3; ++stage) {
    for (int block = 0; block < 2; ++block) {
      const std::size_t stride = (stage > 1 && block == 0) ? 2 : 1;
      s.layers.push_back(LayerDesc::residual(
          "stage" + std::to_string(stage) + ".block" + std::to_string(block), c, stride));
    }
    c *= 2;
  }
  s.layers.push_back(LayerDesc::relu());
  s.layers.push_back(LayerDesc::avg_pool(8, 8));
  s.layers.push_back(LayerDesc::flatten());
  s.layers.push_back(LayerDesc::linear("fc", num_classes));
  return s;
}

inline NetworkSpec zoo_model(const std::string& name, std::size_t num_classes = 10,
                             std::size_t width = 8) {
  if (name == "smallcnn") return smallcnn(num_classes, width);
  if (name == "resnet-desk") return resnet_desk(num_classes, width);
  throw Error("unknown zoo model '" + name + "' (expected smallcnn or resnet-desk)");
}

/// Discrete bit-width choice for one searchable layer.
struct LayerBits {
  std::size_t layer_id = 0;
  int weight_bits = 0;
  int activation_bits = 0;
  friend bool operator==(const LayerBits&, const LayerBits&) = default;
};

struct Architecture {
  std::vector<LayerBits> layers;

  std::vector<std::pair<int, int>> bit_pairs() const {
    std::vector<std::pair<int, int>> out;
    for (const auto& l : layers) out.emplace_back(l.weight_bits, l.activation_bits);
    return out;
  }

  static Architecture uniform(std::size_t layer_count, int weight_bits, int activation_bits) {
    Architecture a;
    for (std::size_t k = 0; k < layer_count; ++k) {
      a.layers.push_back({k, weight_bits, activation_bits});
    }
    return a;
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct SearchBuild {
  BitPool pool;
  WeightSharing sharing = WeightSharing::shared;
  Real arch_init = 0.01;
};

struct FixedBuild {
  Architecture arch;
};

using BuildMode = std::variant<SearchBuild, FixedBuild>;

/// A searchable layer as seen from outside the network.
struct SearchableLayer {
  std::string name;
  MpsConvLayer* layer = nullptr;
  FilterCost cost;
};

namespace detail {

struct Collector {
  std::vector<NamedTensor> weights;
  std::vector<NamedTensor> arch;
  std::vector<NamedTensor> buffers;
  std::vector<SearchableLayer> searchable;
};

class Module {
 public:
  virtual ~Module() = default;
  virtual Tensor forward(Tape& tape, const Tensor& x, Mode mode) = 0;
  virtual void collect(const std::string& prefix, Collector& c) = 0;
};

class PlainConv final : public Module {
 public:
  PlainConv(ConvGeometry g, std::mt19937_64& rng, bool pre_relu)
      : weight_(he_normal(g.weight_shape(), g.fan_in(), rng)), params_{g.stride, g.pad},
        pre_relu_(pre_relu) {
    weight_.set_requires_grad();
  }
  Tensor forward(Tape& tape, const Tensor& x, Mode) override {
    return conv2d(tape, pre_relu_ ? relu(tape, x) : x, weight_, params_);
  }
  void collect(const std::string& prefix, Collector& c) override {
    c.weights.push_back({prefix + ".weight", weight_});
  }

 private:
  Tensor weight_;
  Conv2dParams params_;
  bool pre_relu_;
};

class SearchConv final : public Module {
 public:
  SearchConv(std::string name, MpsConvLayer layer, FilterCost cost, bool trainable_arch)
      : name_(std::move(name)), layer_(std::move(layer)), cost_(cost),
        trainable_arch_(trainable_arch) {
    layer_.alpha().set_requires_grad(trainable_arch);
    layer_.beta().set_requires_grad(trainable_arch);
  }
  Tensor forward(Tape& tape, const Tensor& x, Mode) override {
    return edmips::forward(tape, layer_, x);
  }
  void collect(const std::string& prefix, Collector& c) override {
    auto& ws = layer_.weights();
    for (std::size_t i = 0; i < ws.size(); ++i) {
      c.weights.push_back({prefix + ".weight" + (ws.size() > 1 ? std::to_string(i) : ""), ws[i]});
    }
    if (trainable_arch_) {
      c.arch.push_back({prefix + ".alpha", layer_.alpha()});
      c.arch.push_back({prefix + ".beta", layer_.beta()});
    }
    c.searchable.push_back({name_, &layer_, cost_});
  }

 private:
  std::string name_;
  MpsConvLayer layer_;
  FilterCost cost_;
  bool trainable_arch_;
};

class BatchNorm final : public Module {
 public:
  explicit BatchNorm(std::size_t channels)
      : gamma_(Shape{channels}, 1), beta_(Shape{channels}, 0), stats_(channels) {
    gamma_.set_requires_grad();
    beta_.set_requires_grad();
  }
  Tensor forward(Tape& tape, const Tensor& x, Mode mode) override {
    return batch_norm(tape, x, gamma_, beta_, stats_, mode);
  }
  void collect(const std::string& prefix, Collector& c) override {
    c.weights.push_back({prefix + ".gamma", gamma_});
    c.weights.push_back({prefix + ".beta", beta_});
    c.buffers.push_back({prefix + ".running_mean", stats_.running_mean});
    c.buffers.push_back({prefix + ".running_var", stats_.running_var});
  }

 private:
  Tensor gamma_, beta_;
  BatchNormStats stats_;
};

class Relu final : public Module {
 public:
  Tensor forward(Tape& tape, const Tensor& x, Mode) override { return relu(tape, x); }
  void collect(const std::string&, Collector&) override {}
};

class Pool final : public Module {
 public:
  Pool(bool max, Pool2dParams p) : max_(max), p_(p) {}
  Tensor forward(Tape& tape, const Tensor& x, Mode) override {
    return max_ ? max_pool2d(tape, x, p_) : avg_pool2d(tape, x, p_);
  }
  void collect(const std::string&, Collector&) override {}

 private:
  bool max_;
  Pool2dParams p_;
};

class Flatten final : public Module {
 public:
  Tensor forward(Tape& tape, const Tensor& x, Mode) override { return flatten(tape, x); }
  void collect(const std::string&, Collector&) override {}
};

class Linear final : public Module {
 public:
  Linear(std::size_t din, std::size_t dout, std::mt19937_64& rng)
      : weight_(Shape{dout, din}), bias_(Shape{dout}, 0) {
    const Real bound = 1 / std::sqrt(static_cast<Real>(din));
    std::uniform_real_distribution<Real> dist(-bound, bound);
    for (auto& v : weight_.data()) v = dist(rng);
    weight_.set_requires_grad();
    bias_.set_requires_grad();
  }
  Tensor forward(Tape& tape, const Tensor& x, Mode) override {
    return edmips::linear(tape, x, weight_, bias_);
  }
  void collect(const std::string& prefix, Collector& c) override {
    c.weights.push_back({prefix + ".weight", weight_});
    c.weights.push_back({prefix + ".bias", bias_});
  }

 private:
  Tensor weight_, bias_;
};

/// Linear layer run as a searchable 1x1 convolution, plus a bias.
class SearchLinear final : public Module {
 public:
  SearchLinear(std::unique_ptr<SearchConv> conv, std::size_t dout)
      : conv_(std::move(conv)), bias_(Shape{dout}, 0) {
    bias_.set_requires_grad();
  }
  Tensor forward(Tape& tape, const Tensor& x, Mode mode) override {
    Tensor y = conv_->forward(tape, reshape(tape, x, {x.dim(0), x.dim(1), 1, 1}), mode);
    return add_bias(tape, reshape(tape, y, {y.dim(0), y.dim(1)}));
  }
  void collect(const std::string& prefix, Collector& c) override {
    conv_->collect(prefix, c);
    c.weights.push_back({prefix + ".bias", bias_});
  }

 private:
  Tensor add_bias(Tape& tape, const Tensor& y) {
    Tensor out(y.shape());
    const std::size_t N = y.dim(0), D = y.dim(1);
    for (std::size_t n = 0; n < N; ++n) {
      for (std::size_t j = 0; j < D; ++j) out[n * D + j] = y[n * D + j] + bias_[j];
    }
    if (tape.wants({&y, &bias_})) {
      tape.record("bias_add", {y, bias_}, out, [y, b = bias_, out, N, D]() {
        auto g = out.grad();
        if (y.requires_grad()) detail::accumulate(y, g);
        if (b.requires_grad()) {
          auto gb = b.ensure_grad();
          for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t j = 0; j < D; ++j) gb[j] += g[n * D + j];
          }
        }
      });
    }
    return out;
  }

  std::unique_ptr<SearchConv> conv_;
  Tensor bias_;
};

class ResidualBlock final : public Module {
 public:
  ResidualBlock(std::unique_ptr<Module> conv1, std::unique_ptr<Module> bn1,
                std::unique_ptr<Module> conv2, std::unique_ptr<Module> bn2,
                std::unique_ptr<Module> shortcut, std::unique_ptr<Module> shortcut_bn)
      : conv1_(std::move(conv1)), bn1_(std::move(bn1)), conv2_(std::move(conv2)),
        bn2_(std::move(bn2)), shortcut_(std::move(shortcut)),
        shortcut_bn_(std::move(shortcut_bn)) {}

  Tensor forward(Tape& tape, const Tensor& x, Mode mode) override {
    Tensor h = bn1_->forward(tape, conv1_->forward(tape, x, mode), mode);
    h = bn2_->forward(tape, conv2_->forward(tape, h, mode), mode);
    Tensor sc = shortcut_ ? shortcut_bn_->forward(tape, shortcut_->forward(tape, x, mode), mode) : x;
    return add(tape, h, sc);
  }
  void collect(const std::string& prefix, Collector& c) override {
    conv1_->collect(prefix + ".conv1", c);
    bn1_->collect(prefix + ".bn1", c);
    conv2_->collect(prefix + ".conv2", c);
    bn2_->collect(prefix + ".bn2", c);
    if (shortcut_) {
      shortcut_->collect(prefix + ".shortcut", c);
      shortcut_bn_->collect(prefix + ".shortcut_bn", c);
    }
  }

 private:
  std::unique_ptr<Module> conv1_, bn1_, conv2_, bn2_, shortcut_, shortcut_bn_;
};

}  // namespace detail

/// A network built from a NetworkSpec, either for search (every searchable
/// layer carries its full bit pool) or fixed at a discrete architecture.
class Network {
 public:
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) = default;
  Network& operator=(Network&&) = default;

  Tensor forward(Tape& tape, const Tensor& x, Mode mode) {
    if (x.rank() != spec_.input_shape.size() + 1 ||
        !std::equal(spec_.input_shape.begin(), spec_.input_shape.end(), x.shape().begin() + 1)) {
      throw ShapeError("network " + spec_.name + " expects input [N]" +
                       shape_str(spec_.input_shape) + ", got " + shape_str(x.shape()));
    }
    Tensor h = x;
    for (auto& m : modules_) h = m->forward(tape, h, mode);
    return h;
  }

  const NetworkSpec& spec() const { return spec_; }
  bool search_mode() const { return search_mode_; }

  const std::vector<NamedTensor>& weight_parameters() const { return params_.weights; }
  const std::vector<NamedTensor>& arch_parameters() const { return params_.arch; }
  const std::vector<SearchableLayer>& searchable() const { return params_.searchable; }

  std::vector<Tensor> weight_tensors() const { return tensors(params_.weights); }
  std::vector<Tensor> arch_tensors() const { return tensors(params_.arch); }

  std::vector<Tensor> alphas() const {
    std::vector<Tensor> out;
    for (const auto& s : params_.searchable) out.push_back(s.layer->alpha());
    return out;
  }
  std::vector<Tensor> betas() const {
    std::vector<Tensor> out;
    for (const auto& s : params_.searchable) out.push_back(s.layer->beta());
    return out;
  }

  std::vector<LayerProbs> probs() const {
    std::vector<LayerProbs> out;
    for (const auto& s : params_.searchable) {
      out.push_back({s.layer->alpha_probs(), s.layer->beta_probs()});
    }
    return out;
  }

  ComplexityModel complexity(Real eta) const {
    std::vector<CostedLayer> layers;
    for (const auto& s : params_.searchable) layers.push_back({s.name, s.cost, s.layer->pool()});
    return ComplexityModel(std::move(layers), eta);
  }

  /// Every tensor needed to restore the network: parameters, architecture
  /// logits, and BatchNorm running statistics.
  std::vector<NamedTensor> state() const {
    std::vector<NamedTensor> out = params_.weights;
    out.insert(out.end(), params_.arch.begin(), params_.arch.end());
    out.insert(out.end(), params_.buffers.begin(), params_.buffers.end());
    return out;
  }

  void load_state(const std::vector<NamedTensor>& saved) {
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [n, t] : saved) by_name[n] = &t;
    for (auto& [name, t] : state()) {
      auto it = by_name.find(name);
      if (it == by_name.end()) throw Error("checkpoint is missing tensor " + name);
      if (it->second->shape() != t.shape()) {
        throw ShapeError("checkpoint tensor " + name + " has shape " +
                         shape_str(it->second->shape()) + ", expected " + shape_str(t.shape()));
      }
      Tensor dst = t;
      std::copy(it->second->data().begin(), it->second->data().end(), dst.data().begin());
    }
  }

 private:
  friend Network build_model(const NetworkSpec&, const BuildMode&, std::uint64_t);
  Network() = default;

  static std::vector<Tensor> tensors(const std::vector<NamedTensor>& named) {
    std::vector<Tensor> out;
    for (const auto& n : named) out.push_back(n.tensor);
    return out;
  }

  NetworkSpec spec_;
  bool search_mode_ = true;
  std::vector<std::unique_ptr<detail::Module>> modules_;
  detail::Collector params_;
};

/// Instantiates a network. Shapes are chained from the declared input; the
/// first inconsistent layer is named in the error. In fixed mode `arch` must
/// cover every searchable layer exactly once.
inline Network build_model(const NetworkSpec& spec, const BuildMode& mode, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Network net;
  net.spec_ = spec;
  const SearchBuild* search = std::get_if<SearchBuild>(&mode);
  const FixedBuild* fixed = std::get_if<FixedBuild>(&mode);
  net.search_mode_ = search != nullptr;

  std::map<std::size_t, LayerBits> arch_bits;
  if (fixed) {
    for (const auto& lb : fixed->arch.layers) {
      if (!arch_bits.emplace(lb.layer_id, lb).second) {
        throw Error("architecture lists layer " + std::to_string(lb.layer_id) + " twice");
      }
    }
  }

  std::size_t next_id = 0;
  Shape shape = spec.input_shape;
  auto fail = [&](std::size_t idx, const LayerDesc& d, const std::string& why) {
    return ShapeError("layer " + std::to_string(idx) + " (" + to_string(d.kind) +
                      (d.name.empty() ? "" : " " + d.name) + "): " + why + ", input " +
                      shape_str(shape));
  };

  auto conv_out = [](std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
    return (in + 2 * p - k) / s + 1;
  };

  // Builds one convolution unit given its input shape; returns the module.
  auto make_conv = [&](const std::string& name, const Shape& in, std::size_t cout, std::size_t k,
                       std::size_t stride, std::size_t pad, bool searchable, bool pre_relu,
                       const std::optional<BitPool>& pool_override) -> std::unique_ptr<detail::Module> {
    ConvGeometry g{cout, in[0], k, k, stride, pad};
    if (!searchable) return std::make_unique<detail::PlainConv>(g, rng, pre_relu);
    const std::size_t id = next_id++;
    FilterCost cost{cout * in[0] * k * k, in[2], in[1], stride};
    if (search) {
      BitPool pool = pool_override.value_or(search->pool);
      return std::make_unique<detail::SearchConv>(
          name, MpsConvLayer(g, pool, search->sharing, rng, search->arch_init), cost, true);
    }
    auto it = arch_bits.find(id);
    if (it == arch_bits.end()) {
      throw Error("architecture has no entry for searchable layer " + std::to_string(id) +
                  " (" + name + ")");
    }
    BitPool pool = BitPool::uniform(it->second.weight_bits, it->second.activation_bits);
    return std::make_unique<detail::SearchConv>(
        name, MpsConvLayer(g, pool, WeightSharing::shared, rng, 0), cost, false);
  };

  for (std::size_t idx = 0; idx < spec.layers.size(); ++idx) {
    const LayerDesc& d = spec.layers[idx];
    const std::string name = d.name.empty() ? "layer" + std::to_string(idx) : d.name;
    std::unique_ptr<detail::Module> m;
    switch (d.kind) {
      case LayerKind::conv: {
        if (shape.size() != 3) throw fail(idx, d, "expected a [C,H,W] input");
        if (d.channels == 0 || d.kernel == 0 || d.stride == 0) throw fail(idx, d, "invalid geometry");
        if (shape[1] + 2 * d.pad < d.kernel || shape[2] + 2 * d.pad < d.kernel) {
          throw fail(idx, d, "kernel larger than padded input");
        }
        m = make_conv(name, shape, d.channels, d.kernel, d.stride, d.pad, d.searchable, false, d.pool);
        shape = {d.channels, conv_out(shape[1], d.kernel, d.stride, d.pad),
                 conv_out(shape[2], d.kernel, d.stride, d.pad)};
        break;
      }
      case LayerKind::residual_block: {
        if (shape.size() != 3) throw fail(idx, d, "expected a [C,H,W] input");
        if (d.channels == 0 || d.stride == 0) throw fail(idx, d, "invalid geometry");
        const Shape in = shape;
        Shape mid = {d.channels, conv_out(in[1], 3, d.stride, 1), conv_out(in[2], 3, d.stride, 1)};
        auto c1 = make_conv(name + ".conv1", in, d.channels, 3, d.stride, 1, d.searchable, true, d.pool);
        auto c2 = make_conv(name + ".conv2", mid, d.channels, 3, 1, 1, d.searchable, true, d.pool);
        std::unique_ptr<detail::Module> sc, sc_bn;
        if (d.stride != 1 || in[0] != d.channels) {
          sc = make_conv(name + ".shortcut", in, d.channels, 1, d.stride, 0, d.searchable, true, d.pool);
          sc_bn = std::make_unique<detail::BatchNorm>(d.channels);
        }
        m = std::make_unique<detail::ResidualBlock>(
            std::move(c1), std::make_unique<detail::BatchNorm>(d.channels), std::move(c2),
            std::make_unique<detail::BatchNorm>(d.channels), std::move(sc), std::move(sc_bn));
        shape = mid;
        break;
      }
      case LayerKind::linear: {
        if (shape.size() != 1) throw fail(idx, d, "expected a flat input");
        if (d.channels == 0) throw fail(idx, d, "invalid output width");
        if (d.searchable) {
          auto conv = make_conv(name, {shape[0], 1, 1}, d.channels, 1, 1, 0, true, false, d.pool);
          std::unique_ptr<detail::SearchConv> sc(static_cast<detail::SearchConv*>(conv.release()));
          m = std::make_unique<detail::SearchLinear>(std::move(sc), d.channels);
        } else {
          m = std::make_unique<detail::Linear>(shape[0], d.channels, rng);
        }
        shape = {d.channels};
        break;
      }
      case LayerKind::batch_norm:
        if (shape.size() != 3 && shape.size() != 1) throw fail(idx, d, "unsupported rank");
        m = std::make_unique<detail::BatchNorm>(shape[0]);
        break;
      case LayerKind::relu:
        m = std::make_unique<detail::Relu>();
        break;
      case LayerKind::max_pool:
      case LayerKind::avg_pool: {
        if (shape.size() != 3) throw fail(idx, d, "expected a [C,H,W] input");
        if (d.kernel == 0 || d.stride == 0 || shape[1] < d.kernel || shape[2] < d.kernel) {
          throw fail(idx, d, "pooling window does not fit");
        }
        m = std::make_unique<detail::Pool>(d.kind == LayerKind::max_pool,
                                           Pool2dParams{d.kernel, d.stride});
        shape = {shape[0], (shape[1] - d.kernel) / d.stride + 1, (shape[2] - d.kernel) / d.stride + 1};
        break;
      }
      case LayerKind::flatten:
        shape = {shape_numel(shape)};
        m = std::make_unique<detail::Flatten>();
        break;
    }
    m->collect("layers." + std::to_string(idx), net.params_);
    net.modules_.push_back(std::move(m));
  }

  if (shape != Shape{spec.num_classes}) {
    throw ShapeError("network " + spec.name + " ends with shape " + shape_str(shape) +
                     ", expected [" + std::to_string(spec.num_classes) + "]");
  }
  if (fixed && arch_bits.size() != next_id) {
    throw Error("architecture has " + std::to_string(arch_bits.size()) + " entries but network " +
                spec.name + " has " + std::to_string(next_id) + " searchable layers");
  }
  if (search && next_id == 0) {
    throw Error("network " + spec.name + " has no searchable layer to search");
  }
  return net;
}

inline std::size_t count_searchable(const NetworkSpec& spec) {
  return build_model(spec, SearchBuild{}, 0).searchable().size();
}

}  // namespace edmips
