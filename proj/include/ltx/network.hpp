#pragma once

// The desk-scale classifier f = h o Phi:
//
//   x[3,H,W] -> conv1(3->8, 3x3) -> relu -> conv2(8->16, 3x3) -> relu
//            -> adaptive_avg_pool -> Phi(x) in R^16 -> linear head -> logits[K]
//
// Parameters live in a ParamSet keyed by stable names. A PruneMask is applied
// by multiplying weights with a constant 0/1 tensor on the tape, so masked
// weights are exact zeros in the forward pass and receive zero gradient.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "ltx/autodiff.hpp"
#include "ltx/container.hpp"
#include "ltx/error.hpp"
#include "ltx/mask.hpp"
#include "ltx/parallel.hpp"
#include "ltx/rng.hpp"
#include "ltx/tensor.hpp"

namespace ltx {

inline constexpr std::size_t kInputChannels = 3;
inline constexpr std::size_t kConv1Channels = 8;
inline constexpr std::size_t kConv2Channels = 16;
inline constexpr std::size_t kKernelSize = 3;
inline constexpr std::size_t kEmbeddingDim = kConv2Channels;
inline constexpr std::size_t kMinInputExtent = 8;

inline constexpr std::string_view kConv1Weight = "conv1.weight";
inline constexpr std::string_view kConv1Bias = "conv1.bias";
inline constexpr std::string_view kConv2Weight = "conv2.weight";
inline constexpr std::string_view kConv2Bias = "conv2.bias";
inline constexpr std::string_view kHeadWeight = "head.weight";
inline constexpr std::string_view kHeadBias = "head.bias";

struct Architecture {
  std::size_t num_classes = 0;

  nlohmann::json to_json() const {
    return {{"name", "conv2-head"},
            {"input_channels", kInputChannels},
            {"conv1_channels", kConv1Channels},
            {"conv2_channels", kConv2Channels},
            {"kernel", kKernelSize},
            {"embedding_dim", kEmbeddingDim},
            {"num_classes", num_classes}};
  }

  static Architecture from_json(const nlohmann::json& j) {
    Architecture a;
    a.num_classes = j.value("num_classes", std::size_t{0});
    require(a.num_classes >= 1 && j == a.to_json(), ErrorCode::ArchitectureMismatch,
            "unsupported architecture descriptor " + j.dump());
    return a;
  }

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

/// Ordered name -> tensor map; iteration order is layer order.
class ParamSet {
 public:
  using Entry = std::pair<std::string, Tensor>;

  void add(std::string name, Tensor value) {
    require(find(name) == nullptr, ErrorCode::InvalidArgument, "duplicate parameter '" + name + "'");
    entries_.emplace_back(std::move(name), std::move(value));
  }

  Tensor* find(std::string_view name) {
    for (auto& [n, t] : entries_)
      if (n == name) return &t;
    return nullptr;
  }
  const Tensor* find(std::string_view name) const {
    for (const auto& [n, t] : entries_)
      if (n == name) return &t;
    return nullptr;
  }

  Tensor& at(std::string_view name) {
    Tensor* t = find(name);
    require(t != nullptr, ErrorCode::ArchitectureMismatch, "no parameter '" + std::string(name) + "'");
    return *t;
  }
  const Tensor& at(std::string_view name) const {
    const Tensor* t = find(name);
    require(t != nullptr, ErrorCode::ArchitectureMismatch, "no parameter '" + std::string(name) + "'");
    return *t;
  }

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.entries_ == b.entries_; }

 private:
  std::vector<Entry> entries_;
};

struct Model {
  Architecture arch;
  std::uint64_t seed = 0;
  ParamSet params;

  std::size_t num_classes() const { return arch.num_classes; }
  friend bool operator==(const Model&, const Model&) = default;
};

inline std::vector<std::pair<std::string, Shape>> parameter_layout(std::size_t num_classes) {
  return {
      {std::string(kConv1Weight), {kConv1Channels, kInputChannels, kKernelSize, kKernelSize}},
      {std::string(kConv1Bias), {kConv1Channels}},
      {std::string(kConv2Weight), {kConv2Channels, kConv1Channels, kKernelSize, kKernelSize}},
      {std::string(kConv2Bias), {kConv2Channels}},
      {std::string(kHeadWeight), {kEmbeddingDim, num_classes}},
      {std::string(kHeadBias), {num_classes}},
  };
}

/// Kaiming-uniform weights, U(-b, b) with b = sqrt(6 / fan_in); zero biases.
inline Model init_params(std::uint64_t seed, std::size_t num_classes) {
  require(num_classes >= 1, ErrorCode::InvalidArgument, "num_classes must be >= 1");
  Model m{Architecture{num_classes}, seed, {}};
  Rng rng(seed);
  for (auto& [name, shape] : parameter_layout(num_classes)) {
    Tensor t(shape);
    if (shape.size() > 1) {
      // conv kernels [O,C,kh,kw] have fan_in C*kh*kw; the head [l,K] has fan_in l.
      const std::size_t fan_in = shape.size() == 4 ? shape[1] * shape[2] * shape[3] : shape[0];
      const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
      for (double& v : t.data()) v = rng.uniform(-bound, bound);
    }
    m.params.add(name, std::move(t));
  }
  return m;
}

inline void validate_mask(const Model& model, const PruneMask& mask) {
  for (const auto& e : mask.entries()) {
    const Tensor* p = model.params.find(e.name);
    require(p != nullptr, ErrorCode::MaskShapeMismatch, "mask names unknown parameter '" + e.name + "'");
    require(p->shape() == e.shape, ErrorCode::MaskShapeMismatch,
            "mask '" + e.name + "' is " + shape_string(e.shape) + ", parameter is " + shape_string(p->shape()));
  }
}

inline void validate_input(const Tensor& x) {
  require(x.rank() == 3 && x.dim(0) == kInputChannels, ErrorCode::ShapeMismatch,
          "input must be [3,H,W], got " + shape_string(x.shape()));
  require(x.dim(1) >= kMinInputExtent && x.dim(2) >= kMinInputExtent, ErrorCode::ShapeMismatch,
          "input spatial extent must be at least 8x8, got " + shape_string(x.shape()));
}

/// Handles to the interesting nodes of one recorded forward pass.
struct NetworkGraph {
  Var input;
  Var conv1;      // post-ReLU activations of conv1
  Var conv2;      // post-ReLU activations of conv2
  Var embedding;  // Phi(x)
  Var logits;
  std::vector<std::pair<std::string, Var>> params;  // leaves, layer order
};

namespace detail {

inline Var effective_param(Tape& tape, const Model& model, const PruneMask* mask, std::string_view name,
                           bool param_grads, NetworkGraph& g) {
  Var leaf = tape.leaf(model.params.at(name), param_grads);
  g.params.emplace_back(std::string(name), leaf);
  if (mask == nullptr) return leaf;
  const MaskTensor* m = mask->find(name);
  if (m == nullptr) return leaf;
  Tensor gate(m->shape);
  for (std::size_t i = 0; i < gate.size(); ++i) gate[i] = m->bits[i];
  return mul(leaf, tape.constant(std::move(gate)));
}

inline Var head_logits(Tape& tape, Var embedding, Var weight, Var bias) {
  (void)tape;
  Var row = reshape(embedding, {1, kEmbeddingDim});
  Var z = matmul(row, weight);
  return add(reshape(z, {bias.value().size()}), bias);
}

}  // namespace detail

inline NetworkGraph build_graph(Tape& tape, const Model& model, const Tensor& x, const PruneMask* mask,
                                bool param_grads) {
  validate_input(x);
  if (mask != nullptr) validate_mask(model, *mask);
  NetworkGraph g;
  g.input = tape.constant(x);
  Var w1 = detail::effective_param(tape, model, mask, kConv1Weight, param_grads, g);
  Var b1 = detail::effective_param(tape, model, mask, kConv1Bias, param_grads, g);
  Var w2 = detail::effective_param(tape, model, mask, kConv2Weight, param_grads, g);
  Var b2 = detail::effective_param(tape, model, mask, kConv2Bias, param_grads, g);
  Var wh = detail::effective_param(tape, model, mask, kHeadWeight, param_grads, g);
  Var bh = detail::effective_param(tape, model, mask, kHeadBias, param_grads, g);
  g.conv1 = relu(add_channel_bias(conv2d(g.input, w1), b1));
  g.conv2 = relu(add_channel_bias(conv2d(g.conv1, w2), b2));
  g.embedding = adaptive_avg_pool(g.conv2);
  g.logits = detail::head_logits(tape, g.embedding, wh, bh);
  return g;
}

inline Tensor forward(const Model& model, const Tensor& x, const PruneMask* mask = nullptr) {
  Tape tape;
  return build_graph(tape, model, x, mask, false).logits.value();
}

inline Tensor embed(const Model& model, const Tensor& x, const PruneMask* mask = nullptr) {
  Tape tape;
  return build_graph(tape, model, x, mask, false).embedding.value();
}

/// h(phi): the linear head applied to an embedding.
inline Tensor head(const Model& model, const Tensor& phi, const PruneMask* mask = nullptr) {
  require(phi.size() == kEmbeddingDim, ErrorCode::ShapeMismatch, "embedding must have 16 entries");
  if (mask != nullptr) validate_mask(model, *mask);
  Tape tape;
  NetworkGraph g;
  Var wh = detail::effective_param(tape, model, mask, kHeadWeight, false, g);
  Var bh = detail::effective_param(tape, model, mask, kHeadBias, false, g);
  return detail::head_logits(tape, tape.constant(phi.reshaped({kEmbeddingDim})), wh, bh).value();
}

/// Logits computed from the activations of `layer` ("conv1" or "conv2")
/// onward; the rest of the network is evaluated exactly as in forward().
inline Tensor logits_from_activation(const Model& model, const PruneMask* mask, std::string_view layer,
                                     const Tensor& activation) {
  if (mask != nullptr) validate_mask(model, *mask);
  Tape tape;
  NetworkGraph g;
  Var a = tape.constant(activation);
  if (layer == "conv1") {
    require(activation.rank() == 3 && activation.dim(0) == kConv1Channels, ErrorCode::ShapeMismatch,
            "conv1 activation must be [8,H,W]");
    Var w2 = detail::effective_param(tape, model, mask, kConv2Weight, false, g);
    Var b2 = detail::effective_param(tape, model, mask, kConv2Bias, false, g);
    a = relu(add_channel_bias(conv2d(a, w2), b2));
  } else {
    require(layer == "conv2", ErrorCode::InvalidArgument, "unknown layer '" + std::string(layer) + "'");
    require(activation.rank() == 3 && activation.dim(0) == kConv2Channels, ErrorCode::ShapeMismatch,
            "conv2 activation must be [16,H,W]");
  }
  Var wh = detail::effective_param(tape, model, mask, kHeadWeight, false, g);
  Var bh = detail::effective_param(tape, model, mask, kHeadBias, false, g);
  return detail::head_logits(tape, adaptive_avg_pool(a), wh, bh).value();
}

inline std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

inline std::size_t predict_class(const Model& model, const Tensor& x, const PruneMask* mask = nullptr) {
  return argmax(forward(model, x, mask).data());
}

struct LossAndGrads {
  double loss = 0.0;
  ParamSet grads;
};

inline LossAndGrads loss_and_grads(const Model& model, const Tensor& x, std::size_t label,
                                   const PruneMask* mask = nullptr) {
  Tape tape;
  NetworkGraph g = build_graph(tape, model, x, mask, true);
  Var loss = softmax_cross_entropy(g.logits, label);
  tape.backward(loss);
  LossAndGrads out;
  out.loss = loss.value().item();
  for (auto& [name, v] : g.params) {
    const Tensor* gr = tape.grad(v);
    out.grads.add(name, gr ? *gr : Tensor(model.params.at(name).shape()));
  }
  return out;
}

/// theta <- theta - lr * g. Masked entries are forced to exactly 0.
inline void sgd_step(Model& model, const ParamSet& grads, double lr, const PruneMask* mask = nullptr) {
  require(std::isfinite(lr) && lr >= 0.0, ErrorCode::InvalidArgument, "learning rate must be >= 0");
  if (mask != nullptr) validate_mask(model, *mask);
  for (auto& [name, param] : model.params) {
    const Tensor* g = grads.find(name);
    require(g != nullptr, ErrorCode::MissingGradients, "no gradient for '" + name + "'");
    require(g->shape() == param.shape(), ErrorCode::ShapeMismatch, "gradient shape for '" + name + "'");
    const MaskTensor* m = mask ? mask->find(name) : nullptr;
    for (std::size_t i = 0; i < param.size(); ++i) {
      if (m != nullptr && m->bits[i] == 0) {
        param[i] = 0.0;
        continue;
      }
      param[i] -= lr * (*g)[i];
    }
  }
}

/// Zeroes every masked weight in place.
inline void apply_mask(Model& model, const PruneMask& mask) {
  validate_mask(model, mask);
  for (const auto& e : mask.entries()) {
    Tensor& p = model.params.at(e.name);
    for (std::size_t i = 0; i < p.size(); ++i)
      if (e.bits[i] == 0) p[i] = 0.0;
  }
}

// ---------------------------------------------------------------------------
// Minibatch SGD over anything exposing `.image` and `.label`.

struct TrainConfig {
  double lr = 0.01;
  std::size_t batch_size = 32;
};

/// Endless seeded stream of sample indices; reshuffles after each pass.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) {
    require(n > 0, ErrorCode::EmptyDataset, "cannot sample batches from an empty dataset");
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    out.reserve(batch);
    while (out.size() < batch) {
      if (pos_ == order_.size()) {
        order_ = rng_.permutation(n_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::size_t n_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// One SGD step on the mean loss of `batch`; returns that mean loss.
/// Per-sample gradients may be computed on several threads, but they are
/// reduced in batch order so the result is independent of `threads`.
template <class Samples>
double train_batch(Model& model, const PruneMask* mask, const Samples& samples,
                   const std::vector<std::size_t>& batch, double lr, std::size_t threads) {
  require(!batch.empty(), ErrorCode::EmptyDataset, "empty batch");
  std::vector<LossAndGrads> per_sample(batch.size());
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    const auto& s = samples[batch[i]];
    per_sample[i] = loss_and_grads(model, s.image, s.label, mask);
  });
  ParamSet mean = std::move(per_sample[0].grads);
  double loss = per_sample[0].loss;
  for (std::size_t i = 1; i < per_sample.size(); ++i) {
    loss += per_sample[i].loss;
    for (auto& [name, g] : mean) {
      const Tensor& gi = per_sample[i].grads.at(name);
      for (std::size_t k = 0; k < g.size(); ++k) g[k] += gi[k];
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (auto& [name, g] : mean)
    for (double& v : g.data()) v *= inv;
  sgd_step(model, mean, lr, mask);
  return loss * inv;
}

template <class Samples>
double mean_loss(const Model& model, const PruneMask* mask, const Samples& samples, std::size_t threads = 1) {
  std::vector<double> losses(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    Tape tape;
    NetworkGraph g = build_graph(tape, model, samples[i].image, mask, false);
    losses[i] = softmax_cross_entropy(g.logits, samples[i].label).value().item();
  });
  double s = 0.0;
  for (double l : losses) s += l;
  return samples.empty() ? 0.0 : s / static_cast<double>(samples.size());
}

template <class Samples>
double accuracy(const Model& model, const PruneMask* mask, const Samples& samples, std::size_t threads = 1) {
  if (samples.empty()) return 0.0;
  std::vector<char> hit(samples.size(), 0);
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    hit[i] = predict_class(model, samples[i].image, mask) == samples[i].label;
  });
  std::size_t n = 0;
  for (char h : hit) n += static_cast<std::size_t>(h);
  return static_cast<double>(n) / static_cast<double>(samples.size());
}

template <class Samples>
std::vector<Tensor> embed_all(const Model& model, const PruneMask* mask, const Samples& samples,
                              std::size_t threads = 1) {
  std::vector<Tensor> out(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) { out[i] = embed(model, samples[i].image, mask); });
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline Container model_to_container(const Model& model) {
  Container c;
  c.descriptor = {{"kind", "model"}, {"architecture", model.arch.to_json()}, {"seed", model.seed}};
  c.dtype = DType::F64;
  for (const auto& [name, t] : model.params) c.records.push_back(Record{name, t.shape(), t.values(), {}});
  return c;
}

inline Model model_from_container(const Container& c, const std::optional<Architecture>& expected = std::nullopt) {
  require(c.descriptor.value("kind", "") == "model" && c.dtype == DType::F64, ErrorCode::ArchitectureMismatch,
          "container does not hold a model");
  Model m;
  m.arch = Architecture::from_json(c.descriptor.at("architecture"));
  if (expected)
    require(*expected == m.arch, ErrorCode::ArchitectureMismatch,
            "checkpoint has " + std::to_string(m.arch.num_classes) + " classes, expected " +
                std::to_string(expected->num_classes));
  m.seed = c.descriptor.value("seed", std::uint64_t{0});
  const auto layout = parameter_layout(m.arch.num_classes);
  require(c.records.size() == layout.size(), ErrorCode::ArchitectureMismatch, "checkpoint parameter count");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const Record& r = c.records[i];
    require(r.name == layout[i].first && r.shape == layout[i].second, ErrorCode::ArchitectureMismatch,
            "checkpoint record '" + r.name + "' does not match the architecture");
    m.params.add(r.name, Tensor(r.shape, r.f64));
  }
  return m;
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  write_container(path, model_to_container(model));
}

inline Model load_checkpoint(const std::filesystem::path& path,
                             const std::optional<Architecture>& expected = std::nullopt) {
  return model_from_container(read_container(path), expected);
}

}  // namespace ltx
