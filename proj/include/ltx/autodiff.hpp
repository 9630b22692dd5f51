#pragma once

// Reverse-mode automatic differentiation over ltx::Tensor.
//
// A Tape records every operation executed on its Vars in execution order, so
// the node list is already topologically sorted. backward() walks it in
// reverse exactly once; afterwards the tape is spent and must be reset()
// before it can record a new forward pass.
//
// Adjoints are kept for leaves created with requires_grad and for interior
// nodes explicitly marked with retain_grad() (Grad-CAM uses this to read
// dY/dA at a convolution output). Everything else is released.

#include <algorithm>
#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ltx/error.hpp"
#include "ltx/tensor.hpp"

namespace ltx {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

class Tape {
 public:
  // inputs[i] / grad_inputs[i] line up with the node's input list;
  // grad_inputs[i] is null when that input needs no adjoint.
  using BackwardFn = std::function<void(std::span<const Tensor* const> inputs, const Tensor& output,
                                        const Tensor& grad_out, std::span<Tensor* const> grad_inputs)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    require_finite(value, "leaf");
    return push(Node{std::move(value), {}, nullptr, requires_grad, false, std::nullopt});
  }

  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    return push(Node{std::move(value), std::move(inputs), std::move(fn), false, false, std::nullopt});
  }

  void retain_grad(Var v) { node(v).retain = true; }

  const Tensor& value(Var v) const { return node(v).value; }

  // Null until backward() has run, and for nodes whose adjoint was released.
  const Tensor* grad(Var v) const {
    const Node& n = node(v);
    return n.grad ? &*n.grad : nullptr;
  }

  bool spent() const { return spent_; }
  std::size_t size() const { return nodes_.size(); }

  void reset() {
    nodes_.clear();
    spent_ = false;
  }

  void backward(Var loss) {
    require(!spent_, ErrorCode::BackwardWithoutForward,
            "backward already ran on this tape; record a new forward pass first");
    require(loss.tape == this && loss.id < nodes_.size(), ErrorCode::BackwardWithoutForward,
            "loss was not produced on this tape");
    const Tensor& lv = nodes_[loss.id].value;
    require(lv.size() == 1, ErrorCode::NonScalarLoss, "loss has shape " + shape_string(lv.shape()));
    spent_ = true;

    // needs[i]: some requires_grad leaf or retained node sits at or below i.
    std::vector<char> needs(loss.id + 1, 0);
    for (std::size_t i = 0; i <= loss.id; ++i) {
      const Node& n = nodes_[i];
      bool need = n.requires_grad || n.retain;
      for (std::size_t in : n.inputs) need = need || needs[in];
      needs[i] = need;
    }

    std::vector<std::optional<Tensor>> adj(loss.id + 1);
    adj[loss.id] = Tensor::filled(lv.shape(), 1.0);

    std::vector<const Tensor*> in_values;
    std::vector<Tensor*> in_grads;
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!adj[i] || !needs[i]) continue;
      if (n.requires_grad || n.retain) n.grad = *adj[i];
      if (!n.backward) continue;
      in_values.clear();
      in_grads.clear();
      for (std::size_t in : n.inputs) {
        in_values.push_back(&nodes_[in].value);
        if (needs[in]) {
          if (!adj[in]) adj[in] = Tensor(nodes_[in].value.shape());
          in_grads.push_back(&*adj[in]);
        } else {
          in_grads.push_back(nullptr);
        }
      }
      n.backward(in_values, n.value, *adj[i], in_grads);
      adj[i].reset();
    }
  }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad;
    bool retain;
    std::optional<Tensor> grad;
  };

  Var push(Node n) {
    require(!spent_, ErrorCode::BackwardWithoutForward,
            "tape already consumed by backward; call reset() before recording");
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Node& node(Var v) {
    require(v.tape == this && v.id < nodes_.size(), ErrorCode::InvalidArgument, "var from another tape");
    return nodes_[v.id];
  }
  const Node& node(Var v) const {
    require(v.tape == this && v.id < nodes_.size(), ErrorCode::InvalidArgument, "var from another tape");
    return nodes_[v.id];
  }

  std::deque<Node> nodes_;  // stable addresses: Var::value() references survive later pushes
  bool spent_ = false;
};

inline const Tensor& Var::value() const { return tape->value(*this); }

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  require(a.tape != nullptr && a.tape == b.tape, ErrorCode::InvalidArgument, "vars live on different tapes");
  return *a.tape;
}

inline void check_inputs(const char* op, std::initializer_list<Var> vars) {
  for (Var v : vars) require_finite(v.value(), op);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Operations

/// a[m x k] * b[k x n].
inline Var matmul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  detail::check_inputs("matmul", {a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0), ErrorCode::ShapeMismatch,
          "matmul " + shape_string(av.shape()) + " * " + shape_string(bv.shape()));
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  return tape.record(std::move(out), {a.id, b.id},
                     [m, k, n](auto in, const Tensor&, const Tensor& g, auto gin) {
                       const Tensor& A = *in[0];
                       const Tensor& B = *in[1];
                       if (Tensor* ga = gin[0]) {  // G * B^T
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             double s = 0.0;
                             for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B[p * n + j];
                             (*ga)[i * k + p] += s;
                           }
                       }
                       if (Tensor* gb = gin[1]) {  // A^T * G
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             const double aip = A[i * k + p];
                             for (std::size_t j = 0; j < n; ++j) (*gb)[p * n + j] += aip * g[i * n + j];
                           }
                       }
                     });
}

struct Conv2dGeometry {
  std::size_t in_channels, height, width;
  std::size_t out_channels, kernel_h, kernel_w;
  std::size_t stride, padding;
  std::size_t out_h, out_w;
};

inline Conv2dGeometry conv2d_geometry(const Shape& input, const Shape& kernels, std::size_t stride,
                                      std::size_t padding) {
  require(input.size() == 3 && kernels.size() == 4, ErrorCode::ShapeMismatch,
          "conv2d expects input [C,H,W] and kernels [O,C,kh,kw], got " + shape_string(input) + " and " +
              shape_string(kernels));
  require(kernels[1] == input[0], ErrorCode::ShapeMismatch,
          "conv2d channel mismatch: input " + shape_string(input) + ", kernels " + shape_string(kernels));
  require(stride >= 1, ErrorCode::InvalidArgument, "conv2d stride must be positive");
  Conv2dGeometry g{input[0], input[1], input[2], kernels[0], kernels[2], kernels[3], stride, padding, 0, 0};
  const std::size_t ph = g.height + 2 * padding, pw = g.width + 2 * padding;
  require(g.kernel_h >= 1 && g.kernel_w >= 1 && g.kernel_h <= ph && g.kernel_w <= pw,
          ErrorCode::DegenerateExtent, "conv2d kernel larger than padded input");
  g.out_h = (ph - g.kernel_h) / stride + 1;
  g.out_w = (pw - g.kernel_w) / stride + 1;
  require(g.out_h >= 1 && g.out_w >= 1, ErrorCode::DegenerateExtent, "conv2d output extent is zero");
  return g;
}

/// Cross-correlation (no kernel flip) with zero padding.
inline Var conv2d(Var input, Var kernels, std::size_t stride = 1, std::size_t padding = 0) {
  Tape& tape = detail::same_tape(input, kernels);
  detail::check_inputs("conv2d", {input, kernels});
  const Conv2dGeometry geo = conv2d_geometry(input.shape(), kernels.shape(), stride, padding);
  const Tensor& x = input.value();
  const Tensor& k = kernels.value();
  Tensor out({geo.out_channels, geo.out_h, geo.out_w});

  // Visits every (output, input, kernel tap) triple; shared by forward and
  // both adjoints so the index arithmetic lives in one place.
  auto sweep = [geo](auto&& body) {
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(geo.padding);
    const std::ptrdiff_t stride = static_cast<std::ptrdiff_t>(geo.stride);
    const std::ptrdiff_t width = static_cast<std::ptrdiff_t>(geo.width);
    for (std::size_t o = 0; o < geo.out_channels; ++o)
      for (std::size_t c = 0; c < geo.in_channels; ++c)
        for (std::size_t i = 0; i < geo.kernel_h; ++i)
          for (std::size_t j = 0; j < geo.kernel_w; ++j) {
            const std::size_t kidx = ((o * geo.in_channels + c) * geo.kernel_h + i) * geo.kernel_w + j;
            // Output columns whose tap lands inside the input: 0 <= xo*stride + j - pad < width.
            const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(j) - pad;
            const std::ptrdiff_t lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
            const std::ptrdiff_t hi_raw = width - 1 - shift < 0 ? -1 : (width - 1 - shift) / stride;
            const std::size_t xo_lo = static_cast<std::size_t>(lo);
            const std::size_t xo_hi = std::min(geo.out_w, static_cast<std::size_t>(hi_raw + 1));
            if (xo_lo >= xo_hi) continue;
            for (std::size_t y = 0; y < geo.out_h; ++y) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * geo.stride + i) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(geo.height)) continue;
              const std::size_t in_row = (c * geo.height + static_cast<std::size_t>(iy)) * geo.width;
              const std::size_t out_row = (o * geo.out_h + y) * geo.out_w;
              for (std::size_t xo = xo_lo; xo < xo_hi; ++xo)
                body(kidx, static_cast<std::size_t>(static_cast<std::ptrdiff_t>(in_row + xo * geo.stride) + shift),
                     out_row + xo);
            }
          }
  };

  {
    // Same visiting order as sweep(), written out so the row loop stays tight.
    double* op = out.data().data();
    const double* kp = k.data().data();
    const double* xp = x.data().data();
    const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(geo.padding);
    const std::ptrdiff_t stride = static_cast<std::ptrdiff_t>(geo.stride);
    const std::ptrdiff_t width = static_cast<std::ptrdiff_t>(geo.width);
    for (std::size_t o = 0; o < geo.out_channels; ++o)
      for (std::size_t c = 0; c < geo.in_channels; ++c)
        for (std::size_t i = 0; i < geo.kernel_h; ++i)
          for (std::size_t j = 0; j < geo.kernel_w; ++j) {
            const double kv = *kp++;
            const std::ptrdiff_t shift = static_cast<std::ptrdiff_t>(j) - pad;
            const std::ptrdiff_t lo = shift >= 0 ? 0 : (-shift + stride - 1) / stride;
            const std::ptrdiff_t hi_raw = width - 1 - shift < 0 ? -1 : (width - 1 - shift) / stride;
            const std::size_t xo_lo = static_cast<std::size_t>(lo);
            const std::size_t xo_hi = std::min(geo.out_w, static_cast<std::size_t>(hi_raw + 1));
            if (xo_lo >= xo_hi) continue;
            for (std::size_t y = 0; y < geo.out_h; ++y) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * geo.stride + i) - pad;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(geo.height)) continue;
              const std::ptrdiff_t base =
                  static_cast<std::ptrdiff_t>((c * geo.height + static_cast<std::size_t>(iy)) * geo.width) + shift;
              const double* xr = xp + base + lo * stride;  // first valid tap of this row
              double* orow = op + (o * geo.out_h + y) * geo.out_w + xo_lo;
              const std::size_t n = xo_hi - xo_lo;
              if (geo.stride == 1) {
                for (std::size_t t = 0; t < n; ++t) orow[t] += kv * xr[t];
              } else {
                for (std::size_t t = 0; t < n; ++t) orow[t] += kv * xr[t * geo.stride];
              }
            }
          }
  }

  return tape.record(std::move(out), {input.id, kernels.id},
                     [sweep](auto in, const Tensor&, const Tensor& g, auto gin) {
                       const double* xv = in[0]->data().data();
                       const double* kv = in[1]->data().data();
                       const double* gv = g.data().data();
                       double* gx = gin[0] ? gin[0]->data().data() : nullptr;
                       double* gk = gin[1] ? gin[1]->data().data() : nullptr;
                       if (gx && gk) {
                         sweep([=](std::size_t ki, std::size_t xi, std::size_t oi) {
                           gx[xi] += kv[ki] * gv[oi];
                           gk[ki] += xv[xi] * gv[oi];
                         });
                       } else if (gx) {
                         sweep([=](std::size_t ki, std::size_t xi, std::size_t oi) { gx[xi] += kv[ki] * gv[oi]; });
                       } else if (gk) {
                         sweep([=](std::size_t ki, std::size_t xi, std::size_t oi) { gk[ki] += xv[xi] * gv[oi]; });
                       }
                     });
}

/// Elementwise max(0, x); the subgradient at exactly 0 is 0.
inline Var relu(Var x) {
  detail::check_inputs("relu", {x});
  Tensor out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return x.tape->record(std::move(out), {x.id}, [](auto in, const Tensor&, const Tensor& g, auto gin) {
    const Tensor& xv = *in[0];
    if (Tensor* gx = gin[0])
      for (std::size_t i = 0; i < xv.size(); ++i)
        if (xv[i] > 0.0) (*gx)[i] += g[i];
  });
}

/// [C,H,W] -> [C], per-channel spatial mean.
inline Var adaptive_avg_pool(Var x) {
  detail::check_inputs("adaptive_avg_pool", {x});
  const Tensor& xv = x.value();
  require(xv.rank() == 3, ErrorCode::ShapeMismatch, "adaptive_avg_pool expects [C,H,W]");
  const std::size_t C = xv.dim(0), area = xv.dim(1) * xv.dim(2);
  require(area >= 1, ErrorCode::DegenerateExtent, "adaptive_avg_pool over empty spatial extent");
  Tensor out({C});
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t p = 0; p < area; ++p) s += xv[c * area + p];
    out[c] = s / static_cast<double>(area);
  }
  return x.tape->record(std::move(out), {x.id}, [C, area](auto, const Tensor&, const Tensor& g, auto gin) {
    if (Tensor* gx = gin[0])
      for (std::size_t c = 0; c < C; ++c) {
        const double share = g[c] / static_cast<double>(area);
        for (std::size_t p = 0; p < area; ++p) (*gx)[c * area + p] += share;
      }
  });
}

/// -log softmax(logits)[label] over all K entries of `logits`.
inline Var softmax_cross_entropy(Var logits, std::size_t label) {
  detail::check_inputs("softmax_cross_entropy", {logits});
  const Tensor& z = logits.value();
  const std::size_t K = z.size();
  require(label < K, ErrorCode::LabelOutOfRange,
          "label " + std::to_string(label) + " with " + std::to_string(K) + " classes");
  const double zmax = *std::max_element(z.data().begin(), z.data().end());
  double denom = 0.0;
  for (double v : z.data()) denom += std::exp(v - zmax);
  const double loss = std::log(denom) - (z[label] - zmax);
  return logits.tape->record(Tensor::scalar(loss), {logits.id},
                             [label, K](auto in, const Tensor&, const Tensor& g, auto gin) {
                               Tensor* gz = gin[0];
                               if (!gz) return;
                               const Tensor& zv = *in[0];
                               const double m = *std::max_element(zv.data().begin(), zv.data().end());
                               double d = 0.0;
                               for (double v : zv.data()) d += std::exp(v - m);
                               for (std::size_t i = 0; i < K; ++i) {
                                 const double p = std::exp(zv[i] - m) / d;
                                 (*gz)[i] += g[0] * (p - (i == label ? 1.0 : 0.0));
                               }
                             });
}

inline Var add(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  detail::check_inputs("add", {a, b});
  require(a.value().size() == b.value().size(), ErrorCode::ShapeMismatch,
          "add " + shape_string(a.shape()) + " + " + shape_string(b.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return tape.record(std::move(out), {a.id, b.id}, [](auto, const Tensor&, const Tensor& g, auto gin) {
    for (Tensor* gi : gin)
      if (gi)
        for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
  });
}

/// Elementwise product of equal-sized tensors.
inline Var mul(Var a, Var b) {
  Tape& tape = detail::same_tape(a, b);
  detail::check_inputs("mul", {a, b});
  require(a.value().size() == b.value().size(), ErrorCode::ShapeMismatch,
          "mul " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return tape.record(std::move(out), {a.id, b.id}, [](auto in, const Tensor&, const Tensor& g, auto gin) {
    if (Tensor* ga = gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * (*in[1])[i];
    if (Tensor* gb = gin[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * (*in[0])[i];
  });
}

inline Var scale(Var x, double factor) {
  detail::check_inputs("scale", {x});
  require(std::isfinite(factor), ErrorCode::NonFiniteInput, "scale: non-finite factor");
  Tensor out = x.value();
  for (double& v : out.data()) v *= factor;
  return x.tape->record(std::move(out), {x.id}, [factor](auto, const Tensor&, const Tensor& g, auto gin) {
    if (Tensor* gx = gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += factor * g[i];
  });
}

inline Var sum(Var x) {
  detail::check_inputs("sum", {x});
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return x.tape->record(Tensor::scalar(s), {x.id}, [](auto, const Tensor&, const Tensor& g, auto gin) {
    if (Tensor* gx = gin[0])
      for (double& v : gx->data()) v += g[0];
  });
}

/// Same data, new shape.
inline Var reshape(Var x, Shape shape) {
  require(element_count(shape) == x.value().size(), ErrorCode::ShapeMismatch,
          "reshape " + shape_string(x.shape()) + " -> " + shape_string(shape));
  return x.tape->record(x.value().reshaped(std::move(shape)), {x.id},
                        [](auto, const Tensor&, const Tensor& g, auto gin) {
                          if (Tensor* gx = gin[0])
                            for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
                        });
}

/// Scalar x[index] over the flat data.
inline Var pick(Var x, std::size_t index) {
  require(index < x.value().size(), ErrorCode::LabelOutOfRange,
          "pick index " + std::to_string(index) + " out of " + std::to_string(x.value().size()));
  return x.tape->record(Tensor::scalar(x.value()[index]), {x.id},
                        [index](auto, const Tensor&, const Tensor& g, auto gin) {
                          if (Tensor* gx = gin[0]) (*gx)[index] += g[0];
                        });
}

/// x[C,H,W] + bias[C] broadcast over the spatial extent.
inline Var add_channel_bias(Var x, Var bias) {
  Tape& tape = detail::same_tape(x, bias);
  detail::check_inputs("add_channel_bias", {x, bias});
  const Tensor& xv = x.value();
  require(xv.rank() == 3 && bias.value().size() == xv.dim(0), ErrorCode::ShapeMismatch,
          "add_channel_bias " + shape_string(xv.shape()) + " + " + shape_string(bias.shape()));
  const std::size_t C = xv.dim(0), area = xv.dim(1) * xv.dim(2);
  Tensor out = xv;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < area; ++p) out[c * area + p] += bias.value()[c];
  return tape.record(std::move(out), {x.id, bias.id}, [C, area](auto, const Tensor&, const Tensor& g, auto gin) {
    if (Tensor* gx = gin[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
    if (Tensor* gb = gin[1])
      for (std::size_t c = 0; c < C; ++c) {
        double s = 0.0;
        for (std::size_t p = 0; p < area; ++p) s += g[c * area + p];
        (*gb)[c] += s;
      }
  });
}

}  // namespace ltx
