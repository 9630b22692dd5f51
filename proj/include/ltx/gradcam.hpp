#pragma once

// Grad-CAM on a conv layer of the (possibly masked) network:
//
//   w_m = pool_ij dY^k / dA^m_ij     (spatial mean by default, or sum)
//   e   = normalize(resize(relu(sum_m w_m A^m)))
//
// Y^k is the pre-softmax logit. Normalization divides by the maximum, so the
// result lies in [0, 1] with max exactly 1 unless the map is all zero.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ltx/autodiff.hpp"
#include "ltx/container.hpp"
#include "ltx/csv.hpp"
#include "ltx/error.hpp"
#include "ltx/mask.hpp"
#include "ltx/network.hpp"
#include "ltx/synth.hpp"
#include "ltx/tensor.hpp"

namespace ltx {

enum class ChannelPooling { Mean, Sum };

struct Heatmap {
  Tensor values;  // [H, W] in [0, 1]
  std::string layer;
  std::size_t target_class = 0;
  std::size_t round = 0;

  std::size_t height() const { return values.dim(0); }
  std::size_t width() const { return values.dim(1); }
};

/// Corner-aligned bilinear resize of an [h, w] map.
inline Tensor resize_bilinear(const Tensor& map, std::size_t H, std::size_t W) {
  require(map.rank() == 2 && map.dim(0) >= 1 && map.dim(1) >= 1, ErrorCode::ShapeMismatch,
          "resize expects a non-empty [h,w] map");
  require(H >= 1 && W >= 1, ErrorCode::DegenerateExtent, "resize target must be at least 1x1");
  const std::size_t h = map.dim(0), w = map.dim(1);
  if (h == H && w == W) return map;
  auto source = [](std::size_t i, std::size_t from, std::size_t to) {
    return to == 1 ? 0.0 : static_cast<double>(i * (from - 1)) / static_cast<double>(to - 1);
  };
  Tensor out({H, W});
  for (std::size_t y = 0; y < H; ++y) {
    const double sy = source(y, h, H);
    const auto y0 = std::min(static_cast<std::size_t>(sy), h - 1);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < W; ++x) {
      const double sx = source(x, w, W);
      const auto x0 = std::min(static_cast<std::size_t>(sx), w - 1);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double top = (1.0 - fx) * map.at(y0, x0) + fx * map.at(y0, x1);
      const double bottom = (1.0 - fx) * map.at(y1, x0) + fx * map.at(y1, x1);
      out.at(y, x) = (1.0 - fy) * top + fy * bottom;
    }
  }
  return out;
}

inline Tensor normalize_max(Tensor map) {
  double peak = 0.0;
  for (double v : map.data()) peak = std::max(peak, v);
  if (peak > 0.0)
    for (double& v : map.data()) v /= peak;
  return map;
}

inline std::vector<double> cam_channel_weights(const Tensor& gradient, ChannelPooling pooling) {
  require(gradient.rank() == 3, ErrorCode::ShapeMismatch, "Grad-CAM needs a spatial [C,h,w] layer");
  const std::size_t c = gradient.dim(0), hw = gradient.dim(1) * gradient.dim(2);
  std::vector<double> w(c, 0.0);
  for (std::size_t m = 0; m < c; ++m) {
    for (std::size_t i = 0; i < hw; ++i) w[m] += gradient[m * hw + i];
    if (pooling == ChannelPooling::Mean) w[m] /= static_cast<double>(hw);
  }
  return w;
}

/// relu(sum_m w_m A^m) as an [h, w] map.
inline Tensor cam_combine(const Tensor& activation, const std::vector<double>& weights) {
  require(activation.rank() == 3 && activation.dim(0) == weights.size(), ErrorCode::ShapeMismatch,
          "one weight per activation channel");
  const std::size_t h = activation.dim(1), w = activation.dim(2), hw = h * w;
  Tensor map({h, w});
  for (std::size_t m = 0; m < weights.size(); ++m)
    for (std::size_t i = 0; i < hw; ++i) map[i] += weights[m] * activation[m * hw + i];
  for (double& v : map.data()) v = std::max(0.0, v);
  return map;
}

/// Full post-processing from a captured activation and its adjoint.
inline Tensor cam_from_capture(const Tensor& activation, const Tensor& gradient, std::size_t H, std::size_t W,
                               ChannelPooling pooling = ChannelPooling::Mean) {
  require(activation.shape() == gradient.shape(), ErrorCode::ShapeMismatch, "activation/gradient shapes differ");
  return normalize_max(resize_bilinear(cam_combine(activation, cam_channel_weights(gradient, pooling)), H, W));
}

struct CamCapture {
  Tensor activation;  // A at the target layer
  Tensor gradient;    // dY^k / dA
  Tensor logits;
};

inline void validate_cam_layer(std::string_view layer) {
  require(layer == "conv1" || layer == "conv2", ErrorCode::InvalidArgument,
          "Grad-CAM layer must be conv1 or conv2, got '" + std::string(layer) + "'");
}

/// Forward with the target layer retained, then backward from
/// logit_scale * Y^k.
inline CamCapture capture_layer(const Model& model, const PruneMask* mask, const Tensor& x, std::size_t target_class,
                                std::string_view layer = "conv2", double logit_scale = 1.0) {
  validate_cam_layer(layer);
  require(target_class < model.num_classes(), ErrorCode::LabelOutOfRange,
          "class " + std::to_string(target_class) + " out of range for " + std::to_string(model.num_classes()) +
              " classes");
  Tape tape;
  NetworkGraph g = build_graph(tape, model, x, mask, false);
  Var a = layer == "conv1" ? g.conv1 : g.conv2;
  tape.retain_grad(a);
  tape.backward(scale(pick(g.logits, target_class), logit_scale));
  const Tensor* grad = tape.grad(a);
  return CamCapture{a.value(), grad ? *grad : Tensor(a.shape()), g.logits.value()};
}

inline Heatmap grad_cam(const Model& model, const PruneMask* mask, const Tensor& x, std::size_t target_class,
                        std::string_view layer = "conv2", ChannelPooling pooling = ChannelPooling::Mean,
                        double logit_scale = 1.0) {
  const CamCapture cap = capture_layer(model, mask, x, target_class, layer, logit_scale);
  return Heatmap{cam_from_capture(cap.activation, cap.gradient, x.dim(1), x.dim(2), pooling), std::string(layer),
                 target_class, 0};
}

// ---------------------------------------------------------------------------
// Output

/// 8-bit P5 PGM; each value v maps to floor(255 v + 0.5).
inline std::string heatmap_pgm_bytes(const Tensor& values) {
  require(values.rank() == 2, ErrorCode::ShapeMismatch, "heatmap must be [H,W]");
  return encode_pgm(values.dim(0), values.dim(1), quantize_unit(values.data()));
}

inline void heatmap_to_pgm(const Heatmap& hm, const std::filesystem::path& path) {
  write_file_bytes(path, heatmap_pgm_bytes(hm.values));
}

/// Raw values, one image row per CSV line, for numeric diffing.
inline std::string heatmap_csv(const Heatmap& hm) {
  std::string out;
  for (std::size_t y = 0; y < hm.height(); ++y) {
    for (std::size_t x = 0; x < hm.width(); ++x) {
      if (x) out += ',';
      out += format_double(hm.values.at(y, x));
    }
    out += '\n';
  }
  return out;
}

inline Tensor heatmap_from_pgm(const std::filesystem::path& path) {
  const Pgm p = decode_pgm(read_file_bytes(path));
  Tensor t({p.height, p.width});
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = p.pixels[i] / 255.0;
  return t;
}

}  // namespace ltx
