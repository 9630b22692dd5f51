#pragma once

// Post-hoc concept bottleneck: a sparse linear classifier g(c) = W c + b on
// concept vectors, trained on
//
//   mean CE(g(c), y) + lambda / (Nc * K) * Omega(W),
//   Omega(W) = alpha * sum |W_ij| + (1 - alpha) * sum W_ij^2.
//
// Optimizer: per-sample SGD on the cross-entropy followed by the proximal
// map of the penalty (implicit L2 shrink, then soft-thresholding). An epoch
// that raises the full objective is rolled back and the step halved, so the
// recorded objective never increases.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "ltx/concepts.hpp"
#include "ltx/container.hpp"
#include "ltx/error.hpp"
#include "ltx/rng.hpp"

namespace ltx {

struct PcbmConfig {
  double lambda = 1.0;
  double alpha = 0.5;
  std::size_t epochs = 35;
  double lr = 0.01;
  std::size_t batch_size = 1;

  void validate() const {
    require(std::isfinite(lambda) && lambda >= 0.0, ErrorCode::InvalidArgument, "pcbm lambda must be >= 0");
    require(alpha >= 0.0 && alpha <= 1.0, ErrorCode::InvalidArgument, "pcbm alpha must be in [0, 1]");
    require(epochs >= 1, ErrorCode::InvalidArgument, "pcbm epochs must be >= 1");
    require(std::isfinite(lr) && lr > 0.0, ErrorCode::InvalidArgument, "pcbm lr must be > 0");
    require(batch_size >= 1, ErrorCode::InvalidArgument, "pcbm batch_size must be >= 1");
  }
};

struct PcbmModel {
  std::size_t num_classes = 0;
  std::size_t num_concepts = 0;
  Vec W;  // row-major [K, Nc]
  Vec b;  // [K]
  double lambda = 0.0;
  double alpha = 0.5;
  std::vector<std::string> concept_names;
  std::vector<double> objective_history;  // accepted objective after each epoch

  double w(std::size_t k, std::size_t c) const { return W[k * num_concepts + c]; }
  friend bool operator==(const PcbmModel&, const PcbmModel&) = default;
};

inline double pcbm_omega(const Vec& W, double alpha) {
  double l1 = 0.0, l2 = 0.0;
  for (double v : W) {
    l1 += std::abs(v);
    l2 += v * v;
  }
  return alpha * l1 + (1.0 - alpha) * l2;
}

inline double pcbm_penalty_scale(double lambda, std::size_t num_concepts, std::size_t num_classes) {
  return lambda / static_cast<double>(num_concepts * num_classes);
}

inline Vec pcbm_logits(const PcbmModel& m, std::span<const double> c) {
  require(c.size() == m.num_concepts, ErrorCode::ShapeMismatch,
          "concept vector has " + std::to_string(c.size()) + " entries, model expects " +
              std::to_string(m.num_concepts));
  Vec z(m.b);
  for (std::size_t k = 0; k < m.num_classes; ++k)
    for (std::size_t j = 0; j < m.num_concepts; ++j) z[k] += m.w(k, j) * c[j];
  return z;
}

struct PcbmPrediction {
  std::size_t label = 0;
  Vec logits;
};

/// argmax of W c + b; ties go to the lowest class index.
inline PcbmPrediction pcbm_predict(const PcbmModel& m, std::span<const double> c) {
  PcbmPrediction p{0, pcbm_logits(m, c)};
  for (std::size_t k = 1; k < p.logits.size(); ++k)
    if (p.logits[k] > p.logits[p.label]) p.label = k;
  return p;
}

namespace detail {

// Softmax cross-entropy and its logit gradient (p - onehot), written into grad.
inline double pcbm_ce(const Vec& z, std::size_t y, Vec& grad) {
  const double zmax = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    grad[k] = std::exp(z[k] - zmax);
    s += grad[k];
  }
  for (std::size_t k = 0; k < z.size(); ++k) grad[k] /= s;
  const double loss = std::log(s) - (z[y] - zmax);
  grad[y] -= 1.0;
  return loss;
}

}  // namespace detail

inline double pcbm_mean_loss(const PcbmModel& m, const std::vector<Vec>& concepts,
                             const std::vector<std::size_t>& labels) {
  Vec grad(m.num_classes);
  double total = 0.0;
  for (std::size_t s = 0; s < concepts.size(); ++s) total += detail::pcbm_ce(pcbm_logits(m, concepts[s]), labels[s], grad);
  return total / static_cast<double>(concepts.size());
}

inline double pcbm_objective(const PcbmModel& m, const std::vector<Vec>& concepts,
                             const std::vector<std::size_t>& labels) {
  return pcbm_mean_loss(m, concepts, labels) +
         pcbm_penalty_scale(m.lambda, m.num_concepts, m.num_classes) * pcbm_omega(m.W, m.alpha);
}

inline double pcbm_accuracy(const PcbmModel& m, const std::vector<Vec>& concepts,
                            const std::vector<std::size_t>& labels) {
  if (concepts.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t s = 0; s < concepts.size(); ++s) hit += pcbm_predict(m, concepts[s]).label == labels[s];
  return static_cast<double>(hit) / static_cast<double>(concepts.size());
}

inline PcbmModel train_pcbm(const std::vector<Vec>& concepts, const std::vector<std::size_t>& labels,
                            std::size_t num_classes, const PcbmConfig& cfg, std::uint64_t seed,
                            std::vector<std::string> concept_names = {}) {
  cfg.validate();
  require(!concepts.empty(), ErrorCode::EmptyDataset, "pcbm needs at least one sample");
  require(concepts.size() == labels.size(), ErrorCode::ShapeMismatch, "one label per concept vector");
  require(num_classes >= 1, ErrorCode::InvalidArgument, "pcbm needs at least one class");
  const std::size_t nc = concepts.front().size();
  require(nc >= 1, ErrorCode::ShapeMismatch, "concept vectors are empty");
  for (std::size_t s = 0; s < concepts.size(); ++s) {
    require(concepts[s].size() == nc, ErrorCode::ShapeMismatch, "mixed concept vector lengths");
    for (double v : concepts[s]) require(std::isfinite(v), ErrorCode::NonFiniteInput, "non-finite concept value");
    require(labels[s] < num_classes, ErrorCode::LabelOutOfRange,
            "label " + std::to_string(labels[s]) + " out of range for " + std::to_string(num_classes) + " classes");
  }
  if (concept_names.empty())
    for (std::size_t i = 0; i < nc; ++i) concept_names.push_back("concept_" + std::to_string(i));
  require(concept_names.size() == nc, ErrorCode::ShapeMismatch, "one name per concept");

  PcbmModel m;
  m.num_classes = num_classes;
  m.num_concepts = nc;
  m.W.assign(num_classes * nc, 0.0);
  m.b.assign(num_classes, 0.0);
  m.lambda = cfg.lambda;
  m.alpha = cfg.alpha;
  m.concept_names = std::move(concept_names);

  const double scale = pcbm_penalty_scale(cfg.lambda, nc, num_classes);
  const double l1 = scale * cfg.alpha;
  const double l2 = scale * (1.0 - cfg.alpha);
  const std::size_t n = concepts.size();
  const std::size_t batch = std::min(cfg.batch_size, n);

  Rng rng(seed);
  double lr = cfg.lr;
  double current = pcbm_objective(m, concepts, labels);
  Vec gW(m.W.size()), gb(num_classes), dz(num_classes);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order = rng.permutation(n);
    for (int attempt = 0;; ++attempt) {
      PcbmModel trial = m;
      for (std::size_t start = 0; start < n; start += batch) {
        const std::size_t stop = std::min(n, start + batch);
        std::fill(gW.begin(), gW.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (std::size_t i = start; i < stop; ++i) {
          const Vec& c = concepts[order[i]];
          detail::pcbm_ce(pcbm_logits(trial, c), labels[order[i]], dz);
          for (std::size_t k = 0; k < num_classes; ++k) {
            gb[k] += dz[k];
            for (std::size_t j = 0; j < nc; ++j) gW[k * nc + j] += dz[k] * c[j];
          }
        }
        const double step = lr / static_cast<double>(stop - start);
        const double shrink = 1.0 / (1.0 + 2.0 * lr * l2);
        const double threshold = lr * l1 * shrink;
        for (std::size_t k = 0; k < num_classes; ++k) trial.b[k] -= step * gb[k];
        for (std::size_t i = 0; i < trial.W.size(); ++i) {
          const double v = (trial.W[i] - step * gW[i]) * shrink;
          trial.W[i] = std::copysign(std::max(0.0, std::abs(v) - threshold), v);
        }
      }
      const double obj = pcbm_objective(trial, concepts, labels);
      if (obj <= current || attempt == 30) {
        if (obj <= current) {
          m.W = std::move(trial.W);
          m.b = std::move(trial.b);
          current = obj;
        }
        break;
      }
      lr *= 0.5;
    }
    m.objective_history.push_back(current);
  }
  return m;
}

/// Concepts of class `class_id` by descending signed weight, ties by index.
inline std::vector<std::pair<std::string, double>> top_k_concepts(const PcbmModel& m, std::size_t class_id,
                                                                  std::size_t k = 3) {
  require(class_id < m.num_classes, ErrorCode::InvalidArgument, "class id out of range");
  require(k >= 1 && k <= m.num_concepts, ErrorCode::InvalidArgument,
          "k must be in [1, " + std::to_string(m.num_concepts) + "]");
  std::vector<std::size_t> idx(m.num_concepts);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t c) { return m.w(class_id, a) > m.w(class_id, c); });
  std::vector<std::pair<std::string, double>> out;
  for (std::size_t r = 0; r < k; ++r) out.emplace_back(m.concept_names[idx[r]], m.w(class_id, idx[r]));
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

inline Container pcbm_to_container(const PcbmModel& m) {
  Container c;
  c.descriptor = {{"kind", "pcbm"},          {"K", m.num_classes},        {"Nc", m.num_concepts},
                  {"lambda", m.lambda},       {"alpha", m.alpha},          {"concept_names", m.concept_names},
                  {"objective_history", m.objective_history}};
  c.records.push_back(Record{"W", {m.num_classes, m.num_concepts}, m.W, {}});
  c.records.push_back(Record{"b", {m.num_classes}, m.b, {}});
  return c;
}

inline PcbmModel pcbm_from_container(const Container& c) {
  require(c.descriptor.value("kind", "") == "pcbm" && c.dtype == DType::F64, ErrorCode::ArchitectureMismatch,
          "container does not hold a pcbm");
  PcbmModel m;
  m.num_classes = c.descriptor.at("K").get<std::size_t>();
  m.num_concepts = c.descriptor.at("Nc").get<std::size_t>();
  m.lambda = c.descriptor.at("lambda").get<double>();
  m.alpha = c.descriptor.at("alpha").get<double>();
  m.concept_names = c.descriptor.at("concept_names").get<std::vector<std::string>>();
  m.objective_history = c.descriptor.at("objective_history").get<std::vector<double>>();
  const Record& w = c.at("W");
  const Record& b = c.at("b");
  require(w.shape == Shape{m.num_classes, m.num_concepts} && b.shape == Shape{m.num_classes} &&
              m.concept_names.size() == m.num_concepts,
          ErrorCode::ArchitectureMismatch, "pcbm record shapes");
  m.W = w.f64;
  m.b = b.f64;
  for (double v : m.W) require(std::isfinite(v), ErrorCode::NonFiniteInput, "non-finite pcbm weight");
  return m;
}

}  // namespace ltx
