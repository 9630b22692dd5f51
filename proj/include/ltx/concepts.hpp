#pragma once

// Concept representations learned on top of frozen embeddings Phi(x).
//
// Two sources feed the same ConceptBank type:
//  * CAVs: one linear SVM per concept separating embeddings with and without
//    the concept; the SVM normals form the rows of Q and a sample's concept
//    score is <Phi(x), q_i> / ||q_i||^2.
//  * Annotated predictor: one logistic regression per concept trained on
//    annotated embeddings; the concept value is its sigmoid output.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "ltx/container.hpp"
#include "ltx/error.hpp"
#include "ltx/parallel.hpp"
#include "ltx/rng.hpp"

namespace ltx {

using Vec = std::vector<double>;

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double squared_norm(std::span<const double> a) { return dot(a, a); }

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

enum class ConceptSource { AnnotatedPredictor, CavSvm };

inline std::string to_string(ConceptSource s) {
  return s == ConceptSource::CavSvm ? "cav-svm" : "annotated-predictor";
}

inline ConceptSource concept_source_from_string(const std::string& s) {
  if (s == "cav-svm") return ConceptSource::CavSvm;
  require(s == "annotated-predictor", ErrorCode::InvalidArgument, "unknown concept source '" + s + "'");
  return ConceptSource::AnnotatedPredictor;
}

/// Optional per-dimension z-scoring applied to embeddings before any
/// concept computation.
struct Standardizer {
  Vec mean;
  Vec scale;

  static Standardizer fit(const std::vector<Vec>& rows) {
    require(!rows.empty(), ErrorCode::EmptyDataset, "cannot standardize an empty set");
    const std::size_t l = rows.front().size();
    Standardizer s{Vec(l, 0.0), Vec(l, 0.0)};
    for (const auto& r : rows)
      for (std::size_t j = 0; j < l; ++j) s.mean[j] += r[j];
    for (double& m : s.mean) m /= static_cast<double>(rows.size());
    for (const auto& r : rows)
      for (std::size_t j = 0; j < l; ++j) s.scale[j] += (r[j] - s.mean[j]) * (r[j] - s.mean[j]);
    for (double& v : s.scale) {
      v = std::sqrt(v / static_cast<double>(rows.size()));
      if (v == 0.0) v = 1.0;
    }
    return s;
  }

  Vec apply(std::span<const double> phi) const {
    Vec out(phi.size());
    for (std::size_t j = 0; j < phi.size(); ++j) out[j] = (phi[j] - mean[j]) / scale[j];
    return out;
  }

  friend bool operator==(const Standardizer&, const Standardizer&) = default;
};

/// The Nc x l concept activation matrix Q plus per-concept metadata.
class ConceptBank {
 public:
  ConceptBank(std::vector<std::string> names, std::vector<Vec> rows, Vec intercepts, ConceptSource source,
              std::vector<bool> degenerate = {}, std::optional<Standardizer> standardizer = std::nullopt)
      : names_(std::move(names)),
        rows_(std::move(rows)),
        intercepts_(std::move(intercepts)),
        source_(source),
        degenerate_(std::move(degenerate)),
        standardizer_(std::move(standardizer)) {
    require(!rows_.empty(), ErrorCode::EmptyDataset, "concept bank needs at least one concept");
    require(names_.size() == rows_.size(), ErrorCode::ShapeMismatch, "one name per concept row");
    if (intercepts_.empty()) intercepts_.assign(rows_.size(), 0.0);
    if (degenerate_.empty()) degenerate_.assign(rows_.size(), false);
    require(intercepts_.size() == rows_.size() && degenerate_.size() == rows_.size(), ErrorCode::ShapeMismatch,
            "one intercept and flag per concept row");
    const std::size_t l = rows_.front().size();
    require(l > 0, ErrorCode::ShapeMismatch, "concept rows must be non-empty");
    for (std::size_t i = 0; i < rows_.size(); ++i) {
      require(rows_[i].size() == l, ErrorCode::ShapeMismatch, "concept '" + names_[i] + "' has the wrong dimension");
      for (double v : rows_[i])
        require(std::isfinite(v), ErrorCode::NonFiniteInput, "concept '" + names_[i] + "' has a non-finite entry");
      require(squared_norm(rows_[i]) > 0.0, ErrorCode::ZeroVector, "concept '" + names_[i] + "' has a zero row");
    }
    if (standardizer_)
      require(standardizer_->mean.size() == l && standardizer_->scale.size() == l, ErrorCode::ShapeMismatch,
              "standardizer dimension");
  }

  std::size_t size() const { return rows_.size(); }
  std::size_t dim() const { return rows_.front().size(); }
  const std::vector<std::string>& names() const { return names_; }
  const std::vector<Vec>& rows() const { return rows_; }
  const Vec& row(std::size_t i) const { return rows_.at(i); }
  const Vec& intercepts() const { return intercepts_; }
  ConceptSource source() const { return source_; }
  const std::vector<bool>& degenerate() const { return degenerate_; }
  const std::optional<Standardizer>& standardizer() const { return standardizer_; }

  Vec prepare(std::span<const double> phi) const {
    require(phi.size() == dim(), ErrorCode::ShapeMismatch,
            "embedding has " + std::to_string(phi.size()) + " entries, bank expects " + std::to_string(dim()));
    for (double v : phi) require(std::isfinite(v), ErrorCode::NonFiniteInput, "non-finite embedding");
    return standardizer_ ? standardizer_->apply(phi) : Vec(phi.begin(), phi.end());
  }

  /// Concept vector fed to the PCBM: projection scores for CAV banks,
  /// sigmoid probabilities for annotated predictors.
  Vec values(std::span<const double> phi) const;

  friend bool operator==(const ConceptBank&, const ConceptBank&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<Vec> rows_;
  Vec intercepts_;
  ConceptSource source_;
  std::vector<bool> degenerate_;
  std::optional<Standardizer> standardizer_;
};

/// c_i = <phi, q_i> / ||q_i||^2 for every row q_i of Q.
inline Vec concept_scores(const ConceptBank& bank, std::span<const double> phi) {
  const Vec x = bank.prepare(phi);
  Vec c(bank.size());
  for (std::size_t i = 0; i < bank.size(); ++i) c[i] = dot(x, bank.row(i)) / squared_norm(bank.row(i));
  return c;
}

inline Vec ConceptBank::values(std::span<const double> phi) const {
  if (source_ == ConceptSource::CavSvm) return concept_scores(*this, phi);
  const Vec x = prepare(phi);
  Vec c(size());
  for (std::size_t i = 0; i < size(); ++i) c[i] = sigmoid(dot(x, rows_[i]) + intercepts_[i]);
  return c;
}

inline std::vector<Vec> concept_values(const ConceptBank& bank, const std::vector<Vec>& embeddings) {
  std::vector<Vec> out;
  out.reserve(embeddings.size());
  for (const auto& e : embeddings) out.push_back(bank.values(e));
  return out;
}

// ---------------------------------------------------------------------------
// CAVs via a linear SVM

struct ConceptExampleSet {
  std::string name;
  std::vector<Vec> positives;  // concept present
  std::vector<Vec> negatives;  // concept absent

  std::size_t dim() const { return positives.empty() ? 0 : positives.front().size(); }
};

struct SvmConfig {
  double reg = 0.01;
  std::size_t epochs = 200;
  std::size_t batch_size = 0;  // 0: full batch
};

struct CavResult {
  Vec q;
  double intercept = 0.0;
  bool no_separation_signal = false;
  std::vector<double> objective_history;  // best objective after each epoch
};

/// (reg/2) * (||w||^2 + b^2) + mean hinge(1 - y (<w, x> + b)).
inline double svm_objective(const ConceptExampleSet& ex, std::span<const double> w, double b, double reg) {
  double hinge = 0.0;
  for (const auto& x : ex.positives) hinge += std::max(0.0, 1.0 - (dot(w, x) + b));
  for (const auto& x : ex.negatives) hinge += std::max(0.0, 1.0 + (dot(w, x) + b));
  const double n = static_cast<double>(ex.positives.size() + ex.negatives.size());
  return 0.5 * reg * (squared_norm(w) + b * b) + hinge / n;
}

/// Soft-margin linear SVM by Pegasos-style subgradient descent, step
/// 1/(reg * t), on the bias-augmented weight vector. Subgradient steps do
/// not decrease the objective monotonically, so the best iterate (by full
/// objective, evaluated after every epoch) is returned.
inline CavResult train_cav_svm(const ConceptExampleSet& ex, const SvmConfig& cfg, std::uint64_t seed) {
  require(!ex.positives.empty() && !ex.negatives.empty(), ErrorCode::EmptyClass,
          "concept '" + ex.name + "' needs both present and absent examples");
  require(cfg.reg > 0.0 && std::isfinite(cfg.reg), ErrorCode::InvalidArgument, "svm reg must be > 0");
  require(cfg.epochs >= 1, ErrorCode::InvalidArgument, "svm epochs must be >= 1");
  const std::size_t l = ex.dim();
  for (const auto* side : {&ex.positives, &ex.negatives})
    for (const auto& x : *side) {
      require(x.size() == l, ErrorCode::ShapeMismatch, "concept '" + ex.name + "' has mixed embedding sizes");
      for (double v : x) require(std::isfinite(v), ErrorCode::NonFiniteInput, "non-finite embedding");
    }

  struct Item {
    const Vec* x;
    double y;
  };
  std::vector<Item> items;
  for (const auto& x : ex.positives) items.push_back({&x, 1.0});
  for (const auto& x : ex.negatives) items.push_back({&x, -1.0});
  Rng rng(seed);
  rng.shuffle(items);  // fixed order for every epoch
  const std::size_t n = items.size();
  const std::size_t batch = cfg.batch_size == 0 ? n : std::min(cfg.batch_size, n);

  CavResult out;
  out.no_separation_signal = true;
  for (const auto& it : items)
    if (*it.x != *items.front().x) out.no_separation_signal = false;

  Vec w(l, 0.0), grad(l);
  double b = 0.0;
  Vec best_w = w;
  double best_b = b;
  double best = svm_objective(ex, w, b, cfg.reg);
  const double radius = 1.0 / std::sqrt(cfg.reg);
  std::size_t t = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t stop = std::min(n, start + batch);
      ++t;
      const double eta = 1.0 / (cfg.reg * static_cast<double>(t));
      std::fill(grad.begin(), grad.end(), 0.0);
      double grad_b = 0.0;
      for (std::size_t i = start; i < stop; ++i) {
        const Item& it = items[i];
        if (it.y * (dot(w, *it.x) + b) < 1.0) {
          for (std::size_t j = 0; j < l; ++j) grad[j] -= it.y * (*it.x)[j];
          grad_b -= it.y;
        }
      }
      const double inv = 1.0 / static_cast<double>(stop - start);
      const double shrink = 1.0 - eta * cfg.reg;
      for (std::size_t j = 0; j < l; ++j) w[j] = shrink * w[j] - eta * grad[j] * inv;
      b = shrink * b - eta * grad_b * inv;
      // Pegasos projection onto the ball that contains the optimum.
      const double norm = std::sqrt(squared_norm(w) + b * b);
      if (norm > radius) {
        const double f = radius / norm;
        for (double& v : w) v *= f;
        b *= f;
      }
    }
    const double obj = svm_objective(ex, w, b, cfg.reg);
    if (obj < best) {
      best = obj;
      best_w = w;
      best_b = b;
    }
    out.objective_history.push_back(best);
  }
  out.q = std::move(best_w);
  out.intercept = best_b;
  return out;
}

/// Stacks one CAV per example set, in the given order.
inline ConceptBank build_concept_bank(const std::vector<ConceptExampleSet>& sets, const SvmConfig& cfg,
                                      std::uint64_t seed, std::size_t threads = 1, bool standardize = false) {
  require(!sets.empty(), ErrorCode::EmptyDataset, "no concept example sets");
  const std::size_t l = sets.front().dim();
  for (const auto& s : sets)
    require(s.dim() == l, ErrorCode::ShapeMismatch, "concept '" + s.name + "' embedding dimension differs");

  std::optional<Standardizer> z;
  std::vector<ConceptExampleSet> prepared;
  const std::vector<ConceptExampleSet>* use = &sets;
  if (standardize) {
    std::vector<Vec> all;
    for (const auto& s : sets) {
      all.insert(all.end(), s.positives.begin(), s.positives.end());
      all.insert(all.end(), s.negatives.begin(), s.negatives.end());
    }
    z = Standardizer::fit(all);
    for (const auto& s : sets) {
      ConceptExampleSet p{s.name, {}, {}};
      for (const auto& x : s.positives) p.positives.push_back(z->apply(x));
      for (const auto& x : s.negatives) p.negatives.push_back(z->apply(x));
      prepared.push_back(std::move(p));
    }
    use = &prepared;
  }

  std::vector<CavResult> results(sets.size());
  parallel_for(sets.size(), threads,
               [&](std::size_t i) { results[i] = train_cav_svm((*use)[i], cfg, derive_seed(seed, i)); });

  std::vector<std::string> names;
  std::vector<Vec> rows;
  Vec intercepts;
  std::vector<bool> degenerate;
  for (std::size_t i = 0; i < sets.size(); ++i) {
    names.push_back(sets[i].name);
    rows.push_back(results[i].q);
    intercepts.push_back(results[i].intercept);
    degenerate.push_back(results[i].no_separation_signal);
  }
  return ConceptBank(std::move(names), std::move(rows), std::move(intercepts), ConceptSource::CavSvm,
                     std::move(degenerate), std::move(z));
}

// ---------------------------------------------------------------------------
// Annotated concept predictor

struct PredictorConfig {
  std::size_t epochs = 15;
  double lr = 0.01;
};

/// Nc independent logistic regressions trained by per-sample SGD. A concept
/// whose annotation never changes is still trained but flagged degenerate.
inline ConceptBank train_concept_predictor(const std::vector<Vec>& embeddings,
                                           const std::vector<std::vector<std::uint8_t>>& annotations,
                                           std::vector<std::string> names, const PredictorConfig& cfg,
                                           std::uint64_t seed, std::size_t threads = 1, bool standardize = false) {
  require(!embeddings.empty(), ErrorCode::EmptyDataset, "no embeddings");
  require(embeddings.size() == annotations.size(), ErrorCode::ShapeMismatch, "one annotation row per embedding");
  require(cfg.lr > 0.0 && cfg.epochs >= 1, ErrorCode::InvalidArgument, "predictor needs lr > 0 and epochs >= 1");
  const std::size_t nc = annotations.front().size();
  const std::size_t l = embeddings.front().size();
  if (names.empty())
    for (std::size_t i = 0; i < nc; ++i) names.push_back("concept_" + std::to_string(i));
  require(names.size() == nc, ErrorCode::ShapeMismatch, "one name per concept");
  for (std::size_t s = 0; s < embeddings.size(); ++s) {
    require(embeddings[s].size() == l, ErrorCode::ShapeMismatch, "mixed embedding sizes");
    require(annotations[s].size() == nc, ErrorCode::ShapeMismatch, "mixed annotation sizes");
    for (auto a : annotations[s]) require(a <= 1, ErrorCode::InvalidArgument, "annotations must be 0/1");
  }

  std::optional<Standardizer> z;
  std::vector<Vec> xs;
  if (standardize) {
    z = Standardizer::fit(embeddings);
    for (const auto& e : embeddings) xs.push_back(z->apply(e));
  }
  const std::vector<Vec>& data = standardize ? xs : embeddings;

  std::vector<Vec> rows(nc, Vec(l, 0.0));
  Vec intercepts(nc, 0.0);
  std::vector<bool> degenerate(nc, false);
  std::vector<char> flags(nc, 0);
  parallel_for(nc, threads, [&](std::size_t c) {
    Rng rng(derive_seed(seed, c));
    Vec& w = rows[c];
    double b = 0.0;
    bool varies = false;
    for (const auto& a : annotations) varies = varies || a[c] != annotations.front()[c];
    flags[c] = !varies;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
      for (std::size_t s : rng.permutation(data.size())) {
        const double err = sigmoid(dot(w, data[s]) + b) - static_cast<double>(annotations[s][c]);
        for (std::size_t j = 0; j < l; ++j) w[j] -= cfg.lr * err * data[s][j];
        b -= cfg.lr * err;
      }
    }
    intercepts[c] = b;
  });
  for (std::size_t c = 0; c < nc; ++c) degenerate[c] = flags[c] != 0;
  return ConceptBank(std::move(names), std::move(rows), std::move(intercepts), ConceptSource::AnnotatedPredictor,
                     std::move(degenerate), std::move(z));
}

// ---------------------------------------------------------------------------
// Serialization

inline Container concept_bank_to_container(const ConceptBank& bank) {
  Container c;
  std::vector<bool> deg = bank.degenerate();
  c.descriptor = {{"kind", "concept_bank"}, {"names", bank.names()},  {"l", bank.dim()},
                  {"Nc", bank.size()},      {"source", to_string(bank.source())}, {"degenerate", deg},
                  {"standardized", bank.standardizer().has_value()}};
  Vec q;
  for (const auto& r : bank.rows()) q.insert(q.end(), r.begin(), r.end());
  c.records.push_back(Record{"Q", {bank.size(), bank.dim()}, std::move(q), {}});
  c.records.push_back(Record{"intercepts", {bank.size()}, bank.intercepts(), {}});
  if (const auto& z = bank.standardizer()) {
    c.records.push_back(Record{"standardize.mean", {bank.dim()}, z->mean, {}});
    c.records.push_back(Record{"standardize.scale", {bank.dim()}, z->scale, {}});
  }
  return c;
}

inline ConceptBank concept_bank_from_container(const Container& c) {
  require(c.descriptor.value("kind", "") == "concept_bank" && c.dtype == DType::F64,
          ErrorCode::ArchitectureMismatch, "container does not hold a concept bank");
  const auto names = c.descriptor.at("names").get<std::vector<std::string>>();
  const auto l = c.descriptor.at("l").get<std::size_t>();
  const auto nc = c.descriptor.at("Nc").get<std::size_t>();
  const Record& q = c.at("Q");
  require(q.shape == Shape{nc, l} && names.size() == nc, ErrorCode::ArchitectureMismatch, "concept bank shape");
  std::vector<Vec> rows;
  for (std::size_t i = 0; i < nc; ++i)
    rows.emplace_back(q.f64.begin() + static_cast<std::ptrdiff_t>(i * l),
                      q.f64.begin() + static_cast<std::ptrdiff_t>((i + 1) * l));
  std::optional<Standardizer> z;
  if (c.descriptor.value("standardized", false))
    z = Standardizer{c.at("standardize.mean").f64, c.at("standardize.scale").f64};
  return ConceptBank(names, std::move(rows), c.at("intercepts").f64,
                     concept_source_from_string(c.descriptor.at("source").get<std::string>()),
                     c.descriptor.at("degenerate").get<std::vector<bool>>(), std::move(z));
}

}  // namespace ltx
