#pragma once

// Cross-round explanation drift. Every round is compared against round 1,
// the unpruned network:
//   - top-k concept overlap per class (set semantics),
//   - Spearman correlation of each class's full PCBM weight row,
//   - Pearson correlation of flattened Grad-CAM maps per (sample, class).
// Undefined correlations (a constant input) are carried as std::nullopt and
// written as NA.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "ltx/csv.hpp"
#include "ltx/error.hpp"
#include "ltx/gradcam.hpp"
#include "ltx/pcbm.hpp"
#include "ltx/pruning.hpp"
#include "ltx/synth.hpp"

namespace ltx {

inline double topk_overlap(const std::vector<std::string>& a, const std::vector<std::string>& b, std::size_t k) {
  require(k >= 1, ErrorCode::InvalidArgument, "k must be >= 1");
  require(k <= a.size() && k <= b.size(), ErrorCode::InvalidArgument,
          "k=" + std::to_string(k) + " exceeds list length (" + std::to_string(a.size()) + ", " +
              std::to_string(b.size()) + ")");
  const std::set<std::string> sa(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(k));
  std::set<std::string> shared;
  for (std::size_t i = 0; i < k; ++i)
    if (sa.count(b[i])) shared.insert(b[i]);
  return static_cast<double>(shared.size()) / static_cast<double>(k);
}

/// Pearson correlation; nullopt when either input is constant.
inline std::optional<double> pearson(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorCode::ShapeMismatch, "correlation inputs differ in length");
  require(a.size() >= 2, ErrorCode::ShapeMismatch, "correlation needs at least two values");
  auto constant = [](std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
  };
  if (constant(a) || constant(b)) return std::nullopt;
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// 1-based ranks; tied values share the average of their positions.
inline std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) r[idx[t]] = avg;
    i = j + 1;
  }
  return r;
}

inline std::optional<double> spearman_rank_corr(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorCode::ShapeMismatch, "rank correlation inputs differ in length");
  require(a.size() >= 2, ErrorCode::ShapeMismatch, "rank correlation needs at least two values");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb);
}

inline std::optional<double> heatmap_similarity(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), ErrorCode::ShapeMismatch,
          "heatmap dimensions differ: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  return pearson(a.data(), b.data());
}

// ---------------------------------------------------------------------------
// Report

struct HeatmapEntry {
  std::size_t sample_id = 0;
  std::size_t target_class = 0;
  Tensor values;
};

struct RoundArtifacts {
  RoundRecord record;
  PcbmModel pcbm;
  std::vector<HeatmapEntry> heatmaps;
};

struct ConceptConsistency {
  std::size_t round = 0;
  std::size_t class_id = 0;
  std::vector<std::string> topk;
  double overlap = 1.0;
  std::optional<double> spearman;
};

struct HeatmapConsistency {
  std::size_t round = 0;
  std::size_t sample_id = 0;
  std::size_t target_class = 0;
  std::optional<double> pearson;
};

struct RoundSummary {
  std::size_t round = 0;
  double pct_weights_remaining = 0.0;
  double test_accuracy = 0.0;
};

struct ConsistencyReport {
  std::size_t k = 3;
  std::vector<std::string> class_names;
  std::vector<RoundSummary> rounds;
  std::vector<ConceptConsistency> concepts;  // sorted by (round, class)
  std::vector<HeatmapConsistency> heatmaps;  // sorted by (round, sample, class)
};

inline std::vector<std::string> default_class_names(std::size_t k) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < k; ++i) out.push_back("class_" + std::to_string(i));
  return out;
}

inline std::vector<std::string> topk_names(const PcbmModel& m, std::size_t class_id, std::size_t k) {
  std::vector<std::string> out;
  for (const auto& [name, w] : top_k_concepts(m, class_id, k)) out.push_back(name);
  return out;
}

/// Rounds must be 1..R in order; round 1 is the baseline. k is capped at the
/// concept count.
inline ConsistencyReport build_report(std::vector<RoundArtifacts> rounds, std::size_t k = 3,
                                      std::vector<std::string> class_names = {}) {
  require(!rounds.empty(), ErrorCode::MissingArtifact, "no completed rounds to report on");
  std::sort(rounds.begin(), rounds.end(),
            [](const RoundArtifacts& a, const RoundArtifacts& b) { return a.record.round < b.record.round; });
  std::vector<std::string> missing;
  for (std::size_t i = 0; i < rounds.size(); ++i)
    if (rounds[i].record.round != i + 1) missing.push_back("round_" + std::to_string(i + 1));
  require(missing.empty(), ErrorCode::MissingArtifact, "missing round artifacts: " + [&] {
    std::string s;
    for (const auto& m : missing) s += (s.empty() ? "" : ", ") + m;
    return s;
  }());

  const RoundArtifacts& base = rounds.front();
  const std::size_t K = base.pcbm.num_classes;
  for (const auto& r : rounds)
    require(r.pcbm.num_classes == K && r.pcbm.concept_names == base.pcbm.concept_names,
            ErrorCode::ShapeMismatch, "round " + std::to_string(r.record.round) + " PCBM has a different layout");
  if (class_names.empty()) class_names = default_class_names(K);
  require(class_names.size() == K, ErrorCode::ShapeMismatch, "one class name per class");

  auto sort_maps = [](std::vector<HeatmapEntry>& v) {
    std::sort(v.begin(), v.end(), [](const HeatmapEntry& a, const HeatmapEntry& b) {
      return std::pair(a.sample_id, a.target_class) < std::pair(b.sample_id, b.target_class);
    });
  };
  for (auto& r : rounds) sort_maps(r.heatmaps);

  k = std::min(k, base.pcbm.num_concepts);
  ConsistencyReport rep;
  rep.k = k;
  rep.class_names = std::move(class_names);
  std::vector<std::vector<std::string>> base_topk(K);
  for (std::size_t c = 0; c < K; ++c) base_topk[c] = topk_names(base.pcbm, c, k);

  for (const auto& r : rounds) {
    rep.rounds.push_back({r.record.round, r.record.pct_weights_remaining, r.record.test_accuracy});
    for (std::size_t c = 0; c < K; ++c) {
      ConceptConsistency cc;
      cc.round = r.record.round;
      cc.class_id = c;
      cc.topk = topk_names(r.pcbm, c, k);
      cc.overlap = topk_overlap(cc.topk, base_topk[c], k);
      const std::span<const double> row(r.pcbm.W.data() + c * r.pcbm.num_concepts, r.pcbm.num_concepts);
      const std::span<const double> base_row(base.pcbm.W.data() + c * base.pcbm.num_concepts,
                                             base.pcbm.num_concepts);
      cc.spearman = r.pcbm.num_concepts >= 2 ? spearman_rank_corr(row, base_row) : std::nullopt;
      rep.concepts.push_back(std::move(cc));
    }
    require(r.heatmaps.size() == base.heatmaps.size(), ErrorCode::MissingArtifact,
            "round " + std::to_string(r.record.round) + " has " + std::to_string(r.heatmaps.size()) +
                " heatmaps, baseline has " + std::to_string(base.heatmaps.size()));
    for (std::size_t i = 0; i < r.heatmaps.size(); ++i) {
      const HeatmapEntry& h = r.heatmaps[i];
      const HeatmapEntry& b = base.heatmaps[i];
      require(h.sample_id == b.sample_id && h.target_class == b.target_class, ErrorCode::MissingArtifact,
              "round " + std::to_string(r.record.round) + " lacks heatmap for sample " +
                  std::to_string(b.sample_id) + " class " + std::to_string(b.target_class));
      rep.heatmaps.push_back({r.record.round, h.sample_id, h.target_class, heatmap_similarity(h.values, b.values)});
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Emission

inline std::string accuracy_curve_csv(const ConsistencyReport& rep) {
  std::string out = "round,pct_weights_remaining,test_accuracy\n";
  for (const auto& r : rep.rounds)
    out += std::to_string(r.round) + "," + format_double(r.pct_weights_remaining) + "," +
           format_double(r.test_accuracy) + "\n";
  return out;
}

/// Long format: concept rows first (one per round x class), then heatmap
/// rows (one per round x sample x class). Unused columns are left empty.
inline std::string consistency_csv(const ConsistencyReport& rep) {
  std::string out =
      "section,round,pct_weights_remaining,class,sample_id,topk_overlap,spearman,heatmap_pearson\n";
  auto pct = [&](std::size_t round) { return format_double(rep.rounds.at(round - 1).pct_weights_remaining); };
  for (const auto& c : rep.concepts)
    out += "concept," + std::to_string(c.round) + "," + pct(c.round) + "," + rep.class_names[c.class_id] + ",," +
           format_double(c.overlap) + "," + format_optional(c.spearman) + ",\n";
  for (const auto& h : rep.heatmaps)
    out += "heatmap," + std::to_string(h.round) + "," + pct(h.round) + "," + rep.class_names[h.target_class] + "," +
           std::to_string(h.sample_id) + ",,," + format_optional(h.pearson) + "\n";
  return out;
}

inline nlohmann::json consistency_json(const ConsistencyReport& rep) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json rounds = nlohmann::json::array();
  for (const auto& r : rep.rounds) {
    nlohmann::json concepts = nlohmann::json::array();
    for (const auto& c : rep.concepts)
      if (c.round == r.round)
        concepts.push_back({{"class", rep.class_names[c.class_id]},
                            {"topk", c.topk},
                            {"topk_overlap", c.overlap},
                            {"spearman", opt(c.spearman)}});
    nlohmann::json maps = nlohmann::json::array();
    for (const auto& h : rep.heatmaps)
      if (h.round == r.round)
        maps.push_back({{"sample_id", h.sample_id},
                        {"class", rep.class_names[h.target_class]},
                        {"pearson", opt(h.pearson)}});
    rounds.push_back({{"round", r.round},
                      {"pct_weights_remaining", r.pct_weights_remaining},
                      {"test_accuracy", r.test_accuracy},
                      {"concepts", std::move(concepts)},
                      {"heatmaps", std::move(maps)}});
  }
  return {{"baseline_round", 1},
          {"k", rep.k},
          {"metrics",
           {{"topk_overlap", "|topk(round) & topk(round 1)| / k per class"},
            {"spearman", "rank correlation of the class's PCBM weight row against round 1"},
            {"heatmap_pearson", "Pearson correlation of flattened Grad-CAM maps against round 1"}}},
          {"rounds", std::move(rounds)}};
}

/// Per-round top-k concepts in long form.
inline std::string topk_concepts_csv(const std::vector<RoundArtifacts>& rounds, std::size_t k,
                                     const std::vector<std::string>& class_names) {
  std::string out = "round,pct_weights_remaining,class,rank,concept,weight\n";
  for (const auto& r : rounds)
    for (std::size_t c = 0; c < r.pcbm.num_classes; ++c) {
      const auto top = top_k_concepts(r.pcbm, c, k);
      for (std::size_t i = 0; i < top.size(); ++i)
        out += std::to_string(r.record.round) + "," + format_double(r.record.pct_weights_remaining) + "," +
               class_names[c] + "," + std::to_string(i + 1) + "," + top[i].first + "," +
               format_double(top[i].second) + "\n";
    }
  return out;
}

/// Markdown table: one row per class, one column per round, each cell the
/// top-k concepts; concepts shared with round 1 are bold.
inline std::string topk_table_markdown(const ConsistencyReport& rep) {
  std::string out = "| Class |";
  std::string rule = "|---|";
  for (const auto& r : rep.rounds) {
    out += " " + format_fixed(r.pct_weights_remaining, 1) + "% weights remaining |";
    rule += "---|";
  }
  out += "\n" + rule + "\n";
  const std::size_t K = rep.class_names.size();
  for (std::size_t c = 0; c < K; ++c) {
    const auto& base = rep.concepts[c].topk;
    out += "| " + rep.class_names[c] + " |";
    for (std::size_t r = 0; r < rep.rounds.size(); ++r) {
      const auto& cell = rep.concepts[r * K + c].topk;
      std::string text;
      for (const auto& name : cell) {
        const bool shared = r > 0 && std::find(base.begin(), base.end(), name) != base.end();
        text += (text.empty() ? "" : ", ") + (shared ? "**" + name + "**" : name);
      }
      out += " " + text + " |";
    }
    out += "\n";
  }
  return out;
}

/// Horizontal strip: grayscale input | round 1 map | round 2 map | ...,
/// separated by one white column.
inline Tensor heatmap_panel(const Tensor& image, const std::vector<Tensor>& maps) {
  require(image.rank() == 3, ErrorCode::ShapeMismatch, "panel input must be [C,H,W]");
  const std::size_t C = image.dim(0), H = image.dim(1), W = image.dim(2);
  for (const auto& m : maps) require(m.shape() == Shape{H, W}, ErrorCode::ShapeMismatch, "panel map size");
  const std::size_t tiles = maps.size() + 1;
  Tensor out = Tensor::filled({H, tiles * W + (tiles - 1)}, 1.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      double g = 0.0;
      for (std::size_t c = 0; c < C; ++c) g += image[(c * H + y) * W + x];
      out.at(y, x) = std::clamp(g / static_cast<double>(C), 0.0, 1.0);
      for (std::size_t t = 0; t < maps.size(); ++t) out.at(y, (t + 1) * (W + 1) + x) = maps[t].at(y, x);
    }
  return out;
}

inline void write_report(const std::filesystem::path& dir, const ConsistencyReport& rep) {
  std::filesystem::create_directories(dir);
  write_file_bytes(dir / "consistency.csv", consistency_csv(rep));
  write_file_bytes(dir / "consistency.json", consistency_json(rep).dump(2) + "\n");
  write_file_bytes(dir / "accuracy_curve.csv", accuracy_curve_csv(rep));
  write_file_bytes(dir / "topk_table.md", topk_table_markdown(rep));
}

}  // namespace ltx
