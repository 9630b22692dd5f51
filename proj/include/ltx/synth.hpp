#pragma once

// Synthetic concept-annotated images.
//
// Each concept owns one cell of a patch grid and a saturated hue. A present
// concept paints its cell interior with that hue; an absent one leaves the
// background. Concept bits are Bernoulli(0.5) and the label is the class
// whose rule (a required concept subset) is nearest in Hamming distance,
// ties to the lowest class id, so labels are a function of the concepts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "ltx/concepts.hpp"
#include "ltx/csv.hpp"
#include "ltx/error.hpp"
#include "ltx/network.hpp"
#include "ltx/parallel.hpp"
#include "ltx/rng.hpp"
#include "ltx/tensor.hpp"

namespace ltx {

struct GeneratorConfig {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t num_concepts = 8;
  std::size_t num_classes = 4;
  std::size_t samples_per_class = 500;
  double noise_std = 0.05;
  double background = 0.0;
  double train_fraction = 0.8;
  std::uint64_t seed = 0;
  std::vector<std::vector<std::size_t>> class_rules;  // empty: default rules

  /// Class k requires concepts {2k, 2k+1} (mod Nc).
  static std::vector<std::vector<std::size_t>> default_rules(std::size_t num_concepts, std::size_t num_classes) {
    std::vector<std::vector<std::size_t>> rules;
    for (std::size_t k = 0; k < num_classes; ++k) {
      std::vector<std::size_t> r{(2 * k) % num_concepts, (2 * k + 1) % num_concepts};
      std::sort(r.begin(), r.end());
      r.erase(std::unique(r.begin(), r.end()), r.end());
      rules.push_back(r);
    }
    return rules;
  }

  std::vector<std::vector<std::size_t>> rules() const {
    return class_rules.empty() ? default_rules(num_concepts, num_classes) : class_rules;
  }

  void validate() const;
};

struct PatchGrid {
  std::size_t rows, cols, cell_h, cell_w;

  static PatchGrid for_config(const GeneratorConfig& cfg) {
    const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(cfg.num_concepts))));
    const std::size_t rows = (cfg.num_concepts + cols - 1) / cols;
    return {rows, cols, cfg.height / rows, cfg.width / cols};
  }

  // Interior of the cell, leaving a one-pixel border so patches never touch.
  std::size_t top(std::size_t c) const { return (c / cols) * cell_h + 1; }
  std::size_t left(std::size_t c) const { return (c % cols) * cell_w + 1; }
  std::size_t patch_h() const { return cell_h - 2; }
  std::size_t patch_w() const { return cell_w - 2; }
};

inline void GeneratorConfig::validate() const {
  require(num_concepts >= 1 && num_classes >= 1, ErrorCode::InvalidArgument, "need at least one concept and class");
  require(height >= kMinInputExtent && width >= kMinInputExtent, ErrorCode::InvalidArgument,
          "images must be at least 8x8");
  require(samples_per_class >= 1, ErrorCode::InvalidArgument, "samples_per_class must be >= 1");
  require(std::isfinite(noise_std) && noise_std >= 0.0, ErrorCode::InvalidArgument, "noise_std must be >= 0");
  require(train_fraction > 0.0 && train_fraction < 1.0, ErrorCode::InvalidArgument, "train_fraction in (0, 1)");
  const PatchGrid grid = PatchGrid::for_config(*this);
  require(grid.cell_h >= 3 && grid.cell_w >= 3, ErrorCode::InvalidArgument,
          "a " + std::to_string(height) + "x" + std::to_string(width) + " image is too small for " +
              std::to_string(num_concepts) + " concept patches");
  const auto r = rules();
  require(r.size() == num_classes, ErrorCode::InvalidArgument, "need exactly one rule per class");
  for (std::size_t k = 0; k < r.size(); ++k) {
    for (auto c : r[k])
      require(c < num_concepts, ErrorCode::InvalidArgument, "class rule " + std::to_string(k) + " names concept " +
                                                                std::to_string(c) + " out of range");
    for (std::size_t j = 0; j < k; ++j) {
      auto a = r[k], b = r[j];
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      require(a != b, ErrorCode::InvalidArgument,
              "class rules " + std::to_string(j) + " and " + std::to_string(k) + " are identical");
    }
  }
}

struct SynthSample {
  std::size_t id = 0;
  Tensor image;
  std::vector<std::uint8_t> concepts;
  std::size_t label = 0;
};

struct SynthDataset {
  std::vector<SynthSample> train;
  std::vector<SynthSample> test;
  std::vector<std::string> concept_names;
};

inline std::vector<std::string> default_concept_names(std::size_t num_concepts) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < num_concepts; ++i) names.push_back("concept_" + std::to_string(i));
  return names;
}

/// Nearest rule by Hamming distance; ties go to the lowest class id.
inline std::size_t apply_class_rule(const std::vector<std::vector<std::size_t>>& rules,
                                    const std::vector<std::uint8_t>& concepts) {
  std::size_t best = 0, best_dist = ~std::size_t{0};
  for (std::size_t k = 0; k < rules.size(); ++k) {
    std::vector<std::uint8_t> target(concepts.size(), 0);
    for (auto c : rules[k]) target[c] = 1;
    std::size_t d = 0;
    for (std::size_t i = 0; i < concepts.size(); ++i) d += concepts[i] != target[i];
    if (d < best_dist) {
      best = k;
      best_dist = d;
    }
  }
  return best;
}

/// Fully saturated RGB for hue index i of n.
inline std::array<double, 3> concept_color(std::size_t i, std::size_t n) {
  const double h = 6.0 * static_cast<double>(i) / static_cast<double>(n);
  const auto sector = static_cast<int>(std::floor(h)) % 6;
  const double f = h - std::floor(h);
  switch (sector) {
    case 0: return {1.0, f, 0.0};
    case 1: return {1.0 - f, 1.0, 0.0};
    case 2: return {0.0, 1.0, f};
    case 3: return {0.0, 1.0 - f, 1.0};
    case 4: return {f, 0.0, 1.0};
    default: return {1.0, 0.0, 1.0 - f};
  }
}

inline Tensor render_image(const GeneratorConfig& cfg, const std::vector<std::uint8_t>& concepts,
                           std::uint64_t noise_seed) {
  const PatchGrid grid = PatchGrid::for_config(cfg);
  Tensor img = Tensor::filled({kInputChannels, cfg.height, cfg.width}, cfg.background);
  for (std::size_t c = 0; c < concepts.size(); ++c) {
    if (!concepts[c]) continue;
    const auto color = concept_color(c, cfg.num_concepts);
    for (std::size_t ch = 0; ch < kInputChannels; ++ch)
      for (std::size_t y = grid.top(c); y < grid.top(c) + grid.patch_h(); ++y)
        for (std::size_t x = grid.left(c); x < grid.left(c) + grid.patch_w(); ++x) img.at(ch, y, x) = color[ch];
  }
  if (cfg.noise_std > 0.0) {
    Rng rng(noise_seed);
    for (double& v : img.data()) v += cfg.noise_std * rng.normal();
  }
  return img;
}

inline SynthDataset generate(const GeneratorConfig& cfg, std::size_t threads = 1) {
  cfg.validate();
  const auto rules = cfg.rules();
  const std::size_t total = cfg.samples_per_class * cfg.num_classes;

  // Concept vectors by rejection until every class quota is filled.
  Rng rng(derive_seed(cfg.seed, 1));
  std::vector<std::size_t> filled(cfg.num_classes, 0);
  std::vector<SynthSample> samples;
  samples.reserve(total);
  const std::size_t max_draws = 10000 * total + (std::size_t{1} << std::min<std::size_t>(cfg.num_concepts, 20)) * 64;
  for (std::size_t draws = 0; samples.size() < total; ++draws) {
    require(draws < max_draws, ErrorCode::InvalidArgument, "class rules leave some class unreachable");
    std::vector<std::uint8_t> bits(cfg.num_concepts);
    for (auto& b : bits) b = rng.bernoulli(0.5) ? 1 : 0;
    const std::size_t label = apply_class_rule(rules, bits);
    if (filled[label] == cfg.samples_per_class) continue;
    ++filled[label];
    samples.push_back(SynthSample{samples.size(), Tensor(), std::move(bits), label});
  }

  parallel_for(samples.size(), threads, [&](std::size_t i) {
    samples[i].image = render_image(cfg, samples[i].concepts, derive_seed(cfg.seed, 0x1000000 + i));
  });

  std::vector<std::size_t> order = Rng(derive_seed(cfg.seed, 2)).permutation(samples.size());
  const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * static_cast<double>(total)));
  SynthDataset ds;
  ds.concept_names = default_concept_names(cfg.num_concepts);
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_train ? ds.train : ds.test).push_back(std::move(samples[order[i]]));
  return ds;
}

// ---------------------------------------------------------------------------
// Concept example sets for CAV training

/// For each concept, up to `per_side` embeddings with the concept present and
/// as many without, drawn by a seeded shuffle of the available samples.
inline std::vector<ConceptExampleSet> concept_example_sets(const std::vector<SynthSample>& samples,
                                                           const std::vector<Vec>& embeddings,
                                                           const std::vector<std::string>& names,
                                                           std::size_t per_side, std::uint64_t seed) {
  require(samples.size() == embeddings.size(), ErrorCode::ShapeMismatch, "one embedding per sample");
  require(!samples.empty(), ErrorCode::EmptyDataset, "no samples");
  const std::size_t nc = samples.front().concepts.size();
  require(names.size() == nc, ErrorCode::ShapeMismatch, "one name per concept");
  std::vector<ConceptExampleSet> sets;
  for (std::size_t c = 0; c < nc; ++c) {
    std::vector<std::size_t> present, absent;
    for (std::size_t s = 0; s < samples.size(); ++s) (samples[s].concepts[c] ? present : absent).push_back(s);
    require(!present.empty(), ErrorCode::MissingConcept, "concept '" + names[c] + "' is never present");
    require(!absent.empty(), ErrorCode::MissingConcept, "concept '" + names[c] + "' is always present");
    Rng rng(derive_seed(seed, c));
    rng.shuffle(present);
    rng.shuffle(absent);
    present.resize(std::min(present.size(), per_side));
    absent.resize(std::min(absent.size(), per_side));
    ConceptExampleSet set{names[c], {}, {}};
    for (auto s : present) set.positives.push_back(embeddings[s]);
    for (auto s : absent) set.negatives.push_back(embeddings[s]);
    sets.push_back(std::move(set));
  }
  return sets;
}

inline std::vector<Vec> embedding_rows(const std::vector<Tensor>& embeddings) {
  std::vector<Vec> rows;
  rows.reserve(embeddings.size());
  for (const auto& e : embeddings) rows.push_back(e.values());
  return rows;
}

/// Embeds every sample with `model` (under `mask`) and builds the sets.
inline std::vector<ConceptExampleSet> concept_example_sets(const Model& model, const PruneMask* mask,
                                                           const std::vector<SynthSample>& samples,
                                                           const std::vector<std::string>& names,
                                                           std::size_t per_side, std::uint64_t seed,
                                                           std::size_t threads = 1) {
  return concept_example_sets(samples, embedding_rows(embed_all(model, mask, samples, threads)), names, per_side,
                              seed);
}

// ---------------------------------------------------------------------------
// Dataset export / import: one 8-bit PGM per channel plane plus manifest.csv.

inline std::vector<std::uint8_t> quantize_unit(std::span<const double> values) {
  std::vector<std::uint8_t> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = std::clamp(values[i], 0.0, 1.0);
    out[i] = static_cast<std::uint8_t>(std::floor(255.0 * v + 0.5));
  }
  return out;
}

inline std::string encode_pgm(std::size_t height, std::size_t width, const std::vector<std::uint8_t>& pixels) {
  require(pixels.size() == height * width, ErrorCode::ShapeMismatch, "pgm payload size");
  std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(pixels.data()), pixels.size());
  return out;
}

struct Pgm {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;
};

inline Pgm decode_pgm(std::string_view bytes) {
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return std::string(bytes.substr(start, pos - start));
  };
  require(token() == "P5", ErrorCode::Io, "not a binary PGM");
  Pgm p;
  p.width = static_cast<std::size_t>(parse_int(token(), "pgm width"));
  p.height = static_cast<std::size_t>(parse_int(token(), "pgm height"));
  require(token() == "255", ErrorCode::Io, "only 8-bit PGM is supported");
  ++pos;
  require(bytes.size() - pos == p.width * p.height, ErrorCode::Io, "pgm payload size");
  p.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
  return p;
}

inline void export_dataset(const SynthDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> header{"sample_id", "label"};
  for (const auto& n : ds.concept_names) header.push_back(n);
  header.push_back("split");
  CsvWriter manifest(header);
  for (const auto* split : {&ds.train, &ds.test}) {
    for (const auto& s : *split) {
      const std::size_t h = s.image.dim(1), w = s.image.dim(2);
      for (std::size_t ch = 0; ch < kInputChannels; ++ch) {
        auto plane = s.image.data().subspan(ch * h * w, h * w);
        write_file_bytes(dir / ("sample_" + std::to_string(s.id) + "_c" + std::to_string(ch) + ".pgm"),
                         encode_pgm(h, w, quantize_unit(plane)));
      }
      std::vector<std::string> row{std::to_string(s.id), std::to_string(s.label)};
      for (auto b : s.concepts) row.push_back(std::to_string(b));
      row.push_back(split == &ds.train ? "train" : "test");
      manifest.row(row);
    }
  }
  manifest.save(dir / "manifest.csv");
}

/// Reads an exported dataset; pixels come back quantized to multiples of 1/255.
inline SynthDataset import_dataset(const std::filesystem::path& dir) {
  const CsvTable t = read_csv(dir / "manifest.csv");
  require(t.header.size() >= 3 && t.header[0] == "sample_id" && t.header[1] == "label" && t.header.back() == "split",
          ErrorCode::Io, "manifest.csv header must be sample_id,label,<concepts...>,split");
  SynthDataset ds;
  ds.concept_names.assign(t.header.begin() + 2, t.header.end() - 1);
  for (const auto& row : t.rows) {
    SynthSample s;
    s.id = static_cast<std::size_t>(parse_int(row[0], "sample_id"));
    s.label = static_cast<std::size_t>(parse_int(row[1], "label"));
    for (std::size_t c = 2; c + 1 < row.size(); ++c)
      s.concepts.push_back(static_cast<std::uint8_t>(parse_int(row[c], "concept bit")));
    std::vector<Pgm> planes;
    for (std::size_t ch = 0; ch < kInputChannels; ++ch)
      planes.push_back(decode_pgm(
          read_file_bytes(dir / ("sample_" + std::to_string(s.id) + "_c" + std::to_string(ch) + ".pgm"))));
    const std::size_t h = planes[0].height, w = planes[0].width;
    s.image = Tensor({kInputChannels, h, w});
    for (std::size_t ch = 0; ch < kInputChannels; ++ch) {
      require(planes[ch].height == h && planes[ch].width == w, ErrorCode::Io, "planes differ in size");
      for (std::size_t i = 0; i < h * w; ++i) s.image[ch * h * w + i] = planes[ch].pixels[i] / 255.0;
    }
    (row.back() == "train" ? ds.train : ds.test).push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Embedding CSV: sample_id, phi_0..phi_{l-1}[, concept_0..concept_{Nc-1}, label]

struct EmbeddingTable {
  std::vector<std::size_t> ids;
  std::vector<Vec> phi;
  std::vector<std::string> concept_names;  // empty when the file has no concept columns
  std::vector<std::vector<std::uint8_t>> concepts;
  std::vector<std::size_t> labels;  // empty when the file has no label column
};

inline std::string embedding_csv_text(const EmbeddingTable& t) {
  require(!t.phi.empty(), ErrorCode::EmptyDataset, "no embeddings to write");
  std::vector<std::string> header{"sample_id"};
  for (std::size_t j = 0; j < t.phi.front().size(); ++j) header.push_back("phi_" + std::to_string(j));
  for (const auto& n : t.concept_names) header.push_back(n);
  if (!t.labels.empty()) header.push_back("label");
  CsvWriter w(header);
  for (std::size_t i = 0; i < t.phi.size(); ++i) {
    std::vector<std::string> row{std::to_string(t.ids[i])};
    for (double v : t.phi[i]) row.push_back(format_double(v));
    if (!t.concept_names.empty())
      for (auto b : t.concepts[i]) row.push_back(std::to_string(b));
    if (!t.labels.empty()) row.push_back(std::to_string(t.labels[i]));
    w.row(row);
  }
  return w.text();
}

inline void write_embedding_csv(const std::filesystem::path& path, const EmbeddingTable& t) {
  write_file_bytes(path, embedding_csv_text(t));
}

inline EmbeddingTable embedding_table(const std::vector<SynthSample>& samples, const std::vector<Tensor>& embeddings,
                                      const std::vector<std::string>& concept_names) {
  EmbeddingTable t;
  t.concept_names = concept_names;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    t.ids.push_back(samples[i].id);
    t.phi.push_back(embeddings[i].values());
    t.concepts.push_back(samples[i].concepts);
    t.labels.push_back(samples[i].label);
  }
  return t;
}

inline EmbeddingTable read_embedding_csv(const std::filesystem::path& path) {
  const CsvTable csv = read_csv(path);
  require(!csv.header.empty() && csv.header[0] == "sample_id", ErrorCode::Io,
          path.string() + ": first column must be sample_id");
  std::size_t l = 0;
  while (1 + l < csv.header.size() && csv.header[1 + l] == "phi_" + std::to_string(l)) ++l;
  require(l > 0, ErrorCode::Io, path.string() + ": no phi_0.. columns");
  EmbeddingTable t;
  const bool has_label = csv.header.back() == "label";
  const std::size_t concept_end = csv.header.size() - (has_label ? 1 : 0);
  t.concept_names.assign(csv.header.begin() + static_cast<std::ptrdiff_t>(1 + l),
                         csv.header.begin() + static_cast<std::ptrdiff_t>(concept_end));
  for (const auto& row : csv.rows) {
    t.ids.push_back(static_cast<std::size_t>(parse_int(row[0], "sample_id")));
    Vec phi;
    for (std::size_t j = 0; j < l; ++j) phi.push_back(parse_double(row[1 + j], csv.header[1 + j]));
    t.phi.push_back(std::move(phi));
    std::vector<std::uint8_t> bits;
    for (std::size_t c = 1 + l; c < concept_end; ++c) {
      const long long b = parse_int(row[c], csv.header[c]);
      require(b == 0 || b == 1, ErrorCode::Io, "concept columns must be 0/1");
      bits.push_back(static_cast<std::uint8_t>(b));
    }
    t.concepts.push_back(std::move(bits));
    if (has_label) t.labels.push_back(static_cast<std::size_t>(parse_int(row.back(), "label")));
  }
  if (t.concept_names.empty()) t.concepts.clear();
  return t;
}

}  // namespace ltx
