#pragma once

// Experiment runner: JSON config -> generate -> train -> prune schedule ->
// per-round {embeddings, concept bank, PCBM, Grad-CAM} -> consistency report.
//
// Run directory (<output_dir>/<run_id>/):
//   config.json                  normalized config
//   init.ltxc                    theta_0
//   round_<i>/model.ltxc, mask.ltxm, record.json
//   round_<i>/embeddings_train.csv, embeddings_test.csv, concept_bank.ltxc
//   round_<i>/pcbm.ltxc, pcbm_metrics.json
//   round_<i>/heatmaps.ltxc, heatmaps/sample_<id>_class_<k>.pgm
//   report/consistency.csv, consistency.json, accuracy_curve.csv,
//          topk_concepts.csv, topk_table.md, panels/sample_<id>_class_<k>.pgm
//
// Every stage reads from `input` and writes to `output`. They are the same
// directory except when a stage is re-run over existing outputs without
// force, in which case output is a fresh rerun_<timestamp>_<stage>/
// subdirectory and nothing already on disk is modified.

#include <chrono>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "ltx/concepts.hpp"
#include "ltx/consistency.hpp"
#include "ltx/container.hpp"
#include "ltx/error.hpp"
#include "ltx/gradcam.hpp"
#include "ltx/network.hpp"
#include "ltx/parallel.hpp"
#include "ltx/pcbm.hpp"
#include "ltx/pruning.hpp"
#include "ltx/rng.hpp"
#include "ltx/synth.hpp"

namespace ltx {

namespace fs = std::filesystem;

enum class ConceptMode { Annotated, Cav };

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string run_id = "default";
  std::string output_dir = "runs";

  std::string dataset_source = "synthetic";  // synthetic | directory
  std::string dataset_path;                  // for directory
  GeneratorConfig generator;
  std::vector<std::string> concept_names;  // empty: concept_<i>
  std::vector<std::string> class_names;    // empty: class_<k>

  TrainConfig train{0.01, 32};
  PruneSchedule schedule{0.10, 15, 300, true, PruneScope::Conv, Ranking::Global};

  ConceptMode concept_mode = ConceptMode::Annotated;
  bool standardize = true;
  std::size_t examples_per_concept = 50;
  SvmConfig svm;
  PredictorConfig predictor;

  PcbmConfig pcbm;
  std::size_t top_k = 3;

  std::string cam_layer = "conv2";
  ChannelPooling cam_pooling = ChannelPooling::Mean;
  std::vector<std::size_t> cam_sample_ids;  // empty: first test sample of each class
  std::vector<std::size_t> cam_classes;     // empty: each sample's own label

  std::size_t num_classes() const { return generator.num_classes; }
  std::size_t num_concepts() const { return generator.num_concepts; }
};

// ---------------------------------------------------------------------------
// Config parsing. Every failure here is ErrorCode::Config (CLI exit 2).

namespace detail {

[[noreturn]] inline void config_error(const std::string& msg) { fail(ErrorCode::Config, msg); }

inline void check_keys(const nlohmann::json& j, const std::string& where, const std::set<std::string>& allowed) {
  if (!j.is_object()) config_error(where + " must be an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) config_error("unknown key '" + key + "' in " + where);
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    config_error(where + "." + key + " has the wrong type");
  }
}

inline std::string scope_name(PruneScope s) { return s == PruneScope::Conv ? "conv" : "conv_and_head"; }
inline std::string ranking_name(Ranking r) { return r == Ranking::Global ? "global" : "per_layer"; }

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  using detail::config_error;
  using detail::read;
  ExperimentConfig c;
  detail::check_keys(j, "config",
                     {"seed", "run_id", "output_dir", "dataset", "model", "pruning", "concepts", "pcbm", "gradcam"});
  read(j, "seed", c.seed, "config");
  read(j, "run_id", c.run_id, "config");
  read(j, "output_dir", c.output_dir, "config");
  if (c.run_id.empty() || c.run_id.find('/') != std::string::npos || c.run_id == "." || c.run_id == "..")
    config_error("run_id must be a plain directory name");

  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    detail::check_keys(d, "dataset",
                       {"source", "path", "height", "width", "num_concepts", "num_classes", "samples_per_class",
                        "noise_std", "background", "train_fraction", "class_rules", "concept_names", "class_names"});
    read(d, "source", c.dataset_source, "dataset");
    read(d, "path", c.dataset_path, "dataset");
    read(d, "height", c.generator.height, "dataset");
    read(d, "width", c.generator.width, "dataset");
    read(d, "num_concepts", c.generator.num_concepts, "dataset");
    read(d, "num_classes", c.generator.num_classes, "dataset");
    read(d, "samples_per_class", c.generator.samples_per_class, "dataset");
    read(d, "noise_std", c.generator.noise_std, "dataset");
    read(d, "background", c.generator.background, "dataset");
    read(d, "train_fraction", c.generator.train_fraction, "dataset");
    read(d, "class_rules", c.generator.class_rules, "dataset");
    read(d, "concept_names", c.concept_names, "dataset");
    read(d, "class_names", c.class_names, "dataset");
  }
  if (c.dataset_source != "synthetic" && c.dataset_source != "directory")
    config_error("dataset.source must be 'synthetic' or 'directory'");
  if (c.dataset_source == "directory" && c.dataset_path.empty()) config_error("dataset.path is required");
  c.generator.seed = c.seed;
  try {
    c.generator.validate();
  } catch (const Error& e) {
    config_error(std::string("dataset: ") + e.what());
  }
  if (c.concept_names.empty()) c.concept_names = default_concept_names(c.num_concepts());
  if (c.class_names.empty()) c.class_names = default_class_names(c.num_classes());
  if (c.concept_names.size() != c.num_concepts())
    config_error("dataset.concept_names needs " + std::to_string(c.num_concepts()) + " entries");
  if (c.class_names.size() != c.num_classes())
    config_error("dataset.class_names needs " + std::to_string(c.num_classes()) + " entries");
  if (std::set<std::string>(c.concept_names.begin(), c.concept_names.end()).size() != c.concept_names.size())
    config_error("dataset.concept_names must be distinct");

  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::check_keys(m, "model", {"lr", "batch_size"});
    read(m, "lr", c.train.lr, "model");
    read(m, "batch_size", c.train.batch_size, "model");
  }
  if (!(c.train.lr > 0.0) || c.train.batch_size < 1) config_error("model needs lr > 0 and batch_size >= 1");

  if (j.contains("pruning")) {
    const auto& p = j["pruning"];
    detail::check_keys(p, "pruning", {"fraction", "rounds", "train_iters", "rewind", "scope", "ranking"});
    read(p, "fraction", c.schedule.fraction, "pruning");
    read(p, "rounds", c.schedule.rounds, "pruning");
    read(p, "train_iters", c.schedule.train_iters, "pruning");
    read(p, "rewind", c.schedule.rewind, "pruning");
    std::string scope = detail::scope_name(c.schedule.scope), ranking = detail::ranking_name(c.schedule.ranking);
    read(p, "scope", scope, "pruning");
    read(p, "ranking", ranking, "pruning");
    if (scope != "conv" && scope != "conv_and_head") config_error("pruning.scope must be conv or conv_and_head");
    if (ranking != "global" && ranking != "per_layer") config_error("pruning.ranking must be global or per_layer");
    c.schedule.scope = scope == "conv" ? PruneScope::Conv : PruneScope::ConvAndHead;
    c.schedule.ranking = ranking == "global" ? Ranking::Global : Ranking::PerLayer;
  }
  try {
    c.schedule.validate();
  } catch (const Error& e) {
    config_error(std::string("pruning: ") + e.what());
  }

  if (j.contains("concepts")) {
    const auto& k = j["concepts"];
    detail::check_keys(k, "concepts", {"mode", "standardize", "examples_per_concept", "svm", "predictor"});
    std::string mode = "annotated";
    read(k, "mode", mode, "concepts");
    if (mode != "annotated" && mode != "cav") config_error("concepts.mode must be annotated or cav");
    c.concept_mode = mode == "cav" ? ConceptMode::Cav : ConceptMode::Annotated;
    read(k, "standardize", c.standardize, "concepts");
    read(k, "examples_per_concept", c.examples_per_concept, "concepts");
    if (k.contains("svm")) {
      detail::check_keys(k["svm"], "concepts.svm", {"reg", "epochs", "batch_size"});
      read(k["svm"], "reg", c.svm.reg, "concepts.svm");
      read(k["svm"], "epochs", c.svm.epochs, "concepts.svm");
      read(k["svm"], "batch_size", c.svm.batch_size, "concepts.svm");
    }
    if (k.contains("predictor")) {
      detail::check_keys(k["predictor"], "concepts.predictor", {"epochs", "lr"});
      read(k["predictor"], "epochs", c.predictor.epochs, "concepts.predictor");
      read(k["predictor"], "lr", c.predictor.lr, "concepts.predictor");
    }
  }
  if (c.examples_per_concept < 1) config_error("concepts.examples_per_concept must be >= 1");
  if (!(c.svm.reg > 0.0) || c.svm.epochs < 1) config_error("concepts.svm needs reg > 0 and epochs >= 1");
  if (!(c.predictor.lr > 0.0) || c.predictor.epochs < 1)
    config_error("concepts.predictor needs lr > 0 and epochs >= 1");

  if (j.contains("pcbm")) {
    const auto& p = j["pcbm"];
    detail::check_keys(p, "pcbm", {"lambda", "alpha", "epochs", "lr", "batch_size", "top_k"});
    read(p, "lambda", c.pcbm.lambda, "pcbm");
    read(p, "alpha", c.pcbm.alpha, "pcbm");
    read(p, "epochs", c.pcbm.epochs, "pcbm");
    read(p, "lr", c.pcbm.lr, "pcbm");
    read(p, "batch_size", c.pcbm.batch_size, "pcbm");
    read(p, "top_k", c.top_k, "pcbm");
  }
  try {
    c.pcbm.validate();
  } catch (const Error& e) {
    config_error(std::string("pcbm: ") + e.what());
  }
  if (c.top_k < 1 || c.top_k > c.num_concepts())
    config_error("pcbm.top_k must be in [1, " + std::to_string(c.num_concepts()) + "]");

  if (j.contains("gradcam")) {
    const auto& g = j["gradcam"];
    detail::check_keys(g, "gradcam", {"layer", "pooling", "sample_ids", "classes"});
    read(g, "layer", c.cam_layer, "gradcam");
    std::string pooling = "mean";
    read(g, "pooling", pooling, "gradcam");
    if (pooling != "mean" && pooling != "sum") config_error("gradcam.pooling must be mean or sum");
    c.cam_pooling = pooling == "sum" ? ChannelPooling::Sum : ChannelPooling::Mean;
    read(g, "sample_ids", c.cam_sample_ids, "gradcam");
    read(g, "classes", c.cam_classes, "gradcam");
  }
  if (c.cam_layer != "conv1" && c.cam_layer != "conv2") config_error("gradcam.layer must be conv1 or conv2");
  for (auto k : c.cam_classes)
    if (k >= c.num_classes()) config_error("gradcam.classes entry " + std::to_string(k) + " is not a class");
  return c;
}

inline nlohmann::json config_to_json(const ExperimentConfig& c) {
  nlohmann::json dataset = {{"source", c.dataset_source},
                            {"height", c.generator.height},
                            {"width", c.generator.width},
                            {"num_concepts", c.generator.num_concepts},
                            {"num_classes", c.generator.num_classes},
                            {"samples_per_class", c.generator.samples_per_class},
                            {"noise_std", c.generator.noise_std},
                            {"background", c.generator.background},
                            {"train_fraction", c.generator.train_fraction},
                            {"class_rules", c.generator.rules()},
                            {"concept_names", c.concept_names},
                            {"class_names", c.class_names}};
  if (c.dataset_source == "directory") dataset["path"] = c.dataset_path;
  return {{"seed", c.seed},
          {"run_id", c.run_id},
          {"output_dir", c.output_dir},
          {"dataset", dataset},
          {"model", {{"lr", c.train.lr}, {"batch_size", c.train.batch_size}}},
          {"pruning",
           {{"fraction", c.schedule.fraction},
            {"rounds", c.schedule.rounds},
            {"train_iters", c.schedule.train_iters},
            {"rewind", c.schedule.rewind},
            {"scope", detail::scope_name(c.schedule.scope)},
            {"ranking", detail::ranking_name(c.schedule.ranking)}}},
          {"concepts",
           {{"mode", c.concept_mode == ConceptMode::Cav ? "cav" : "annotated"},
            {"standardize", c.standardize},
            {"examples_per_concept", c.examples_per_concept},
            {"svm", {{"reg", c.svm.reg}, {"epochs", c.svm.epochs}, {"batch_size", c.svm.batch_size}}},
            {"predictor", {{"epochs", c.predictor.epochs}, {"lr", c.predictor.lr}}}}},
          {"pcbm",
           {{"lambda", c.pcbm.lambda},
            {"alpha", c.pcbm.alpha},
            {"epochs", c.pcbm.epochs},
            {"lr", c.pcbm.lr},
            {"batch_size", c.pcbm.batch_size},
            {"top_k", c.top_k}}},
          {"gradcam",
           {{"layer", c.cam_layer},
            {"pooling", c.cam_pooling == ChannelPooling::Sum ? "sum" : "mean"},
            {"sample_ids", c.cam_sample_ids},
            {"classes", c.cam_classes}}}};
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_file_bytes(path);
  } catch (const Error& e) {
    detail::config_error(std::string("cannot read config: ") + e.what());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    detail::config_error(path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------
// Seeds, one independent stream per purpose and round.

inline std::uint64_t init_seed(std::uint64_t seed) { return derive_seed(seed, 0x200); }
inline std::uint64_t concept_seed(std::uint64_t seed, std::size_t round) { return derive_seed(seed, 0x300 + round); }
inline std::uint64_t pcbm_seed(std::uint64_t seed, std::size_t round) { return derive_seed(seed, 0x400 + round); }

// ---------------------------------------------------------------------------
// Stages

enum class Stage { Train, Prune, Concepts, Pcbm, Gradcam, Report };

inline const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> s{Stage::Train, Stage::Prune,   Stage::Concepts,
                                    Stage::Pcbm,  Stage::Gradcam, Stage::Report};
  return s;
}

inline std::string stage_name(Stage s) {
  switch (s) {
    case Stage::Train: return "train";
    case Stage::Prune: return "prune";
    case Stage::Concepts: return "concepts";
    case Stage::Pcbm: return "pcbm";
    case Stage::Gradcam: return "gradcam";
    case Stage::Report: return "report";
  }
  return "?";
}

/// Raises MissingArtifact naming the file when it does not exist.
inline const fs::path& need(const fs::path& p) {
  require(fs::exists(p), ErrorCode::MissingArtifact,
          "missing artifact " + p.filename().string() + " (" + p.string() + ")");
  return p;
}

inline std::string heatmap_key(std::size_t sample_id, std::size_t target_class) {
  return "sample_" + std::to_string(sample_id) + "_class_" + std::to_string(target_class);
}

class Pipeline {
 public:
  Pipeline(ExperimentConfig cfg, fs::path input, fs::path output, std::size_t threads)
      : cfg_(std::move(cfg)), in_(std::move(input)), out_(std::move(output)), threads_(std::max<std::size_t>(1, threads)) {}

  const ExperimentConfig& config() const { return cfg_; }
  const fs::path& output_dir() const { return out_; }

  /// Cross-references that need the dataset (Grad-CAM sample ids), checked
  /// before anything is written.
  void validate() { (void)cam_targets(); }

  void run_stage(Stage s) {
    validate();
    fs::create_directories(out_);
    // The output location is not part of the stored config, so moving a run
    // (or writing it under another --out) does not change any byte.
    nlohmann::json stored = config_to_json(cfg_);
    stored.erase("output_dir");
    const std::string cfg_text = stored.dump(2) + "\n";
    if (!fs::exists(out_ / "config.json")) write_file_bytes(out_ / "config.json", cfg_text);
    switch (s) {
      case Stage::Train: return train();
      case Stage::Prune: return prune();
      case Stage::Concepts: return concepts();
      case Stage::Pcbm: return pcbm();
      case Stage::Gradcam: return gradcam();
      case Stage::Report: return report();
    }
  }

  void run_all() {
    for (Stage s : all_stages()) run_stage(s);
  }

  const SynthDataset& dataset() {
    if (!dataset_) {
      if (cfg_.dataset_source == "directory") {
        dataset_ = import_dataset(cfg_.dataset_path);
      } else {
        dataset_ = generate(cfg_.generator, threads_);
        dataset_->concept_names = cfg_.concept_names;
      }
      validate_dataset(*dataset_);
    }
    return *dataset_;
  }

  /// (sample id, class) pairs explained in every round.
  std::vector<std::pair<std::size_t, std::size_t>> cam_targets() {
    const auto& test = dataset().test;
    std::vector<std::size_t> ids = cfg_.cam_sample_ids;
    if (ids.empty()) {
      for (std::size_t k = 0; k < cfg_.num_classes(); ++k)
        for (const auto& s : test)
          if (s.label == k) {
            ids.push_back(s.id);
            break;
          }
    }
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (auto id : ids) {
      const SynthSample& s = test_sample(id);
      if (cfg_.cam_classes.empty()) {
        out.emplace_back(id, s.label);
      } else {
        for (auto k : cfg_.cam_classes) out.emplace_back(id, k);
      }
    }
    return out;
  }

 private:
  fs::path round_in(std::size_t r) const { return round_directory(in_, r); }
  fs::path round_out(std::size_t r) const { return round_directory(out_, r); }

  void validate_dataset(const SynthDataset& ds) const {
    require(!ds.train.empty() && !ds.test.empty(), ErrorCode::EmptyDataset, "dataset needs train and test samples");
    require(ds.concept_names.size() == cfg_.num_concepts(), ErrorCode::Config, "dataset concept count differs from config");
    for (const auto* split : {&ds.train, &ds.test})
      for (const auto& s : *split)
        require(s.label < cfg_.num_classes(), ErrorCode::Config, "dataset label exceeds num_classes");
  }

  const SynthSample& test_sample(std::size_t id) {
    for (const auto& s : dataset().test)
      if (s.id == id) return s;
    fail(ErrorCode::Config, "gradcam.sample_ids: " + std::to_string(id) + " is not a test sample");
  }

  void train() {
    const auto& ds = dataset();
    const Model init = init_params(init_seed(cfg_.seed), cfg_.num_classes());
    save_checkpoint(init, out_ / "init.ltxc");
    PruneSchedule one = cfg_.schedule;
    one.rounds = 1;
    LotteryState state = LotteryState::start(init, one, cfg_.train, cfg_.seed);
    run_schedule(state, ds.train, ds.test, threads_, out_);
  }

  void prune() {
    const auto& ds = dataset();
    const Model init = load_checkpoint(need(in_ / "init.ltxc"));
    LotteryState state = LotteryState::start(init, cfg_.schedule, cfg_.train, cfg_.seed);
    state.model = load_checkpoint(need(round_in(1) / "model.ltxc"), init.arch);
    state.mask = load_mask(need(round_in(1) / "mask.ltxm"));
    validate_mask(state.model, state.mask);
    state.round = 1;
    run_schedule(state, ds.train, ds.test, threads_, out_);
  }

  std::pair<Model, PruneMask> load_round_model(std::size_t r) const {
    Model m = load_checkpoint(need(round_in(r) / "model.ltxc"));
    PruneMask mask = load_mask(need(round_in(r) / "mask.ltxm"));
    validate_mask(m, mask);
    require(m.num_classes() == cfg_.num_classes(), ErrorCode::ArchitectureMismatch,
            "round " + std::to_string(r) + " model has a different class count");
    return {std::move(m), std::move(mask)};
  }

  void concepts() {
    const auto& ds = dataset();
    for (std::size_t r = 1; r <= cfg_.schedule.rounds; ++r) {
      const auto [model, mask] = load_round_model(r);
      fs::create_directories(round_out(r));
      const auto train_rows = embedding_rows(embed_all(model, &mask, ds.train, threads_));
      const auto test_rows = embedding_rows(embed_all(model, &mask, ds.test, threads_));
      write_embedding_csv(round_out(r) / "embeddings_train.csv", table(ds.train, train_rows));
      write_embedding_csv(round_out(r) / "embeddings_test.csv", table(ds.test, test_rows));
      const std::uint64_t seed = concept_seed(cfg_.seed, r);
      std::optional<ConceptBank> bank;
      if (cfg_.concept_mode == ConceptMode::Annotated) {
        std::vector<std::vector<std::uint8_t>> bits;
        for (const auto& s : ds.train) bits.push_back(s.concepts);
        bank = train_concept_predictor(train_rows, bits, cfg_.concept_names, cfg_.predictor, seed, threads_,
                                       cfg_.standardize);
      } else {
        const auto sets = concept_example_sets(ds.train, train_rows, cfg_.concept_names, cfg_.examples_per_concept, seed);
        bank = build_concept_bank(sets, cfg_.svm, seed, threads_, cfg_.standardize);
      }
      write_container(round_out(r) / "concept_bank.ltxc", concept_bank_to_container(*bank));
    }
  }

  EmbeddingTable table(const std::vector<SynthSample>& samples, const std::vector<Vec>& rows) const {
    EmbeddingTable t;
    t.concept_names = cfg_.concept_names;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      t.ids.push_back(samples[i].id);
      t.phi.push_back(rows[i]);
      t.concepts.push_back(samples[i].concepts);
      t.labels.push_back(samples[i].label);
    }
    return t;
  }

  void pcbm() {
    for (std::size_t r = 1; r <= cfg_.schedule.rounds; ++r) {
      const ConceptBank bank = concept_bank_from_container(read_container(need(round_in(r) / "concept_bank.ltxc")));
      const EmbeddingTable train = read_embedding_csv(need(round_in(r) / "embeddings_train.csv"));
      const EmbeddingTable test = read_embedding_csv(need(round_in(r) / "embeddings_test.csv"));
      require(train.labels.size() == train.phi.size() && test.labels.size() == test.phi.size(), ErrorCode::Io,
              "embedding files need a label column");
      const auto c_train = concept_values(bank, train.phi);
      const auto c_test = concept_values(bank, test.phi);
      const PcbmModel m =
          train_pcbm(c_train, train.labels, cfg_.num_classes(), cfg_.pcbm, pcbm_seed(cfg_.seed, r), bank.names());
      fs::create_directories(round_out(r));
      write_container(round_out(r) / "pcbm.ltxc", pcbm_to_container(m));
      const nlohmann::json metrics = {{"round", r},
                                      {"train_accuracy", pcbm_accuracy(m, c_train, train.labels)},
                                      {"test_accuracy", pcbm_accuracy(m, c_test, test.labels)},
                                      {"objective", m.objective_history.back()}};
      write_file_bytes(round_out(r) / "pcbm_metrics.json", metrics.dump(2) + "\n");
    }
  }

  void gradcam() {
    const auto targets = cam_targets();
    for (std::size_t r = 1; r <= cfg_.schedule.rounds; ++r) {
      const auto [model, mask] = load_round_model(r);
      std::vector<Heatmap> maps(targets.size());
      std::vector<const SynthSample*> samples;
      for (const auto& [id, k] : targets) samples.push_back(&test_sample(id));
      parallel_for(targets.size(), threads_, [&](std::size_t i) {
        maps[i] = grad_cam(model, &mask, samples[i]->image, targets[i].second, cfg_.cam_layer, cfg_.cam_pooling);
        maps[i].round = r;
      });
      Container c;
      nlohmann::json entries = nlohmann::json::array();
      const fs::path dir = round_out(r) / "heatmaps";
      fs::create_directories(dir);
      for (std::size_t i = 0; i < targets.size(); ++i) {
        const std::string key = heatmap_key(targets[i].first, targets[i].second);
        entries.push_back({{"sample_id", targets[i].first}, {"class", targets[i].second}});
        c.records.push_back(Record{key, maps[i].values.shape(), maps[i].values.values(), {}});
        heatmap_to_pgm(maps[i], dir / (key + ".pgm"));
      }
      c.descriptor = {{"kind", "heatmaps"},
                      {"layer", cfg_.cam_layer},
                      {"pooling", cfg_.cam_pooling == ChannelPooling::Sum ? "sum" : "mean"},
                      {"entries", entries}};
      write_container(round_out(r) / "heatmaps.ltxc", c);
    }
  }

  RoundArtifacts load_round_artifacts(std::size_t r, std::vector<std::string>& missing) const {
    RoundArtifacts a;
    const fs::path dir = round_in(r);
    bool ok = true;
    for (const char* f : {"record.json", "pcbm.ltxc", "heatmaps.ltxc"})
      if (!fs::exists(dir / f)) {
        missing.push_back("round_" + std::to_string(r) + "/" + f);
        ok = false;
      }
    if (!ok) return a;
    a.record = RoundRecord::from_json(nlohmann::json::parse(read_file_bytes(dir / "record.json")));
    a.pcbm = pcbm_from_container(read_container(dir / "pcbm.ltxc"));
    const Container c = read_container(dir / "heatmaps.ltxc");
    require(c.descriptor.value("kind", "") == "heatmaps", ErrorCode::ArchitectureMismatch,
            "heatmaps.ltxc does not hold heatmaps");
    const auto& entries = c.descriptor.at("entries");
    require(entries.size() == c.records.size(), ErrorCode::ArchitectureMismatch, "heatmap entry count");
    for (std::size_t i = 0; i < c.records.size(); ++i)
      a.heatmaps.push_back({entries[i].at("sample_id").get<std::size_t>(), entries[i].at("class").get<std::size_t>(),
                            Tensor(c.records[i].shape, c.records[i].f64)});
    return a;
  }

  void report() {
    std::vector<std::string> missing;
    std::vector<RoundArtifacts> rounds;
    for (std::size_t r = 1; r <= cfg_.schedule.rounds; ++r) rounds.push_back(load_round_artifacts(r, missing));
    if (!missing.empty()) {
      std::string list;
      for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
      fail(ErrorCode::MissingArtifact, "missing round artifacts: " + list);
    }
    const fs::path dir = out_ / "report";
    const ConsistencyReport rep = build_report(rounds, cfg_.top_k, cfg_.class_names);
    write_report(dir, rep);
    write_file_bytes(dir / "topk_concepts.csv", topk_concepts_csv(rounds, rep.k, cfg_.class_names));

    fs::create_directories(dir / "panels");
    const auto& base = rounds.front().heatmaps;
    for (std::size_t i = 0; i < base.size(); ++i) {
      std::vector<Tensor> strip;
      for (const auto& r : rounds) {
        const auto it = std::find_if(r.heatmaps.begin(), r.heatmaps.end(), [&](const HeatmapEntry& h) {
          return h.sample_id == base[i].sample_id && h.target_class == base[i].target_class;
        });
        strip.push_back(it->values);  // presence checked by build_report
      }
      const Tensor panel = heatmap_panel(test_sample(base[i].sample_id).image, strip);
      write_file_bytes(dir / "panels" / (heatmap_key(base[i].sample_id, base[i].target_class) + ".pgm"),
                       heatmap_pgm_bytes(panel));
    }
  }

  ExperimentConfig cfg_;
  fs::path in_;
  fs::path out_;
  std::size_t threads_;
  std::optional<SynthDataset> dataset_;
};

// ---------------------------------------------------------------------------
// Run directory resolution

/// True when `stage` already has outputs under `run_dir`.
inline bool stage_outputs_exist(const fs::path& run_dir, std::optional<Stage> stage) {
  if (!stage) return fs::exists(run_dir) && !fs::is_empty(run_dir);
  const fs::path r1 = round_directory(run_dir, 1);
  switch (*stage) {
    case Stage::Train: return fs::exists(run_dir / "init.ltxc") || fs::exists(r1 / "model.ltxc");
    case Stage::Prune: return fs::exists(round_directory(run_dir, 2) / "model.ltxc");
    case Stage::Concepts: return fs::exists(r1 / "concept_bank.ltxc");
    case Stage::Pcbm: return fs::exists(r1 / "pcbm.ltxc");
    case Stage::Gradcam: return fs::exists(r1 / "heatmaps.ltxc");
    case Stage::Report: return fs::exists(run_dir / "report" / "consistency.csv");
  }
  return false;
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%dT%H%M%SZ", &tm);
  return buf;
}

struct RunLocation {
  fs::path input;
  fs::path output;
  bool rerun = false;
};

/// Where a stage (or a full run when `stage` is empty) reads and writes.
inline RunLocation resolve_run_location(const fs::path& run_dir, std::optional<Stage> stage, bool force) {
  if (force || !stage_outputs_exist(run_dir, stage)) return {run_dir, run_dir, false};
  const std::string tag = "rerun_" + utc_timestamp() + "_" + (stage ? stage_name(*stage) : "run");
  fs::path out = run_dir / tag;
  for (int n = 2; fs::exists(out); ++n) out = run_dir / (tag + "_" + std::to_string(n));
  // A full re-run is self-contained; a single stage reads the primary run.
  return {stage ? run_dir : out, out, true};
}

}  // namespace ltx
