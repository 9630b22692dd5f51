#pragma once

// Iterative magnitude pruning with rewinding to the initial weights.
//
// Round 1 trains the dense network from theta_0. Every later round first
// removes floor(p * surviving) of the surviving prunable weights with the
// smallest magnitude (taken from the previous round's trained weights),
// resets the survivors to theta_0 (or keeps the trained values when rewind
// is off), then trains for j SGD iterations. Round i therefore keeps about
// (1-p)^(i-1) of the prunable weights.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ltx/container.hpp"
#include "ltx/error.hpp"
#include "ltx/mask.hpp"
#include "ltx/network.hpp"
#include "ltx/rng.hpp"

namespace ltx {

enum class PruneScope { Conv, ConvAndHead };
enum class Ranking { Global, PerLayer };

struct PruneSchedule {
  double fraction = 0.10;
  std::size_t rounds = 15;
  std::size_t train_iters = 200;
  bool rewind = true;
  PruneScope scope = PruneScope::Conv;
  Ranking ranking = Ranking::Global;

  void validate() const {
    require(fraction > 0.0 && fraction < 1.0, ErrorCode::InvalidArgument, "prune fraction must be in (0, 1)");
    require(rounds >= 1, ErrorCode::InvalidArgument, "rounds must be >= 1");
    require(train_iters >= 1, ErrorCode::InvalidArgument, "train_iters must be >= 1");
  }
};

inline std::vector<std::string> prunable_parameters(PruneScope scope) {
  std::vector<std::string> names{std::string(kConv1Weight), std::string(kConv2Weight)};
  if (scope == PruneScope::ConvAndHead) names.emplace_back(kHeadWeight);
  return names;
}

inline PruneMask full_mask(const Model& model, PruneScope scope = PruneScope::Conv) {
  std::vector<MaskTensor> entries;
  for (const auto& name : prunable_parameters(scope)) {
    const Tensor& p = model.params.at(name);
    entries.push_back(MaskTensor{name, p.shape(), std::vector<std::uint8_t>(p.size(), 1)});
  }
  return PruneMask(std::move(entries));
}

/// Clears the floor(fraction * surviving) smallest-magnitude surviving
/// weights. Ties are broken by (layer order, flat index) ascending.
inline PruneMask magnitude_mask(const Model& model, const PruneMask& prev, double fraction,
                                Ranking ranking = Ranking::Global) {
  require(std::isfinite(fraction) && fraction >= 0.0 && fraction < 1.0, ErrorCode::InvalidArgument,
          "prune fraction must be in [0, 1)");
  validate_mask(model, prev);

  struct Candidate {
    double magnitude;
    std::size_t layer;
    std::size_t index;
  };
  auto by_magnitude = [](const Candidate& a, const Candidate& b) {
    if (a.magnitude != b.magnitude) return a.magnitude < b.magnitude;
    if (a.layer != b.layer) return a.layer < b.layer;
    return a.index < b.index;
  };

  PruneMask next = prev;
  auto prune = [&](std::vector<Candidate>& pool) {
    const auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(pool.size())));
    if (count == 0) return;
    std::partial_sort(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(count), pool.end(), by_magnitude);
    for (std::size_t i = 0; i < count; ++i) next.entries()[pool[i].layer].bits[pool[i].index] = 0;
  };

  std::vector<Candidate> pool;
  for (std::size_t l = 0; l < prev.entries().size(); ++l) {
    const MaskTensor& e = prev.entries()[l];
    const Tensor& p = model.params.at(e.name);
    for (std::size_t i = 0; i < e.bits.size(); ++i)
      if (e.bits[i]) pool.push_back({std::abs(p[i]), l, i});
    if (ranking == Ranking::PerLayer) {
      prune(pool);
      pool.clear();
    }
  }
  if (ranking == Ranking::Global) prune(pool);
  return next;
}

/// Survivors take their theta_0 values bit for bit, masked weights become
/// exactly 0, and unmasked groups (biases, unpruned head) are reset to theta_0.
inline Model rewind(const Model& model, const Model& init, const PruneMask& mask) {
  require(model.arch == init.arch, ErrorCode::ArchitectureMismatch, "initial checkpoint architecture differs");
  Model out = init;
  apply_mask(out, mask);
  return out;
}

inline Model rewind(const Model& model, const std::filesystem::path& init_checkpoint, const PruneMask& mask) {
  return rewind(model, load_checkpoint(init_checkpoint, model.arch), mask);
}

// ---------------------------------------------------------------------------
// Mask files: LTXC container with u8 payloads.

inline Container mask_to_container(const PruneMask& mask) {
  Container c;
  c.descriptor = {{"kind", "mask"}};
  c.dtype = DType::U8;
  for (const auto& e : mask.entries()) c.records.push_back(Record{e.name, e.shape, {}, e.bits});
  return c;
}

inline PruneMask mask_from_container(const Container& c) {
  require(c.descriptor.value("kind", "") == "mask" && c.dtype == DType::U8, ErrorCode::ArchitectureMismatch,
          "container does not hold a mask");
  std::vector<MaskTensor> entries;
  for (const auto& r : c.records) entries.push_back(MaskTensor{r.name, r.shape, r.u8});
  return PruneMask(std::move(entries));
}

inline void save_mask(const PruneMask& mask, const std::filesystem::path& path) {
  write_container(path, mask_to_container(mask));
}

inline PruneMask load_mask(const std::filesystem::path& path) { return mask_from_container(read_container(path)); }

// ---------------------------------------------------------------------------
// Round state machine

struct RoundRecord {
  std::size_t round = 0;
  std::size_t remaining_weights = 0;
  std::size_t total_weights = 0;
  double pct_weights_remaining = 100.0;
  double test_accuracy = 0.0;
  double final_batch_loss = 0.0;
  bool rewound = true;
  std::string checkpoint = "model.ltxc";
  std::string mask = "mask.ltxm";

  nlohmann::json to_json() const {
    return {{"round", round},
            {"remaining_weights", remaining_weights},
            {"total_weights", total_weights},
            {"pct_weights_remaining", pct_weights_remaining},
            {"test_accuracy", test_accuracy},
            {"final_batch_loss", final_batch_loss},
            {"rewound", rewound},
            {"checkpoint", checkpoint},
            {"mask", mask}};
  }

  static RoundRecord from_json(const nlohmann::json& j) {
    RoundRecord r;
    r.round = j.at("round").get<std::size_t>();
    r.remaining_weights = j.at("remaining_weights").get<std::size_t>();
    r.total_weights = j.at("total_weights").get<std::size_t>();
    r.pct_weights_remaining = j.at("pct_weights_remaining").get<double>();
    r.test_accuracy = j.at("test_accuracy").get<double>();
    r.final_batch_loss = j.at("final_batch_loss").get<double>();
    r.rewound = j.at("rewound").get<bool>();
    r.checkpoint = j.at("checkpoint").get<std::string>();
    r.mask = j.at("mask").get<std::string>();
    return r;
  }

  friend bool operator==(const RoundRecord&, const RoundRecord&) = default;
};

struct LotteryState {
  Model init;   // theta_0
  Model model;  // trained weights of the latest completed round
  PruneMask mask;
  std::size_t round = 0;  // completed rounds
  PruneSchedule schedule;
  TrainConfig train;
  std::uint64_t seed = 0;

  static LotteryState start(Model init, PruneSchedule schedule, TrainConfig train, std::uint64_t seed) {
    schedule.validate();
    LotteryState s;
    s.mask = full_mask(init, schedule.scope);
    s.model = init;
    s.init = std::move(init);
    s.schedule = schedule;
    s.train = train;
    s.seed = seed;
    return s;
  }
};

// Called with the freshly pruned and rewound model, before training.
using RewindObserver = std::function<void(std::size_t round, const Model& model, const PruneMask& mask)>;

inline std::uint64_t round_training_seed(std::uint64_t seed, std::size_t round) {
  return derive_seed(seed, 0x10000 + round);
}

/// Advances `state` by one round and returns its record.
template <class Samples>
RoundRecord run_round(LotteryState& state, const Samples& train_set, const Samples& test_set,
                      std::size_t threads = 1, const RewindObserver& observer = {}) {
  const std::size_t round = state.round + 1;
  if (round > 1) {
    state.mask = magnitude_mask(state.model, state.mask, state.schedule.fraction, state.schedule.ranking);
    if (state.schedule.rewind) {
      state.model = rewind(state.model, state.init, state.mask);
    } else {
      apply_mask(state.model, state.mask);
    }
  }
  if (observer) observer(round, state.model, state.mask);

  BatchSampler sampler(train_set.size(), round_training_seed(state.seed, round));
  double last_loss = 0.0;
  for (std::size_t it = 0; it < state.schedule.train_iters; ++it)
    last_loss = train_batch(state.model, &state.mask, train_set, sampler.next(state.train.batch_size),
                            state.train.lr, threads);

  RoundRecord rec;
  rec.round = round;
  rec.remaining_weights = state.mask.remaining();
  rec.total_weights = state.mask.total();
  rec.pct_weights_remaining = 100.0 * state.mask.remaining_fraction();
  rec.test_accuracy = accuracy(state.model, &state.mask, test_set, threads);
  rec.final_batch_loss = last_loss;
  rec.rewound = state.schedule.rewind || round == 1;
  state.round = round;
  return rec;
}

struct RoundResult {
  RoundRecord record;
  Model model;
  PruneMask mask;
};

inline void write_round_artifacts(const std::filesystem::path& round_dir, const RoundResult& r) {
  std::filesystem::create_directories(round_dir);
  save_checkpoint(r.model, round_dir / r.record.checkpoint);
  save_mask(r.mask, round_dir / r.record.mask);
  write_file_bytes(round_dir / "record.json", r.record.to_json().dump(2) + "\n");
}

inline std::filesystem::path round_directory(const std::filesystem::path& run_dir, std::size_t round) {
  return run_dir / ("round_" + std::to_string(round));
}

/// Runs rounds until state.schedule.rounds are complete. When `run_dir` is
/// given, each round's checkpoint, mask and record are written under
/// run_dir/round_<i>/.
template <class Samples>
std::vector<RoundResult> run_schedule(LotteryState& state, const Samples& train_set, const Samples& test_set,
                                      std::size_t threads = 1,
                                      const std::optional<std::filesystem::path>& run_dir = std::nullopt,
                                      const RewindObserver& observer = {}) {
  std::vector<RoundResult> out;
  while (state.round < state.schedule.rounds) {
    RoundRecord rec = run_round(state, train_set, test_set, threads, observer);
    out.push_back(RoundResult{rec, state.model, state.mask});
    if (run_dir) write_round_artifacts(round_directory(*run_dir, rec.round), out.back());
  }
  return out;
}

}  // namespace ltx
