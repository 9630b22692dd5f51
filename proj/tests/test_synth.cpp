#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

#include "ltx/synth.hpp"
#include "test_support.hpp"

using namespace ltx;
using ltx::testing::TempDir;

namespace {

GeneratorConfig small_config(std::uint64_t seed = 1) {
  GeneratorConfig cfg;
  cfg.samples_per_class = 20;
  cfg.seed = seed;
  return cfg;
}

std::vector<SynthSample> all_samples(const SynthDataset& ds) {
  std::vector<SynthSample> out = ds.train;
  out.insert(out.end(), ds.test.begin(), ds.test.end());
  return out;
}

}  // namespace

TEST(Generate, ClassQuotasAndSplit) {
  const SynthDataset ds = generate(small_config());
  EXPECT_EQ(ds.train.size(), 64u);
  EXPECT_EQ(ds.test.size(), 16u);
  std::map<std::size_t, std::size_t> per_class;
  std::set<std::size_t> ids;
  for (const auto& s : all_samples(ds)) {
    ++per_class[s.label];
    ids.insert(s.id);
    EXPECT_EQ(s.image.shape(), (Shape{3, 16, 16}));
    EXPECT_EQ(s.concepts.size(), 8u);
  }
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(per_class[k], 20u);
  EXPECT_EQ(ids.size(), 80u);
  EXPECT_EQ(ds.concept_names.front(), "concept_0");
}

TEST(Generate, DeterministicPerSeedAndThreads) {
  const SynthDataset a = generate(small_config(3), 1);
  const SynthDataset b = generate(small_config(3), 4);
  const auto sa = all_samples(a), sb = all_samples(b);
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    EXPECT_EQ(sa[i].id, sb[i].id);
    EXPECT_EQ(sa[i].image, sb[i].image);
    EXPECT_EQ(sa[i].concepts, sb[i].concepts);
    EXPECT_EQ(sa[i].label, sb[i].label);
  }
  EXPECT_NE(all_samples(generate(small_config(4)))[0].image, sa[0].image);
}

TEST(Generate, NoiselessIdenticalConceptsIdenticalImages) {
  GeneratorConfig cfg = small_config();
  cfg.noise_std = 0.0;
  const auto samples = all_samples(generate(cfg));
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < samples.size(); ++i)
    for (std::size_t j = i + 1; j < samples.size(); ++j)
      if (samples[i].concepts == samples[j].concepts) {
        EXPECT_EQ(samples[i].image, samples[j].image);
        ++pairs;
      }
  EXPECT_GT(pairs, 0u);
}

TEST(Generate, AllAbsentIsBackground) {
  GeneratorConfig cfg = small_config();
  cfg.noise_std = 0.0;
  cfg.background = 0.2;
  const Tensor img = render_image(cfg, std::vector<std::uint8_t>(8, 0), 0);
  for (double v : img.data()) EXPECT_EQ(v, 0.2);
}

TEST(Generate, PatchesAreDisjointAndIndependent) {
  GeneratorConfig cfg = small_config();
  cfg.noise_std = 0.0;
  std::vector<std::set<std::size_t>> touched(8);
  for (std::size_t c = 0; c < 8; ++c) {
    std::vector<std::uint8_t> bits(8, 0);
    bits[c] = 1;
    const Tensor img = render_image(cfg, bits, 0);
    for (std::size_t i = 0; i < img.size(); ++i)
      if (img[i] != 0.0) touched[c].insert(i % (16 * 16));
    EXPECT_FALSE(touched[c].empty()) << c;
  }
  for (std::size_t a = 0; a < 8; ++a)
    for (std::size_t b = a + 1; b < 8; ++b)
      for (auto p : touched[a]) EXPECT_EQ(touched[b].count(p), 0u) << a << " vs " << b;

  // Rendering two concepts equals the sum of rendering each alone.
  std::vector<std::uint8_t> both(8, 0), only2(8, 0), only5(8, 0);
  both[2] = both[5] = only2[2] = only5[5] = 1;
  const Tensor x = render_image(cfg, both, 0), y = render_image(cfg, only2, 0), z = render_image(cfg, only5, 0);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i], y[i] + z[i]);
}

TEST(Generate, ColorsAreDistinct) {
  std::set<std::array<double, 3>> colors;
  for (std::size_t c = 0; c < 8; ++c) colors.insert(concept_color(c, 8));
  EXPECT_EQ(colors.size(), 8u);
  EXPECT_EQ(concept_color(0, 8), (std::array<double, 3>{1.0, 0.0, 0.0}));
}

TEST(Generate, LabelsFollowRules) {
  const SynthDataset ds = generate(small_config());
  const auto rules = small_config().rules();
  for (const auto& s : all_samples(ds)) EXPECT_EQ(apply_class_rule(rules, s.concepts), s.label);
}

TEST(ClassRule, ExactMatchWins) {
  const std::vector<std::vector<std::size_t>> rules{{4, 5}, {2}, {0, 1}, {6, 7}};
  std::vector<std::uint8_t> bits(8, 0);
  bits[0] = bits[1] = 1;
  EXPECT_EQ(apply_class_rule(rules, bits), 2u);
}

TEST(ClassRule, TiesGoToLowestClass) {
  const std::vector<std::vector<std::size_t>> rules{{0}, {1}};
  EXPECT_EQ(apply_class_rule(rules, {0, 0}), 0u);
  EXPECT_EQ(apply_class_rule(rules, {1, 1}), 0u);
  EXPECT_EQ(apply_class_rule(rules, {0, 1}), 1u);
}

TEST(GeneratorConfig, Validation) {
  GeneratorConfig cfg = small_config();
  cfg.num_concepts = 40;  // 7x6 grid on 16x16 leaves cells of 2 pixels
  try {
    cfg.validate();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidArgument);
    EXPECT_NE(std::string(e.what()).find("too small"), std::string::npos);
  }
  cfg = small_config();
  cfg.class_rules = {{0, 1}, {1, 0}, {2}, {3}};
  EXPECT_THROW(cfg.validate(), Error);
  cfg.class_rules = {{0, 9}, {1}, {2}, {3}};
  EXPECT_THROW(cfg.validate(), Error);
  cfg.class_rules = {{0}, {1}};
  EXPECT_THROW(cfg.validate(), Error);
  EXPECT_NO_THROW(small_config().validate());
}

TEST(ExampleSets, BudgetAndDeterminism) {
  GeneratorConfig cfg = small_config();
  cfg.samples_per_class = 60;
  const SynthDataset ds = generate(cfg);
  std::vector<Vec> emb;
  for (const auto& s : ds.train) {
    Vec e(3);
    e[0] = static_cast<double>(s.id);
    emb.push_back(e);
  }
  const auto sets = concept_example_sets(ds.train, emb, ds.concept_names, 50, 9);
  ASSERT_EQ(sets.size(), 8u);
  for (std::size_t c = 0; c < 8; ++c) {
    EXPECT_EQ(sets[c].name, ds.concept_names[c]);
    EXPECT_EQ(sets[c].positives.size(), 50u);
    EXPECT_EQ(sets[c].negatives.size(), 50u);
    std::map<std::size_t, const SynthSample*> by_id;
    for (const auto& s : ds.train) by_id[s.id] = &s;
    for (const auto& p : sets[c].positives) EXPECT_EQ(by_id.at(static_cast<std::size_t>(p[0]))->concepts[c], 1);
    for (const auto& n : sets[c].negatives) EXPECT_EQ(by_id.at(static_cast<std::size_t>(n[0]))->concepts[c], 0);
  }
  const auto again = concept_example_sets(ds.train, emb, ds.concept_names, 50, 9);
  for (std::size_t c = 0; c < 8; ++c) {
    EXPECT_EQ(again[c].positives, sets[c].positives);
    EXPECT_EQ(again[c].negatives, sets[c].negatives);
  }
}

TEST(ExampleSets, FewerAvailableUsesAll) {
  const SynthDataset ds = generate(small_config());
  std::vector<Vec> emb(ds.train.size(), Vec{1.0});
  const auto sets = concept_example_sets(ds.train, emb, ds.concept_names, 1000, 1);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(sets[c].positives.size() + sets[c].negatives.size(), ds.train.size());
}

TEST(ExampleSets, NeverPresentConceptNamed) {
  std::vector<SynthSample> samples(4);
  for (std::size_t i = 0; i < 4; ++i) samples[i].concepts = {static_cast<std::uint8_t>(i % 2), 0};
  std::vector<Vec> emb(4, Vec{0.0});
  try {
    concept_example_sets(samples, emb, {"wing_color", "beak_shape"}, 50, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingConcept);
    EXPECT_NE(std::string(e.what()).find("beak_shape"), std::string::npos);
  }
}

TEST(ExampleSets, FromModelEmbeddings) {
  const SynthDataset ds = generate(small_config());
  const Model m = init_params(1, 4);
  const auto sets = concept_example_sets(m, nullptr, ds.train, ds.concept_names, 10, 2, 2);
  ASSERT_EQ(sets.size(), 8u);
  EXPECT_EQ(sets[0].positives.front().size(), 16u);
}

TEST(Export, RoundTripQuantized) {
  TempDir dir("synth");
  const SynthDataset ds = generate(small_config());
  export_dataset(ds, dir.path());
  const SynthDataset back = import_dataset(dir.path());
  ASSERT_EQ(back.train.size(), ds.train.size());
  ASSERT_EQ(back.test.size(), ds.test.size());
  EXPECT_EQ(back.concept_names, ds.concept_names);
  for (std::size_t i = 0; i < ds.train.size(); ++i) {
    EXPECT_EQ(back.train[i].id, ds.train[i].id);
    EXPECT_EQ(back.train[i].label, ds.train[i].label);
    EXPECT_EQ(back.train[i].concepts, ds.train[i].concepts);
    for (std::size_t p = 0; p < ds.train[i].image.size(); ++p) {
      const double v = std::clamp(ds.train[i].image[p], 0.0, 1.0);
      EXPECT_LE(std::abs(back.train[i].image[p] - v), 0.5 / 255.0 + 1e-12);
    }
  }
}

TEST(Export, PgmHeader) {
  const std::string pgm = encode_pgm(2, 3, {0, 1, 2, 3, 4, 255});
  EXPECT_EQ(pgm.substr(0, 11), "P5\n3 2\n255\n");
  const Pgm back = decode_pgm(pgm);
  EXPECT_EQ(back.width, 3u);
  EXPECT_EQ(back.height, 2u);
  EXPECT_EQ(back.pixels, (std::vector<std::uint8_t>{0, 1, 2, 3, 4, 255}));
  EXPECT_EQ(quantize_unit(std::vector<double>{-1.0, 0.5, 2.0}), (std::vector<std::uint8_t>{0, 128, 255}));
}

TEST(EmbeddingCsv, RoundTripIsExact) {
  TempDir dir("emb");
  Rng rng(3);
  EmbeddingTable t;
  t.concept_names = {"concept_0", "concept_1"};
  for (std::size_t i = 0; i < 10; ++i) {
    t.ids.push_back(i * 3);
    Vec phi(4);
    for (double& v : phi) v = rng.normal() * 1e3;
    t.phi.push_back(phi);
    t.concepts.push_back({static_cast<std::uint8_t>(i % 2), static_cast<std::uint8_t>(i % 3 == 0)});
    t.labels.push_back(i % 4);
  }
  write_embedding_csv(dir.path() / "e.csv", t);
  const std::string text = read_file_bytes(dir.path() / "e.csv");
  EXPECT_EQ(text.substr(0, text.find('\n')), "sample_id,phi_0,phi_1,phi_2,phi_3,concept_0,concept_1,label");
  const EmbeddingTable back = read_embedding_csv(dir.path() / "e.csv");
  EXPECT_EQ(back.ids, t.ids);
  EXPECT_EQ(back.phi, t.phi);
  EXPECT_EQ(back.concepts, t.concepts);
  EXPECT_EQ(back.labels, t.labels);
  EXPECT_EQ(back.concept_names, t.concept_names);
}

TEST(EmbeddingCsv, PhiOnly) {
  TempDir dir("emb2");
  write_file_bytes(dir.path() / "e.csv", "sample_id, phi_0, phi_1\n0, 1.5, -2\n1, 0, 3e-2\n");
  const EmbeddingTable t = read_embedding_csv(dir.path() / "e.csv");
  EXPECT_EQ(t.phi, (std::vector<Vec>{{1.5, -2.0}, {0.0, 0.03}}));
  EXPECT_TRUE(t.labels.empty());
  EXPECT_TRUE(t.concept_names.empty());
}

TEST(EmbeddingCsv, BadConceptBit) {
  TempDir dir("emb3");
  write_file_bytes(dir.path() / "e.csv", "sample_id,phi_0,concept_0,label\n0,1,2,0\n");
  EXPECT_THROW(read_embedding_csv(dir.path() / "e.csv"), Error);
}
