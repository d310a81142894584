#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "seva/prefgen.hpp"

using namespace seva;
namespace fs = std::filesystem;

namespace {

const Tokenizer kTok(12);
const WorldConfig kWorld;

const std::vector<Episode>& corpus() {
  static const auto c = strip_truth(generate_corpus(31, 40, kWorld));
  return c;
}

Policy small_policy(std::uint64_t seed = 1) {
  auto cfg = policy_config_for(kWorld, kTok);
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.mlp_hidden = 16;
  return Policy(cfg, seed);
}

TokenSequence seq(std::vector<TokenId> t) { return TokenSequence{std::move(t), std::nullopt}; }

PreferenceRecord raw_record(std::vector<TokenId> chosen, std::vector<std::vector<TokenId>> rejected) {
  PreferenceRecord r;
  r.chosen = seq(std::move(chosen));
  for (auto& t : rejected) {
    r.rejected.push_back(seq(std::move(t)));
    r.augment.push_back(AugmentSpec::diffusion(800));
  }
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("seva_test_prefgen_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

}  // namespace

TEST(GeneratePair, IdentityAugmentationGivesEqualAnswers) {
  const auto p = small_policy();
  for (const auto& ep : corpus())
    for (const auto& q : ep.questions) {
      const auto [c, r] = generate_pair(p, ep.image, q, AugmentSpec::identity());
      EXPECT_EQ(c.tokens, r.tokens);
    }
}

TEST(GeneratePair, IndependentOfCallOrder) {
  const auto p = small_policy();
  const auto& a = corpus()[0];
  const auto& b = corpus()[1];
  const auto first = generate_pair(p, a.image, a.questions[0], AugmentSpec::diffusion(800, 5));
  generate_pair(p, b.image, b.questions[0], AugmentSpec::diffusion(800, 6));
  const auto again = generate_pair(p, a.image, a.questions[0], AugmentSpec::diffusion(800, 5));
  EXPECT_EQ(first.first.tokens, again.first.tokens);
  EXPECT_EQ(first.second.tokens, again.second.tokens);
}

TEST(FilterEqual, KeepsOnlyDifferingPairs) {
  const TokenId A = kTok.glyph(1), B = kTok.glyph(2), E = Tokenizer::kEos;
  std::vector<PreferenceRecord> raw{raw_record({A, E}, {{A, E}}), raw_record({A, E}, {{B, E}}), raw_record({A, B, E}, {{A, B, E}}),
                                    raw_record({B, E}, {{A, B, E}})};
  const auto ds = filter_equal(raw);
  EXPECT_EQ(ds.raw_count, 4u);
  EXPECT_EQ(ds.kept_count, 2u);
  EXPECT_DOUBLE_EQ(ds.retention(), 0.5);
  for (const auto& r : ds.records)
    for (const auto& rej : r.rejected) EXPECT_FALSE(same_answer(r.chosen, rej));
}

TEST(FilterEqual, DropsOnlyEqualNegativesOfAMultiRecord) {
  const TokenId A = kTok.glyph(1), B = kTok.glyph(2), E = Tokenizer::kEos;
  const auto ds = filter_equal({raw_record({A, E}, {{A, E}, {B, E}, {A, E}})});
  ASSERT_EQ(ds.kept_count, 1u);
  EXPECT_EQ(ds.records[0].rejected.size(), 1u);
  EXPECT_EQ(ds.records[0].augment.size(), 1u);
}

TEST(BuildDataset, AllIdentityLeavesNothing) {
  const auto ds = build_multi_negative(corpus(), small_policy(), {AugmentSpec::identity()}, 60, 3, 1);
  EXPECT_EQ(ds.raw_count, 60u);
  EXPECT_EQ(ds.kept_count, 0u);
  try {
    build_dataset(corpus(), small_policy(), AugmentSpec::identity(), 60, 3, 1);
    FAIL() << "expected EmptyDatasetError";
  } catch (const EmptyDatasetError& e) {
    EXPECT_NE(std::string(e.what()).find("stronger augmentation"), std::string::npos);
  }
}

TEST(BuildDataset, RawCountIsTheRequestedScale) {
  const auto ds = build_dataset(corpus(), small_policy(), AugmentSpec::diffusion(800), 60, 3, 1);
  EXPECT_EQ(ds.raw_count, 60u);
  EXPECT_EQ(ds.manifest.raw_count, 60u);
  EXPECT_LE(ds.kept_count, ds.raw_count);
  EXPECT_GT(ds.kept_count, 0u);
  EXPECT_THROW(build_dataset(corpus(), small_policy(), AugmentSpec::diffusion(800), 81, 3, 1), Error);
}

TEST(BuildDataset, SameInputsGiveIdenticalJsonl) {
  const auto dir = scratch("determinism");
  for (const char* tag : {"a", "b"}) {
    const auto ds = build_dataset(corpus(), small_policy(), AugmentSpec::diffusion(800), 60, 3, std::string(tag) == "a" ? 1 : 2);
    write_dataset((dir / (std::string(tag) + ".jsonl")).string(), (dir / (std::string(tag) + ".json")).string(), ds);
  }
  EXPECT_EQ(slurp(dir / "a.jsonl"), slurp(dir / "b.jsonl"));
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
  fs::remove_all(dir);
}

TEST(BuildDataset, ManifestReplayIsExact) {
  const auto dir = scratch("replay");
  const auto p = small_policy();
  const auto ds = build_dataset(corpus(), p, AugmentSpec::diffusion(500, 9), 60, 4, 1);
  write_dataset((dir / "pairs.jsonl").string(), (dir / "manifest.json").string(), ds);
  fs::copy_file(dir / "manifest.json", dir / "copy.json");
  const auto m = nlohmann::json::parse(slurp(dir / "copy.json")).get<DatasetManifest>();
  const auto again = replay_dataset(m, corpus(), p, 1);
  EXPECT_EQ(again.kept_count, ds.kept_count);
  write_dataset((dir / "again.jsonl").string(), (dir / "again.json").string(), again);
  EXPECT_EQ(slurp(dir / "again.jsonl"), slurp(dir / "pairs.jsonl"));
  EXPECT_THROW(replay_dataset(m, corpus(), small_policy(2), 1), Error);
  fs::remove_all(dir);
}

TEST(BuildDataset, NeverReadsGroundTruth) {
  // The corpus fixture has its truth stripped; building still works.
  for (const auto& ep : corpus()) ASSERT_TRUE(ep.truth.empty());
  EXPECT_NO_THROW(build_dataset(corpus(), small_policy(), AugmentSpec::diffusion(800), 20, 3, 1));
}

TEST(MultiNegative, SingleSpecReducesToBuildDataset) {
  const auto p = small_policy();
  const auto a = build_multi_negative(corpus(), p, {AugmentSpec::diffusion(800, 2)}, 60, 5, 1);
  const auto b = build_dataset(corpus(), p, AugmentSpec::diffusion(800, 2), 60, 5, 1);
  ASSERT_EQ(a.records.size(), b.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) EXPECT_EQ(record_to_json(a.records[i]), record_to_json(b.records[i]));
}

TEST(MultiNegative, TwoSpecsGiveOneOrTwoRejected) {
  const auto ds = build_multi_negative(corpus(), small_policy(), {AugmentSpec::diffusion(500), AugmentSpec::diffusion(800)}, 80, 6, 1);
  ASSERT_GT(ds.kept_count, 0u);
  double mean = 0.0;
  for (const auto& r : ds.records) {
    EXPECT_GE(r.rejected.size(), 1u);
    EXPECT_LE(r.rejected.size(), 2u);
    EXPECT_EQ(r.rejected.size(), r.augment.size());
    mean += static_cast<double>(r.rejected.size()) / static_cast<double>(ds.kept_count);
  }
  const auto again = build_multi_negative(corpus(), small_policy(), {AugmentSpec::diffusion(500), AugmentSpec::diffusion(800)}, 80, 6, 1);
  double mean2 = 0.0;
  for (const auto& r : again.records) mean2 += static_cast<double>(r.rejected.size()) / static_cast<double>(again.kept_count);
  EXPECT_EQ(mean, mean2);
  EXPECT_THROW(build_multi_negative(corpus(), small_policy(), {}, 10, 1, 1), Error);
}

TEST(MultiNegative, EachRecordGetsItsOwnAugmentationSeed) {
  const auto ds = build_multi_negative(corpus(), small_policy(), {AugmentSpec::diffusion(800, 1)}, 60, 7, 1);
  std::set<std::uint64_t> seeds;
  for (const auto& r : ds.records) seeds.insert(r.augment[0].seed);
  EXPECT_EQ(seeds.size(), ds.records.size());
}

TEST(DatasetIo, RoundTripRestoresImages) {
  const auto dir = scratch("io");
  const auto ds = build_dataset(corpus(), small_policy(), AugmentSpec::diffusion(800), 60, 3, 1);
  write_dataset((dir / "pairs.jsonl").string(), (dir / "manifest.json").string(), ds);
  const auto back = read_dataset((dir / "pairs.jsonl").string(), (dir / "manifest.json").string(), kTok, &corpus());
  ASSERT_EQ(back.records.size(), ds.records.size());
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    EXPECT_EQ(back.records[i].image.pixels, ds.records[i].image.pixels);
    EXPECT_EQ(back.records[i].chosen, ds.records[i].chosen);
  }
  EXPECT_EQ(back.raw_count, ds.raw_count);
  fs::remove_all(dir);
}

TEST(DatasetIo, CorruptLineReportsItsNumber) {
  const auto dir = scratch("corrupt");
  const auto ds = build_dataset(corpus(), small_policy(), AugmentSpec::diffusion(800), 60, 3, 1);
  ASSERT_GE(ds.records.size(), 2u);
  {
    std::ofstream os(dir / "pairs.jsonl");
    os << record_to_json(ds.records[0]).dump() << '\n' << "{not json\n";
  }
  try {
    read_records((dir / "pairs.jsonl").string(), kTok);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("pairs.jsonl:2"), std::string::npos) << e.what();
  }
  // A record whose rejected answer equals its chosen answer is refused.
  auto bad = record_to_json(ds.records[0]);
  bad["rejected_tokens"][0] = bad["chosen_tokens"];
  EXPECT_THROW(record_from_json(bad, kTok), Error);
  fs::remove_all(dir);
}
