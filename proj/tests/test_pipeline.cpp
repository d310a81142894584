#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "seva/pipeline.hpp"

using namespace seva;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.seed = 3;
  c.model = {16, 1, 2, 16};
  c.sft_episodes = 60;
  c.sft.steps = 20;
  c.sft.batch_size = 8;
  c.sft.warmup_steps = 2;
  c.pref_episodes = 30;
  c.n_pairs = 40;
  c.dpo.batch_size = 8;
  c.dpo.probe_size = 8;
  c.dpo.probe_every = 2;
  c.dpo.kl_every = 2;
  c.dpo.kl_prompts = 4;
  c.eval.episodes = 10;
  c.eval.temperatures = {0.5};
  c.eval.samples_per_item = 1;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  auto d = fs::temp_directory_path() / ("seva_test_pipeline_" + name);
  fs::remove_all(d);
  return d;
}

RunOptions quiet() {
  RunOptions o;
  o.threads = 1;
  return o;
}

}  // namespace

TEST(RunConfig, JsonRoundTripAndValidation) {
  const auto c = tiny_config();
  const nlohmann::json j = c;
  EXPECT_EQ(nlohmann::json(j.get<RunConfig>()), j);
  const auto partial = nlohmann::json::parse(R"({"seed": 9, "n_pairs": 12})").get<RunConfig>();
  EXPECT_EQ(partial.seed, 9u);
  EXPECT_EQ(partial.n_pairs, 12u);
  EXPECT_EQ(partial.sft_episodes, RunConfig{}.sft_episodes);
  auto bad = c;
  bad.augment.clear();
  EXPECT_THROW(bad.validate(), Error);
  bad = c;
  bad.n_pairs = 0;
  EXPECT_THROW(bad.validate(), Error);
  bad = c;
  bad.dpo.beta = 0.0;
  EXPECT_THROW(bad.validate(), Error);
}

TEST(RunConfig, StageSeedsAreDistinct) {
  const RunSeeds s(1);
  const std::vector<std::uint64_t> all{s.sft_corpus, s.pref_corpus, s.eval_corpus, s.init, s.sft, s.prefs, s.dpo, s.lora, s.probe};
  for (std::size_t i = 0; i < all.size(); ++i)
    for (std::size_t j = i + 1; j < all.size(); ++j) EXPECT_NE(all[i], all[j]);
}

TEST(StageError, CarriesStageAndExitCode) {
  try {
    run_stage(Stage::dpo, [] {
      throw Error("boom");
      return 0;
    });
    FAIL();
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), Stage::dpo);
    EXPECT_EQ(e.code(), 14);
    EXPECT_EQ(std::string(e.what()), "dpo: boom");
  }
  EXPECT_EQ(exit_code(Stage::gen_prefs), 13);
}

TEST(Pipeline, SameConfigGivesByteIdenticalArtifacts) {
  const auto a = scratch("a"), b = scratch("b");
  const auto ra = run_pipeline(tiny_config(), a, quiet());
  run_pipeline(tiny_config(), b, quiet());
  for (const char* f : {"prefs/pairs.jsonl", "prefs/manifest.json", "dpo/train.csv", "eval/metrics.json", "summary.json"}) {
    ASSERT_TRUE(fs::exists(a / f)) << f;
    EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;
  }
  EXPECT_EQ(ra.dataset.raw_count, 40u);
  EXPECT_NEAR(ra.summary["dpo"]["initial_loss"].get<double>(), std::log(2.0), 1e-9);
  EXPECT_EQ(read_json(a / "config.json").get<RunConfig>().seed, 3u);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(Pipeline, SftCacheIsReused) {
  const auto out = scratch("cache");
  auto o = quiet();
  o.sft_cache = out / "cache";
  run_pipeline(tiny_config(), out / "first", o);
  std::ostringstream log;
  o.log = &log;
  run_pipeline(tiny_config(), out / "second", o);
  EXPECT_NE(log.str().find("sft: reusing"), std::string::npos);
  EXPECT_EQ(slurp(out / "first" / "sft" / "policy.json"), slurp(out / "second" / "sft" / "policy.json"));
  fs::remove_all(out);
}

TEST(Pipeline, IdentityAugmentationFailsInGenPrefs) {
  const auto out = scratch("identity");
  auto c = tiny_config();
  c.augment = {AugmentSpec::identity()};
  try {
    run_pipeline(c, out, quiet());
    FAIL() << "expected a gen-prefs failure";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), Stage::gen_prefs);
    EXPECT_EQ(e.code(), 13);
    EXPECT_NE(std::string(e.what()).find("stronger augmentation"), std::string::npos);
  }
  // Earlier artifacts stay on disk.
  EXPECT_TRUE(fs::exists(out / "sft" / "policy.json"));
  EXPECT_FALSE(fs::exists(out / "dpo" / "policy.json"));
  fs::remove_all(out);
}

TEST(Sweep, OneRowPerStep) {
  const auto out = scratch("sweep");
  const auto rows = run_sweep(tiny_config(), {500, 1000}, out, quiet());
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].noise_step, 500);
  EXPECT_EQ(rows[1].noise_step, 1000);
  std::ifstream is(out / "sweep.csv");
  std::string line;
  int n = 0;
  while (std::getline(is, line)) ++n;
  EXPECT_EQ(n, 3);
  EXPECT_TRUE(fs::exists(out / "margin_vs_step.svg"));
  EXPECT_THROW(run_sweep(tiny_config(), {1200}, out, quiet()), StageError);
  EXPECT_THROW(run_sweep(tiny_config(), {}, out, quiet()), StageError);
  fs::remove_all(out);
}

TEST(Inspect, ZeroRecordsPrintsOnlyTheHeader) {
  const Tokenizer tok(12);
  std::ostringstream os;
  inspect_dataset(os, tok, {}, nullptr, 0);
  EXPECT_EQ(os.str(), "records: 0\n");
}

TEST(Inspect, ShowsChosenAndRejected) {
  const Tokenizer tok(12);
  const auto corpus = generate_corpus(1, 1, WorldConfig{});
  PreferenceRecord r;
  r.image = corpus[0].image;
  r.question = corpus[0].questions[0];
  r.chosen = TokenSequence{{tok.glyph(1), Tokenizer::kEos}, std::nullopt};
  r.rejected = {TokenSequence{{tok.glyph(2), Tokenizer::kEos}, std::nullopt}};
  r.augment = {AugmentSpec::diffusion(800, 4)};
  std::ostringstream os;
  inspect_dataset(os, tok, {r, r}, nullptr, 1);
  const auto s = os.str();
  EXPECT_NE(s.find("records: 2"), std::string::npos);
  EXPECT_NE(s.find("#0"), std::string::npos);
  EXPECT_EQ(s.find("#1"), std::string::npos);
  EXPECT_NE(s.find("chosen:"), std::string::npos);
  EXPECT_NE(s.find("diffusion_noise"), std::string::npos);
}

TEST(Svg, ValueRangeHandlesFlatAndNonFiniteData) {
  EXPECT_EQ(svg::value_range({2.0, 2.0}, false), (std::pair<double, double>{1.5, 2.5}));
  EXPECT_EQ(svg::value_range({1.0, 3.0}, true), (std::pair<double, double>{0.0, 3.0}));
  EXPECT_EQ(svg::value_range({std::nan(""), 4.0, -1.0}, false), (std::pair<double, double>{-1.0, 4.0}));
  EXPECT_EQ(svg::value_range({}, false), (std::pair<double, double>{0.0, 1.0}));
}

TEST(Svg, ChartsAreWellFormed) {
  const auto line = svg::line_chart("a <b>", {{"s", {0, 1, 2}, {1, 4, 9}}}, "x", "y");
  EXPECT_EQ(line.rfind("<svg", 0), 0u);
  EXPECT_NE(line.find("</svg>"), std::string::npos);
  EXPECT_NE(line.find("a &lt;b&gt;"), std::string::npos);
  EXPECT_NE(line.find("<polyline"), std::string::npos);
  const auto bars = svg::bar_chart("t", {{"win", 3}, {"lose", 1}}, "items");
  std::size_t rects = 0;
  for (auto p = bars.find("<rect x="); p != std::string::npos; p = bars.find("<rect x=", p + 1)) ++rects;
  EXPECT_GE(rects, 2u);
  EXPECT_THROW(svg::line_chart("t", {{"bad", {0, 1}, {1}}}, "x", "y"), Error);
}
