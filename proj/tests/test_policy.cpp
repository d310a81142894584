#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "seva/microworld.hpp"
#include "seva/policy.hpp"
#include "seva/sft.hpp"

using namespace seva;

namespace {

const Tokenizer kTok(12);
const WorldConfig kWorld;

PolicyConfig tiny_config(int vocab) {
  PolicyConfig c;
  c.d_model = 8;
  c.n_layers = 1;
  c.n_heads = 2;
  c.mlp_hidden = 8;
  c.vocab_size = vocab;
  return c;
}

void zero(Policy& p, const std::string& name) {
  for (auto& v : p.param(name).value) v = 0.0;
}

const Episode& sample_episode() {
  static const auto corpus = generate_corpus(3, 1, kWorld);
  return corpus[0];
}

TokenSequence seq(std::vector<TokenId> t) { return TokenSequence{std::move(t), std::nullopt}; }

}  // namespace

TEST(SequenceLogprob, UniformLogitsGiveLengthTimesLogV) {
  Policy p(tiny_config(16), 1);
  zero(p, "head.w");
  zero(p, "head.b");
  const double lp = p.sequence_logprob(sample_episode().image, {5, 6}, seq({7, 8, Tokenizer::kEos}));
  EXPECT_NEAR(lp, -3.0 * std::log(16.0), 1e-12);
  EXPECT_NEAR(lp, -8.3178, 1e-4);
}

TEST(SequenceLogprob, NeverPositive) {
  Policy p(policy_config_for(kWorld, kTok), 2);
  for (const auto& ep : generate_corpus(4, 10, kWorld))
    for (std::size_t i = 0; i < ep.questions.size(); ++i) EXPECT_LE(p.sequence_logprob(ep.image, ep.questions[i].text_tokens, ep.truth[i]), 0.0);
}

// Complete answers of length <= 2 over V=4 are [EOS] and [t, EOS] with t != EOS.
TEST(SequenceLogprob, EnumeratedMassIsAtMostOne) {
  auto cfg = tiny_config(4);
  cfg.max_answer_len = 2;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Policy p(cfg, seed);
    const auto& img = sample_episode().image;
    double mass = std::exp(p.sequence_logprob(img, {1}, seq({Tokenizer::kEos})));
    for (TokenId t = 0; t < 4; ++t)
      if (t != Tokenizer::kEos) mass += std::exp(p.sequence_logprob(img, {1}, seq({t, Tokenizer::kEos})));
    EXPECT_LE(mass, 1.0 + 1e-12);
    EXPECT_GT(mass, 0.0);
  }
}

TEST(SequenceLogprob, Errors) {
  Policy p(tiny_config(16), 1);
  const auto& img = sample_episode().image;
  EXPECT_THROW(p.sequence_logprob(img, {5}, seq({})), Error);
  EXPECT_THROW(p.sequence_logprob(img, {5}, seq({7})), Error);
  EXPECT_THROW(p.sequence_logprob(img, {5}, seq({16, Tokenizer::kEos})), Error);
  EXPECT_THROW(p.sequence_logprob(img, {5, 5, 5, 5}, seq({Tokenizer::kEos})), Error);
}

// The incremental decoder and the differentiable forward pass agree on every template.
TEST(SequenceLogprob, DecoderMatchesAutodiffForward) {
  Policy p(policy_config_for(kWorld, kTok), 5);
  const auto bound = p.bind(false);
  for (const auto& ep : generate_corpus(6, 20, kWorld))
    for (std::size_t i = 0; i < ep.questions.size(); ++i) {
      const double a = p.sequence_logprob(ep.image, ep.questions[i].text_tokens, ep.truth[i]);
      const double b = p.sequence_logprob(bound, ep.image, ep.questions[i].text_tokens, ep.truth[i]).item();
      ASSERT_NEAR(a, b, 1e-10) << kTok.decode(ep.questions[i].text_tokens);
    }
}

TEST(SequenceLogprob, GradientMatchesFiniteDifferences) {
  auto cfg = tiny_config(kTok.size());
  cfg.grounding = policy_config_for(kWorld, kTok).grounding;
  Policy p(cfg, 7);
  const auto& ep = sample_episode();
  for (std::size_t i = 0; i < ep.questions.size(); ++i) {
    auto f = [&](const Tensor& flat) { return p.sequence_logprob(p.bind_flat(flat), ep.image, ep.questions[i].text_tokens, ep.truth[i]); };
    const auto flat = Tensor::leaf({p.trainable_flat().size()}, p.trainable_flat());
    EXPECT_LT(grad_check(f, flat), 1e-4) << kTok.decode(ep.questions[i].text_tokens);
  }
}

TEST(Causality, AnswerTokenOnlyAffectsLaterPositions) {
  Policy p(policy_config_for(kWorld, kTok), 8);
  const auto& img = sample_episode().image;
  const std::vector<TokenId> q = make_question(kTok, Template::read_row, {2}).text_tokens;
  const auto base = seq({kTok.glyph(1), kTok.glyph(2), kTok.glyph(3), kTok.glyph(4), Tokenizer::kEos});
  const auto ref = p.answer_logits(img, q, base);
  for (std::size_t j = 0; j + 1 < base.tokens.size(); ++j) {
    auto perturbed = base;
    perturbed.tokens[j] = kTok.glyph(9);
    const auto out = p.answer_logits(img, q, perturbed);
    for (std::size_t i = 0; i <= j; ++i) EXPECT_EQ(out[i], ref[i]) << "perturb " << j << " position " << i;
    EXPECT_NE(out[j + 1], ref[j + 1]) << "perturb " << j;
  }
}

TEST(Normalization, NextTokenDistributionSumsToOne) {
  Policy p(policy_config_for(kWorld, kTok), 9);
  const auto& ep = sample_episode();
  for (std::size_t i = 0; i < ep.questions.size(); ++i)
    for (const auto& row : p.answer_logits(ep.image, ep.questions[i].text_tokens, ep.truth[i])) {
      const double m = *std::max_element(row.begin(), row.end());
      double z = 0.0;
      for (double v : row) z += std::exp(v - m);
      double total = 0.0;
      for (double v : row) total += std::exp(v - m) / z;
      EXPECT_NEAR(total, 1.0, 1e-9);
    }
}

TEST(Generate, GreedyIsDeterministic) {
  Policy p(policy_config_for(kWorld, kTok), 10);
  const auto& ep = sample_episode();
  for (const auto& q : ep.questions) {
    const auto a = p.generate(ep.image, q.text_tokens, 0.0, 9, 1);
    const auto b = p.generate(ep.image, q.text_tokens, 0.0, 9, 2);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_EQ(a.tokens.back(), Tokenizer::kEos);
  }
}

// Text embeddings chain SEP -> A -> B -> EOS through an identity head, with
// every other path zeroed.
TEST(Generate, HandSetLogitsAreFollowed) {
  auto cfg = policy_config_for(kWorld, kTok);
  cfg.layer_norm = false;
  Policy p(cfg, 11);
  for (auto& prm : p.params())
    for (auto& v : prm.value) v = 0.0;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  auto& head = p.param("head.w").value;
  for (std::size_t k = 0; k < kTok.size(); ++k) head[k * kTok.size() + k] = 1.0;
  auto& emb = p.param("tok.emb").value;
  const TokenId a = kTok.glyph(1), b = kTok.glyph(2);
  emb[static_cast<std::size_t>(Tokenizer::kSep) * d + static_cast<std::size_t>(a)] = 5.0;
  emb[static_cast<std::size_t>(a) * d + static_cast<std::size_t>(b)] = 5.0;
  emb[static_cast<std::size_t>(b) * d + static_cast<std::size_t>(Tokenizer::kEos)] = 5.0;
  const auto out = p.generate(sample_episode().image, make_question(kTok, Template::exists_glyph, {3}).text_tokens, 0.0, 9, 0);
  EXPECT_EQ(kTok.decode_answer(out), "A B");
  EXPECT_EQ(out.tokens.size(), 3u);
}

TEST(Generate, ForcedEosAtMaxLen) {
  Policy p(policy_config_for(kWorld, kTok), 12);
  const auto& ep = sample_episode();
  for (int len = 1; len <= 3; ++len) {
    const auto out = p.generate(ep.image, ep.questions[0].text_tokens, 1.0, len, 5);
    EXPECT_LE(out.tokens.size(), static_cast<std::size_t>(len));
    EXPECT_EQ(out.tokens.back(), Tokenizer::kEos);
  }
  EXPECT_THROW(p.generate(ep.image, ep.questions[0].text_tokens, 0.0, 0, 0), Error);
}

// First-token frequencies over 200 draws at t=0.7 stay within 3 sigma of softmax(logits / 0.7).
TEST(Generate, SamplingFrequenciesMatchTemperedSoftmax) {
  Policy p(policy_config_for(kWorld, kTok), 13);
  for (auto& v : p.param("head.w").value) v *= 4.0;
  const auto& ep = sample_episode();
  const auto& q = ep.questions[0].text_tokens;
  const auto logits = p.answer_logits(ep.image, q, seq({Tokenizer::kEos}))[0];
  std::vector<double> probs(logits.size());
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t j = 0; j < logits.size(); ++j) z += probs[j] = std::exp((logits[j] - m) / 0.7);
  for (auto& v : probs) v /= z;
  const int n = 200;
  std::vector<int> counts(logits.size(), 0);
  for (int s = 0; s < n; ++s) ++counts[static_cast<std::size_t>(p.generate(ep.image, q, 0.7, 9, static_cast<std::uint64_t>(s)).tokens[0])];
  for (std::size_t j = 0; j < probs.size(); ++j) {
    const double sigma = std::sqrt(n * probs[j] * (1.0 - probs[j]));
    EXPECT_LE(std::abs(counts[j] - n * probs[j]), std::max(3.0 * sigma, 1.0)) << "token " << kTok.text(static_cast<TokenId>(j));
  }
}

TEST(Lora, ZeroInitLeavesOutputsUnchanged) {
  Policy base(policy_config_for(kWorld, kTok), 14);
  Policy adapted = base;
  adapted.attach_lora(8, 0.0, 3);
  for (const auto& ep : generate_corpus(15, 5, kWorld))
    for (std::size_t i = 0; i < ep.questions.size(); ++i) {
      const auto& q = ep.questions[i].text_tokens;
      EXPECT_EQ(adapted.generate(ep.image, q, 0.0, 9, 0).tokens, base.generate(ep.image, q, 0.0, 9, 0).tokens);
      EXPECT_EQ(adapted.sequence_logprob(ep.image, q, ep.truth[i]), base.sequence_logprob(ep.image, q, ep.truth[i]));
    }
}

TEST(Lora, AlphaDefaultsToTwiceRank) {
  Policy p(policy_config_for(kWorld, kTok), 16);
  p.attach_lora(8);
  ASSERT_TRUE(p.lora().has_value());
  EXPECT_EQ(p.lora()->alpha, 16.0);
  EXPECT_EQ(p.lora()->scale(), 2.0);
}

TEST(Lora, TrainableCountIsRankTimesFanSum) {
  const auto cfg = policy_config_for(kWorld, kTok);
  Policy p(cfg, 17);
  const std::size_t d = 64, h = 128, V = kTok.size(), r = 4;
  p.attach_lora(static_cast<int>(r));
  const std::size_t per_layer = 4 * r * (d + d) + r * (d + h) + r * (h + d);
  EXPECT_EQ(p.trainable_count(), 2 * per_layer + r * (d + V));
  for (const auto& prm : p.params()) EXPECT_EQ(prm.trainable, prm.name.find(".lora_") != std::string::npos) << prm.name;
}

TEST(Lora, RankErrors) {
  Policy p(policy_config_for(kWorld, kTok), 18);
  EXPECT_THROW(p.attach_lora(0), Error);
  EXPECT_THROW(p.attach_lora(35), Error);
  p.attach_lora(2);
  EXPECT_THROW(p.attach_lora(2), Error);
}

TEST(Lora, MergedWeightsReproduceAdaptedModel) {
  Policy p(policy_config_for(kWorld, kTok), 19);
  p.attach_lora(4, 0.0, 1);
  Rng rng(2);
  for (auto& prm : p.params())
    if (prm.name.ends_with(".lora_b"))
      for (auto& v : prm.value) v = 0.05 * rng.normal();
  const auto merged = p.merged();
  EXPECT_FALSE(merged.lora().has_value());
  const auto& ep = sample_episode();
  for (std::size_t i = 0; i < ep.questions.size(); ++i)
    EXPECT_NEAR(merged.sequence_logprob(ep.image, ep.questions[i].text_tokens, ep.truth[i]),
                p.sequence_logprob(ep.image, ep.questions[i].text_tokens, ep.truth[i]), 1e-9);
}

TEST(Checkpoint, SaveLoadRoundTrip) {
  Policy p(policy_config_for(kWorld, kTok), 20);
  const auto path = (std::filesystem::temp_directory_path() / "seva_test_policy.json").string();
  p.save(path, &kTok);
  const auto q = Policy::load(path);
  EXPECT_EQ(q.trainable_flat(), p.trainable_flat());
  EXPECT_EQ(q.config_hash(), p.config_hash());
  const auto& ep = sample_episode();
  EXPECT_EQ(q.sequence_logprob(ep.image, ep.questions[0].text_tokens, ep.truth[0]),
            p.sequence_logprob(ep.image, ep.questions[0].text_tokens, ep.truth[0]));
  std::filesystem::remove(path);
}

TEST(Sft, ZeroStepsLeavesParametersUnchanged) {
  Policy p(policy_config_for(kWorld, kTok), 21);
  const auto before = p.trainable_flat();
  SftConfig cfg;
  cfg.steps = 0;
  sft_train(p, generate_corpus(1, 4, kWorld), cfg, 1);
  EXPECT_EQ(p.trainable_flat(), before);
}

TEST(Sft, FewStepsReduceHeldOutLoss) {
  Policy p(policy_config_for(kWorld, kTok), 22);
  const auto train = generate_corpus(23, 200, kWorld), held = generate_corpus(24, 30, kWorld);
  const double before = mean_nll(p, held, 1);
  SftConfig cfg;
  cfg.steps = 30;
  cfg.warmup_steps = 5;
  sft_train(p, train, cfg, 1);
  EXPECT_LT(mean_nll(p, held, 1), before);
  EXPECT_THROW(sft_train(p, {}, cfg, 1), Error);
}
