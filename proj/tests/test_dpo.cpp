#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "seva/dpo.hpp"

using namespace seva;

namespace {

constexpr double kLn2 = std::numbers::ln2;
constexpr TokenId kA = 4, kB = 5, kE = Tokenizer::kEos;

// 98 parameters: 8x8 raster in 2x2 patches, d=2, one attention layer, V=6.
PolicyConfig micro_config() {
  PolicyConfig c;
  c.image_width_px = 8;
  c.image_height_px = 8;
  c.patch_size = 4;
  c.d_model = 2;
  c.n_layers = 1;
  c.n_heads = 1;
  c.mlp_hidden = 0;
  c.vocab_size = 6;
  c.question_len = 1;
  c.max_answer_len = 3;
  c.layer_norm = false;
  return c;
}

ToyImage micro_image(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Cell> cells(4);
  for (auto& c : cells) c = {1 + static_cast<int>(rng.below(3)), rng.uniform(0.6, 1.0)};
  return make_image(2, 2, 4, cells);
}

TokenSequence seq(std::vector<TokenId> t) { return TokenSequence{std::move(t), std::nullopt}; }

PreferenceRecord record(std::uint64_t seed, std::vector<TokenId> chosen, std::vector<std::vector<TokenId>> rejected) {
  PreferenceRecord r;
  r.image = micro_image(seed);
  r.question.text_tokens = {kA};
  r.chosen = seq(std::move(chosen));
  for (auto& t : rejected) {
    r.rejected.push_back(seq(std::move(t)));
    r.augment.push_back(AugmentSpec::diffusion(800, seed));
  }
  return r;
}

std::vector<PreferenceRecord> single_batch() {
  return {record(1, {kA, kE}, {{kB, kE}}), record(2, {kB, kA, kE}, {{kA, kE}}), record(3, {kE}, {{kB, kB, kE}})};
}

std::vector<PreferenceRecord> multi_batch() {
  return {record(4, {kA, kE}, {{kB, kE}, {kE}, {kA, kA, kE}}), record(5, {kB, kE}, {{kA, kE}}), record(6, {kE}, {{kB, kE}, {kA, kE}})};
}

// A policy and a perturbed copy serving as its reference.
std::pair<Policy, Policy> policy_and_ref(std::uint64_t seed) {
  Policy ref(micro_config(), seed);
  Policy pol = ref;
  Rng rng(seed + 100);
  for (auto& p : pol.params())
    for (auto& v : p.value) v += 0.3 * rng.normal();
  return {pol, ref};
}

}  // namespace

TEST(Micro, HasAtMostOneHundredParameters) { EXPECT_LE(Policy(micro_config(), 1).trainable_count(), 100u); }

TEST(BtProbability, Cases) {
  EXPECT_DOUBLE_EQ(bt_probability(1.3, 1.3), 0.5);
  EXPECT_NEAR(bt_probability(std::log(3.0), 0.0), 0.75, 1e-15);
  const double two[2] = {0.0, 0.0};
  EXPECT_NEAR(bt_probability(0.0, std::span<const double>(two, 2)), 1.0 / 3.0, 1e-15);
  EXPECT_NEAR(bt_probability(800.0, -800.0), 1.0, 1e-15);
}

TEST(InfoNce, EqualScoresGiveLn2) {
  const double neg = 0.7;
  const auto t = infonce_bridge(0.7, std::span<const double>(&neg, 1));
  EXPECT_NEAR(t.l_in_single, kLn2, 1e-15);
  EXPECT_NEAR(t.l_in, kLn2, 1e-15);
}

TEST(InfoNce, SingleNegativeEqualsNegLogBradleyTerry) {
  Rng rng(3);
  for (int i = 0; i < 1000; ++i) {
    const double fp = rng.uniform(-10, 10), fn = rng.uniform(-10, 10);
    const auto t = infonce_bridge(fp, std::span<const double>(&fn, 1));
    ASSERT_NEAR(t.l_in_single, -std::log(bt_probability(fp, fn)), 1e-12);
    ASSERT_NEAR(t.l_in_single, t.softplus_form, 1e-12);
  }
}

TEST(InfoNce, EqualNegativesGiveLogNPlusOne) {
  for (int n = 1; n <= 6; ++n) {
    const std::vector<double> negs(static_cast<std::size_t>(n), 2.5);
    EXPECT_NEAR(infonce_bridge(2.5, negs).l_in, std::log(n + 1.0), 1e-14);
  }
  EXPECT_THROW(infonce_bridge(0.0, {}), Error);
  const double q[2] = {1.0, 2.0}, k[2] = {3.0, -1.0};
  EXPECT_DOUBLE_EQ(infonce_score(q, k, 0.5), 2.0);
}

TEST(DpoLoss, PolicyEqualToReferenceGivesLn2) {
  Policy p(micro_config(), 7);
  const auto batch = single_batch();
  EXPECT_NEAR(dpo_loss(p, p, batch, 0.1), kLn2, 1e-12);
  EXPECT_NEAR(dpo_loss_multi(p, p, multi_batch(), 0.1), kLn2, 1e-12);
}

// Shifting the reference chosen score by -5 at beta 0.1 sets the margin argument to 0.5.
TEST(DpoLoss, MarginHalfMatchesSoftplusOracle) {
  Policy p(micro_config(), 8);
  const auto r = single_batch()[0];
  auto ref = reference_scores(p, r);
  ref.chosen -= 5.0;
  const double loss = record_loss(p, p.bind(false), r, ref, 0.1).loss.item();
  const long double oracle = std::log1p(std::exp(-0.5L));
  EXPECT_NEAR(loss, static_cast<double>(oracle), 1e-15);
  EXPECT_NEAR(loss, 0.474077, 1e-6);
}

TEST(DpoLoss, StrictlyDecreasingInMargin) {
  Policy p(micro_config(), 9);
  const auto r = single_batch()[1];
  const auto base = reference_scores(p, r);
  double prev = std::numeric_limits<double>::infinity();
  for (double z = -3.0; z <= 3.0; z += 0.25) {
    auto ref = base;
    ref.chosen -= z / 0.1;
    const double loss = record_loss(p, p.bind(false), r, ref, 0.1).loss.item();
    EXPECT_LT(loss, prev);
    prev = loss;
  }
}

TEST(DpoLoss, RejectsMultiNegativeRecords) {
  Policy p(micro_config(), 10);
  try {
    dpo_loss(p, p, multi_batch(), 0.1);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("dpo_loss_multi"), std::string::npos);
  }
  auto empty = single_batch();
  empty[0].rejected.clear();
  empty[0].augment.clear();
  EXPECT_THROW(dpo_loss_multi(p, p, empty, 0.1), Error);
}

TEST(DpoLossMulti, SingleNegativeReducesToDpoLoss) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto [pol, ref] = policy_and_ref(seed);
    const auto batch = single_batch();
    const double a = dpo_loss(pol, ref, batch, 0.1);
    EXPECT_NEAR(dpo_loss_multi(pol, ref, batch, 0.1, MultiNegativeLoss::summed), a, 1e-12);
    EXPECT_NEAR(dpo_loss_multi(pol, ref, batch, 0.1, MultiNegativeLoss::softmax), a, 1e-12);
    for (const auto& r : batch) {
      const std::vector<PreferenceRecord> one{r};
      EXPECT_NEAR(dpo_loss_multi(pol, ref, one, 0.1), dpo_loss(pol, ref, one, 0.1), 1e-12);
    }
  }
}

TEST(DpoLossMulti, SoftmaxVariantAtReferenceIsLogOfCandidateCount) {
  Policy p(micro_config(), 11);
  const auto r = multi_batch()[0];
  const std::vector<PreferenceRecord> one{r};
  EXPECT_NEAR(dpo_loss_multi(p, p, one, 0.1, MultiNegativeLoss::summed), kLn2, 1e-12);
  EXPECT_NEAR(dpo_loss_multi(p, p, one, 0.1, MultiNegativeLoss::softmax), std::log(4.0), 1e-12);
}

TEST(DpoGradient, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto [pol, ref] = policy_and_ref(seed);
    const auto single = single_batch(), multi = multi_batch();
    const auto flat = Tensor::leaf({pol.trainable_flat().size()}, pol.trainable_flat());
    const Policy& P = pol;
    const Policy& R = ref;
    EXPECT_LT(grad_check([&](const Tensor& f) { return dpo_loss(P, P.bind_flat(f), R, single, 0.5); }, flat), 1e-4);
    for (auto kind : {MultiNegativeLoss::summed, MultiNegativeLoss::softmax})
      EXPECT_LT(grad_check([&](const Tensor& f) { return dpo_loss_multi(P, P.bind_flat(f), R, multi, 0.5, kind); }, flat), 1e-4);
  }
}

TEST(DpoGradient, FlowsOnlyToThePolicy) {
  auto [pol, ref] = policy_and_ref(12);
  const auto before = ref.trainable_flat();
  const auto p = pol.bind(true);
  dpo_loss(pol, p, ref, single_batch(), 0.1).backward();
  double norm = 0.0;
  for (const auto& t : p)
    if (t.requires_grad())
      for (double g : t.grad()) norm += g * g;
  EXPECT_GT(norm, 0.0);
  EXPECT_EQ(ref.trainable_flat(), before);
}

TEST(ImplicitReward, ZeroAtReferenceAndLinearInBeta) {
  auto [pol, ref] = policy_and_ref(13);
  const auto r = single_batch()[1];
  EXPECT_EQ(implicit_reward(ref, ref, r.image, r.question.text_tokens, r.chosen, 0.1), 0.0);
  const double a = implicit_reward(pol, ref, r.image, r.question.text_tokens, r.chosen, 0.1);
  const double b = implicit_reward(pol, ref, r.image, r.question.text_tokens, r.chosen, 0.2);
  EXPECT_NEAR(b, 2.0 * a, 1e-14);
  const double two_path = 0.1 * (pol.sequence_logprob(pol.bind(false), r.image, r.question.text_tokens, r.chosen).item() -
                                 ref.sequence_logprob(ref.bind(false), r.image, r.question.text_tokens, r.chosen).item());
  EXPECT_NEAR(a, two_path, 1e-12);
  EXPECT_NEAR(implicit_reward(pol, pol.bind(false), ref, r.image, r.question.text_tokens, r.chosen, 0.1).item(), a, 1e-12);
}

TEST(KlDiagnostic, ZeroAtReferenceAndNonNegativeOtherwise) {
  auto [pol, ref] = policy_and_ref(14);
  std::vector<ImageQuestion> prompts;
  for (std::uint64_t s = 0; s < 8; ++s) {
    ImageQuestion x;
    x.image = micro_image(s);
    x.question.text_tokens = {kB};
    prompts.push_back(x);
  }
  const auto same = kl_diagnostic(ref, ref, prompts, 4, 1, 1);
  EXPECT_EQ(same.mean, 0.0);
  EXPECT_EQ(same.n, 32u);
  const auto diff = kl_diagnostic(pol, ref, prompts, 50, 2, 1);
  EXPECT_GT(diff.mean, -3.0 * diff.std_error);
  EXPECT_GT(diff.std_error, 0.0);
  EXPECT_THROW(kl_diagnostic(pol, ref, prompts, 0, 1, 1), Error);
}

TEST(TrainDpo, StepZeroLossIsLn2WithFreshAdapters) {
  auto cfg = micro_config();
  cfg.d_model = 4;
  cfg.n_heads = 2;
  Policy ref(cfg, 15);
  Policy pol = ref;
  pol.attach_lora(2, 0.0, 1);
  PreferenceDataset ds;
  for (std::uint64_t s = 0; s < 12; ++s) ds.records.push_back(record(s, {s % 2 ? kA : kB, kE}, {{kA, kB, kE}}));
  ds.raw_count = ds.kept_count = ds.records.size();
  DpoConfig dc;
  dc.batch_size = 4;
  dc.epochs = 3;
  dc.learning_rate = 1e-2;
  const auto log = train_dpo(pol, ref, ds, dc, 1);
  ASSERT_EQ(log.rows.size(), 9u);
  EXPECT_NEAR(log.rows[0].loss, kLn2, 1e-9);
  EXPECT_EQ(log.rows[0].margin, 0.0);
  for (const auto& row : log.rows) EXPECT_TRUE(std::isfinite(row.loss) && std::isfinite(row.margin) && std::isfinite(row.kl_estimate));
  EXPECT_GT(log.final_stats.mean_margin, 0.0);
  EXPECT_LT(log.final_stats.mean_loss, kLn2);
  // Only adapters moved; the merged model differs from the reference.
  const auto merged = pol.merged();
  EXPECT_NE(merged.trainable_flat(), ref.trainable_flat());
}

TEST(TrainDpo, EmptyDatasetAndBadConfig) {
  Policy p(micro_config(), 16);
  Policy q = p;
  EXPECT_THROW(train_dpo(q, p, PreferenceDataset{}, DpoConfig{}, 1), EmptyDatasetError);
  DpoConfig bad;
  bad.beta = 0.0;
  PreferenceDataset ds;
  ds.records = single_batch();
  EXPECT_THROW(train_dpo(q, p, ds, bad, 1), Error);
}

TEST(DpoConfigPresets, LargeModelRecipe) {
  const auto c = DpoConfig::large_model_preset();
  EXPECT_EQ(c.batch_size, 128);
  EXPECT_EQ(c.learning_rate, 2e-6);
  EXPECT_EQ(c.beta, 0.1);
  EXPECT_EQ(c.epochs, 1);
  EXPECT_EQ(c.weight_decay, 0.0);
}
