#pragma once

// Preference optimization: Bradley-Terry probabilities, the DPO loss and its
// multi-negative form, the InfoNCE correspondence, and the training loop with
// reward-margin telemetry.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "json.hpp"
#include "seva/optim.hpp"
#include "seva/prefgen.hpp"

namespace seva {

enum class MultiNegativeLoss { summed, softmax };

NLOHMANN_JSON_SERIALIZE_ENUM(MultiNegativeLoss, {{MultiNegativeLoss::summed, "summed"}, {MultiNegativeLoss::softmax, "softmax"}})

struct DpoConfig {
  double beta = 0.1;
  int epochs = 1;
  int batch_size = 32;
  double learning_rate = 3e-4;
  double weight_decay = 0.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double grad_clip = 0.0;  // 0 disables
  MultiNegativeLoss multi_loss = MultiNegativeLoss::summed;
  int lora_rank = 8;
  double lora_alpha = 0.0;  // 0 means 2 * rank
  std::uint64_t seed = 1;
  int probe_size = 64;
  int probe_every = 10;
  int kl_every = 10;
  int kl_prompts = 16;

  // Billion-parameter recipe: batch 128, lr 2e-6.
  static DpoConfig large_model_preset() {
    DpoConfig c;
    c.batch_size = 128;
    c.learning_rate = 2e-6;
    return c;
  }

  void validate() const {
    if (!(beta > 0.0)) throw Error("dpo config: beta must be positive");
    if (epochs < 0 || batch_size < 1) throw Error("dpo config: epochs >= 0 and batch_size >= 1 required");
    if (!(learning_rate >= 0.0)) throw Error("dpo config: negative learning rate");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(DpoConfig, beta, epochs, batch_size, learning_rate, weight_decay, adam_beta1,
                                                adam_beta2, grad_clip, multi_loss, lora_rank, lora_alpha, seed, probe_size,
                                                probe_every, kl_every, kl_prompts)

// ---------------------------------------------------------------------------
// Scalar identities

// exp(r_c) / (exp(r_c) + sum_i exp(r_r[i]))
inline double bt_probability(double r_c, std::span<const double> r_r) {
  std::vector<double> all{r_c};
  all.insert(all.end(), r_r.begin(), r_r.end());
  for (double v : all)
    if (!std::isfinite(v)) throw NumericError("bt_probability: non-finite reward");
  return std::exp(r_c - kernels::log_sum_exp(all.data(), all.size()));
}

inline double bt_probability(double r_c, double r_r) { return bt_probability(r_c, std::span<const double>(&r_r, 1)); }

struct InfoNceTerms {
  double l_in;        // -log( e^{f+} / (e^{f+} + sum_j e^{f-_j}) ) over all negatives
  double l_in_single;  // same with only the first negative
  double softplus_form;  // softplus(-(f+ - f-_0)), equal to l_in_single
};

inline InfoNceTerms infonce_bridge(double f_pos, std::span<const double> f_neg) {
  if (f_neg.empty()) throw Error("infonce_bridge: need at least one negative");
  std::vector<double> all{f_pos};
  all.insert(all.end(), f_neg.begin(), f_neg.end());
  const double pair[2] = {f_pos, f_neg[0]};
  return {kernels::log_sum_exp(all.data(), all.size()) - f_pos, kernels::log_sum_exp(pair, 2) - f_pos,
          kernels::softplus(-(f_pos - f_neg[0]))};
}

// f(q, k) = q.k / tau
inline double infonce_score(std::span<const double> q, std::span<const double> k, double tau) {
  if (q.size() != k.size()) throw Error("infonce_score: length mismatch");
  return kernels::dot(q.data(), k.data(), q.size()) / tau;
}

// ---------------------------------------------------------------------------
// Per-record losses

struct RefScores {
  double chosen = 0.0;
  std::vector<double> rejected;
};

inline RefScores reference_scores(const Policy& ref, const PreferenceRecord& r) {
  RefScores s{ref.sequence_logprob(r.image, r.question.text_tokens, r.chosen), {}};
  for (const auto& y : r.rejected) s.rejected.push_back(ref.sequence_logprob(r.image, r.question.text_tokens, y));
  return s;
}

inline std::vector<RefScores> reference_scores(const Policy& ref, std::span<const PreferenceRecord> records,
                                               std::size_t threads = default_threads()) {
  std::vector<RefScores> out(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) { out[i] = reference_scores(ref, records[i]); });
  return out;
}

struct RecordLoss {
  Tensor loss;
  double chosen_ratio = 0.0;    // log pi(y_c) - log pi_ref(y_c)
  double rejected_ratio = 0.0;  // mean over negatives of log pi(y_r) - log pi_ref(y_r)
  double margin = 0.0;          // beta * (chosen_ratio - rejected_ratio)
};

// Multi-negative record loss. summed: softplus(-(b*dc - sum_i b*dr_i));
// softmax: cross-entropy of the chosen answer against {chosen} + negatives.
// With one negative both equal the single-negative DPO loss.
inline RecordLoss record_loss(const Policy& policy, const Bound& p, const PreferenceRecord& r, const RefScores& ref, double beta,
                              MultiNegativeLoss kind = MultiNegativeLoss::summed) {
  if (r.rejected.empty()) throw Error("dpo_loss_multi: record has no rejected answers");
  if (ref.rejected.size() != r.rejected.size()) throw Error("dpo: reference scores do not match record");
  const auto& q = r.question.text_tokens;
  Tensor dc = add_scalar(policy.sequence_logprob(p, r.image, q, r.chosen), -ref.chosen);
  std::vector<Tensor> dr;
  for (std::size_t k = 0; k < r.rejected.size(); ++k)
    dr.push_back(add_scalar(policy.sequence_logprob(p, r.image, q, r.rejected[k]), -ref.rejected[k]));
  RecordLoss out;
  out.chosen_ratio = dc.item();
  for (const auto& t : dr) out.rejected_ratio += t.item();
  out.rejected_ratio /= static_cast<double>(dr.size());
  out.margin = beta * (out.chosen_ratio - out.rejected_ratio);
  if (kind == MultiNegativeLoss::summed || dr.size() == 1) {
    Tensor z = dc;
    for (const auto& t : dr) z = sub(z, t);
    out.loss = softplus(scale(z, -beta));
  } else {
    std::vector<Tensor> rewards{dc};
    rewards.insert(rewards.end(), dr.begin(), dr.end());
    auto logp = log_softmax(reshape(scale(stack_scalars(rewards), beta), {1, rewards.size()}));
    out.loss = scale(slice_flat(logp, 0, 1), -1.0);
  }
  return out;
}

inline void require_single_negative(std::span<const PreferenceRecord> batch) {
  for (const auto& r : batch)
    if (r.rejected.size() != 1)
      throw Error("dpo_loss: record with " + std::to_string(r.rejected.size()) + " rejected answers; use dpo_loss_multi");
}

inline Tensor mean_record_loss(const Policy& policy, const Bound& p, std::span<const PreferenceRecord> batch,
                               std::span<const RefScores> refs, double beta, MultiNegativeLoss kind) {
  if (batch.empty()) throw Error("dpo: empty batch");
  if (refs.size() != batch.size()) throw Error("dpo: reference score count mismatch");
  std::vector<Tensor> losses;
  for (std::size_t i = 0; i < batch.size(); ++i) losses.push_back(record_loss(policy, p, batch[i], refs[i], beta, kind).loss);
  return mean(stack_scalars(losses));
}

// Mean over the batch of softplus(-beta * [(log pi - log pi_ref)(y_c) - (log pi - log pi_ref)(y_r)]),
// differentiable through `p` only.
inline Tensor dpo_loss(const Policy& policy, const Bound& p, const Policy& ref, std::span<const PreferenceRecord> batch,
                       double beta) {
  require_single_negative(batch);
  auto refs = reference_scores(ref, batch, 1);
  return mean_record_loss(policy, p, batch, refs, beta, MultiNegativeLoss::summed);
}

inline double dpo_loss(const Policy& policy, const Policy& ref, std::span<const PreferenceRecord> batch, double beta) {
  return dpo_loss(policy, policy.bind(false), ref, batch, beta).item();
}

inline Tensor dpo_loss_multi(const Policy& policy, const Bound& p, const Policy& ref, std::span<const PreferenceRecord> batch,
                             double beta, MultiNegativeLoss kind = MultiNegativeLoss::summed) {
  auto refs = reference_scores(ref, batch, 1);
  return mean_record_loss(policy, p, batch, refs, beta, kind);
}

inline double dpo_loss_multi(const Policy& policy, const Policy& ref, std::span<const PreferenceRecord> batch, double beta,
                             MultiNegativeLoss kind = MultiNegativeLoss::summed) {
  return dpo_loss_multi(policy, policy.bind(false), ref, batch, beta, kind).item();
}

// beta * (log pi(y|x) - log pi_ref(y|x))
inline Tensor implicit_reward(const Policy& policy, const Bound& p, const Policy& ref, const ToyImage& image,
                              const std::vector<TokenId>& question, const TokenSequence& y, double beta) {
  return scale(add_scalar(policy.sequence_logprob(p, image, question, y), -ref.sequence_logprob(image, question, y)), beta);
}

inline double implicit_reward(const Policy& policy, const Policy& ref, const ToyImage& image, const std::vector<TokenId>& question,
                              const TokenSequence& y, double beta) {
  return beta * (policy.sequence_logprob(image, question, y) - ref.sequence_logprob(image, question, y));
}

// ---------------------------------------------------------------------------
// KL diagnostic

struct KlEstimate {
  double mean = 0.0;
  double std_error = 0.0;
  std::size_t n = 0;
};

// Monte Carlo KL(pi || pi_ref): mean of log pi(y) - log pi_ref(y) over y ~ pi.
inline KlEstimate kl_diagnostic(const Policy& policy, const Policy& ref, const std::vector<ImageQuestion>& prompts, int n_samples,
                                std::uint64_t seed, std::size_t threads = default_threads()) {
  if (n_samples < 1) throw Error("kl_diagnostic: n_samples must be >= 1");
  const std::size_t ns = static_cast<std::size_t>(n_samples);
  std::vector<double> v(prompts.size() * ns);
  const int max_len = policy.config().max_answer_len;
  parallel_for(v.size(), threads, [&](std::size_t i) {
    const auto& x = prompts[i / ns];
    auto y = policy.generate(x.image, x.question.text_tokens, 1.0, max_len, derive_seed(seed, {i}));
    v[i] = policy.sequence_logprob(x.image, x.question.text_tokens, y) - ref.sequence_logprob(x.image, x.question.text_tokens, y);
  });
  KlEstimate k;
  k.n = v.size();
  if (v.empty()) return k;
  for (double x : v) k.mean += x;
  k.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - k.mean) * (x - k.mean);
    k.std_error = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
  }
  return k;
}

// ---------------------------------------------------------------------------
// Training

struct TrainLogRow {
  int step = 0;
  double loss = 0.0;
  double margin = 0.0;
  double margin_pos_frac = 0.0;
  double chosen_ratio = 0.0;
  double rejected_ratio = 0.0;
  double kl_estimate = 0.0;
};

struct ProbePoint {
  int step = 0;
  double margin = 0.0;
};

struct MarginStats {
  double mean_margin = 0.0;
  double margin_pos_frac = 0.0;
  double mean_loss = 0.0;
};

struct TrainLog {
  std::vector<TrainLogRow> rows;
  std::vector<ProbePoint> probe;
  MarginStats final_stats;

  void write_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw Error("cannot write " + path);
    os.precision(17);
    os << "step,loss,margin,margin_pos_frac,chosen_ratio,rejected_ratio,kl_estimate\n";
    for (const auto& r : rows)
      os << r.step << ',' << r.loss << ',' << r.margin << ',' << r.margin_pos_frac << ',' << r.chosen_ratio << ','
         << r.rejected_ratio << ',' << r.kl_estimate << '\n';
  }
};

class DpoDivergence : public NumericError {
public:
  DpoDivergence(const std::string& msg, Policy last_good) : NumericError(msg), last_good_(std::move(last_good)) {}
  const Policy& last_good() const { return last_good_; }

private:
  Policy last_good_;
};

inline MarginStats margin_stats(const Policy& policy, std::span<const PreferenceRecord> records, std::span<const RefScores> refs,
                                double beta, MultiNegativeLoss kind, std::size_t threads = default_threads()) {
  MarginStats s;
  if (records.empty()) return s;
  std::vector<double> margin(records.size()), loss(records.size());
  parallel_for(records.size(), threads, [&](std::size_t i) {
    auto r = record_loss(policy, policy.bind(false), records[i], refs[i], beta, kind);
    margin[i] = r.margin;
    loss[i] = r.loss.item();
  });
  for (std::size_t i = 0; i < records.size(); ++i) {
    s.mean_margin += margin[i];
    s.mean_loss += loss[i];
    s.margin_pos_frac += margin[i] > 0.0 ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(records.size());
  s.mean_margin /= n;
  s.mean_loss /= n;
  s.margin_pos_frac /= n;
  return s;
}

// Optimizes the trainable parameters of `policy` (normally its adapters)
// against the frozen `ref`. Rows are logged before each update, so row 0
// holds the loss at initialization.
inline TrainLog train_dpo(Policy& policy, const Policy& ref, const PreferenceDataset& dataset, const DpoConfig& cfg,
                          std::size_t threads = default_threads(), const std::function<void(const TrainLogRow&)>& on_step = {}) {
  cfg.validate();
  const auto& recs = dataset.records;
  if (recs.empty()) throw EmptyDatasetError("train_dpo: empty preference dataset");
  auto refs = reference_scores(ref, recs, threads);

  const std::size_t n_probe = std::min(recs.size(), static_cast<std::size_t>(std::max(cfg.probe_size, 0)));
  std::span<const PreferenceRecord> probe_recs(recs.data(), n_probe);
  std::span<const RefScores> probe_refs(refs.data(), n_probe);
  std::vector<ImageQuestion> kl_prompts;
  for (std::size_t i = 0; i < recs.size() && kl_prompts.size() < static_cast<std::size_t>(std::max(cfg.kl_prompts, 0)); ++i)
    kl_prompts.push_back({recs[i].image_ref.episode, recs[i].image_ref.question, recs[i].image, recs[i].question});

  Adam opt({cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, 1e-8, cfg.weight_decay}, policy.trainable_count());
  TrainLog log;
  std::vector<double> grad;
  double kl = 0.0;
  int step = 0;
  auto probe = [&] {
    if (n_probe) log.probe.push_back({step, margin_stats(policy, probe_recs, probe_refs, cfg.beta, cfg.multi_loss, threads).mean_margin});
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(recs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(epoch)}));
    std::shuffle(order.begin(), order.end(), rng.engine());
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t B = std::min(order.size() - start, static_cast<std::size_t>(cfg.batch_size));
      if (cfg.probe_every > 0 && step % cfg.probe_every == 0) probe();
      if (cfg.kl_every > 0 && step % cfg.kl_every == 0 && !kl_prompts.empty())
        kl = kl_diagnostic(policy, ref, kl_prompts, 1, derive_seed(cfg.seed, {0x4b4cULL, static_cast<std::uint64_t>(step)}), threads).mean;

      std::vector<double> margins(B), cr(B), rr(B);
      const double total = batch_gradient(
          policy, B, threads,
          [&](const Bound& p, std::size_t i) {
            const std::size_t k = order[start + i];
            auto r = record_loss(policy, p, recs[k], refs[k], cfg.beta, cfg.multi_loss);
            margins[i] = r.margin;
            cr[i] = r.chosen_ratio;
            rr[i] = r.rejected_ratio;
            return r.loss;
          },
          grad);
      TrainLogRow row{step, total / static_cast<double>(B), 0.0, 0.0, 0.0, 0.0, kl};
      for (std::size_t i = 0; i < B; ++i) {
        row.margin += margins[i];
        row.margin_pos_frac += margins[i] > 0.0 ? 1.0 : 0.0;
        row.chosen_ratio += cr[i];
        row.rejected_ratio += rr[i];
      }
      row.margin /= static_cast<double>(B);
      row.margin_pos_frac /= static_cast<double>(B);
      row.chosen_ratio /= static_cast<double>(B);
      row.rejected_ratio /= static_cast<double>(B);
      bool finite = std::isfinite(row.loss);
      for (double g : grad) finite = finite && std::isfinite(g);
      if (!finite)
        throw DpoDivergence("train_dpo: non-finite loss at step " + std::to_string(step) + "; config " + nlohmann::json(cfg).dump(),
                            policy);
      log.rows.push_back(row);
      if (on_step) on_step(row);
      for (auto& g : grad) g /= static_cast<double>(B);
      if (cfg.grad_clip > 0.0) clip_grad_norm(grad, cfg.grad_clip);
      opt.step(policy, grad);
      ++step;
    }
  }
  probe();
  log.final_stats = margin_stats(policy, recs, refs, cfg.beta, cfg.multi_loss, threads);
  return log;
}

}  // namespace seva
