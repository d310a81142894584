#pragma once

// Supervised finetuning on labelled (image, question, answer) triples; its
// output is the frozen starting checkpoint for preference synthesis and the
// DPO reference model.

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "json.hpp"
#include "seva/microworld.hpp"
#include "seva/optim.hpp"
#include "seva/policy.hpp"

namespace seva {

struct SftConfig {
  int steps = 800;
  int batch_size = 32;
  double lr = 3e-3;
  double min_lr_frac = 0.05;  // cosine decay floor
  int warmup_steps = 50;
  double grad_clip = 1.0;
  std::uint64_t seed = 1;
  int log_every = 50;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SftConfig, steps, batch_size, lr, min_lr_frac, warmup_steps, grad_clip,
                                                seed, log_every)

struct SftLogRow {
  int step = 0;
  double train_loss = 0.0;
  double lr = 0.0;
};

struct LabelledExample {
  const ToyImage* image;
  const Question* question;
  const TokenSequence* answer;
};

inline std::vector<LabelledExample> labelled_examples(const std::vector<Episode>& corpus) {
  std::vector<LabelledExample> out;
  for (const auto& ep : corpus) {
    if (ep.truth.size() != ep.questions.size()) throw Error("sft: corpus episode lacks ground truth");
    for (std::size_t q = 0; q < ep.questions.size(); ++q) out.push_back({&ep.image, &ep.questions[q], &ep.truth[q]});
  }
  return out;
}

// Mean per-answer negative log-likelihood.
inline double mean_nll(const Policy& policy, const std::vector<Episode>& corpus, std::size_t threads) {
  auto ex = labelled_examples(corpus);
  std::vector<double> nll(ex.size());
  parallel_for(ex.size(), threads, [&](std::size_t i) {
    nll[i] = -policy.sequence_logprob(*ex[i].image, ex[i].question->text_tokens, *ex[i].answer);
  });
  double s = 0.0;
  for (double v : nll) s += v;
  return ex.empty() ? 0.0 : s / static_cast<double>(ex.size());
}

inline double sft_lr(const SftConfig& cfg, int step) {
  if (step < cfg.warmup_steps) return cfg.lr * (step + 1) / cfg.warmup_steps;
  const double span = std::max(1, cfg.steps - cfg.warmup_steps);
  const double progress = std::min(1.0, (step - cfg.warmup_steps) / span);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return cfg.lr * (cfg.min_lr_frac + (1.0 - cfg.min_lr_frac) * cosine);
}

// Trains every parameter of `policy` in place. A non-finite loss aborts with
// the configuration in the message.
inline std::vector<SftLogRow> sft_train(Policy& policy, const std::vector<Episode>& corpus, const SftConfig& cfg,
                                        std::size_t threads = default_threads(),
                                        const std::function<void(const SftLogRow&)>& on_log = {}) {
  if (corpus.empty()) throw Error("sft: empty corpus");
  auto ex = labelled_examples(corpus);
  std::vector<SftLogRow> log;
  if (cfg.steps <= 0) return log;
  Adam opt({cfg.lr, 0.9, 0.999, 1e-8, 0.0}, policy.trainable_count());
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(ex.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  std::vector<double> grad;
  double running = 0.0;
  int running_n = 0;
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<std::size_t> batch;
    for (int b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng.engine());
        cursor = 0;
      }
      batch.push_back(order[cursor++]);
    }
    const double total = batch_gradient(
        policy, batch.size(), threads,
        [&](const Bound& p, std::size_t i) {
          const auto& e = ex[batch[i]];
          return scale(policy.sequence_logprob(p, *e.image, e.question->text_tokens, *e.answer), -1.0);
        },
        grad);
    const double loss = total / static_cast<double>(batch.size());
    if (!std::isfinite(loss))
      throw Error("sft: non-finite loss at step " + std::to_string(step) + "; config " + nlohmann::json(cfg).dump());
    for (auto& g : grad) g /= static_cast<double>(batch.size());
    clip_grad_norm(grad, cfg.grad_clip);
    const double lr = sft_lr(cfg, step);
    opt.step(policy, grad, lr / cfg.lr);
    running += loss;
    ++running_n;
    if ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps) {
      SftLogRow row{step + 1, running / running_n, lr};
      log.push_back(row);
      if (on_log) on_log(row);
      running = 0.0;
      running_n = 0;
    }
  }
  return log;
}

}  // namespace seva
