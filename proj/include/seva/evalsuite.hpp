#pragma once

// Evaluation against microworld ground truth: exact-match accuracy under an
// augmentation, a 0-10 edit-distance rubric, answer consistency under
// sampling temperature, and head-to-head comparison of two policies.

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "seva/augment.hpp"
#include "seva/microworld.hpp"
#include "seva/parallel.hpp"
#include "seva/policy.hpp"

namespace seva {

struct EvalItem {
  ToyImage image;
  Question question;
  TokenSequence truth;
};

inline std::vector<EvalItem> eval_items(const std::vector<Episode>& corpus) {
  std::vector<EvalItem> out;
  for (const auto& ep : corpus) {
    if (ep.truth.size() != ep.questions.size()) throw Error("eval: corpus lacks ground truth");
    for (std::size_t q = 0; q < ep.questions.size(); ++q) out.push_back({ep.image, ep.questions[q], ep.truth[q]});
  }
  return out;
}

inline std::vector<TokenId> answer_body(const TokenSequence& s, TokenId eos = Tokenizer::kEos) {
  auto it = std::find(s.tokens.begin(), s.tokens.end(), eos);
  return {s.tokens.begin(), it};
}

// ---------------------------------------------------------------------------
// Accuracy

struct AccuracyReport {
  double accuracy = 0.0;
  std::size_t n = 0;
  std::size_t correct = 0;
  std::array<std::size_t, 5> template_n{};
  std::array<std::size_t, 5> template_correct{};
};

inline void to_json(nlohmann::json& j, const AccuracyReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t t = 0; t < 5; ++t)
    if (r.template_n[t])
      per[template_name(static_cast<Template>(t))] = static_cast<double>(r.template_correct[t]) / static_cast<double>(r.template_n[t]);
  j = {{"accuracy", r.accuracy}, {"n", r.n}, {"correct", r.correct}, {"per_template", per}};
}

// Greedy exact match on spec-transformed inputs; item i is augmented with
// seed derive_seed(spec.seed, {i}).
inline AccuracyReport accuracy_report(const Policy& policy, const std::vector<EvalItem>& items, const AugmentSpec& spec,
                                      std::size_t threads = default_threads()) {
  spec.validate();
  std::vector<char> ok(items.size(), 0);
  const int max_len = policy.config().max_answer_len;
  parallel_for(items.size(), threads, [&](std::size_t i) {
    AugmentSpec s = spec;
    s.seed = derive_seed(spec.seed, {i});
    auto y = policy.generate(apply(s, items[i].image), items[i].question.text_tokens, 0.0, max_len, 0);
    ok[i] = y == items[i].truth;
  });
  AccuracyReport r;
  r.n = items.size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto t = static_cast<std::size_t>(items[i].question.tmpl);
    ++r.template_n[t];
    if (ok[i]) {
      ++r.correct;
      ++r.template_correct[t];
    }
  }
  r.accuracy = r.n ? static_cast<double>(r.correct) / static_cast<double>(r.n) : 0.0;
  return r;
}

inline double accuracy(const Policy& policy, const std::vector<EvalItem>& items, const AugmentSpec& spec,
                       std::size_t threads = default_threads()) {
  return accuracy_report(policy, items, spec, threads).accuracy;
}

// ---------------------------------------------------------------------------
// Rubric

inline std::size_t edit_distance(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Whether every answer token has a class the template can produce.
inline bool on_template(const Tokenizer& tok, const std::vector<TokenId>& body, Template t) {
  for (auto id : body) {
    if (id < 0 || static_cast<std::size_t>(id) >= tok.size()) return false;
    const auto c = tok.token_class(id);
    switch (t) {
      case Template::read_row:
      case Template::read_col:
      case Template::glyph_at:
        if (c != TokenClass::glyph && c != TokenClass::blank) return false;
        break;
      case Template::count_glyph:
        if (c != TokenClass::digit) return false;
        break;
      case Template::exists_glyph:
        if (c != TokenClass::yes_no) return false;
        break;
    }
  }
  return true;
}

inline constexpr int kOffTemplateCap = 3;

// 10 * (1 - token edit distance / longer length), rounded half away from
// zero. An answer identical to the reference scores 10; otherwise answers
// with tokens the template cannot produce score at most 3.
inline int judge_score(const Tokenizer& tok, const TokenSequence& answer, const TokenSequence& truth, const Question& question) {
  const auto a = answer_body(answer), t = answer_body(truth);
  if (a == t) return 10;
  if (a.empty()) return 0;
  const double longest = static_cast<double>(std::max(a.size(), t.size()));
  const double frac = 1.0 - static_cast<double>(edit_distance(a, t)) / longest;
  int score = static_cast<int>(std::lround(10.0 * frac));
  if (!on_template(tok, a, question.tmpl)) score = std::min(score, kOffTemplateCap);
  return std::clamp(score, 0, 10);
}

struct JudgeRequest {
  Question question;
  TokenSequence answer;
  TokenSequence reference;
};

// A scorer of answers on the 0-10 scale. Only the local rubric ships; a
// remote model-based judge would implement the same call.
class JudgeBackend {
public:
  virtual ~JudgeBackend() = default;
  virtual int score(const JudgeRequest& req) const = 0;
};

class RubricJudge final : public JudgeBackend {
public:
  explicit RubricJudge(const Tokenizer& tok) : tok_(tok) {}
  int score(const JudgeRequest& req) const override { return judge_score(tok_, req.answer, req.reference, req.question); }

private:
  Tokenizer tok_;
};

// ---------------------------------------------------------------------------
// Consistency under sampling

struct ConsistencyReport {
  double temperature = 0.0;
  double q_consistency = 0.0;  // sampled answer vs ground truth
  double a_consistency = 0.0;  // sampled answer vs the same policy's greedy answer
  std::size_t n_samples = 0;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ConsistencyReport, temperature, q_consistency, a_consistency, n_samples)

inline const std::vector<double>& default_temperatures() {
  static const std::vector<double> t{0.2, 0.4, 0.5, 0.7, 0.9};
  return t;
}

inline std::vector<ConsistencyReport> consistency_probe(const Policy& policy, const std::vector<EvalItem>& items,
                                                        const std::vector<double>& temperatures, int n_samples, std::uint64_t seed,
                                                        const JudgeBackend& judge, std::size_t threads = default_threads()) {
  if (n_samples < 1) throw Error("consistency_probe: n_samples must be >= 1");
  for (double t : temperatures)
    if (!(t >= 0.0 && t <= 2.0)) throw Error("consistency_probe: temperature outside [0, 2]");
  const int max_len = policy.config().max_answer_len;
  const std::size_t nt = temperatures.size(), ns = static_cast<std::size_t>(n_samples);
  std::vector<int> qs(items.size() * nt * ns), as(qs.size());
  parallel_for(items.size(), threads, [&](std::size_t i) {
    const auto& it = items[i];
    const auto greedy = policy.generate(it.image, it.question.text_tokens, 0.0, max_len, 0);
    for (std::size_t k = 0; k < nt; ++k)
      for (std::size_t s = 0; s < ns; ++s) {
        const auto y = policy.generate(it.image, it.question.text_tokens, temperatures[k], max_len, derive_seed(seed, {i, k, s}));
        const std::size_t idx = (i * nt + k) * ns + s;
        qs[idx] = judge.score({it.question, y, it.truth});
        as[idx] = judge.score({it.question, y, greedy});
      }
  });
  std::vector<ConsistencyReport> out;
  for (std::size_t k = 0; k < nt; ++k) {
    ConsistencyReport r{temperatures[k], 0.0, 0.0, items.size() * ns};
    for (std::size_t i = 0; i < items.size(); ++i)
      for (std::size_t s = 0; s < ns; ++s) {
        r.q_consistency += qs[(i * nt + k) * ns + s];
        r.a_consistency += as[(i * nt + k) * ns + s];
      }
    if (r.n_samples) {
      r.q_consistency /= static_cast<double>(r.n_samples);
      r.a_consistency /= static_cast<double>(r.n_samples);
    }
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Head-to-head

enum class Outcome { win, lose, equal, discarded };

NLOHMANN_JSON_SERIALIZE_ENUM(Outcome, {{Outcome::win, "win"}, {Outcome::lose, "lose"}, {Outcome::equal, "equal"},
                                       {Outcome::discarded, "discarded"}})

struct MatchResult {
  std::vector<Outcome> outcomes;  // from policy a's side
  std::size_t win = 0, lose = 0, equal = 0, discarded = 0;
  double mean_length_a = 0.0, mean_length_b = 0.0;  // answer tokens, EOS excluded

  std::size_t n() const { return outcomes.size(); }
  std::size_t decided() const { return win + lose + equal; }
};

inline void to_json(nlohmann::json& j, const MatchResult& m) {
  j = {{"n", m.n()},       {"win", m.win},   {"lose", m.lose}, {"equal", m.equal}, {"discarded", m.discarded},
       {"mean_length_a", m.mean_length_a}, {"mean_length_b", m.mean_length_b}};
}

// Greedy answers of both policies are scored against the truth; the higher
// score wins, equal nonzero scores are tallied as `equal`, and items where
// both score zero are discarded.
inline MatchResult pairwise_match(const Policy& a, const Policy& b, const std::vector<EvalItem>& items, const JudgeBackend& judge,
                                  std::size_t threads = default_threads()) {
  std::vector<int> sa(items.size()), sb(items.size());
  std::vector<std::size_t> la(items.size()), lb(items.size());
  parallel_for(items.size(), threads, [&](std::size_t i) {
    const auto& it = items[i];
    const auto ya = a.generate(it.image, it.question.text_tokens, 0.0, a.config().max_answer_len, 0);
    const auto yb = b.generate(it.image, it.question.text_tokens, 0.0, b.config().max_answer_len, 0);
    sa[i] = judge.score({it.question, ya, it.truth});
    sb[i] = judge.score({it.question, yb, it.truth});
    la[i] = answer_body(ya).size();
    lb[i] = answer_body(yb).size();
  });
  MatchResult m;
  for (std::size_t i = 0; i < items.size(); ++i) {
    Outcome o = sa[i] == 0 && sb[i] == 0 ? Outcome::discarded
                : sa[i] > sb[i]          ? Outcome::win
                : sa[i] < sb[i]          ? Outcome::lose
                                         : Outcome::equal;
    m.outcomes.push_back(o);
    switch (o) {
      case Outcome::win: ++m.win; break;
      case Outcome::lose: ++m.lose; break;
      case Outcome::equal: ++m.equal; break;
      case Outcome::discarded: ++m.discarded; break;
    }
    m.mean_length_a += static_cast<double>(la[i]);
    m.mean_length_b += static_cast<double>(lb[i]);
  }
  if (!items.empty()) {
    m.mean_length_a /= static_cast<double>(items.size());
    m.mean_length_b /= static_cast<double>(items.size());
  }
  return m;
}

// ---------------------------------------------------------------------------
// Reports

inline void write_consistency_csv(const std::string& path, const std::vector<std::pair<std::string, std::vector<ConsistencyReport>>>& rows) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os.precision(17);
  os << "model,temperature,q_consistency,a_consistency,n_samples\n";
  for (const auto& [name, reps] : rows)
    for (const auto& r : reps) os << name << ',' << r.temperature << ',' << r.q_consistency << ',' << r.a_consistency << ',' << r.n_samples << '\n';
}

inline void write_match_csv(const std::string& path, const MatchResult& m) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  os << "item,outcome\n";
  for (std::size_t i = 0; i < m.outcomes.size(); ++i) os << i << ',' << nlohmann::json(m.outcomes[i]).get<std::string>() << '\n';
}

}  // namespace seva
