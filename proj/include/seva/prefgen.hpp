#pragma once

// Label-free preference synthesis: the frozen policy answers each question
// on the clean image (chosen) and on augmented copies (rejected); pairs whose
// answers coincide are dropped. Nothing here reads ground-truth answers.

#include <algorithm>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"
#include "seva/augment.hpp"
#include "seva/microworld.hpp"
#include "seva/parallel.hpp"
#include "seva/policy.hpp"

namespace seva {

struct ImageRef {
  std::size_t episode = 0;
  std::size_t question = 0;
  std::uint64_t content_hash = 0;
};

struct PreferenceRecord {
  ImageRef image_ref;
  Question question;
  TokenSequence chosen;
  std::vector<TokenSequence> rejected;
  std::vector<AugmentSpec> augment;  // one per rejected
  ToyImage image;                    // clean image; not serialized, rehydrated from the corpus
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::size_t n_pairs = 0;
  std::size_t k_per_episode = 2;
  std::vector<AugmentSpec> specs;
  std::uint64_t policy_hash = 0;
  std::uint64_t corpus_hash = 0;
  std::size_t raw_count = 0;
  std::size_t kept_count = 0;
};

inline void to_json(nlohmann::json& j, const DatasetManifest& m) {
  const double retention = m.raw_count ? static_cast<double>(m.kept_count) / static_cast<double>(m.raw_count) : 0.0;
  j = {{"seed", m.seed},
       {"n_pairs", m.n_pairs},
       {"k_per_episode", m.k_per_episode},
       {"specs", m.specs},
       {"policy_hash", m.policy_hash},
       {"corpus_hash", m.corpus_hash},
       {"raw_count", m.raw_count},
       {"kept_count", m.kept_count},
       {"retention", retention}};
}

inline void from_json(const nlohmann::json& j, DatasetManifest& m) {
  m.seed = j.at("seed").get<std::uint64_t>();
  m.n_pairs = j.at("n_pairs").get<std::size_t>();
  m.k_per_episode = j.value("k_per_episode", std::size_t{2});
  m.specs = j.at("specs").get<std::vector<AugmentSpec>>();
  m.policy_hash = j.at("policy_hash").get<std::uint64_t>();
  m.corpus_hash = j.at("corpus_hash").get<std::uint64_t>();
  m.raw_count = j.value("raw_count", std::size_t{0});
  m.kept_count = j.value("kept_count", std::size_t{0});
}

struct PreferenceDataset {
  std::vector<PreferenceRecord> records;
  std::size_t raw_count = 0;   // M: instances before filtering
  std::size_t kept_count = 0;  // N_d
  DatasetManifest manifest;

  double retention() const { return raw_count ? static_cast<double>(kept_count) / static_cast<double>(raw_count) : 0.0; }
};

class EmptyDatasetError : public Error {
public:
  using Error::Error;
};

// Hash of everything a label-free consumer can see: images and questions.
inline std::uint64_t corpus_hash(const std::vector<Episode>& corpus) {
  Fnv1a h;
  for (const auto& ep : corpus) {
    h.u64(ep.image.content_hash());
    for (const auto& q : ep.questions)
      for (auto t : q.text_tokens) h.u64(static_cast<std::uint64_t>(t));
  }
  return h.value();
}

// Token-exact equality up to and including the first EOS.
inline bool same_answer(const TokenSequence& a, const TokenSequence& b, TokenId eos = Tokenizer::kEos) {
  auto trim = [eos](const TokenSequence& s) {
    auto it = std::find(s.tokens.begin(), s.tokens.end(), eos);
    return std::vector<TokenId>(s.tokens.begin(), it == s.tokens.end() ? it : it + 1);
  };
  return trim(a) == trim(b);
}

inline std::pair<TokenSequence, TokenSequence> generate_pair(const Policy& policy, const ToyImage& image, const Question& q,
                                                             const AugmentSpec& spec) {
  const int max_len = policy.config().max_answer_len;
  auto chosen = policy.generate(image, q.text_tokens, 0.0, max_len, 0);
  auto rejected = policy.generate(apply(spec, image), q.text_tokens, 0.0, max_len, 0);
  return {std::move(chosen), std::move(rejected)};
}

// Keeps, per record, the rejected answers that differ from the chosen one;
// records left without a rejected answer are dropped.
inline PreferenceDataset filter_equal(std::vector<PreferenceRecord> raw) {
  PreferenceDataset ds;
  ds.raw_count = raw.size();
  for (auto& r : raw) {
    if (r.rejected.size() != r.augment.size()) throw Error("filter_equal: rejected/provenance count mismatch");
    PreferenceRecord kept = std::move(r);
    std::vector<TokenSequence> rej;
    std::vector<AugmentSpec> aug;
    for (std::size_t k = 0; k < kept.rejected.size(); ++k)
      if (!same_answer(kept.chosen, kept.rejected[k])) {
        rej.push_back(std::move(kept.rejected[k]));
        aug.push_back(kept.augment[k]);
      }
    if (rej.empty()) continue;
    kept.rejected = std::move(rej);
    kept.augment = std::move(aug);
    ds.records.push_back(std::move(kept));
  }
  ds.kept_count = ds.records.size();
  return ds;
}

// Augmentation seed for negative k of record j.
inline AugmentSpec record_spec(const AugmentSpec& spec, std::uint64_t seed, std::size_t record, std::size_t k) {
  AugmentSpec s = spec;
  s.seed = derive_seed(seed, {record, k, spec.seed});
  return s;
}

// The (image, question) instances a dataset of n_pairs draws from.
inline std::vector<ImageQuestion> select_instances(const std::vector<Episode>& corpus, std::size_t n_pairs, std::size_t k_per_episode,
                                                   std::uint64_t seed) {
  auto pool = sample_pairs(corpus, k_per_episode, seed);
  if (n_pairs > pool.size())
    throw Error("build_dataset: requested " + std::to_string(n_pairs) + " pairs but only " + std::to_string(pool.size()) + " are available");
  std::vector<std::size_t> idx(pool.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(derive_seed(seed, {0x5e1ec7ULL}));
  std::shuffle(idx.begin(), idx.end(), rng.engine());
  idx.resize(n_pairs);
  std::sort(idx.begin(), idx.end());
  std::vector<ImageQuestion> out;
  out.reserve(n_pairs);
  for (auto i : idx) out.push_back(std::move(pool[i]));
  return out;
}

inline PreferenceDataset build_multi_negative(const std::vector<Episode>& corpus, const Policy& policy,
                                              const std::vector<AugmentSpec>& specs, std::size_t n_pairs, std::uint64_t seed,
                                              std::size_t threads = default_threads(), std::size_t k_per_episode = 2) {
  if (specs.empty()) throw Error("build_multi_negative: need at least one augmentation");
  for (const auto& s : specs) s.validate();
  auto inst = select_instances(corpus, n_pairs, k_per_episode, seed);
  const int max_len = policy.config().max_answer_len;
  std::vector<PreferenceRecord> raw(inst.size());
  parallel_for(inst.size(), threads, [&](std::size_t j) {
    const auto& x = inst[j];
    PreferenceRecord r;
    r.image_ref = {x.episode, x.question_index, x.image.content_hash()};
    r.question = x.question;
    r.image = x.image;
    r.chosen = policy.generate(x.image, x.question.text_tokens, 0.0, max_len, 0);
    for (std::size_t k = 0; k < specs.size(); ++k) {
      auto s = record_spec(specs[k], seed, j, k);
      r.rejected.push_back(policy.generate(apply(s, x.image), x.question.text_tokens, 0.0, max_len, 0));
      r.augment.push_back(s);
    }
    raw[j] = std::move(r);
  });
  auto ds = filter_equal(std::move(raw));
  ds.manifest = {seed, n_pairs, k_per_episode, specs, policy.hash(), corpus_hash(corpus), ds.raw_count, ds.kept_count};
  return ds;
}

// Single-negative dataset; fails when filtering leaves nothing to train on.
inline PreferenceDataset build_dataset(const std::vector<Episode>& corpus, const Policy& policy, const AugmentSpec& spec,
                                       std::size_t n_pairs, std::uint64_t seed, std::size_t threads = default_threads(),
                                       std::size_t k_per_episode = 2) {
  auto ds = build_multi_negative(corpus, policy, {spec}, n_pairs, seed, threads, k_per_episode);
  if (ds.kept_count == 0)
    throw EmptyDatasetError("build_dataset: every generated pair had equal chosen and rejected answers (" +
                            std::to_string(ds.raw_count) + " pairs); use a stronger augmentation");
  return ds;
}

inline PreferenceDataset replay_dataset(const DatasetManifest& m, const std::vector<Episode>& corpus, const Policy& policy,
                                        std::size_t threads = default_threads()) {
  if (m.policy_hash != policy.hash()) throw Error("replay: policy checkpoint does not match manifest");
  if (m.corpus_hash != corpus_hash(corpus)) throw Error("replay: corpus does not match manifest");
  return build_multi_negative(corpus, policy, m.specs, m.n_pairs, m.seed, threads, m.k_per_episode);
}

// ---------------------------------------------------------------------------
// JSONL

inline nlohmann::json record_to_json(const PreferenceRecord& r) {
  nlohmann::json rejected = nlohmann::json::array();
  for (const auto& s : r.rejected) rejected.push_back(s.tokens);
  return {{"image_ref", {{"episode", r.image_ref.episode}, {"question", r.image_ref.question}, {"hash", r.image_ref.content_hash}}},
          {"question_tokens", r.question.text_tokens},
          {"chosen_tokens", r.chosen.tokens},
          {"rejected_tokens", std::move(rejected)},
          {"augment", r.augment}};
}

inline PreferenceRecord record_from_json(const nlohmann::json& j, const Tokenizer& tok) {
  PreferenceRecord r;
  const auto& ref = j.at("image_ref");
  r.image_ref = {ref.at("episode").get<std::size_t>(), ref.at("question").get<std::size_t>(), ref.at("hash").get<std::uint64_t>()};
  r.question = parse_question(tok, j.at("question_tokens").get<std::vector<TokenId>>());
  r.chosen.tokens = j.at("chosen_tokens").get<std::vector<TokenId>>();
  for (const auto& s : j.at("rejected_tokens")) r.rejected.push_back({s.get<std::vector<TokenId>>(), std::nullopt});
  r.augment = j.at("augment").get<std::vector<AugmentSpec>>();
  if (r.rejected.empty() || r.rejected.size() != r.augment.size()) throw Error("record: rejected/augment count mismatch");
  for (const auto& s : r.rejected)
    if (same_answer(s, r.chosen)) throw Error("record: rejected answer equals chosen answer");
  return r;
}

inline void write_dataset(const std::string& jsonl_path, const std::string& manifest_path, const PreferenceDataset& ds) {
  {
    std::ofstream os(jsonl_path);
    if (!os) throw Error("cannot write " + jsonl_path);
    for (const auto& r : ds.records) os << record_to_json(r).dump() << '\n';
  }
  std::ofstream os(manifest_path);
  if (!os) throw Error("cannot write " + manifest_path);
  os << nlohmann::json(ds.manifest).dump(2) << '\n';
}

// Reads records; `corpus`, when given, restores each record's image and
// verifies its content hash.
inline std::vector<PreferenceRecord> read_records(const std::string& jsonl_path, const Tokenizer& tok,
                                                  const std::vector<Episode>* corpus = nullptr) {
  std::ifstream is(jsonl_path);
  if (!is) throw Error("cannot read " + jsonl_path);
  std::vector<PreferenceRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      auto r = record_from_json(nlohmann::json::parse(line), tok);
      if (corpus) {
        if (r.image_ref.episode >= corpus->size()) throw Error("image_ref episode outside corpus");
        r.image = (*corpus)[r.image_ref.episode].image;
        if (r.image.content_hash() != r.image_ref.content_hash) throw Error("image content hash mismatch");
      }
      out.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw Error(jsonl_path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline PreferenceDataset read_dataset(const std::string& jsonl_path, const std::string& manifest_path, const Tokenizer& tok,
                                      const std::vector<Episode>* corpus = nullptr) {
  PreferenceDataset ds;
  ds.records = read_records(jsonl_path, tok, corpus);
  std::ifstream is(manifest_path);
  if (!is) throw Error("cannot read " + manifest_path);
  ds.manifest = nlohmann::json::parse(is).get<DatasetManifest>();
  ds.raw_count = ds.manifest.raw_count;
  ds.kept_count = ds.records.size();
  if (ds.kept_count != ds.manifest.kept_count) throw Error("dataset: record count differs from manifest");
  return ds;
}

}  // namespace seva
