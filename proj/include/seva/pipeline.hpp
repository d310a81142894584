#pragma once

// End-to-end runs: corpus generation, supervised finetuning, preference
// synthesis, DPO and evaluation, each writing its artifacts under one run
// directory. Every seed is derived from RunConfig::seed, so a run directory's
// config.json is enough to replay it.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "seva/dpo.hpp"
#include "seva/evalsuite.hpp"
#include "seva/sft.hpp"
#include "seva/svg.hpp"

namespace seva {

namespace fs = std::filesystem;

struct ModelSize {
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int mlp_hidden = 128;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ModelSize, d_model, n_layers, n_heads, mlp_hidden)

struct EvalConfig {
  std::size_t episodes = 100;
  AugmentSpec noisy = AugmentSpec::diffusion(800);  // premise check input
  std::vector<double> temperatures = default_temperatures();
  int samples_per_item = 2;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalConfig, episodes, noisy, temperatures, samples_per_item)

struct RunConfig {
  std::uint64_t seed = 1;
  WorldConfig world;
  ModelSize model;
  std::size_t sft_episodes = 3000;
  SftConfig sft;
  std::size_t pref_episodes = 510;
  std::size_t n_pairs = 1000;  // M, counted before filtering
  std::size_t k_per_episode = 2;
  std::vector<AugmentSpec> augment{AugmentSpec::diffusion(800)};
  DpoConfig dpo;
  EvalConfig eval;

  void validate() const {
    world.validate();
    dpo.validate();
    if (augment.empty()) throw Error("run config: augment list is empty");
    for (const auto& a : augment) a.validate();
    if (sft_episodes == 0 || pref_episodes == 0 || eval.episodes == 0) throw Error("run config: corpus sizes must be positive");
    if (n_pairs == 0) throw Error("run config: n_pairs must be positive");
    if (eval.samples_per_item < 1) throw Error("run config: eval.samples_per_item must be >= 1");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RunConfig, seed, world, model, sft_episodes, sft, pref_episodes, n_pairs,
                                                k_per_episode, augment, dpo, eval)

// Seeds of the individual stages.
struct RunSeeds {
  std::uint64_t sft_corpus, pref_corpus, eval_corpus, init, sft, prefs, dpo, lora, probe;
  explicit RunSeeds(std::uint64_t s)
      : sft_corpus(derive_seed(s, {1})),
        pref_corpus(derive_seed(s, {2})),
        eval_corpus(derive_seed(s, {3})),
        init(derive_seed(s, {4})),
        sft(derive_seed(s, {5})),
        prefs(derive_seed(s, {6})),
        dpo(derive_seed(s, {7})),
        lora(derive_seed(s, {8})),
        probe(derive_seed(s, {9})) {}
};

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read config " + path);
  try {
    auto c = nlohmann::json::parse(is).get<RunConfig>();
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw Error("config " + path + ": " + e.what());
  }
}

inline PolicyConfig policy_config(const RunConfig& c, const Tokenizer& tok) {
  auto p = policy_config_for(c.world, tok);
  p.d_model = c.model.d_model;
  p.n_layers = c.model.n_layers;
  p.n_heads = c.model.n_heads;
  p.mlp_hidden = c.model.mlp_hidden;
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// Stage errors

enum class Stage { config, gen_corpus, sft, gen_prefs, dpo, eval, sweep, inspect };

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::config: return "config";
    case Stage::gen_corpus: return "gen-corpus";
    case Stage::sft: return "sft";
    case Stage::gen_prefs: return "gen-prefs";
    case Stage::dpo: return "dpo";
    case Stage::eval: return "eval";
    case Stage::sweep: return "sweep";
    case Stage::inspect: return "inspect";
  }
  return "?";
}

inline int exit_code(Stage s) { return 10 + static_cast<int>(s); }

class StageError : public Error {
public:
  StageError(Stage s, const std::string& msg) : Error(std::string(stage_name(s)) + ": " + msg), stage_(s) {}
  Stage stage() const { return stage_; }
  int code() const { return exit_code(stage_); }

private:
  Stage stage_;
};

template <class F>
auto run_stage(Stage s, F&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(s, e.what());
  }
}

// ---------------------------------------------------------------------------
// Run directory layout

struct RunPaths {
  fs::path root;
  fs::path config() const { return root / "config.json"; }
  fs::path sft_corpus() const { return root / "corpus" / "sft.jsonl"; }
  fs::path pref_corpus() const { return root / "corpus" / "prefs.jsonl"; }
  fs::path eval_corpus() const { return root / "corpus" / "eval.jsonl"; }
  fs::path sft_policy() const { return root / "sft" / "policy.json"; }
  fs::path sft_log() const { return root / "sft" / "train.csv"; }
  fs::path pairs() const { return root / "prefs" / "pairs.jsonl"; }
  fs::path manifest() const { return root / "prefs" / "manifest.json"; }
  fs::path dpo_policy() const { return root / "dpo" / "policy.json"; }
  fs::path dpo_log() const { return root / "dpo" / "train.csv"; }
  fs::path dpo_probe() const { return root / "dpo" / "probe.csv"; }
  fs::path dpo_summary() const { return root / "dpo" / "summary.json"; }
  fs::path metrics() const { return root / "eval" / "metrics.json"; }
  fs::path summary() const { return root / "summary.json"; }
  void make() const {
    for (const char* d : {"corpus", "sft", "prefs", "dpo", "eval"}) fs::create_directories(root / d);
  }
};

inline void write_json(const fs::path& p, const nlohmann::json& j) {
  std::ofstream os(p);
  if (!os) throw Error("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw Error("cannot read " + p.string());
  return nlohmann::json::parse(is);
}

// Output root: explicit path, else $SEVA_OUT_ROOT/<name>, else runs/<name>.
inline fs::path resolve_out(const std::optional<std::string>& out, const std::string& name) {
  if (out) return *out;
  if (const char* env = std::getenv("SEVA_OUT_ROOT")) return fs::path(env) / name;
  return fs::path("runs") / name;
}

struct RunOptions {
  std::size_t threads = default_threads();
  std::optional<fs::path> sft_cache;  // directory of SFT checkpoints keyed by what determines them
  std::ostream* log = nullptr;
};

inline void note(const RunOptions& o, const std::string& msg) {
  if (o.log) *o.log << msg << std::endl;
}

// ---------------------------------------------------------------------------
// Stages

struct Corpora {
  std::vector<Episode> sft, prefs, eval;
};

inline Corpora stage_gen_corpus(const RunConfig& c, const Tokenizer& tok, const RunPaths& paths) {
  return run_stage(Stage::gen_corpus, [&] {
    const RunSeeds s(c.seed);
    Corpora out{generate_corpus(s.sft_corpus, c.sft_episodes, c.world), strip_truth(generate_corpus(s.pref_corpus, c.pref_episodes, c.world)),
                generate_corpus(s.eval_corpus, c.eval.episodes, c.world)};
    write_corpus(paths.sft_corpus().string(), tok, out.sft, true);
    write_corpus(paths.pref_corpus().string(), tok, out.prefs, false);
    write_corpus(paths.eval_corpus().string(), tok, out.eval, true);
    return out;
  });
}

inline std::uint64_t sft_key(const RunConfig& c, const Tokenizer& tok) {
  Fnv1a h;
  const RunSeeds s(c.seed);
  h.str(nlohmann::json(policy_config(c, tok)).dump());
  h.str(nlohmann::json(c.world).dump());
  h.str(nlohmann::json(c.sft).dump());
  h.u64(c.sft_episodes);
  h.u64(s.sft_corpus);
  h.u64(s.init);
  h.u64(s.sft);
  return h.value();
}

inline Policy stage_sft(const RunConfig& c, const Tokenizer& tok, const std::vector<Episode>& corpus, const RunPaths& paths,
                        const RunOptions& o) {
  return run_stage(Stage::sft, [&] {
    const RunSeeds s(c.seed);
    std::optional<fs::path> cached;
    if (o.sft_cache) {
      std::ostringstream name;
      name << "sft-" << std::hex << sft_key(c, tok);
      cached = *o.sft_cache / name.str();
      if (fs::exists(*cached / "policy.json")) {
        note(o, "sft: reusing " + cached->string());
        fs::copy_file(*cached / "policy.json", paths.sft_policy(), fs::copy_options::overwrite_existing);
        fs::copy_file(*cached / "train.csv", paths.sft_log(), fs::copy_options::overwrite_existing);
        return Policy::load(paths.sft_policy().string());
      }
    }
    Policy pol(policy_config(c, tok), s.init);
    auto cfg = c.sft;
    cfg.seed = s.sft;
    std::ofstream csv(paths.sft_log());
    if (!csv) throw Error("cannot write " + paths.sft_log().string());
    csv.precision(17);
    csv << "step,train_loss,lr\n";
    sft_train(pol, corpus, cfg, o.threads, [&](const SftLogRow& r) {
      csv << r.step << ',' << r.train_loss << ',' << r.lr << '\n';
      note(o, "sft: step " + std::to_string(r.step) + " loss " + std::to_string(r.train_loss));
    });
    csv.close();
    pol.save(paths.sft_policy().string(), &tok);
    if (cached) {
      fs::create_directories(*cached);
      fs::copy_file(paths.sft_policy(), *cached / "policy.json", fs::copy_options::overwrite_existing);
      fs::copy_file(paths.sft_log(), *cached / "train.csv", fs::copy_options::overwrite_existing);
    }
    return pol;
  });
}

inline PreferenceDataset stage_gen_prefs(const RunConfig& c, const Policy& sft, const std::vector<Episode>& corpus, const RunPaths& paths,
                                         const RunOptions& o) {
  return run_stage(Stage::gen_prefs, [&] {
    const RunSeeds s(c.seed);
    auto ds = build_multi_negative(corpus, sft, c.augment, c.n_pairs, s.prefs, o.threads, c.k_per_episode);
    write_dataset(paths.pairs().string(), paths.manifest().string(), ds);
    note(o, "gen-prefs: kept " + std::to_string(ds.kept_count) + " of " + std::to_string(ds.raw_count));
    if (ds.kept_count == 0)
      throw EmptyDatasetError("all " + std::to_string(ds.raw_count) +
                              " pairs were filtered as equal answers; use a stronger augmentation");
    return ds;
  });
}

struct DpoOutcome {
  Policy policy;  // adapters merged
  TrainLog log;
};

inline DpoOutcome stage_dpo(const RunConfig& c, const Policy& sft, const PreferenceDataset& ds, const RunPaths& paths, const RunOptions& o) {
  return run_stage(Stage::dpo, [&] {
    const RunSeeds s(c.seed);
    auto cfg = c.dpo;
    cfg.seed = s.dpo;
    Policy pol = sft;
    pol.attach_lora(cfg.lora_rank, cfg.lora_alpha, s.lora);
    auto log = train_dpo(pol, sft, ds, cfg, o.threads);
    log.write_csv(paths.dpo_log().string());
    {
      std::ofstream os(paths.dpo_probe());
      os.precision(17);
      os << "step,margin\n";
      for (const auto& p : log.probe) os << p.step << ',' << p.margin << '\n';
    }
    auto merged = pol.merged();
    merged.save(paths.dpo_policy().string());
    write_json(paths.dpo_summary(), {{"steps", log.rows.size()},
                                     {"initial_loss", log.rows.empty() ? 0.0 : log.rows.front().loss},
                                     {"final_mean_margin", log.final_stats.mean_margin},
                                     {"final_margin_pos_frac", log.final_stats.margin_pos_frac},
                                     {"final_mean_loss", log.final_stats.mean_loss}});
    std::vector<double> x, m, l;
    for (const auto& r : log.rows) {
      x.push_back(r.step);
      m.push_back(r.margin);
      l.push_back(r.loss);
    }
    svg::save((paths.root / "dpo" / "margin.svg").string(),
              svg::line_chart("reward margin during DPO", {{"batch margin", x, m}, {"loss", x, l}}, "step", "value"));
    note(o, "dpo: final margin " + std::to_string(log.final_stats.mean_margin) + ", positive fraction " +
                std::to_string(log.final_stats.margin_pos_frac));
    return DpoOutcome{std::move(merged), std::move(log)};
  });
}

struct EvalMetrics {
  AccuracyReport sft_clean, sft_noisy, dpo_clean, dpo_noisy;
  MatchResult match;  // from the DPO policy's side
  std::vector<ConsistencyReport> sft_consistency, dpo_consistency;
};

inline nlohmann::json to_json_value(const EvalMetrics& m) {
  return {{"sft", {{"clean", m.sft_clean}, {"noisy", m.sft_noisy}, {"consistency", m.sft_consistency}}},
          {"dpo", {{"clean", m.dpo_clean}, {"noisy", m.dpo_noisy}, {"consistency", m.dpo_consistency}}},
          {"match", m.match}};
}

inline EvalMetrics evaluate(const RunConfig& c, const Tokenizer& tok, const Policy& sft, const Policy& dpo, const std::vector<Episode>& corpus,
                            std::size_t threads) {
  const RunSeeds s(c.seed);
  const auto items = eval_items(corpus);
  RubricJudge judge(tok);
  EvalMetrics m;
  m.sft_clean = accuracy_report(sft, items, AugmentSpec::identity(), threads);
  m.sft_noisy = accuracy_report(sft, items, c.eval.noisy, threads);
  m.dpo_clean = accuracy_report(dpo, items, AugmentSpec::identity(), threads);
  m.dpo_noisy = accuracy_report(dpo, items, c.eval.noisy, threads);
  m.match = pairwise_match(dpo, sft, items, judge, threads);
  m.sft_consistency = consistency_probe(sft, items, c.eval.temperatures, c.eval.samples_per_item, s.probe, judge, threads);
  m.dpo_consistency = consistency_probe(dpo, items, c.eval.temperatures, c.eval.samples_per_item, s.probe, judge, threads);
  return m;
}

inline EvalMetrics stage_eval(const RunConfig& c, const Tokenizer& tok, const Policy& sft, const Policy& dpo, const std::vector<Episode>& corpus,
                              const RunPaths& paths, const RunOptions& o) {
  return run_stage(Stage::eval, [&] {
    auto m = evaluate(c, tok, sft, dpo, corpus, o.threads);
    write_json(paths.metrics(), to_json_value(m));
    write_consistency_csv((paths.root / "eval" / "consistency.csv").string(), {{"sft", m.sft_consistency}, {"dpo", m.dpo_consistency}});
    write_match_csv((paths.root / "eval" / "match.csv").string(), m.match);
    svg::save((paths.root / "eval" / "match.svg").string(),
              svg::bar_chart("DPO vs SFT on clean questions",
                             {{"win", static_cast<double>(m.match.win)},
                              {"lose", static_cast<double>(m.match.lose)},
                              {"equal", static_cast<double>(m.match.equal)},
                              {"discarded", static_cast<double>(m.match.discarded)}},
                             "items"));
    std::vector<double> t, sq, sa, dq, da;
    for (std::size_t i = 0; i < m.sft_consistency.size(); ++i) {
      t.push_back(m.sft_consistency[i].temperature);
      sq.push_back(m.sft_consistency[i].q_consistency);
      sa.push_back(m.sft_consistency[i].a_consistency);
      dq.push_back(m.dpo_consistency[i].q_consistency);
      da.push_back(m.dpo_consistency[i].a_consistency);
    }
    svg::save((paths.root / "eval" / "consistency.svg").string(),
              svg::line_chart("consistency under sampling", {{"sft Q", t, sq}, {"sft A", t, sa}, {"dpo Q", t, dq}, {"dpo A", t, da}},
                              "temperature", "score (0-10)"));
    note(o, "eval: sft clean " + std::to_string(m.sft_clean.accuracy) + ", dpo clean " + std::to_string(m.dpo_clean.accuracy) +
                ", wins " + std::to_string(m.match.win) + ", losses " + std::to_string(m.match.lose));
    return m;
  });
}

// ---------------------------------------------------------------------------
// Full pipeline

struct PipelineResult {
  RunPaths paths;
  PreferenceDataset dataset;
  TrainLog dpo_log;
  EvalMetrics metrics;
  nlohmann::json summary;
};

inline nlohmann::json run_summary(const PreferenceDataset& ds, const TrainLog& log, const EvalMetrics& m) {
  const auto decided = m.match.win + m.match.lose;
  return {{"retention", ds.retention()},
          {"raw_count", ds.raw_count},
          {"kept_count", ds.kept_count},
          {"accuracy",
           {{"sft_clean", m.sft_clean.accuracy},
            {"sft_noisy", m.sft_noisy.accuracy},
            {"dpo_clean", m.dpo_clean.accuracy},
            {"dpo_noisy", m.dpo_noisy.accuracy},
            {"clean_delta", m.dpo_clean.accuracy - m.sft_clean.accuracy},
            {"noise_drop_sft", m.sft_clean.accuracy - m.sft_noisy.accuracy}}},
          {"match",
           {{"win", m.match.win},
            {"lose", m.match.lose},
            {"equal", m.match.equal},
            {"discarded", m.match.discarded},
            {"win_rate", decided ? static_cast<double>(m.match.win) / static_cast<double>(decided) : 0.0}}},
          {"dpo",
           {{"initial_loss", log.rows.empty() ? 0.0 : log.rows.front().loss},
            {"final_mean_margin", log.final_stats.mean_margin},
            {"final_margin_pos_frac", log.final_stats.margin_pos_frac},
            {"margin_curve", "dpo/train.csv"}}}};
}

// Stages run in order; on failure the artifacts written so far stay on disk
// and the StageError names the stage.
inline PipelineResult run_pipeline(RunConfig c, const fs::path& out, const RunOptions& o) {
  run_stage(Stage::config, [&] {
    c.validate();
    return 0;
  });
  const Tokenizer tok(c.world.n_glyphs);
  RunPaths paths{out};
  paths.make();
  write_json(paths.config(), c);
  auto corpora = stage_gen_corpus(c, tok, paths);
  auto sft = stage_sft(c, tok, corpora.sft, paths, o);
  auto ds = stage_gen_prefs(c, sft, corpora.prefs, paths, o);
  auto dpo = stage_dpo(c, sft, ds, paths, o);
  auto m = stage_eval(c, tok, sft, dpo.policy, corpora.eval, paths, o);
  auto summary = run_summary(ds, dpo.log, m);
  write_json(paths.summary(), summary);
  return {paths, std::move(ds), std::move(dpo.log), std::move(m), std::move(summary)};
}

// ---------------------------------------------------------------------------
// Noise-step sweep

struct SweepRow {
  int noise_step = 0;
  std::size_t kept = 0;
  double retention = 0.0;
  double final_margin = 0.0;
  double margin_pos_frac = 0.0;
  double dpo_clean_accuracy = 0.0;
  double dpo_noisy_accuracy = 0.0;
  std::size_t win = 0, lose = 0;
};

inline void write_sweep_csv(const fs::path& p, const std::vector<SweepRow>& rows) {
  std::ofstream os(p);
  if (!os) throw Error("cannot write " + p.string());
  os.precision(17);
  os << "noise_step,kept,retention,final_margin,margin_pos_frac,dpo_clean_accuracy,dpo_noisy_accuracy,win,lose\n";
  for (const auto& r : rows)
    os << r.noise_step << ',' << r.kept << ',' << r.retention << ',' << r.final_margin << ',' << r.margin_pos_frac << ','
       << r.dpo_clean_accuracy << ',' << r.dpo_noisy_accuracy << ',' << r.win << ',' << r.lose << '\n';
}

// One pipeline per diffusion step, all sharing the SFT stage. Every augment
// spec of the base config is replaced by diffusion at the swept step.
inline std::vector<SweepRow> run_sweep(const RunConfig& base, const std::vector<int>& steps, const fs::path& out, RunOptions o) {
  if (steps.empty()) throw StageError(Stage::sweep, "no sweep values");
  for (int t : steps)
    if (t < 0 || t > 1000) throw StageError(Stage::sweep, "noise step " + std::to_string(t) + " outside [0, 1000]");
  fs::create_directories(out);
  if (!o.sft_cache) o.sft_cache = out / "cache";
  std::vector<SweepRow> rows;
  for (int t : steps) {
    auto c = base;
    for (auto& a : c.augment) a = AugmentSpec::diffusion(t, a.seed);
    auto r = run_pipeline(c, out / ("t" + std::to_string(t)), o);
    rows.push_back({t, r.dataset.kept_count, r.dataset.retention(), r.dpo_log.final_stats.mean_margin,
                    r.dpo_log.final_stats.margin_pos_frac, r.metrics.dpo_clean.accuracy, r.metrics.dpo_noisy.accuracy, r.metrics.match.win,
                    r.metrics.match.lose});
  }
  write_sweep_csv(out / "sweep.csv", rows);
  std::vector<double> x, margin, clean, noisy;
  for (const auto& r : rows) {
    x.push_back(r.noise_step);
    margin.push_back(r.final_margin);
    clean.push_back(r.dpo_clean_accuracy);
    noisy.push_back(r.dpo_noisy_accuracy);
  }
  svg::save((out / "margin_vs_step.svg").string(), svg::line_chart("final reward margin", {{"margin", x, margin}}, "noise step", "margin"));
  svg::save((out / "eval_vs_step.svg").string(),
            svg::line_chart("DPO accuracy", {{"clean", x, clean}, {"noisy", x, noisy}}, "noise step", "accuracy"));
  return rows;
}

// ---------------------------------------------------------------------------
// Dataset dump

inline std::string render_grid(const Tokenizer& tok, const ToyImage& img) {
  std::string out;
  for (int r = 0; r < img.height; ++r) {
    out += "    ";
    for (int c = 0; c < img.width; ++c) {
      const int g = img.cells[static_cast<std::size_t>(r * img.width + c)].glyph;
      out += g ? tok.text(tok.glyph(g)) : std::string(".");
      out += ' ';
    }
    out += '\n';
  }
  return out;
}

// Header with counts, then up to n records with their grid, question and
// chosen/rejected answers.
inline void inspect_dataset(std::ostream& os, const Tokenizer& tok, const std::vector<PreferenceRecord>& records, const DatasetManifest* manifest,
                            std::size_t n) {
  os << "records: " << records.size();
  if (manifest) os << "  raw: " << manifest->raw_count << "  retention: " << nlohmann::json(*manifest)["retention"].get<double>();
  os << '\n';
  for (std::size_t i = 0; i < std::min(n, records.size()); ++i) {
    const auto& r = records[i];
    os << "\n#" << i << "  episode " << r.image_ref.episode << " question " << r.image_ref.question << '\n';
    if (!r.image.cells.empty()) os << render_grid(tok, r.image);
    os << "  Q: " << tok.decode(r.question.text_tokens) << '\n';
    os << "  chosen:   " << tok.decode_answer(r.chosen) << '\n';
    for (std::size_t k = 0; k < r.rejected.size(); ++k)
      os << "  rejected: " << tok.decode_answer(r.rejected[k]) << "    [" << nlohmann::json(r.augment[k]).dump() << "]\n";
  }
}

}  // namespace seva
