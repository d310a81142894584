// seva: label-free preference tuning on the glyph-grid world, stage by stage or end to end.

#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "CLI11.hpp"
#include "seva/pipeline.hpp"

namespace {

using namespace seva;

struct Common {
  std::optional<std::string> config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::size_t threads = default_threads();
  std::optional<std::string> augment;
  std::optional<int> noise_step;
  std::optional<int> multi_negative;
  std::optional<std::string> sft_cache;
  bool quiet = false;
};

void add_common(CLI::App* app, Common& c, bool run_flags) {
  app->add_option("--config", c.config, "run config JSON");
  app->add_option("--out", c.out, "run directory (default $SEVA_OUT_ROOT/<name> or runs/<name>)");
  app->add_option("--seed", c.seed, "master seed");
  app->add_option("--threads", c.threads, "worker threads")->check(CLI::PositiveNumber);
  app->add_flag("--quiet", c.quiet, "no progress output");
  if (!run_flags) return;
  app->add_option("--augment", c.augment, "augmentation as inline JSON, e.g. {\"kind\":\"diffusion_noise\",\"params\":{\"t\":800}}");
  app->add_option("--noise-step", c.noise_step, "diffusion noise step for every rejected answer")->check(CLI::Range(0, 1000));
  app->add_option("--multi-negative", c.multi_negative, "rejected answers per record (independent augmentation draws)")
      ->check(CLI::Range(1, 16));
  app->add_option("--sft-cache", c.sft_cache, "directory for reusing SFT checkpoints across runs");
}

RunConfig apply_overrides(RunConfig c, const Common& o) {
  if (o.seed) c.seed = *o.seed;
  if (o.augment) c.augment = {nlohmann::json::parse(*o.augment).get<AugmentSpec>()};
  if (o.noise_step)
    for (auto& a : c.augment) a = AugmentSpec::diffusion(*o.noise_step, a.seed);
  if (o.multi_negative) {
    const auto first = c.augment.front();
    c.augment.clear();
    for (int k = 0; k < *o.multi_negative; ++k) {
      auto a = first;
      a.seed = first.seed + static_cast<std::uint64_t>(k);
      c.augment.push_back(a);
    }
  }
  c.validate();
  return c;
}

RunOptions options(const Common& o) {
  RunOptions r;
  r.threads = o.threads;
  if (o.sft_cache) r.sft_cache = *o.sft_cache;
  if (!o.quiet) r.log = &std::cerr;
  return r;
}

// A fresh config from --config (or defaults) with overrides, used by commands
// that start a run.
RunConfig fresh_config(const Common& o) {
  return run_stage(Stage::config, [&] { return apply_overrides(o.config ? load_run_config(*o.config) : RunConfig{}, o); });
}

// Stage commands continue the run in --out using its config.json.
std::pair<RunConfig, RunPaths> existing_run(const Common& o, const std::string& name) {
  return run_stage(Stage::config, [&] {
    RunPaths p{resolve_out(o.out, name)};
    if (!fs::exists(p.config())) throw Error("no config.json in " + p.root.string() + "; run gen-corpus first");
    auto c = read_json(p.config()).get<RunConfig>();
    c.validate();
    return std::pair{c, p};
  });
}

std::vector<int> parse_values(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stoi(item));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Label-free preference tuning of a glyph-grid question answerer"};
  app.require_subcommand(1);
  Common gc, sc, pc, dc, ec, rc, wc;
  auto* gen = app.add_subcommand("gen-corpus", "generate SFT, preference and evaluation corpora");
  add_common(gen, gc, false);
  auto* sft = app.add_subcommand("sft", "supervised finetuning on the labelled corpus");
  add_common(sft, sc, false);
  sft->add_option("--sft-cache", sc.sft_cache, "directory for reusing SFT checkpoints across runs");
  auto* prefs = app.add_subcommand("gen-prefs", "synthesize preference pairs from clean vs augmented answers");
  add_common(prefs, pc, false);
  prefs->add_option("--augment", pc.augment, "augmentation as inline JSON");
  prefs->add_option("--noise-step", pc.noise_step, "diffusion noise step")->check(CLI::Range(0, 1000));
  prefs->add_option("--multi-negative", pc.multi_negative, "rejected answers per record")->check(CLI::Range(1, 16));
  auto* dpo = app.add_subcommand("dpo", "DPO with LoRA adapters against the SFT reference");
  add_common(dpo, dc, false);
  auto* eval = app.add_subcommand("eval", "accuracy, consistency and head-to-head evaluation");
  add_common(eval, ec, false);
  auto* pipe = app.add_subcommand("pipeline", "run every stage end to end");
  add_common(pipe, rc, true);
  auto* sweep = app.add_subcommand("sweep", "one pipeline per diffusion noise step");
  add_common(sweep, wc, true);
  std::string axis = "noise_step", values = "100,300,500,800,1000";
  sweep->add_option("--axis", axis, "swept axis")->check(CLI::IsMember({"noise_step"}));
  sweep->add_option("--values", values, "comma-separated values");
  auto* insp = app.add_subcommand("inspect", "print preference records side by side");
  std::string dataset_path;
  std::optional<std::string> corpus_path;
  std::size_t n_show = 5;
  int n_glyphs = WorldConfig{}.n_glyphs;
  insp->add_option("dataset", dataset_path, "pairs.jsonl")->required();
  insp->add_option("-n", n_show, "records to print");
  insp->add_option("--corpus", corpus_path, "corpus the records refer to (default ../corpus/prefs.jsonl)");
  insp->add_option("--glyphs", n_glyphs, "glyph alphabet size when no run config is found");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto c = fresh_config(gc);
      RunPaths p{resolve_out(gc.out, "run")};
      p.make();
      write_json(p.config(), c);
      stage_gen_corpus(c, Tokenizer(c.world.n_glyphs), p);
      std::cout << p.root.string() << '\n';
    } else if (*sft) {
      auto [c, p] = existing_run(sc, "run");
      const Tokenizer tok(c.world.n_glyphs);
      auto corpus = run_stage(Stage::sft, [&] { return read_corpus(p.sft_corpus().string(), tok); });
      stage_sft(c, tok, corpus, p, options(sc));
    } else if (*prefs) {
      auto [c, p] = existing_run(pc, "run");
      c = run_stage(Stage::config, [&] { return apply_overrides(c, pc); });
      write_json(p.config(), c);
      const Tokenizer tok(c.world.n_glyphs);
      auto [corpus, policy] = run_stage(Stage::gen_prefs, [&] {
        return std::pair{read_corpus(p.pref_corpus().string(), tok), Policy::load(p.sft_policy().string())};
      });
      stage_gen_prefs(c, policy, corpus, p, options(pc));
    } else if (*dpo) {
      auto [c, p] = existing_run(dc, "run");
      const Tokenizer tok(c.world.n_glyphs);
      auto [ds, policy] = run_stage(Stage::dpo, [&] {
        auto corpus = read_corpus(p.pref_corpus().string(), tok);
        return std::pair{read_dataset(p.pairs().string(), p.manifest().string(), tok, &corpus), Policy::load(p.sft_policy().string())};
      });
      stage_dpo(c, policy, ds, p, options(dc));
    } else if (*eval) {
      auto [c, p] = existing_run(ec, "run");
      const Tokenizer tok(c.world.n_glyphs);
      auto [corpus, ref, tuned] = run_stage(Stage::eval, [&] {
        return std::tuple{read_corpus(p.eval_corpus().string(), tok), Policy::load(p.sft_policy().string()),
                          Policy::load(p.dpo_policy().string())};
      });
      auto m = stage_eval(c, tok, ref, tuned, corpus, p, options(ec));
      std::cout << to_json_value(m).dump(2) << '\n';
    } else if (*pipe) {
      auto c = fresh_config(rc);
      auto r = run_pipeline(c, resolve_out(rc.out, "run"), options(rc));
      std::cout << r.summary.dump(2) << '\n';
    } else if (*sweep) {
      auto c = fresh_config(wc);
      auto steps = run_stage(Stage::sweep, [&] { return parse_values(values); });
      auto rows = run_sweep(c, steps, resolve_out(wc.out, "sweep"), options(wc));
      for (const auto& r : rows)
        std::cout << "t=" << r.noise_step << " kept=" << r.kept << " margin=" << r.final_margin << " dpo_clean=" << r.dpo_clean_accuracy
                  << '\n';
    } else if (*insp) {
      run_stage(Stage::inspect, [&] {
        const fs::path ds(dataset_path);
        const fs::path run = ds.parent_path().parent_path();
        if (fs::exists(run / "config.json")) n_glyphs = read_json(run / "config.json").get<RunConfig>().world.n_glyphs;
        const Tokenizer tok(n_glyphs);
        std::vector<Episode> corpus;
        const fs::path cp = corpus_path ? fs::path(*corpus_path) : run / "corpus" / "prefs.jsonl";
        if (fs::exists(cp)) corpus = read_corpus(cp.string(), tok);
        auto records = read_records(dataset_path, tok, corpus.empty() ? nullptr : &corpus);
        std::optional<DatasetManifest> manifest;
        if (fs::exists(ds.parent_path() / "manifest.json")) manifest = read_json(ds.parent_path() / "manifest.json").get<DatasetManifest>();
        inspect_dataset(std::cout, tok, records, manifest ? &*manifest : nullptr, n_show);
        return 0;
      });
    }
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
