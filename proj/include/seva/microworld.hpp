#pragma once

// Glyph-grid micro-OCR world: images, templated questions and the exact
// answer function. ground_truth() is for SFT supervision and evaluation
// only; preference synthesis works from (image, question) pairs.

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "seva/rng.hpp"
#include "seva/tokenizer.hpp"

namespace seva {

struct WorldConfig {
  int width = 8;
  int height = 8;
  int cell_size = 4;
  int n_glyphs = 12;
  double density = 0.5;  // probability that a cell holds a glyph
  double min_intensity = 0.6;
  double max_intensity = 1.0;
  int questions_per_episode = 4;
  // read_row, read_col, count_glyph, glyph_at, exists_glyph
  std::array<double, 5> template_weights{1.0, 1.0, 1.0, 1.0, 1.0};

  void validate() const {
    if (n_glyphs < 1) throw Error("world config: glyph alphabet must be nonempty");
    if (n_glyphs > Tokenizer::kMaxGlyphs) throw Error("world config: at most 52 glyphs");
    if (width < 1 || width > 10 || height < 1 || height > 10) throw Error("world config: grid dims must be in [1,10]");
    if (cell_size < 1) throw Error("world config: cell_size must be positive");
    if (density < 0.0 || density > 1.0) throw Error("world config: density must be in [0,1]");
    if (!(0.0 < min_intensity && min_intensity <= max_intensity && max_intensity <= 1.0))
      throw Error("world config: need 0 < min_intensity <= max_intensity <= 1");
    if (questions_per_episode < 2) throw Error("world config: episodes need at least 2 questions");
    double total = 0.0;
    for (double w : template_weights) {
      if (w < 0.0) throw Error("world config: negative template weight");
      total += w;
    }
    if (total <= 0.0) throw Error("world config: all template weights are zero");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(WorldConfig, width, height, cell_size, n_glyphs, density, min_intensity,
                                                max_intensity, questions_per_episode, template_weights)

struct Cell {
  int glyph = 0;  // 0 = blank
  double intensity = 0.0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

// `cells` describe the scene; `pixels` are what a policy sees. Augmented
// images keep the source cells and carry transformed pixels.
struct ToyImage {
  int width = 0;
  int height = 0;
  int cell_size = 1;
  std::vector<Cell> cells;
  std::vector<double> pixels;  // (height*cell_size) x (width*cell_size), row-major
  std::optional<std::pair<double, double>> value_range;  // set by diffusion noise (unclamped output)

  int pixel_width() const { return width * cell_size; }
  int pixel_height() const { return height * cell_size; }
  const Cell& cell(int r, int c) const { return cells[static_cast<std::size_t>(r * width + c)]; }
  double pixel(int y, int x) const { return pixels[static_cast<std::size_t>(y * pixel_width() + x)]; }

  std::uint64_t content_hash() const {
    Fnv1a h;
    h.u64(static_cast<std::uint64_t>(width));
    h.u64(static_cast<std::uint64_t>(height));
    h.u64(static_cast<std::uint64_t>(cell_size));
    for (const auto& c : cells) {
      h.u64(static_cast<std::uint64_t>(c.glyph));
      h.f64(c.intensity);
    }
    return h.value();
  }
};

enum class Template { read_row = 0, read_col = 1, count_glyph = 2, glyph_at = 3, exists_glyph = 4 };

inline const char* template_name(Template t) { return Tokenizer::kTemplateWords[static_cast<int>(t)]; }

inline Template template_from_name(const std::string& s) {
  for (int i = 0; i < 5; ++i)
    if (s == Tokenizer::kTemplateWords[i]) return static_cast<Template>(i);
  throw Error("unknown question template '" + s + "'");
}

struct Question {
  Template tmpl = Template::read_row;
  std::vector<int> args;  // row/col indices or glyph ids
  std::vector<TokenId> text_tokens;
  friend bool operator==(const Question& a, const Question& b) { return a.tmpl == b.tmpl && a.args == b.args; }
};

struct Episode {
  ToyImage image;
  std::vector<Question> questions;
  std::vector<TokenSequence> truth;  // empty in label-free exports
};

// ---------------------------------------------------------------------------
// Rendering

// Binary cell_size x cell_size pattern per glyph, fixed for a given cell size.
inline const std::vector<std::vector<double>>& glyph_patterns(int cell_size) {
  static std::mutex mu;
  static std::map<int, std::vector<std::vector<double>>> cache;
  std::lock_guard lock(mu);
  auto it = cache.find(cell_size);
  if (it != cache.end()) return it->second;

  const int n = cell_size * cell_size;
  const int min_on = std::max(1, n / 3);
  const int max_on = std::max(min_on, n - n / 4);
  int min_dist = std::max(1, n / 4);
  std::vector<std::vector<double>> pats(static_cast<std::size_t>(Tokenizer::kMaxGlyphs) + 1,
                                        std::vector<double>(static_cast<std::size_t>(n), 0.0));
  Rng rng(0x5eed0000ULL + static_cast<std::uint64_t>(cell_size));
  auto hamming = [](const std::vector<double>& a, const std::vector<double>& b) {
    int d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += a[i] != b[i];
    return d;
  };
  for (int g = 1; g <= Tokenizer::kMaxGlyphs; ++g) {
    auto& p = pats[static_cast<std::size_t>(g)];
    for (int attempt = 0;; ++attempt) {
      if (attempt > 0 && attempt % 20000 == 0 && min_dist > 1) --min_dist;
      int on = 0;
      for (auto& v : p) {
        v = rng.bernoulli(0.5) ? 1.0 : 0.0;
        on += v > 0.0;
      }
      if (on < min_on || on > max_on) continue;
      if (n == 1) break;
      bool ok = true;
      for (int h = 1; h < g && ok; ++h) ok = hamming(p, pats[static_cast<std::size_t>(h)]) >= min_dist;
      if (ok) break;
    }
  }
  return cache.emplace(cell_size, std::move(pats)).first->second;
}

inline void render(ToyImage& img) {
  const int pw = img.pixel_width();
  const auto& pats = glyph_patterns(img.cell_size);
  img.pixels.assign(static_cast<std::size_t>(pw * img.pixel_height()), 0.0);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c) {
      const Cell& cell = img.cell(r, c);
      if (cell.glyph == 0) continue;
      const auto& pat = pats[static_cast<std::size_t>(cell.glyph)];
      for (int y = 0; y < img.cell_size; ++y)
        for (int x = 0; x < img.cell_size; ++x)
          img.pixels[static_cast<std::size_t>((r * img.cell_size + y) * pw + c * img.cell_size + x)] =
              cell.intensity * pat[static_cast<std::size_t>(y * img.cell_size + x)];
    }
  img.value_range.reset();
}

inline ToyImage make_image(int width, int height, int cell_size, std::vector<Cell> cells) {
  if (cells.size() != static_cast<std::size_t>(width * height)) throw Error("make_image: cell count does not match grid");
  ToyImage img{width, height, cell_size, std::move(cells), {}, std::nullopt};
  for (const auto& c : img.cells) {
    if (c.glyph < 0 || c.glyph > Tokenizer::kMaxGlyphs) throw Error("make_image: glyph id out of range");
    if (c.intensity < 0.0 || c.intensity > 1.0) throw Error("make_image: intensity outside [0,1]");
  }
  render(img);
  return img;
}

// ---------------------------------------------------------------------------
// Questions and answers

inline Question make_question(const Tokenizer& tok, Template t, std::vector<int> args) {
  Question q{t, std::move(args), {}};
  q.text_tokens.push_back(tok.template_word(static_cast<int>(t)));
  switch (t) {
    case Template::read_row:
    case Template::read_col:
      if (q.args.size() != 1) throw Error("question: read_row/read_col take one index");
      q.text_tokens.push_back(tok.digit(q.args[0]));
      break;
    case Template::glyph_at:
      if (q.args.size() != 2) throw Error("question: glyph_at takes row and column");
      q.text_tokens.push_back(tok.digit(q.args[0]));
      q.text_tokens.push_back(tok.digit(q.args[1]));
      break;
    case Template::count_glyph:
    case Template::exists_glyph:
      if (q.args.size() != 1) throw Error("question: count_glyph/exists_glyph take one glyph");
      q.text_tokens.push_back(tok.glyph(q.args[0]));
      break;
  }
  return q;
}

// Recovers a question from its surface tokens.
inline Question parse_question(const Tokenizer& tok, const std::vector<TokenId>& text) {
  if (text.empty() || tok.token_class(text[0]) != TokenClass::template_word) throw Error("question: missing template word");
  const auto t = template_from_name(tok.text(text[0]));
  std::vector<int> args;
  for (std::size_t i = 1; i < text.size(); ++i) {
    const auto cls = tok.token_class(text[i]);
    if (cls == TokenClass::digit)
      args.push_back(text[i] - tok.digit(0));
    else if (cls == TokenClass::glyph)
      args.push_back(text[i] - tok.glyph(1) + 1);
    else
      throw Error("question: unexpected argument token '" + tok.text(text[i]) + "'");
  }
  auto q = make_question(tok, t, std::move(args));
  if (q.text_tokens != text) throw Error("question: tokens do not form a canonical question");
  return q;
}

inline TokenSequence ground_truth(const Tokenizer& tok, const ToyImage& img, const Question& q) {
  auto check_index = [](int v, int bound, const char* what) {
    if (v < 0 || v >= bound) throw Error(std::string("ground_truth: ") + what + " " + std::to_string(v) + " out of bounds");
  };
  auto check_glyph = [&](int g) {
    if (g < 1 || g > tok.n_glyphs()) throw Error("ground_truth: glyph " + std::to_string(g) + " out of range");
  };
  TokenSequence out;
  switch (q.tmpl) {
    case Template::read_row:
      check_index(q.args.at(0), img.height, "row");
      for (int c = 0; c < img.width; ++c) out.tokens.push_back(tok.glyph(img.cell(q.args[0], c).glyph));
      break;
    case Template::read_col:
      check_index(q.args.at(0), img.width, "column");
      for (int r = 0; r < img.height; ++r) out.tokens.push_back(tok.glyph(img.cell(r, q.args[0]).glyph));
      break;
    case Template::glyph_at:
      check_index(q.args.at(0), img.height, "row");
      check_index(q.args.at(1), img.width, "column");
      out.tokens.push_back(tok.glyph(img.cell(q.args[0], q.args[1]).glyph));
      break;
    case Template::count_glyph: {
      check_glyph(q.args.at(0));
      int n = 0;
      for (const auto& c : img.cells) n += c.glyph == q.args[0];
      for (char ch : std::to_string(n)) out.tokens.push_back(tok.digit(ch - '0'));
      break;
    }
    case Template::exists_glyph: {
      check_glyph(q.args.at(0));
      bool found = false;
      for (const auto& c : img.cells) found = found || c.glyph == q.args[0];
      out.tokens.push_back(found ? tok.yes() : tok.no());
      break;
    }
  }
  out.tokens.push_back(Tokenizer::kEos);
  return out;
}

// ---------------------------------------------------------------------------
// Corpus generation

inline Question random_question(const Tokenizer& tok, const WorldConfig& cfg, Rng& rng) {
  double total = 0.0;
  for (double w : cfg.template_weights) total += w;
  double u = rng.uniform() * total;
  int t = 0;
  for (; t < 4; ++t) {
    if (u < cfg.template_weights[static_cast<std::size_t>(t)]) break;
    u -= cfg.template_weights[static_cast<std::size_t>(t)];
  }
  while (cfg.template_weights[static_cast<std::size_t>(t)] <= 0.0) --t;
  const auto tmpl = static_cast<Template>(t);
  switch (tmpl) {
    case Template::read_row:
      return make_question(tok, tmpl, {static_cast<int>(rng.below(static_cast<std::size_t>(cfg.height)))});
    case Template::read_col:
      return make_question(tok, tmpl, {static_cast<int>(rng.below(static_cast<std::size_t>(cfg.width)))});
    case Template::glyph_at:
      return make_question(tok, tmpl,
                           {static_cast<int>(rng.below(static_cast<std::size_t>(cfg.height))),
                            static_cast<int>(rng.below(static_cast<std::size_t>(cfg.width)))});
    default:
      return make_question(tok, tmpl, {1 + static_cast<int>(rng.below(static_cast<std::size_t>(cfg.n_glyphs)))});
  }
}

inline Episode generate_episode(const Tokenizer& tok, const WorldConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Cell> cells(static_cast<std::size_t>(cfg.width * cfg.height));
  for (auto& c : cells) {
    if (rng.bernoulli(cfg.density)) {
      c.glyph = 1 + static_cast<int>(rng.below(static_cast<std::size_t>(cfg.n_glyphs)));
      c.intensity = rng.uniform(cfg.min_intensity, cfg.max_intensity);
    }
  }
  Episode ep{make_image(cfg.width, cfg.height, cfg.cell_size, std::move(cells)), {}, {}};
  for (int i = 0; i < cfg.questions_per_episode; ++i) {
    ep.questions.push_back(random_question(tok, cfg, rng));
    ep.truth.push_back(ground_truth(tok, ep.image, ep.questions.back()));
  }
  return ep;
}

inline std::vector<Episode> generate_corpus(std::uint64_t seed, std::size_t n_episodes, const WorldConfig& cfg) {
  cfg.validate();
  if (n_episodes < 1) throw Error("generate_corpus: need at least one episode");
  Tokenizer tok(cfg.n_glyphs);
  std::vector<Episode> out;
  out.reserve(n_episodes);
  for (std::size_t i = 0; i < n_episodes; ++i) out.push_back(generate_episode(tok, cfg, derive_seed(seed, {i})));
  return out;
}

// One (image, question) instance with its provenance in the corpus.
struct ImageQuestion {
  std::size_t episode = 0;
  std::size_t question_index = 0;
  ToyImage image;
  Question question;
};

// k distinct questions per episode, drawn without replacement.
inline std::vector<ImageQuestion> sample_pairs(const std::vector<Episode>& corpus, std::size_t k_per_episode, std::uint64_t seed) {
  for (const auto& ep : corpus)
    if (k_per_episode > ep.questions.size())
      throw Error("sample_pairs: k=" + std::to_string(k_per_episode) + " exceeds the " + std::to_string(ep.questions.size()) +
                  " questions of an episode");
  std::vector<ImageQuestion> out;
  out.reserve(corpus.size() * k_per_episode);
  for (std::size_t e = 0; e < corpus.size(); ++e) {
    Rng rng(derive_seed(seed, {e}));
    std::vector<std::size_t> idx(corpus[e].questions.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    for (std::size_t i = 0; i < k_per_episode; ++i) {
      const std::size_t j = i + rng.below(idx.size() - i);
      std::swap(idx[i], idx[j]);
      out.push_back({e, idx[i], corpus[e].image, corpus[e].questions[idx[i]]});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

inline nlohmann::json image_to_json(const ToyImage& img) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : img.cells) cells.push_back({c.glyph, c.intensity});
  return {{"w", img.width}, {"h", img.height}, {"cell_size", img.cell_size}, {"cells", std::move(cells)}};
}

inline ToyImage image_from_json(const nlohmann::json& j) {
  std::vector<Cell> cells;
  for (const auto& c : j.at("cells")) cells.push_back({c.at(0).get<int>(), c.at(1).get<double>()});
  return make_image(j.at("w").get<int>(), j.at("h").get<int>(), j.value("cell_size", 4), std::move(cells));
}

inline nlohmann::json episode_to_json(const Tokenizer& tok, const Episode& ep, bool with_truth) {
  nlohmann::json qs = nlohmann::json::array();
  for (const auto& q : ep.questions) qs.push_back(tok.decode(q.text_tokens));
  nlohmann::json j{{"image", image_to_json(ep.image)}, {"questions", std::move(qs)}};
  if (with_truth) {
    nlohmann::json truth = nlohmann::json::array();
    for (const auto& t : ep.truth) truth.push_back(tok.decode_answer(t));
    j["truth"] = std::move(truth);
  }
  return j;
}

inline Episode episode_from_json(const Tokenizer& tok, const nlohmann::json& j) {
  Episode ep{image_from_json(j.at("image")), {}, {}};
  for (const auto& q : j.at("questions")) ep.questions.push_back(parse_question(tok, tok.encode(q.get<std::string>())));
  if (j.contains("truth"))
    for (const auto& t : j.at("truth")) ep.truth.push_back(tok.answer(t.get<std::string>()));
  if (!ep.truth.empty() && ep.truth.size() != ep.questions.size()) throw Error("episode: truth/question count mismatch");
  return ep;
}

inline void write_corpus(const std::string& path, const Tokenizer& tok, const std::vector<Episode>& corpus, bool with_truth) {
  std::ofstream os(path);
  if (!os) throw Error("cannot write " + path);
  for (const auto& ep : corpus) os << episode_to_json(tok, ep, with_truth).dump() << '\n';
}

inline std::vector<Episode> read_corpus(const std::string& path, const Tokenizer& tok) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read " + path);
  std::vector<Episode> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(episode_from_json(tok, nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw Error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline std::vector<Episode> strip_truth(std::vector<Episode> corpus) {
  for (auto& ep : corpus) ep.truth.clear();
  return corpus;
}

}  // namespace seva
