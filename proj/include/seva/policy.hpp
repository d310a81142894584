#pragma once

// Vision-conditioned autoregressive answer model.
//
// An image raster is cut into square patches, each flattened and linearly
// projected to a d-dim prefix embedding (the encoder g). The prompt text
// [BOS, question..., PAD..., SEP] follows the prefix, then the answer tokens.
// A pre-norm transformer trunk and a linear head produce next-token logits.
// Attention is causal over answer tokens; with prefix_lm the image and
// question positions also attend to each other in both directions, which
// lets a patch see what is being asked about it.
//
// Query grounding: for questions that name grid coordinates, the SEP and
// answer positions also receive the patch row/column position rows those
// coordinates refer to (for row and column reads, the scan coordinate
// advances with the answer position). The tables are shared with the patch
// prefix, so a single attention hop can address the named cell.
//
// Low-rank adapters can be attached to the attention projections, the MLP
// projections and the output head; attaching freezes the base.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <memory>
#include <optional>
#include <algorithm>
#include <utility>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "seva/kernels.hpp"
#include "seva/microworld.hpp"
#include "seva/rng.hpp"
#include "seva/tensor.hpp"
#include "seva/tokenizer.hpp"

namespace seva {

// Token ids that drive query grounding; -1 disables a rule.
struct QueryGrounding {
  TokenId digit_first = -1;
  int digit_count = 10;
  TokenId row_query = -1;   // [t, r]: row r, scanning columns
  TokenId col_query = -1;   // [t, c]: column c, scanning rows
  TokenId cell_query = -1;  // [t, r, c]: one cell
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(QueryGrounding, digit_first, digit_count, row_query, col_query, cell_query)

struct PolicyConfig {
  int image_width_px = 32;
  int image_height_px = 32;
  int patch_size = 4;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int mlp_hidden = 128;  // 0 disables the MLP sublayer
  int vocab_size = 34;
  int question_len = 3;     // prompt questions are right-padded with PAD
  int max_answer_len = 9;   // including EOS
  bool layer_norm = true;
  bool prefix_lm = true;
  bool isolate_patches = true;  // patches attend to themselves and the text prompt only
  TokenId pad_id = Tokenizer::kPad;
  TokenId bos_id = Tokenizer::kBos;
  TokenId eos_id = Tokenizer::kEos;
  TokenId sep_id = Tokenizer::kSep;

  double patch_pos_std = 0.5;  // init scale of the row/column position tables
  QueryGrounding grounding;

  int patch_rows() const { return image_height_px / patch_size; }
  int patch_cols() const { return image_width_px / patch_size; }
  int n_patches() const { return patch_rows() * patch_cols(); }
  int patch_dim() const { return patch_size * patch_size; }
  // BOS + question + SEP + all answer tokens but the last.
  int max_text_len() const { return question_len + 1 + max_answer_len; }
  int prompt_len() const { return question_len + 2; }

  void validate() const {
    if (patch_size < 1 || image_width_px % patch_size || image_height_px % patch_size)
      throw Error("policy config: image dims must be multiples of patch_size");
    if (d_model < 1 || n_layers < 1 || n_heads < 1 || d_model % n_heads)
      throw Error("policy config: d_model must be a positive multiple of n_heads");
    if (mlp_hidden < 0 || vocab_size < 2 || question_len < 1 || max_answer_len < 1)
      throw Error("policy config: invalid sizes");
    for (TokenId t : {pad_id, bos_id, eos_id, sep_id})
      if (t < 0 || t >= vocab_size) throw Error("policy config: special token id outside vocabulary");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PolicyConfig, image_width_px, image_height_px, patch_size, d_model,
                                                n_layers, n_heads, mlp_hidden, vocab_size, question_len, max_answer_len,
                                                layer_norm, pad_id, bos_id, eos_id, sep_id, patch_pos_std, prefix_lm, isolate_patches,
                                                grounding)

inline PolicyConfig policy_config_for(const WorldConfig& w, const Tokenizer& tok) {
  PolicyConfig c;
  c.image_width_px = w.width * w.cell_size;
  c.image_height_px = w.height * w.cell_size;
  c.patch_size = w.cell_size;
  c.vocab_size = static_cast<int>(tok.size());
  c.question_len = 3;
  c.max_answer_len = std::max({w.width, w.height, 2}) + 1;
  c.grounding.digit_first = tok.digit(0);
  c.grounding.row_query = tok.template_word(static_cast<int>(Template::read_row));
  c.grounding.col_query = tok.template_word(static_cast<int>(Template::read_col));
  c.grounding.cell_query = tok.template_word(static_cast<int>(Template::glyph_at));
  return c;
}

struct Param {
  std::string name;
  Shape shape;
  std::vector<double> value;
  bool trainable = true;
};

struct LoraSettings {
  int rank = 0;
  double alpha = 0.0;
  double scale() const { return alpha / rank; }
};

using Bound = std::vector<Tensor>;

class Policy {
public:
  Policy() = default;

  Policy(PolicyConfig cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model), h = static_cast<std::size_t>(cfg_.mlp_hidden);
    const std::size_t V = static_cast<std::size_t>(cfg_.vocab_size), P = static_cast<std::size_t>(cfg_.patch_dim());
    const double resid_scale = 1.0 / std::sqrt(2.0 * cfg_.n_layers);
    auto normal = [&](std::string name, Shape shape, double std) {
      std::vector<double> v(numel(shape));
      for (auto& x : v) x = std * rng.normal();
      add_param(std::move(name), std::move(shape), std::move(v));
    };
    auto constant = [&](std::string name, Shape shape, double c) {
      add_param(std::move(name), shape, std::vector<double>(numel(shape), c));
    };
    const double fan_d = 1.0 / std::sqrt(static_cast<double>(d));
    normal("patch.w", {P, d}, 1.0 / std::sqrt(static_cast<double>(P)));
    constant("patch.b", {d}, 0.0);
    normal("patch.row", {static_cast<std::size_t>(cfg_.patch_rows()), d}, cfg_.patch_pos_std);
    normal("patch.col", {static_cast<std::size_t>(cfg_.patch_cols()), d}, cfg_.patch_pos_std);
    normal("tok.emb", {V, d}, 0.1);
    normal("text.pos", {static_cast<std::size_t>(cfg_.max_text_len()), d}, 0.1);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "l" + std::to_string(l) + ".";
      if (cfg_.layer_norm) {
        constant(p + "ln1.g", {d}, 1.0);
        constant(p + "ln1.b", {d}, 0.0);
      }
      normal(p + "attn.wq", {d, d}, fan_d);
      normal(p + "attn.wk", {d, d}, fan_d);
      normal(p + "attn.wv", {d, d}, fan_d);
      normal(p + "attn.wo", {d, d}, fan_d * resid_scale);
      if (h > 0) {
        if (cfg_.layer_norm) {
          constant(p + "ln2.g", {d}, 1.0);
          constant(p + "ln2.b", {d}, 0.0);
        }
        normal(p + "mlp.w1", {d, h}, fan_d);
        constant(p + "mlp.b1", {h}, 0.0);
        normal(p + "mlp.w2", {h, d}, resid_scale / std::sqrt(static_cast<double>(h)));
        constant(p + "mlp.b2", {d}, 0.0);
      }
    }
    if (cfg_.layer_norm) {
      constant("lnf.g", {d}, 1.0);
      constant("lnf.b", {d}, 0.0);
    }
    normal("head.w", {d, V}, fan_d);
    constant("head.b", {V}, 0.0);
    index();
  }

  const PolicyConfig& config() const { return cfg_; }
  const std::vector<Param>& params() const { return params_; }
  std::vector<Param>& params() { return params_; }
  const std::optional<LoraSettings>& lora() const { return lora_; }

  Param& param(const std::string& name) { return params_.at(index_of(name)); }
  const Param& param(const std::string& name) const { return params_.at(index_of(name)); }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.trainable) n += p.value.size();
    return n;
  }

  void freeze() {
    for (auto& p : params_) p.trainable = false;
  }

  // Weight matrices that receive adapters: attention and MLP projections plus the head.
  std::vector<std::string> adaptable_weights() const {
    std::vector<std::string> out;
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "l" + std::to_string(l) + ".";
      for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) out.push_back(p + w);
      if (cfg_.mlp_hidden > 0) {
        out.push_back(p + "mlp.w1");
        out.push_back(p + "mlp.w2");
      }
    }
    out.push_back("head.w");
    return out;
  }

  // Adds A (r x d_in, random) and B (d_out x r, zero) per adapted weight;
  // the effective weight is W + (alpha/r) B A. alpha <= 0 selects 2r.
  void attach_lora(int rank, double alpha = 0.0, std::uint64_t seed = 0) {
    if (lora_) throw Error("attach_lora: adapters already attached");
    if (rank < 1) throw Error("attach_lora: rank must be >= 1");
    const auto targets = adaptable_weights();
    for (const auto& name : targets) {
      const auto& s = param(name).shape;
      if (static_cast<std::size_t>(rank) > std::min(s[0], s[1]))
        throw Error("attach_lora: rank " + std::to_string(rank) + " exceeds min(d_out, d_in) = " +
                    std::to_string(std::min(s[0], s[1])) + " of " + name);
    }
    freeze();
    lora_ = LoraSettings{rank, alpha > 0.0 ? alpha : 2.0 * rank};
    Rng rng(seed);
    const auto r = static_cast<std::size_t>(rank);
    for (const auto& name : targets) {
      const auto s = param(name).shape;  // stored as [d_in, d_out]
      std::vector<double> a(r * s[0]);
      for (auto& x : a) x = rng.normal() / std::sqrt(static_cast<double>(s[0]));
      add_param(name + ".lora_a", {r, s[0]}, std::move(a));
      add_param(name + ".lora_b", {s[1], r}, std::vector<double>(s[1] * r, 0.0));
    }
    index();
  }

  // Folds adapters into the base weights and drops them.
  Policy merged() const {
    Policy out;
    out.cfg_ = cfg_;
    for (const auto& p : params_)
      if (p.name.find(".lora_") == std::string::npos) out.params_.push_back(p);
    if (lora_) {
      const double s = lora_->scale();
      for (const auto& name : adaptable_weights()) {
        auto& w = out.params_[out.index_of_in(name)];
        const auto& a = param(name + ".lora_a");
        const auto& b = param(name + ".lora_b");
        const std::size_t din = w.shape[0], dout = w.shape[1], r = a.shape[0];
        for (std::size_t i = 0; i < din; ++i)
          for (std::size_t j = 0; j < dout; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < r; ++k) acc += b.value[j * r + k] * a.value[k * din + i];
            w.value[i * dout + j] += s * acc;
          }
      }
    }
    for (auto& p : out.params_) p.trainable = true;
    out.index();
    return out;
  }

  std::uint64_t hash() const {
    Fnv1a h;
    h.str(nlohmann::json(cfg_).dump());
    for (const auto& p : params_) {
      h.str(p.name);
      for (double v : p.value) h.f64(v);
    }
    return h.value();
  }

  // Trainable parameters concatenated in declaration order.
  std::vector<double> trainable_flat() const {
    std::vector<double> out;
    for (const auto& p : params_)
      if (p.trainable) out.insert(out.end(), p.value.begin(), p.value.end());
    return out;
  }

  void set_trainable_flat(std::span<const double> flat) {
    std::size_t off = 0;
    for (auto& p : params_)
      if (p.trainable) {
        if (off + p.value.size() > flat.size()) throw Error("set_trainable_flat: vector too short");
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(off), p.value.size(), p.value.begin());
        off += p.value.size();
      }
    if (off != flat.size()) throw Error("set_trainable_flat: vector too long");
  }

  // Leaves for every parameter; trainable ones require grad when with_grad.
  Bound bind(bool with_grad) const {
    Bound out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(Tensor::leaf(p.shape, p.value, with_grad && p.trainable));
    return out;
  }

  // Trainable parameters taken as slices of one flat tensor (for gradient checks).
  Bound bind_flat(const Tensor& flat) const {
    Bound out;
    std::size_t off = 0;
    for (const auto& p : params_) {
      if (p.trainable) {
        out.push_back(reshape(slice_flat(flat, off, off + p.value.size()), p.shape));
        off += p.value.size();
      } else {
        out.push_back(Tensor::leaf(p.shape, p.value));
      }
    }
    if (off != flat.size()) throw Error("bind_flat: flat size does not match trainable parameter count");
    return out;
  }

  // Patch matrix [n_patches, patch_dim] for an image raster.
  std::vector<double> patches(const ToyImage& img) const {
    if (img.pixel_width() != cfg_.image_width_px || img.pixel_height() != cfg_.image_height_px)
      throw Error("policy: image raster " + std::to_string(img.pixel_width()) + "x" + std::to_string(img.pixel_height()) +
                  " does not match model input " + std::to_string(cfg_.image_width_px) + "x" + std::to_string(cfg_.image_height_px));
    const int ps = cfg_.patch_size, gw = cfg_.image_width_px / ps, gh = cfg_.image_height_px / ps;
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(cfg_.n_patches() * cfg_.patch_dim()));
    for (int pr = 0; pr < gh; ++pr)
      for (int pc = 0; pc < gw; ++pc)
        for (int y = 0; y < ps; ++y)
          for (int x = 0; x < ps; ++x) out.push_back(img.pixel(pr * ps + y, pc * ps + x));
    return out;
  }

  std::vector<std::size_t> prompt_ids(const std::vector<TokenId>& question) const {
    if (question.size() > static_cast<std::size_t>(cfg_.question_len))
      throw Error("policy: question of " + std::to_string(question.size()) + " tokens exceeds question_len " +
                  std::to_string(cfg_.question_len));
    std::vector<std::size_t> ids{static_cast<std::size_t>(cfg_.bos_id)};
    for (auto t : question) ids.push_back(checked_id(t));
    while (ids.size() < static_cast<std::size_t>(cfg_.question_len) + 1) ids.push_back(static_cast<std::size_t>(cfg_.pad_id));
    ids.push_back(static_cast<std::size_t>(cfg_.sep_id));
    return ids;
  }

  void check_answer(const TokenSequence& answer) const {
    if (answer.tokens.empty()) throw Error("sequence_logprob: empty answer");
    if (answer.tokens.back() != cfg_.eos_id) throw Error("sequence_logprob: answer is not EOS-terminated");
    if (answer.tokens.size() > static_cast<std::size_t>(cfg_.max_answer_len))
      throw Error("sequence_logprob: answer longer than max_answer_len");
    for (auto t : answer.tokens) checked_id(t);
  }

  // Logits [n_out, V] for the last n_out text positions.
  Tensor forward_logits(const Bound& p, const std::vector<double>& patch_matrix, const std::vector<std::size_t>& text_ids,
                        std::size_t n_out) const {
    const std::size_t d = static_cast<std::size_t>(cfg_.d_model);
    const std::size_t np = static_cast<std::size_t>(cfg_.n_patches());
    const std::size_t T = text_ids.size();
    if (T > static_cast<std::size_t>(cfg_.max_text_len())) throw Error("policy: text longer than max_text_len");
    const std::size_t N = np + T;
    const std::size_t prefix = cfg_.prefix_lm ? std::min(N, np + static_cast<std::size_t>(cfg_.prompt_len())) : 0;

    auto X = Tensor::leaf({np, static_cast<std::size_t>(cfg_.patch_dim())}, patch_matrix);
    auto Ep = add(add(add_rowwise(matmul(X, p[ix_.patch_w]), p[ix_.patch_b]), embedding(p[ix_.patch_row], patch_row_ids_)),
                  embedding(p[ix_.patch_col], patch_col_ids_));
    auto Et = add(embedding(p[ix_.tok_emb], text_ids), slice_rows(p[ix_.text_pos], 0, T));
    {
      const std::size_t rows = static_cast<std::size_t>(cfg_.patch_rows()), cols = static_cast<std::size_t>(cfg_.patch_cols());
      std::vector<double> sr(T * rows, 0.0), sc(T * cols, 0.0);
      for (std::size_t t = 0; t < T; ++t) {
        auto [r, c] = grounding(text_ids, t);
        if (r != npos) sr[t * rows + r] = 1.0;
        if (c != npos) sc[t * cols + c] = 1.0;
      }
      auto G = add(matmul(Tensor::leaf({T, rows}, std::move(sr)), p[ix_.patch_row]),
                   matmul(Tensor::leaf({T, cols}, std::move(sc)), p[ix_.patch_col]));
      Et = add(Et, G);
    }
    Tensor H = concat_rows({Ep, Et});

    std::shared_ptr<const std::vector<char>> full_mask, last_mask;
    if (cfg_.isolate_patches) {
      auto build = [&](std::size_t from) {
        auto m = std::make_shared<std::vector<char>>((N - from) * N, 0);
        for (std::size_t i = from; i < N; ++i)
          for (std::size_t j = 0; j < N; ++j) (*m)[(i - from) * N + j] = attends(i, j, np, prefix);
        return m;
      };
      full_mask = build(0);
      last_mask = n_out == N ? full_mask : build(N - n_out);
    }
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const auto& L = ix_.layers[static_cast<std::size_t>(l)];
      const bool last = l == cfg_.n_layers - 1;
      const std::size_t q_from = last ? N - n_out : 0;
      const auto& mask = last ? last_mask : full_mask;
      Tensor Hn = cfg_.layer_norm ? layer_norm(H, p[L.ln1_g], p[L.ln1_b]) : H;
      Tensor Hq = q_from > 0 ? slice_rows(Hn, q_from, N) : Hn;
      auto Q = linear(p, L.wq, Hq);
      auto K = linear(p, L.wk, Hn);
      auto Vv = linear(p, L.wv, Hn);
      const std::size_t nh = static_cast<std::size_t>(cfg_.n_heads), dh = d / nh;
      const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
      std::vector<Tensor> heads;
      for (std::size_t h = 0; h < nh; ++h) {
        auto Qh = nh == 1 ? Q : slice_cols(Q, h * dh, (h + 1) * dh);
        auto Kh = nh == 1 ? K : slice_cols(K, h * dh, (h + 1) * dh);
        auto Vh = nh == 1 ? Vv : slice_cols(Vv, h * dh, (h + 1) * dh);
        auto logits = scale(matmul_nt(Qh, Kh), inv);
        auto S = mask ? masked_softmax(logits, mask) : causal_softmax(logits, q_from, prefix);
        heads.push_back(matmul(S, Vh));
      }
      auto O = nh == 1 ? heads[0] : concat_cols(heads);
      Tensor R = q_from > 0 ? slice_rows(H, q_from, N) : H;
      H = add(R, linear(p, L.wo, O));
      if (cfg_.mlp_hidden > 0) {
        Tensor Hm = cfg_.layer_norm ? layer_norm(H, p[L.ln2_g], p[L.ln2_b]) : H;
        auto mid = gelu(add_rowwise(linear(p, L.w1, Hm), p[L.b1]));
        H = add(H, add_rowwise(linear(p, L.w2, mid), p[L.b2]));
      }
    }
    if (cfg_.layer_norm) H = layer_norm(H, p[ix_.lnf_g], p[ix_.lnf_b]);
    return add_rowwise(linear(p, ix_.head_w, H), p[ix_.head_b]);
  }

  // Whether position i may attend to position j, given np patches and a
  // bidirectional prefix of the first `prefix` positions.
  bool attends(std::size_t i, std::size_t j, std::size_t np, std::size_t prefix) const {
    if (cfg_.isolate_patches && i < np) return j == i || (j >= np && j < prefix);
    return j <= i || j < prefix;
  }

  // (row, column) patch coordinates grounded at text position t, npos where none.
  std::pair<std::size_t, std::size_t> grounding(const std::vector<std::size_t>& ids, std::size_t t) const {
    const auto& g = cfg_.grounding;
    const std::size_t sep = static_cast<std::size_t>(cfg_.question_len) + 1;
    std::pair<std::size_t, std::size_t> none{npos, npos};
    if (t < sep || ids.size() <= sep || g.digit_first < 0) return none;
    const std::size_t rows = static_cast<std::size_t>(cfg_.patch_rows()), cols = static_cast<std::size_t>(cfg_.patch_cols());
    const std::size_t k = t - sep;
    auto digit = [&](std::size_t pos) {
      if (pos >= sep) return npos;
      const auto v = static_cast<long>(ids[pos]) - g.digit_first;
      return v >= 0 && v < g.digit_count ? static_cast<std::size_t>(v) : npos;
    };
    auto within = [](std::size_t v, std::size_t n) { return v < n ? v : npos; };
    const auto tmpl = static_cast<TokenId>(ids[1]);
    const std::size_t a = digit(2), b = digit(3);
    if (tmpl == g.row_query && a != npos) return {within(a, rows), std::min(k, cols - 1)};
    if (tmpl == g.col_query && a != npos) return {std::min(k, rows - 1), within(a, cols)};
    if (tmpl == g.cell_query && a != npos && b != npos) return {within(a, rows), within(b, cols)};
    return none;
  }

  // sum_i log pi(y_i | y_<i, x), differentiable through the bound parameters.
  Tensor sequence_logprob(const Bound& p, const ToyImage& img, const std::vector<TokenId>& question,
                          const TokenSequence& answer) const {
    check_answer(answer);
    auto ids = prompt_ids(question);
    for (std::size_t i = 0; i + 1 < answer.tokens.size(); ++i) ids.push_back(static_cast<std::size_t>(answer.tokens[i]));
    const std::size_t L = answer.tokens.size();
    auto logits = forward_logits(p, patches(img), ids, L);
    std::vector<std::size_t> targets(answer.tokens.begin(), answer.tokens.end());
    return sum(gather(log_softmax(logits), targets));
  }

  // Gradient-free evaluation through the incremental decoder.
  double sequence_logprob(const ToyImage& img, const std::vector<TokenId>& question, const TokenSequence& answer) const;

  TokenSequence generate(const ToyImage& img, const std::vector<TokenId>& question, double temperature, int max_len,
                         std::uint64_t seed) const;

  // Next-token logits at every answer position, for diagnostics.
  std::vector<std::vector<double>> answer_logits(const ToyImage& img, const std::vector<TokenId>& question,
                                                 const TokenSequence& answer) const;

  // ---- checkpoint I/O
  nlohmann::json to_json(const Tokenizer* tok = nullptr) const {
    nlohmann::json ps = nlohmann::json::array();
    for (const auto& p : params_)
      ps.push_back({{"name", p.name}, {"shape", p.shape}, {"trainable", p.trainable}, {"values", p.value}});
    nlohmann::json j{{"format", "seva-policy"},
                     {"version", 1},
                     {"config", cfg_},
                     {"config_hash", config_hash()},
                     {"params", std::move(ps)}};
    if (lora_) j["lora"] = {{"rank", lora_->rank}, {"alpha", lora_->alpha}};
    if (tok) j["vocab"] = tok->vocab();
    return j;
  }

  static Policy from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "seva-policy") throw Error("checkpoint: not a policy checkpoint");
    if (j.value("version", 0) != 1) throw Error("checkpoint: unsupported version");
    Policy p;
    p.cfg_ = j.at("config").get<PolicyConfig>();
    p.cfg_.validate();
    if (j.at("config_hash").get<std::uint64_t>() != p.config_hash()) throw Error("checkpoint: config hash mismatch");
    for (const auto& e : j.at("params")) {
      Param q{e.at("name").get<std::string>(), e.at("shape").get<Shape>(), e.at("values").get<std::vector<double>>(),
              e.at("trainable").get<bool>()};
      if (numel(q.shape) != q.value.size()) throw Error("checkpoint: parameter " + q.name + " has wrong size");
      p.params_.push_back(std::move(q));
    }
    if (j.contains("lora")) p.lora_ = LoraSettings{j["lora"].at("rank").get<int>(), j["lora"].at("alpha").get<double>()};
    p.index();
    return p;
  }

  void save(const std::string& path, const Tokenizer* tok = nullptr) const {
    std::ofstream os(path);
    if (!os) throw Error("cannot write " + path);
    os << to_json(tok).dump() << '\n';
  }

  static Policy load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot read " + path);
    return from_json(nlohmann::json::parse(is));
  }

  std::uint64_t config_hash() const {
    Fnv1a h;
    h.str(nlohmann::json(cfg_).dump());
    return h.value();
  }

private:
  friend class Decoder;
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  struct LayerIndex {
    std::size_t ln1_g = npos, ln1_b = npos, wq = npos, wk = npos, wv = npos, wo = npos;
    std::size_t ln2_g = npos, ln2_b = npos, w1 = npos, b1 = npos, w2 = npos, b2 = npos;
  };
  struct Index {
    std::size_t patch_w = npos, patch_b = npos, patch_row = npos, patch_col = npos, tok_emb = npos, text_pos = npos;
    std::size_t lnf_g = npos, lnf_b = npos, head_w = npos, head_b = npos;
    std::vector<LayerIndex> layers;
    std::vector<std::size_t> lora_a, lora_b;  // per parameter, npos when not adapted
  };

  void add_param(std::string name, Shape shape, std::vector<double> v) {
    params_.push_back({std::move(name), std::move(shape), std::move(v), true});
  }

  std::size_t index_of_in(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return i;
    throw Error("policy: no parameter named " + name);
  }

  std::size_t index_of(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw Error("policy: no parameter named " + name);
    return it->second;
  }

  std::size_t find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? npos : it->second;
  }

  void index() {
    by_name_.clear();
    for (std::size_t i = 0; i < params_.size(); ++i) by_name_[params_[i].name] = i;
    ix_ = Index{};
    ix_.patch_w = index_of("patch.w");
    ix_.patch_b = index_of("patch.b");
    ix_.patch_row = index_of("patch.row");
    ix_.patch_col = index_of("patch.col");
    patch_row_ids_.clear();
    patch_col_ids_.clear();
    for (std::size_t i = 0; i < static_cast<std::size_t>(cfg_.n_patches()); ++i) {
      patch_row_ids_.push_back(i / static_cast<std::size_t>(cfg_.patch_cols()));
      patch_col_ids_.push_back(i % static_cast<std::size_t>(cfg_.patch_cols()));
    }
    ix_.tok_emb = index_of("tok.emb");
    ix_.text_pos = index_of("text.pos");
    ix_.head_w = index_of("head.w");
    ix_.head_b = index_of("head.b");
    if (cfg_.layer_norm) {
      ix_.lnf_g = index_of("lnf.g");
      ix_.lnf_b = index_of("lnf.b");
    }
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const std::string p = "l" + std::to_string(l) + ".";
      LayerIndex L;
      L.wq = index_of(p + "attn.wq");
      L.wk = index_of(p + "attn.wk");
      L.wv = index_of(p + "attn.wv");
      L.wo = index_of(p + "attn.wo");
      if (cfg_.layer_norm) {
        L.ln1_g = index_of(p + "ln1.g");
        L.ln1_b = index_of(p + "ln1.b");
      }
      if (cfg_.mlp_hidden > 0) {
        L.w1 = index_of(p + "mlp.w1");
        L.b1 = index_of(p + "mlp.b1");
        L.w2 = index_of(p + "mlp.w2");
        L.b2 = index_of(p + "mlp.b2");
        if (cfg_.layer_norm) {
          L.ln2_g = index_of(p + "ln2.g");
          L.ln2_b = index_of(p + "ln2.b");
        }
      }
      ix_.layers.push_back(L);
    }
    ix_.lora_a.assign(params_.size(), npos);
    ix_.lora_b.assign(params_.size(), npos);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      ix_.lora_a[i] = find(params_[i].name + ".lora_a");
      ix_.lora_b[i] = find(params_[i].name + ".lora_b");
    }
  }

  std::size_t checked_id(TokenId t) const {
    if (t < 0 || t >= cfg_.vocab_size)
      throw Error("policy: token id " + std::to_string(t) + " outside vocabulary of " + std::to_string(cfg_.vocab_size));
    return static_cast<std::size_t>(t);
  }

  // x W, plus (alpha/r) (x A^T) B^T when adapted.
  Tensor linear(const Bound& p, std::size_t w, const Tensor& x) const {
    auto y = matmul(x, p[w]);
    if (ix_.lora_a[w] == npos) return y;
    auto low = matmul_nt(matmul_nt(x, p[ix_.lora_a[w]]), p[ix_.lora_b[w]]);
    return add(y, scale(low, lora_->scale()));
  }

  PolicyConfig cfg_;
  std::vector<Param> params_;
  std::optional<LoraSettings> lora_;
  std::unordered_map<std::string, std::size_t> by_name_;
  Index ix_;
  std::vector<std::size_t> patch_row_ids_, patch_col_ids_;
};

// Incremental (key/value cached) forward pass over plain arrays, mirroring
// Policy::forward_logits operation for operation.
class Decoder {
public:
  explicit Decoder(const Policy& policy) : pol_(policy), cfg_(policy.cfg_) {
    const auto nl = static_cast<std::size_t>(cfg_.n_layers);
    keys_.resize(nl);
    values_.resize(nl);
  }

  // Feeds prefix + prompt; returns next-token logits after SEP.
  const std::vector<double>& prefill(const ToyImage& img, const std::vector<TokenId>& question) {
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const auto np = static_cast<std::size_t>(cfg_.n_patches());
    const auto P = static_cast<std::size_t>(cfg_.patch_dim());
    auto X = pol_.patches(img);
    ids_ = pol_.prompt_ids(question);
    for (auto& k : keys_) k.clear();
    for (auto& v : values_) v.clear();
    n_ = 0;

    const std::size_t N = np + ids_.size();
    prefix_ = cfg_.prefix_lm ? N : 0;
    np_ = np;
    std::vector<double> H(N * d, 0.0);
    kernels::matmul(X.data(), w(pol_.ix_.patch_w), H.data(), np, P, d);
    const double* pb = w(pol_.ix_.patch_b);
    const double* pr = w(pol_.ix_.patch_row);
    const double* pc = w(pol_.ix_.patch_col);
    for (std::size_t i = 0; i < np; ++i) {
      const double* r = pr + pol_.patch_row_ids_[i] * d;
      const double* c = pc + pol_.patch_col_ids_[i] * d;
      for (std::size_t j = 0; j < d; ++j) H[i * d + j] = ((H[i * d + j] + pb[j]) + r[j]) + c[j];
    }
    for (std::size_t t = 0; t < ids_.size(); ++t) embed(ids_[t], t, H.data() + (np + t) * d);
    run(H, N);
    return logits_;
  }

  // Appends one answer token; returns logits for the following position.
  const std::vector<double>& step(TokenId token) {
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const std::size_t t = ids_.size();
    if (t >= static_cast<std::size_t>(cfg_.max_text_len())) throw Error("decoder: text position limit reached");
    ids_.push_back(pol_.checked_id(token));
    std::vector<double> H(d);
    embed(ids_.back(), t, H.data());
    run(H, 1);
    return logits_;
  }

  std::size_t text_len() const { return ids_.size(); }

private:
  const double* w(std::size_t i) const { return pol_.params_[i].value.data(); }

  void embed(std::size_t id, std::size_t pos, double* out) const {
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const double* e = w(pol_.ix_.tok_emb) + id * d;
    const double* p = w(pol_.ix_.text_pos) + pos * d;
    auto [r, c] = pol_.grounding(ids_, pos);
    const double* rr = r == Policy::npos ? nullptr : w(pol_.ix_.patch_row) + r * d;
    const double* cc = c == Policy::npos ? nullptr : w(pol_.ix_.patch_col) + c * d;
    for (std::size_t j = 0; j < d; ++j) out[j] = (e[j] + p[j]) + ((rr ? rr[j] : 0.0) + (cc ? cc[j] : 0.0));
  }

  void norm(const std::vector<double>& x, std::size_t m, std::size_t g, std::size_t b, std::vector<double>& y) const {
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    y.resize(m * d);
    if (!cfg_.layer_norm) {
      y = x;
      return;
    }
    std::vector<double> xhat(d);
    for (std::size_t i = 0; i < m; ++i) kernels::layer_norm_row(x.data() + i * d, w(g), w(b), y.data() + i * d, xhat.data(), d, 1e-5);
  }

  // y[m, dout] = x W (+ adapters), same evaluation order as Policy::linear.
  std::vector<double> linear(std::size_t wi, const std::vector<double>& x, std::size_t m) const {
    const auto& W = pol_.params_[wi];
    const std::size_t din = W.shape[0], dout = W.shape[1];
    std::vector<double> y(m * dout, 0.0);
    kernels::matmul(x.data(), W.value.data(), y.data(), m, din, dout);
    const std::size_t ai = pol_.ix_.lora_a[wi];
    if (ai == Policy::npos) return y;
    const auto& A = pol_.params_[ai];
    const auto& B = pol_.params_[pol_.ix_.lora_b[wi]];
    const std::size_t r = A.shape[0];
    std::vector<double> xa(m * r, 0.0), low(m * dout, 0.0);
    kernels::matmul_nt(x.data(), A.value.data(), xa.data(), m, din, r);
    kernels::matmul_nt(xa.data(), B.value.data(), low.data(), m, r, dout);
    const double s = pol_.lora_->scale();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] + low[i] * s;
    return y;
  }

  // Processes m new rows of residual stream H appended after n_ cached positions.
  void run(std::vector<double>& H, std::size_t m) {
    const auto d = static_cast<std::size_t>(cfg_.d_model);
    const auto nh = static_cast<std::size_t>(cfg_.n_heads);
    const std::size_t dh = d / nh;
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> Hn;
    for (std::size_t l = 0; l < static_cast<std::size_t>(cfg_.n_layers); ++l) {
      const auto& L = pol_.ix_.layers[l];
      norm(H, m, L.ln1_g, L.ln1_b, Hn);
      auto Q = linear(L.wq, Hn, m);
      auto K = linear(L.wk, Hn, m);
      auto V = linear(L.wv, Hn, m);
      auto& kc = keys_[l];
      auto& vc = values_[l];
      kc.insert(kc.end(), K.begin(), K.end());
      vc.insert(vc.end(), V.begin(), V.end());
      const std::size_t total = n_ + m;
      std::vector<double> O(m * d, 0.0), scores(total), probs(total), qh(dh), kh(total * dh), vh(total * dh);
      std::vector<std::size_t> open(total);
      for (std::size_t h = 0; h < nh; ++h) {
        for (std::size_t j = 0; j < total; ++j)
          for (std::size_t c = 0; c < dh; ++c) {
            kh[j * dh + c] = kc[j * d + h * dh + c];
            vh[j * dh + c] = vc[j * d + h * dh + c];
          }
        for (std::size_t i = 0; i < m; ++i) {
          const std::size_t g = n_ + i;
          const std::size_t len = std::max(g + 1, prefix_);
          for (std::size_t c = 0; c < dh; ++c) qh[c] = Q[i * d + h * dh + c];
          std::vector<double> o(dh, 0.0);
          if (cfg_.isolate_patches && g < np_) {
            std::size_t k = 0;
            for (std::size_t j = 0; j < len; ++j)
              if (pol_.attends(g, j, np_, prefix_)) {
                scores[k] = inv * kernels::dot(qh.data(), kh.data() + j * dh, dh);
                open[k++] = j;
              }
            kernels::softmax_row(scores.data(), probs.data(), k);
            for (std::size_t t = 0; t < k; ++t)
              if (probs[t] != 0.0)
                for (std::size_t c = 0; c < dh; ++c) o[c] += probs[t] * vh[open[t] * dh + c];
          } else {
            for (std::size_t j = 0; j < len; ++j) scores[j] = inv * kernels::dot(qh.data(), kh.data() + j * dh, dh);
            kernels::softmax_row(scores.data(), probs.data(), len);
            kernels::matmul(probs.data(), vh.data(), o.data(), 1, len, dh);
          }
          for (std::size_t c = 0; c < dh; ++c) O[i * d + h * dh + c] = o[c];
        }
      }
      auto A = linear(L.wo, O, m);
      for (std::size_t i = 0; i < m * d; ++i) H[i] = H[i] + A[i];
      if (cfg_.mlp_hidden > 0) {
        const auto hid = static_cast<std::size_t>(cfg_.mlp_hidden);
        norm(H, m, L.ln2_g, L.ln2_b, Hn);
        auto mid = linear(L.w1, Hn, m);
        const double* b1 = w(L.b1);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < hid; ++j) mid[i * hid + j] = kernels::gelu(mid[i * hid + j] + b1[j]);
        auto out = linear(L.w2, mid, m);
        const double* b2 = w(L.b2);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < d; ++j) H[i * d + j] = H[i * d + j] + (out[i * d + j] + b2[j]);
      }
    }
    n_ += m;
    // Head on the newest position only.
    std::vector<double> last(H.end() - static_cast<std::ptrdiff_t>(d), H.end());
    std::vector<double> normed;
    norm(last, 1, pol_.ix_.lnf_g, pol_.ix_.lnf_b, normed);
    auto logits = linear(pol_.ix_.head_w, normed, 1);
    const double* hb = w(pol_.ix_.head_b);
    for (std::size_t j = 0; j < logits.size(); ++j) logits[j] = logits[j] + hb[j];
    logits_ = std::move(logits);
  }

  const Policy& pol_;
  std::size_t prefix_ = 0;
  std::size_t np_ = 0;
  PolicyConfig cfg_;
  std::vector<std::size_t> ids_;
  std::vector<std::vector<double>> keys_, values_;
  std::size_t n_ = 0;
  std::vector<double> logits_;
};

inline double Policy::sequence_logprob(const ToyImage& img, const std::vector<TokenId>& question,
                                       const TokenSequence& answer) const {
  check_answer(answer);
  Decoder dec(*this);
  const auto* logits = &dec.prefill(img, question);
  double total = 0.0;
  std::vector<double> lp(static_cast<std::size_t>(cfg_.vocab_size));
  for (std::size_t i = 0; i < answer.tokens.size(); ++i) {
    kernels::log_softmax_row(logits->data(), lp.data(), lp.size());
    total += lp[static_cast<std::size_t>(answer.tokens[i])];
    if (i + 1 < answer.tokens.size()) logits = &dec.step(answer.tokens[i]);
  }
  return total;
}

inline std::vector<std::vector<double>> Policy::answer_logits(const ToyImage& img, const std::vector<TokenId>& question,
                                                              const TokenSequence& answer) const {
  check_answer(answer);
  Decoder dec(*this);
  std::vector<std::vector<double>> out{dec.prefill(img, question)};
  for (std::size_t i = 0; i + 1 < answer.tokens.size(); ++i) out.push_back(dec.step(answer.tokens[i]));
  return out;
}

// temperature 0 is greedy argmax (lowest id on ties); otherwise a seeded
// draw from softmax(logits / temperature). EOS is forced at max_len.
inline TokenSequence Policy::generate(const ToyImage& img, const std::vector<TokenId>& question, double temperature,
                                      int max_len, std::uint64_t seed) const {
  if (max_len < 1) throw Error("generate: max_len must be >= 1");
  if (temperature < 0.0) throw Error("generate: temperature must be >= 0");
  max_len = std::min(max_len, cfg_.max_answer_len);
  Decoder dec(*this);
  const auto* logits = &dec.prefill(img, question);
  Rng rng(seed);
  const auto V = static_cast<std::size_t>(cfg_.vocab_size);
  std::vector<double> lp(V), scaled(V), probs(V);
  TokenSequence out;
  double total = 0.0;
  for (int i = 0; i < max_len; ++i) {
    kernels::log_softmax_row(logits->data(), lp.data(), V);
    TokenId tok;
    if (i == max_len - 1) {
      tok = cfg_.eos_id;
    } else if (temperature == 0.0) {
      tok = static_cast<TokenId>(std::max_element(logits->begin(), logits->end()) - logits->begin());
    } else {
      for (std::size_t j = 0; j < V; ++j) scaled[j] = (*logits)[j] / temperature;
      kernels::softmax_row(scaled.data(), probs.data(), V);
      double u = rng.uniform(), acc = 0.0;
      tok = static_cast<TokenId>(V - 1);
      for (std::size_t j = 0; j < V; ++j) {
        acc += probs[j];
        if (u < acc) {
          tok = static_cast<TokenId>(j);
          break;
        }
      }
    }
    out.tokens.push_back(tok);
    total += lp[static_cast<std::size_t>(tok)];
    if (tok == cfg_.eos_id) break;
    logits = &dec.step(tok);
  }
  out.logprob = total;
  return out;
}

}  // namespace seva
