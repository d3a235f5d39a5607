#include "minivlm/lm.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace minivlm {

namespace {

const std::array<std::string, Vocabulary::n_special>& markers() {
  static const std::array<std::string, Vocabulary::n_special> m = {
      "<|bos|>",   "<|eos|>",   "<|pad|>",
      "<|video_start|>", "<|video|>", "<|video_end|>"};
  return m;
}

}  // namespace

const std::string& Vocabulary::marker(i64 special_id) {
  return markers()[static_cast<size_t>(special_id - n_bytes)];
}

bool Vocabulary::contains_marker(const std::string& text) {
  for (const std::string& m : markers())
    if (text.find(m) != std::string::npos) return true;
  return false;
}

std::vector<i64> Vocabulary::encode(const std::string& text) {
  std::vector<i64> ids;
  ids.reserve(text.size());
  size_t i = 0;
  while (i < text.size()) {
    bool matched = false;
    if (text[i] == '<') {
      // longest marker first so <|video_start|> never half-matches <|video|>
      i64 best = -1;
      size_t best_len = 0;
      for (i64 s = 0; s < n_special; ++s) {
        const std::string& m = markers()[static_cast<size_t>(s)];
        if (m.size() > best_len && text.compare(i, m.size(), m) == 0) {
          best = n_bytes + s;
          best_len = m.size();
        }
      }
      if (best >= 0) {
        ids.push_back(best);
        i += best_len;
        matched = true;
      }
    }
    if (!matched) {
      ids.push_back(static_cast<unsigned char>(text[i]));
      ++i;
    }
  }
  return ids;
}

std::string Vocabulary::decode(const std::vector<i64>& ids) {
  std::string out;
  for (i64 id : ids) {
    if (id < 0 || id >= size())
      throw std::invalid_argument("decode: token id " + std::to_string(id) +
                                  " outside vocabulary");
    if (id < n_bytes)
      out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    else
      out += marker(id);
  }
  return out;
}

void LMConfig::validate() const {
  if (d_model < 2 || d_model % n_heads != 0)
    throw std::invalid_argument("lm config: d_model " + std::to_string(d_model) +
                                " not divisible by n_heads " +
                                std::to_string(n_heads));
  if (n_layers < 1 || max_seq < 8)
    throw std::invalid_argument("lm config: bad n_layers/max_seq");
  if (vocab != Vocabulary::size())
    throw std::invalid_argument("lm config: vocab must be " +
                                std::to_string(Vocabulary::size()));
  if (lora_rank < 1 || lora_rank > std::min(d_model, ffn_width()))
    throw std::invalid_argument("lm config: lora rank " +
                                std::to_string(lora_rank) + " too large");
  if (ln_eps <= 0.0) throw std::invalid_argument("lm config: ln_eps must be > 0");
}

Rendered render_prompt(const PromptSample& sample, RenderMode mode,
                       i64 video_slots) {
  if (video_slots < 1)
    throw std::invalid_argument("render_prompt: video_slots must be >= 1");
  if (Vocabulary::contains_marker(sample.system))
    throw std::invalid_argument("render_prompt: system text contains special tokens");
  if (Vocabulary::contains_marker(sample.assistant))
    throw std::invalid_argument(
        "render_prompt: assistant text contains special tokens");

  std::vector<i64> user_ids = Vocabulary::encode(sample.user);
  i64 n_video = 0;
  for (i64 id : user_ids) n_video += id == Vocabulary::video ? 1 : 0;
  if (n_video != 1)
    throw std::invalid_argument("render_prompt: user message must contain exactly "
                                "one <|video|>, found " + std::to_string(n_video));
  for (size_t i = 0; i < user_ids.size(); ++i) {
    if (user_ids[i] != Vocabulary::video) continue;
    if (i == 0 || user_ids[i - 1] != Vocabulary::video_start ||
        i + 1 >= user_ids.size() || user_ids[i + 1] != Vocabulary::video_end)
      throw std::invalid_argument(
          "render_prompt: <|video|> must sit between <|video_start|> and "
          "<|video_end|>");
  }

  Rendered r;
  auto push_bytes = [&r](const std::string& text) {
    for (char c : text) r.ids.push_back(static_cast<unsigned char>(c));
  };
  push_bytes("<|system|>\n");
  push_bytes(sample.system);
  push_bytes("\n<|user|>\n");
  for (i64 id : user_ids) {
    if (id == Vocabulary::video) {
      for (i64 k = 0; k < video_slots; ++k) {
        r.video_positions.push_back(static_cast<i64>(r.ids.size()));
        r.ids.push_back(Vocabulary::video);
      }
    } else {
      r.ids.push_back(id);
    }
  }
  push_bytes("\n<|assistant|>\n");
  r.loss_mask.assign(r.ids.size(), 0);
  if (mode == RenderMode::train) {
    for (char c : sample.assistant) {
      r.ids.push_back(static_cast<unsigned char>(c));
      r.loss_mask.push_back(1);
    }
    r.ids.push_back(Vocabulary::eos);
    r.loss_mask.push_back(1);
  }
  return r;
}

LMParams LMParams::init(const LMConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  LMParams p;
  p.cfg = cfg;
  p.byte_embed = randn({Vocabulary::n_bytes, cfg.d_model}, rng, 0.0, 0.1);
  p.special_embed =
      randn({Vocabulary::n_special, cfg.d_model}, rng, 0.0, 0.1, true);

  p.pos = zeros({cfg.max_seq, cfg.d_model});
  auto pos = p.pos.data();
  for (i64 t = 0; t < cfg.max_seq; ++t) {
    for (i64 j = 0; j < cfg.d_model; j += 2) {
      const double freq =
          std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(cfg.d_model));
      pos[t * cfg.d_model + j] = std::sin(static_cast<double>(t) * freq);
      if (j + 1 < cfg.d_model)
        pos[t * cfg.d_model + j + 1] = std::cos(static_cast<double>(t) * freq);
    }
  }

  p.layers.resize(cfg.n_layers);
  for (auto& layer : p.layers) {
    layer.ln1_gamma = ones({cfg.d_model});
    layer.ln1_beta = zeros({cfg.d_model});
    layer.q = LoraLinear::wrap(Linear::init(cfg.d_model, cfg.d_model, rng, false),
                               cfg.lora_rank, cfg.lora_alpha, rng);
    layer.k = LoraLinear::wrap(Linear::init(cfg.d_model, cfg.d_model, rng, false),
                               cfg.lora_rank, cfg.lora_alpha, rng);
    layer.v = LoraLinear::wrap(Linear::init(cfg.d_model, cfg.d_model, rng, false),
                               cfg.lora_rank, cfg.lora_alpha, rng);
    layer.o = LoraLinear::wrap(Linear::init(cfg.d_model, cfg.d_model, rng, false),
                               cfg.lora_rank, cfg.lora_alpha, rng);
    layer.ln2_gamma = ones({cfg.d_model});
    layer.ln2_beta = zeros({cfg.d_model});
    layer.fc1 =
        LoraLinear::wrap(Linear::init(cfg.d_model, cfg.ffn_width(), rng, false),
                         cfg.lora_rank, cfg.lora_alpha, rng);
    layer.fc2 =
        LoraLinear::wrap(Linear::init(cfg.ffn_width(), cfg.d_model, rng, false),
                         cfg.lora_rank, cfg.lora_alpha, rng);
  }
  p.final_ln_gamma = ones({cfg.d_model});
  p.final_ln_beta = zeros({cfg.d_model});
  {
    const double bound = std::sqrt(6.0 / static_cast<double>(cfg.d_model + cfg.vocab));
    p.unembed = rand_uniform({cfg.d_model, cfg.vocab}, rng, -bound, bound);
  }
  return p;
}

std::vector<NamedTensor> LMParams::named_tensors() const {
  std::vector<NamedTensor> out;
  out.push_back({"lm.embed.bytes.weight", byte_embed, false});
  out.push_back({"lm.embed.special.weight", special_embed, true});
  for (size_t i = 0; i < layers.size(); ++i) {
    const std::string base = "lm.layers." + std::to_string(i);
    const LMLayerParams& l = layers[i];
    out.push_back({base + ".ln1.gamma", l.ln1_gamma, false});
    out.push_back({base + ".ln1.beta", l.ln1_beta, false});
    append_lora_params(out, base + ".attn.q", l.q);
    append_lora_params(out, base + ".attn.k", l.k);
    append_lora_params(out, base + ".attn.v", l.v);
    append_lora_params(out, base + ".attn.o", l.o);
    out.push_back({base + ".ln2.gamma", l.ln2_gamma, false});
    out.push_back({base + ".ln2.beta", l.ln2_beta, false});
    append_lora_params(out, base + ".ffn.fc1", l.fc1);
    append_lora_params(out, base + ".ffn.fc2", l.fc2);
  }
  out.push_back({"lm.final_ln.gamma", final_ln_gamma, false});
  out.push_back({"lm.final_ln.beta", final_ln_beta, false});
  out.push_back({"lm.unembed.weight", unembed, false});
  return out;
}

double LMParams::embed_mean() const {
  double s = 0.0;
  i64 n = 0;
  for (const Tensor* t : {&byte_embed, &special_embed}) {
    for (double v : t->data()) s += v;
    n += t->numel();
  }
  return s / static_cast<double>(n);
}

double LMParams::embed_std() const {
  const double mu = embed_mean();
  double s = 0.0;
  i64 n = 0;
  for (const Tensor* t : {&byte_embed, &special_embed}) {
    for (double v : t->data()) s += (v - mu) * (v - mu);
    n += t->numel();
  }
  return std::sqrt(s / static_cast<double>(n));
}

Tensor token_embeddings(const LMParams& p, const std::vector<i64>& ids, i64 b,
                        i64 t) {
  if (static_cast<i64>(ids.size()) != b * t)
    throw std::invalid_argument("token_embeddings: " + std::to_string(ids.size()) +
                                " ids do not fill " + std::to_string(b) + "x" +
                                std::to_string(t));
  Tensor flat = lookup_rows(p.byte_embed, p.special_embed, Vocabulary::n_bytes, ids);
  return reshape(flat, {b, t, p.cfg.d_model});
}

Tensor inject_visual(const Tensor& embeddings, const std::vector<i64>& rows,
                     const Tensor& fused) {
  Tensor f = fused;
  if (f.ndim() == 1) f = reshape(f, {1, f.dim(0)});
  return set_rows(embeddings, rows, f);
}

namespace {

Tensor causal_mask(i64 t) {
  Tensor m = zeros({t, t});
  auto d = m.data();
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (i64 i = 0; i < t; ++i)
    for (i64 j = i + 1; j < t; ++j) d[i * t + j] = neg_inf;
  return m;
}

Tensor lm_attention(const LMLayerParams& l, const Tensor& x, const Tensor& mask,
                    i64 n_heads, i64 dh) {
  Tensor qh = split_heads(lora_forward(l.q, x), n_heads);
  Tensor kh = split_heads(lora_forward(l.k, x), n_heads);
  Tensor vh = split_heads(lora_forward(l.v, x), n_heads);
  Tensor scores = scale(matmul(qh, transpose(kh, -1, -2)),
                        1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor weights = softmax(add(scores, mask), -1);
  Tensor mixed = merge_heads(matmul(weights, vh));
  return lora_forward(l.o, mixed);
}

}  // namespace

Tensor lm_hidden(const LMParams& p, const Tensor& x) {
  if (x.ndim() != 3 || x.dim(2) != p.cfg.d_model)
    throw std::invalid_argument("lm_hidden: expected [B, T, d_model], got " +
                                shape_str(x.shape()));
  const i64 t = x.dim(1);
  if (t > p.cfg.max_seq)
    throw std::invalid_argument("lm_hidden: sequence length " + std::to_string(t) +
                                " exceeds max_seq " + std::to_string(p.cfg.max_seq));
  const i64 dh = p.cfg.d_model / p.cfg.n_heads;
  Tensor h = add(x, narrow(p.pos, 0, 0, t));
  Tensor mask = causal_mask(t);
  for (const LMLayerParams& l : p.layers) {
    Tensor normed = layer_norm(h, l.ln1_gamma, l.ln1_beta, p.cfg.ln_eps);
    h = add(h, lm_attention(l, normed, mask, p.cfg.n_heads, dh));
    Tensor normed2 = layer_norm(h, l.ln2_gamma, l.ln2_beta, p.cfg.ln_eps);
    h = add(h, lora_forward(l.fc2, gelu(lora_forward(l.fc1, normed2))));
  }
  return layer_norm(h, p.final_ln_gamma, p.final_ln_beta, p.cfg.ln_eps);
}

Tensor lm_logits(const LMParams& p, const Tensor& hidden) {
  return matmul(hidden, p.unembed);
}

Tensor lm_logits_last(const LMParams& p, const Tensor& hidden) {
  Tensor last = narrow(hidden, 1, hidden.dim(1) - 1, 1);  // [B, 1, d]
  last = reshape(last, {hidden.dim(0), p.cfg.d_model});
  return matmul(last, p.unembed);
}

Tensor lm_forward(const LMParams& p, const Rendered& r, const Tensor& fused) {
  const i64 t = static_cast<i64>(r.ids.size());
  Tensor emb = token_embeddings(p, r.ids, 1, t);
  Tensor inj = inject_visual(emb, r.video_positions, fused);
  return lm_logits(p, lm_hidden(p, inj));
}

std::vector<std::string> generate_batch(const LMParams& p, const Rendered& infer,
                                        const Tensor& fused, i64 max_new_tokens) {
  if (max_new_tokens < 0)
    throw std::invalid_argument("generate: max_new_tokens must be >= 0");
  Tensor f = fused;
  if (f.ndim() == 1) f = reshape(f, {1, f.dim(0)});
  const i64 b = f.dim(0);
  const i64 t0 = static_cast<i64>(infer.ids.size());
  if (static_cast<i64>(infer.video_positions.size()) != 1)
    throw std::invalid_argument(
        "generate_batch: batched decoding expects a single video slot");

  NoGradGuard ng;
  std::vector<std::vector<i64>> seq(b, infer.ids);
  std::vector<std::vector<i64>> fresh(b);
  std::vector<char> done(b, 0);
  for (i64 step = 0; step < max_new_tokens; ++step) {
    bool all_done = true;
    for (i64 i = 0; i < b; ++i) all_done = all_done && done[i];
    if (all_done) break;
    const i64 t = t0 + step;
    std::vector<i64> flat;
    flat.reserve(b * t);
    for (i64 i = 0; i < b; ++i)
      flat.insert(flat.end(), seq[i].begin(), seq[i].end());
    std::vector<i64> rows(b);
    for (i64 i = 0; i < b; ++i) rows[i] = i * t + infer.video_positions[0];
    Tensor emb = token_embeddings(p, flat, b, t);
    Tensor logits = lm_logits_last(p, lm_hidden(p, inject_visual(emb, rows, f)));
    auto ld = logits.data();
    for (i64 i = 0; i < b; ++i) {
      if (done[i]) {
        seq[i].push_back(Vocabulary::pad);
        continue;
      }
      const double* row = ld.data() + i * p.cfg.vocab;
      i64 best = 0;
      for (i64 j = 1; j < p.cfg.vocab; ++j)
        if (row[j] > row[best]) best = j;
      if (best == Vocabulary::eos) {
        done[i] = 1;
        seq[i].push_back(Vocabulary::pad);
      } else {
        fresh[i].push_back(best);
        seq[i].push_back(best);
      }
    }
  }
  std::vector<std::string> out;
  out.reserve(b);
  for (i64 i = 0; i < b; ++i) out.push_back(Vocabulary::decode(fresh[i]));
  return out;
}

std::string generate(const LMParams& p, const Rendered& infer, const Tensor& fused,
                     i64 max_new_tokens) {
  Tensor f = fused;
  if (f.ndim() == 1) f = reshape(f, {1, f.dim(0)});
  const i64 slots = static_cast<i64>(infer.video_positions.size());
  if (f.dim(0) != slots)
    throw std::invalid_argument("generate: " + std::to_string(f.dim(0)) +
                                " fused rows for " + std::to_string(slots) +
                                " video slots");
  if (slots == 1)
    return generate_batch(p, infer, reshape(f, {1, f.dim(1)}), max_new_tokens)[0];

  // Multi-slot path, one sequence at a time.
  NoGradGuard ng;
  std::vector<i64> seq = infer.ids;
  std::vector<i64> fresh;
  for (i64 step = 0; step < max_new_tokens; ++step) {
    const i64 t = static_cast<i64>(seq.size());
    Tensor emb = token_embeddings(p, seq, 1, t);
    Tensor logits =
        lm_logits_last(p, lm_hidden(p, inject_visual(emb, infer.video_positions, f)));
    auto row = logits.data();
    i64 best = 0;
    for (i64 j = 1; j < p.cfg.vocab; ++j)
      if (row[j] > row[best]) best = j;
    if (best == Vocabulary::eos) break;
    fresh.push_back(best);
    seq.push_back(best);
  }
  return Vocabulary::decode(fresh);
}

}  // namespace minivlm
