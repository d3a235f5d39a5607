#pragma once

// Byte-level autoregressive transformer with video special tokens, fused
// visual-embedding injection, LoRA adapters on every attention and FFN
// linear, and greedy decoding. Base weights are frozen; only the adapters and
// the special-token embedding rows train.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "minivlm/layers.hpp"
#include "minivlm/tensor.hpp"

namespace minivlm {

// 256 byte tokens plus six specials. decode(encode(s)) == s for any byte
// string that does not spell out a special-token marker.
struct Vocabulary {
  static constexpr i64 n_bytes = 256;
  static constexpr i64 bos = 256;
  static constexpr i64 eos = 257;
  static constexpr i64 pad = 258;
  static constexpr i64 video_start = 259;
  static constexpr i64 video = 260;
  static constexpr i64 video_end = 261;
  static constexpr i64 n_special = 6;

  static i64 size() { return n_bytes + n_special; }
  static const std::string& marker(i64 special_id);
  static bool contains_marker(const std::string& text);

  static std::vector<i64> encode(const std::string& text);
  static std::string decode(const std::vector<i64>& ids);
};

struct LMConfig {
  i64 d_model = 64;
  i64 n_layers = 2;
  i64 n_heads = 2;
  i64 d_ffn = 0;  // 0 means 4 * d_model
  i64 max_seq = 512;
  i64 vocab = Vocabulary::size();
  double ln_eps = 1e-12;
  i64 lora_rank = 8;
  double lora_alpha = 32.0;

  i64 ffn_width() const { return d_ffn > 0 ? d_ffn : 4 * d_model; }
  void validate() const;
};

// One training example: chat text plus the sample's views and gold label.
struct PromptSample {
  std::string system;
  std::string user;       // contains <|video_start|><|video|><|video_end|>
  std::string assistant;  // "Proficiency Level: <name>.\nProficiency Commentary: ..."
  int label = -1;
};

enum class RenderMode { train, infer };

struct Rendered {
  std::vector<i64> ids;
  std::vector<i64> video_positions;  // one entry per video slot
  std::vector<char> loss_mask;       // true on assistant content + EOS
};

// Chat layout: <|system|>\n{system}\n<|user|>\n{user}\n<|assistant|>\n then,
// in train mode, {assistant}<EOS>. Role headers are literal byte text. The
// infer rendering is a strict prefix of the train rendering.
Rendered render_prompt(const PromptSample& sample, RenderMode mode,
                       i64 video_slots = 1);

struct LMLayerParams {
  Tensor ln1_gamma, ln1_beta;
  LoraLinear q, k, v, o;
  Tensor ln2_gamma, ln2_beta;
  LoraLinear fc1, fc2;
};

struct LMParams {
  LMConfig cfg;
  Tensor byte_embed;     // [256, d_model], frozen
  Tensor special_embed;  // [6, d_model], trainable (new tokens must learn)
  Tensor pos;            // [max_seq, d_model] sinusoidal buffer, not a param
  std::vector<LMLayerParams> layers;
  Tensor final_ln_gamma, final_ln_beta;
  Tensor unembed;  // [d_model, vocab], frozen

  static LMParams init(const LMConfig& cfg, std::mt19937_64& rng);
  std::vector<NamedTensor> named_tensors() const;
  // Mean / std over every embedding-table entry; seeds the projector's
  // distribution alignment.
  double embed_mean() const;
  double embed_std() const;
};

// ids flat row-major [B*T] -> [B, T, d_model].
Tensor token_embeddings(const LMParams& p, const std::vector<i64>& ids, i64 b,
                        i64 t);
// Replace each sequence's video-slot rows with the fused vectors.
// fused is [n_slots_total, d_model]; rows lists flat b*T + t indices.
Tensor inject_visual(const Tensor& embeddings, const std::vector<i64>& rows,
                     const Tensor& fused);
// Positions + causal transformer stack + final layer norm.
Tensor lm_hidden(const LMParams& p, const Tensor& x);
// Full logits [B, T, vocab].
Tensor lm_logits(const LMParams& p, const Tensor& hidden);
// Logits of the last position only, [B, vocab] (generation fast path).
Tensor lm_logits_last(const LMParams& p, const Tensor& hidden);

// Convenience: embeddings -> inject -> hidden -> logits for one sequence.
Tensor lm_forward(const LMParams& p, const Rendered& r, const Tensor& fused);

// Greedy decode: extends the infer-mode prompt until EOS or max_new tokens,
// returns the decoded bytes of newly generated tokens (EOS excluded). fused
// is [d_model] or [n_slots, d_model].
std::string generate(const LMParams& p, const Rendered& infer,
                     const Tensor& fused, i64 max_new_tokens);
// Same prompt for every row, one fused vector per row ([B, d_model]).
std::vector<std::string> generate_batch(const LMParams& p,
                                        const Rendered& infer,
                                        const Tensor& fused,
                                        i64 max_new_tokens);

}  // namespace minivlm
