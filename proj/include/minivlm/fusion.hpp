#pragma once

// Multi-view fusion projectors. The attentive gated projector runs per-view
// normalization, cross-view multi-head self-attention, a sigmoid-gated
// feed-forward block (both with residuals), mean-pools the views and aligns
// the result with the language-model embedding distribution via a learned
// scale/shift after standardization. The MLP projector is the baseline:
// mean-pool, then two linears with GELU.
//
// With view embeddings disabled the whole pipeline is bit-exactly invariant
// to view order: all cross-view reductions accumulate in ascending value
// order (matmul_value_ordered / value-ordered softmax and mean).

#include <optional>
#include <random>
#include <vector>

#include "minivlm/layers.hpp"
#include "minivlm/tensor.hpp"

namespace minivlm {

struct AGPConfig {
  i64 d_view = 768;    // frozen backbone feature size
  i64 d_hidden = 1024; // fusion width
  i64 n_heads = 4;
  i64 d_ffn = 0;       // 0 means d_hidden
  i64 d_lm = 576;      // language-model embedding size
  bool use_view_embeddings = false;
  double eps = 1e-12;  // small enough that standardized rows hit |var-1|<1e-8

  i64 ffn_width() const { return d_ffn > 0 ? d_ffn : d_hidden; }
  void validate() const;
};

struct AGPParams {
  AGPConfig cfg;
  Tensor view_ln_gamma, view_ln_beta;  // shared across views, over d_view
  Linear in_proj;                      // d_view -> d_hidden
  Linear q, k, v, o;                   // d_hidden -> d_hidden
  Tensor pre_ffn_ln_gamma, pre_ffn_ln_beta;
  Linear ffn1;  // d_hidden -> d_ffn
  Linear ffn2;  // d_ffn -> d_hidden
  Linear gate;  // d_hidden -> d_hidden, sigmoid-activated
  Linear out_proj;  // d_hidden -> d_lm
  Tensor out_scale, out_shift;           // [d_lm]
  std::optional<Tensor> view_embed;      // [2, d_hidden]: row 0 ego, row 1 exo

  // out_scale/out_shift start at the target embedding table's std/mean so
  // fused vectors are distribution-matched from the first step.
  static AGPParams init(const AGPConfig& cfg, std::mt19937_64& rng,
                        double embed_mean, double embed_std);
  std::vector<NamedTensor> named_tensors() const;
};

struct MLPConfig {
  i64 d_view = 768;
  i64 d_mlp = 576;
  i64 d_lm = 576;
  void validate() const;
};

struct MLPParams {
  MLPConfig cfg;
  Linear fc1;  // d_view -> d_mlp
  Linear fc2;  // d_mlp -> d_lm

  static MLPParams init(const MLPConfig& cfg, std::mt19937_64& rng);
  std::vector<NamedTensor> named_tensors() const;
};

enum class ViewRole { ego, exo };

struct ViewFeatureSet {
  Tensor features;              // [V, d_view]
  std::vector<ViewRole> roles;  // exactly 0 or 1 ego entry

  i64 view_count() const { return features.dim(0); }
  void validate() const;
};

// Stage ops (each also accepts a leading batch dimension).
Tensor normalize_views(const Tensor& features, const AGPParams& p);
Tensor cross_view_attention(const Tensor& h, const AGPParams& p);
Tensor gated_ffn(const Tensor& h, const AGPParams& p);
Tensor project_to_lm(const Tensor& fused, const AGPParams& p);

// Full pipeline, one sample: [d_lm].
Tensor fuse(const ViewFeatureSet& x, const AGPParams& p);
// Batched pipeline: features [B, V, d_view] -> [B, d_lm]. All rows share the
// same role layout.
Tensor fuse_batch(const Tensor& features, const std::vector<ViewRole>& roles,
                  const AGPParams& p);

Tensor mlp_fuse(const ViewFeatureSet& x, const MLPParams& p);
Tensor mlp_fuse_batch(const Tensor& features, const MLPParams& p);

// Closed-form learnable-scalar counts; tests cross-check them against an
// enumeration of the actual parameter tensors.
i64 agp_param_count(const AGPConfig& cfg);
i64 mlp_param_count(const MLPConfig& cfg);

}  // namespace minivlm
