#include "minivlm/fusion.hpp"

#include <cmath>
#include <stdexcept>

namespace minivlm {

void AGPConfig::validate() const {
  if (d_view < 2 || d_hidden < 2 || d_lm < 2 || ffn_width() < 2)
    throw std::invalid_argument("agp config: all dimensions must be >= 2");
  if (n_heads < 1 || d_hidden % n_heads != 0)
    throw std::invalid_argument(
        "agp config: d_hidden " + std::to_string(d_hidden) +
        " not divisible by n_heads " + std::to_string(n_heads));
  if (eps <= 0.0) throw std::invalid_argument("agp config: eps must be positive");
}

void MLPConfig::validate() const {
  if (d_view < 2 || d_mlp < 2 || d_lm < 2)
    throw std::invalid_argument("mlp config: all dimensions must be >= 2");
}

void ViewFeatureSet::validate() const {
  if (!features.defined() || features.ndim() != 2 || features.dim(0) < 1)
    throw std::invalid_argument("view set: features must be [V>=1, d_view]");
  if (static_cast<i64>(roles.size()) != features.dim(0))
    throw std::invalid_argument("view set: " + std::to_string(roles.size()) +
                                " roles for " + std::to_string(features.dim(0)) +
                                " views");
  int ego = 0;
  for (ViewRole r : roles) ego += r == ViewRole::ego ? 1 : 0;
  if (ego > 1)
    throw std::invalid_argument("view set: more than one ego view");
}

AGPParams AGPParams::init(const AGPConfig& cfg, std::mt19937_64& rng,
                          double embed_mean, double embed_std) {
  cfg.validate();
  AGPParams p;
  p.cfg = cfg;
  p.view_ln_gamma = ones({cfg.d_view}, true);
  p.view_ln_beta = zeros({cfg.d_view}, true);
  p.in_proj = Linear::init(cfg.d_view, cfg.d_hidden, rng);
  p.q = Linear::init(cfg.d_hidden, cfg.d_hidden, rng);
  p.k = Linear::init(cfg.d_hidden, cfg.d_hidden, rng);
  p.v = Linear::init(cfg.d_hidden, cfg.d_hidden, rng);
  p.o = Linear::init(cfg.d_hidden, cfg.d_hidden, rng);
  p.pre_ffn_ln_gamma = ones({cfg.d_hidden}, true);
  p.pre_ffn_ln_beta = zeros({cfg.d_hidden}, true);
  p.ffn1 = Linear::init(cfg.d_hidden, cfg.ffn_width(), rng);
  p.ffn2 = Linear::init(cfg.ffn_width(), cfg.d_hidden, rng);
  p.gate = Linear::init(cfg.d_hidden, cfg.d_hidden, rng);
  p.out_proj = Linear::init(cfg.d_hidden, cfg.d_lm, rng);
  p.out_scale = full({cfg.d_lm}, embed_std, true);
  p.out_shift = full({cfg.d_lm}, embed_mean, true);
  if (cfg.use_view_embeddings)
    p.view_embed = randn({2, cfg.d_hidden}, rng, 0.0, 0.02, true);
  return p;
}

std::vector<NamedTensor> AGPParams::named_tensors() const {
  std::vector<NamedTensor> out;
  out.push_back({"agp.view_ln.gamma", view_ln_gamma, true});
  out.push_back({"agp.view_ln.beta", view_ln_beta, true});
  append_linear_params(out, "agp.in_proj", in_proj, true);
  append_linear_params(out, "agp.attn.q", q, true);
  append_linear_params(out, "agp.attn.k", k, true);
  append_linear_params(out, "agp.attn.v", v, true);
  append_linear_params(out, "agp.attn.o", o, true);
  out.push_back({"agp.pre_ffn_ln.gamma", pre_ffn_ln_gamma, true});
  out.push_back({"agp.pre_ffn_ln.beta", pre_ffn_ln_beta, true});
  append_linear_params(out, "agp.ffn.fc1", ffn1, true);
  append_linear_params(out, "agp.ffn.fc2", ffn2, true);
  append_linear_params(out, "agp.gate", gate, true);
  append_linear_params(out, "agp.out_proj", out_proj, true);
  out.push_back({"agp.out_scale", out_scale, true});
  out.push_back({"agp.out_shift", out_shift, true});
  if (view_embed) out.push_back({"agp.view_embed", *view_embed, true});
  return out;
}

MLPParams MLPParams::init(const MLPConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  MLPParams p;
  p.cfg = cfg;
  p.fc1 = Linear::init(cfg.d_view, cfg.d_mlp, rng);
  p.fc2 = Linear::init(cfg.d_mlp, cfg.d_lm, rng);
  return p;
}

std::vector<NamedTensor> MLPParams::named_tensors() const {
  std::vector<NamedTensor> out;
  append_linear_params(out, "mlp.fc1", fc1, true);
  append_linear_params(out, "mlp.fc2", fc2, true);
  return out;
}

Tensor normalize_views(const Tensor& features, const AGPParams& p) {
  if (features.dim(-1) != p.cfg.d_view)
    throw std::invalid_argument("normalize_views: features " +
                                shape_str(features.shape()) +
                                " do not end in d_view " +
                                std::to_string(p.cfg.d_view));
  return layer_norm(features, p.view_ln_gamma, p.view_ln_beta, p.cfg.eps);
}

Tensor cross_view_attention(const Tensor& h, const AGPParams& p) {
  const i64 dh = p.cfg.d_hidden / p.cfg.n_heads;
  Tensor qh = split_heads(linear(p.q, h), p.cfg.n_heads);
  Tensor kh = split_heads(linear(p.k, h), p.cfg.n_heads);
  Tensor vh = split_heads(linear(p.v, h), p.cfg.n_heads);
  Tensor scores = scale(matmul(qh, transpose(kh, -1, -2)),
                        1.0 / std::sqrt(static_cast<double>(dh)));
  // Value-ordered reductions keep the result independent of view order.
  Tensor weights = softmax(scores, -1, /*value_ordered=*/true);
  Tensor mixed = merge_heads(matmul_value_ordered(weights, vh));
  return add(h, linear(p.o, mixed));
}

Tensor gated_ffn(const Tensor& h, const AGPParams& p) {
  Tensor u = layer_norm(h, p.pre_ffn_ln_gamma, p.pre_ffn_ln_beta, p.cfg.eps);
  Tensor y = linear(p.ffn2, gelu(linear(p.ffn1, u)));
  Tensor g = sigmoid(linear(p.gate, u));
  return add(h, mul(g, y));
}

Tensor project_to_lm(const Tensor& fused, const AGPParams& p) {
  Tensor z = linear(p.out_proj, fused);
  Tensor zhat = standardize(z, p.cfg.eps);
  return add(mul(zhat, p.out_scale), p.out_shift);
}

Tensor fuse_batch(const Tensor& features, const std::vector<ViewRole>& roles,
                  const AGPParams& p) {
  if (features.ndim() != 3)
    throw std::invalid_argument("fuse_batch: expected [B, V, d_view], got " +
                                shape_str(features.shape()));
  Tensor h = linear(p.in_proj, normalize_views(features, p));
  if (p.cfg.use_view_embeddings) {
    std::vector<i64> slots;
    slots.reserve(roles.size());
    for (ViewRole r : roles) slots.push_back(r == ViewRole::ego ? 0 : 1);
    Tensor embed = gather_rows(*p.view_embed, slots);  // [V, d_hidden]
    h = add(h, embed);
  }
  h = cross_view_attention(h, p);
  h = gated_ffn(h, p);
  Tensor pooled = mean(h, 1, /*value_ordered=*/true);  // [B, d_hidden]
  return project_to_lm(pooled, p);
}

Tensor fuse(const ViewFeatureSet& x, const AGPParams& p) {
  x.validate();
  const i64 v = x.view_count();
  Tensor batched = reshape(x.features, {1, v, p.cfg.d_view});
  Tensor out = fuse_batch(batched, x.roles, p);
  return reshape(out, {p.cfg.d_lm});
}

Tensor mlp_fuse_batch(const Tensor& features, const MLPParams& p) {
  if (features.ndim() != 3)
    throw std::invalid_argument("mlp_fuse_batch: expected [B, V, d_view], got " +
                                shape_str(features.shape()));
  Tensor pooled = mean(features, 1, /*value_ordered=*/true);  // [B, d_view]
  return linear(p.fc2, gelu(linear(p.fc1, pooled)));
}

Tensor mlp_fuse(const ViewFeatureSet& x, const MLPParams& p) {
  x.validate();
  Tensor batched = reshape(x.features, {1, x.view_count(), p.cfg.d_view});
  return reshape(mlp_fuse_batch(batched, p), {p.cfg.d_lm});
}

i64 agp_param_count(const AGPConfig& cfg) {
  cfg.validate();
  const i64 dv = cfg.d_view, dh = cfg.d_hidden, df = cfg.ffn_width(),
            dl = cfg.d_lm;
  i64 n = 0;
  n += 2 * dv;                  // view layer norm
  n += dv * dh + dh;            // in_proj
  n += 4 * (dh * dh + dh);      // attention q,k,v,o
  n += 2 * dh;                  // pre-ffn layer norm
  n += dh * df + df;            // ffn in
  n += df * dh + dh;            // ffn out
  n += dh * dh + dh;            // gate
  n += dh * dl + dl;            // out_proj
  n += 2 * dl;                  // out scale/shift
  if (cfg.use_view_embeddings) n += 2 * dh;
  return n;
}

i64 mlp_param_count(const MLPConfig& cfg) {
  cfg.validate();
  return cfg.d_view * cfg.d_mlp + cfg.d_mlp + cfg.d_mlp * cfg.d_lm + cfg.d_lm;
}

}  // namespace minivlm
