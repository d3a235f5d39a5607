#include "minivlm/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

namespace minivlm {

void TrainConfig::validate() const {
  if (base_lr <= 0.0) throw std::invalid_argument("train config: base_lr must be > 0");
  if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (epochs < 0 || warmup_epochs < 0)
    throw std::invalid_argument("train config: negative epoch counts");
  if (epochs > 0 && warmup_epochs >= epochs)
    throw std::invalid_argument("train config: warmup_epochs " +
                                std::to_string(warmup_epochs) +
                                " must be < epochs " + std::to_string(epochs));
  if (grad_clip < 0.0) throw std::invalid_argument("train config: grad_clip must be >= 0");
  if (min_lr < 0.0 || min_lr > base_lr)
    throw std::invalid_argument("train config: min_lr outside [0, base_lr]");
}

double lr_at(i64 step, i64 steps_per_epoch, const TrainConfig& cfg) {
  if (steps_per_epoch < 1)
    throw std::invalid_argument("lr_at: steps_per_epoch must be >= 1");
  if (step < 0) throw std::invalid_argument("lr_at: negative step");
  const i64 total = cfg.epochs * steps_per_epoch;
  const i64 warm = cfg.warmup_epochs * steps_per_epoch;
  if (step >= total) return cfg.min_lr;
  if (step < warm)
    return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  const i64 span = total - warm;
  const double p = span > 1 ? static_cast<double>(step - warm) /
                                  static_cast<double>(span - 1)
                            : 0.0;
  return cfg.min_lr +
         (cfg.base_lr - cfg.min_lr) * 0.5 * (1.0 + std::cos(M_PI * p));
}

double AdamW::step(std::vector<NamedTensor>& trainable, double lr,
                   const TrainConfig& cfg) {
  if (m.empty()) {
    m.resize(trainable.size());
    v.resize(trainable.size());
    for (size_t i = 0; i < trainable.size(); ++i) {
      m[i].assign(trainable[i].tensor.numel(), 0.0);
      v[i].assign(trainable[i].tensor.numel(), 0.0);
    }
  }
  double norm_sq = 0.0;
  for (auto& nt : trainable) {
    for (double g : nt.tensor.grad()) norm_sq += g * g;
  }
  const double norm = std::sqrt(norm_sq);
  const double clip_scale =
      (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;

  ++t;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < trainable.size(); ++i) {
    auto p = trainable[i].tensor.data();
    auto g = trainable[i].tensor.grad();
    double* mi = m[i].data();
    double* vi = v[i].data();
    for (size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j] * clip_scale;
      mi[j] = beta1 * mi[j] + (1.0 - beta1) * gj;
      vi[j] = beta2 * vi[j] + (1.0 - beta2) * gj * gj;
      const double mhat = mi[j] / bc1;
      const double vhat = vi[j] / bc2;
      p[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + cfg.weight_decay * p[j]);
    }
  }
  return norm;
}

ProjectorKind projector_kind_from_string(const std::string& s) {
  if (s == "agp") return ProjectorKind::agp;
  if (s == "mlp") return ProjectorKind::mlp;
  throw std::invalid_argument("unknown projector '" + s + "' (expected agp or mlp)");
}

std::string to_string(ProjectorKind k) {
  return k == ProjectorKind::agp ? "agp" : "mlp";
}

Model Model::init(ProjectorKind kind, const LMConfig& lm_cfg,
                  const AGPConfig& agp_cfg, const MLPConfig& mlp_cfg,
                  std::mt19937_64& rng) {
  Model m;
  m.kind = kind;
  m.lm = LMParams::init(lm_cfg, rng);
  if (kind == ProjectorKind::agp) {
    if (agp_cfg.d_lm != lm_cfg.d_model)
      throw std::invalid_argument("model: agp d_lm " + std::to_string(agp_cfg.d_lm) +
                                  " must equal lm d_model " +
                                  std::to_string(lm_cfg.d_model));
    m.agp = AGPParams::init(agp_cfg, rng, m.lm.embed_mean(), m.lm.embed_std());
  } else {
    if (mlp_cfg.d_lm != lm_cfg.d_model)
      throw std::invalid_argument("model: mlp d_lm " + std::to_string(mlp_cfg.d_lm) +
                                  " must equal lm d_model " +
                                  std::to_string(lm_cfg.d_model));
    m.mlp = MLPParams::init(mlp_cfg, rng);
  }
  return m;
}

std::vector<NamedTensor> Model::named_tensors() const {
  std::vector<NamedTensor> out =
      kind == ProjectorKind::agp ? agp->named_tensors() : mlp->named_tensors();
  std::vector<NamedTensor> lm_params = lm.named_tensors();
  out.insert(out.end(), lm_params.begin(), lm_params.end());
  return out;
}

std::vector<NamedTensor> Model::trainable_tensors() const {
  std::vector<NamedTensor> out;
  for (NamedTensor& nt : named_tensors())
    if (nt.trainable) out.push_back(nt);
  return out;
}

i64 Model::trainable_param_count() const {
  i64 n = 0;
  for (const NamedTensor& nt : trainable_tensors()) n += nt.tensor.numel();
  return n;
}

Tensor Model::fuse_views(const Tensor& features,
                         const std::vector<ViewRole>& roles) const {
  if (kind == ProjectorKind::agp) return fuse_batch(features, roles, *agp);
  return mlp_fuse_batch(features, *mlp);
}

PromptSample PromptBuilder::build(const SynthSample& s) const {
  PromptSample p;
  p.system = system;
  p.user = user;
  p.assistant = s.commentary;
  p.label = s.label;
  return p;
}

std::string EpochStats::to_json() const {
  nlohmann::json j;
  j["epoch"] = epoch;
  j["train_loss"] = train_loss;
  j["val_acc"] = val_acc;
  j["val_f1"] = val_f1;
  j["lr_last"] = lr_last;
  return j.dump();
}

namespace {

struct Batch {
  std::vector<i64> ids;        // [B * T], right-padded with PAD
  std::vector<i64> video_rows; // flat b*T + t per sample
  std::vector<i64> targets;    // [B * T] shifted next-token ids
  std::vector<char> target_mask;
  i64 b = 0, t = 0;
};

Batch assemble_batch(const std::vector<const SynthSample*>& samples,
                     const PromptBuilder& prompts, bool supervise_all) {
  Batch batch;
  batch.b = static_cast<i64>(samples.size());
  std::vector<Rendered> rendered;
  rendered.reserve(samples.size());
  i64 t_max = 0;
  for (const SynthSample* s : samples) {
    rendered.push_back(render_prompt(prompts.build(*s), RenderMode::train));
    t_max = std::max(t_max, static_cast<i64>(rendered.back().ids.size()));
  }
  batch.t = t_max;
  batch.ids.assign(batch.b * t_max, Vocabulary::pad);
  batch.targets.assign(batch.b * t_max, 0);
  batch.target_mask.assign(batch.b * t_max, 0);
  for (i64 i = 0; i < batch.b; ++i) {
    const Rendered& r = rendered[i];
    const i64 len = static_cast<i64>(r.ids.size());
    std::copy(r.ids.begin(), r.ids.end(), batch.ids.begin() + i * t_max);
    batch.video_rows.push_back(i * t_max + r.video_positions.at(0));
    for (i64 t = 0; t + 1 < len; ++t) {
      const bool supervised = supervise_all ? true : r.loss_mask[t + 1] != 0;
      if (supervised) {
        batch.targets[i * t_max + t] = r.ids[t + 1];
        batch.target_mask[i * t_max + t] = 1;
      }
    }
  }
  return batch;
}

Tensor batch_features(const FrozenEncoder& enc,
                      const std::vector<const SynthSample*>& samples,
                      const DatasetManifest& manifest, ViewSetting setting) {
  const std::vector<i64> views = selected_views(manifest, setting);
  Tensor flat = encode_views_flat(enc, samples, views);
  return reshape_views(flat, static_cast<i64>(samples.size()),
                       static_cast<i64>(views.size()));
}

}  // namespace

// Forward through projector + LM, cross-entropy on supervised rows only.
Tensor pipeline_loss(const Model& model, const FrozenEncoder& enc,
                     const std::vector<const SynthSample*>& samples,
                     const DatasetManifest& manifest, ViewSetting setting,
                     const PromptBuilder& prompts, bool supervise_all) {
  Batch batch = assemble_batch(samples, prompts, supervise_all);
  Tensor feats = batch_features(enc, samples, manifest, setting);
  Tensor fused = model.fuse_views(feats, selected_roles(manifest, setting));
  Tensor emb = token_embeddings(model.lm, batch.ids, batch.b, batch.t);
  Tensor hidden = lm_hidden(model.lm, inject_visual(emb, batch.video_rows, fused));

  std::vector<i64> rows;
  std::vector<i64> row_targets;
  for (i64 i = 0; i < batch.b * batch.t; ++i) {
    if (!batch.target_mask[i]) continue;
    rows.push_back(i);
    row_targets.push_back(batch.targets[i]);
  }
  Tensor picked = gather_rows(reshape(hidden, {batch.b * batch.t, model.d_lm()}),
                              rows);
  Tensor logits = matmul(picked, model.lm.unembed);
  return cross_entropy(logits, row_targets,
                       std::vector<char>(row_targets.size(), 1));
}

double train_step(Model& model, AdamW& optim, const FrozenEncoder& enc,
                  const std::vector<const SynthSample*>& batch,
                  const DatasetManifest& manifest, ViewSetting setting,
                  const PromptBuilder& prompts, double lr,
                  const TrainConfig& cfg) {
  std::vector<NamedTensor> trainable = model.trainable_tensors();
  for (NamedTensor& nt : trainable) nt.tensor.zero_grad();
  Tensor loss = pipeline_loss(model, enc, batch, manifest, setting, prompts,
                              cfg.supervise_all);
  const double loss_v = loss.item();
  loss.backward();
  if (!std::isfinite(loss_v)) {
    double norm_sq = 0.0;
    for (auto& nt : trainable)
      for (double g : nt.tensor.grad()) norm_sq += g * g;
    throw std::runtime_error("train_step: loss is not finite (lr=" +
                             std::to_string(lr) + ", grad_norm=" +
                             std::to_string(std::sqrt(norm_sq)) + ")");
  }
  optim.step(trainable, lr, cfg);
  return loss_v;
}

EvalReport evaluate_model(const Model& model, const FrozenEncoder& enc,
                          const std::vector<SynthSample>& val,
                          const DatasetManifest& manifest, ViewSetting setting,
                          const EvalOptions& opts) {
  if (val.empty()) throw std::invalid_argument("evaluate_model: empty split");
  const i64 n = opts.max_samples > 0
                    ? std::min<i64>(opts.max_samples, val.size())
                    : static_cast<i64>(val.size());

  PromptSample probe = opts.prompts.build(val[0]);
  Rendered infer = render_prompt(probe, RenderMode::infer);

  std::vector<std::string> generated;
  std::vector<int> gold_labels;
  std::vector<std::string> gold_comments;
  generated.reserve(n);
  NoGradGuard ng;
  for (i64 start = 0; start < n; start += opts.gen_batch) {
    const i64 b = std::min<i64>(opts.gen_batch, n - start);
    std::vector<const SynthSample*> chunk;
    for (i64 i = 0; i < b; ++i) chunk.push_back(&val[start + i]);
    Tensor feats = batch_features(enc, chunk, manifest, setting);
    Tensor fused = model.fuse_views(feats, selected_roles(manifest, setting));
    std::vector<std::string> texts =
        generate_batch(model.lm, infer, fused, opts.max_new_tokens);
    for (i64 i = 0; i < b; ++i) {
      generated.push_back(std::move(texts[i]));
      gold_labels.push_back(chunk[i]->label);
      gold_comments.push_back(chunk[i]->commentary);
    }
  }
  return score_generations(generated, gold_labels, gold_comments);
}

TrainResult run_training(const Dataset& ds, ViewSetting setting,
                         ProjectorKind kind, const TrainConfig& cfg,
                         const LMConfig& lm_cfg, const AGPConfig& agp_cfg,
                         const MLPConfig& mlp_cfg, const PromptBuilder& prompts,
                         std::ostream* log) {
  cfg.validate();
  if (ds.train.empty()) throw std::invalid_argument("run_training: empty dataset");
  const i64 n = static_cast<i64>(ds.train.size());
  const i64 steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;

  std::mt19937_64 rng(cfg.seed);
  TrainResult result;
  result.model = Model::init(kind, lm_cfg, agp_cfg, mlp_cfg, rng);
  FrozenEncoder enc =
      FrozenEncoder::make(ds.manifest.encoder_seed(), ds.manifest.d_raw,
                          ds.manifest.d_view);

  // Sequence lengths are fixed per sample; sort batches by length inside a
  // shuffled epoch to keep padding small without fixing the batch makeup.
  std::vector<i64> lengths(n);
  {
    for (i64 i = 0; i < n; ++i) {
      Rendered r = render_prompt(prompts.build(ds.train[i]), RenderMode::train);
      lengths[i] = static_cast<i64>(r.ids.size());
    }
  }

  AdamW optim;
  std::vector<std::pair<std::string, std::vector<double>>> best_weights;
  i64 global_step = 0;
  for (i64 epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<i64> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::stable_sort(order.begin(), order.end(),
                     [&lengths](i64 a, i64 b) { return lengths[a] < lengths[b]; });

    double loss_sum = 0.0;
    double last_lr = 0.0;
    i64 n_steps = 0;
    for (i64 start = 0; start < n; start += cfg.batch_size) {
      const i64 b = std::min<i64>(cfg.batch_size, n - start);
      std::vector<const SynthSample*> batch;
      for (i64 i = 0; i < b; ++i) batch.push_back(&ds.train[order[start + i]]);
      last_lr = lr_at(global_step, steps_per_epoch, cfg);
      loss_sum += train_step(result.model, optim, enc, batch, ds.manifest,
                             setting, prompts, last_lr, cfg);
      ++global_step;
      ++n_steps;
    }

    EvalOptions eval_opts;
    eval_opts.prompts = prompts;
    eval_opts.max_new_tokens = cfg.val_max_new_tokens;
    // Full validation on the last epoch; the subset cap only trims the
    // intermediate ones.
    eval_opts.max_samples = epoch + 1 == cfg.epochs ? 0 : cfg.val_subset;
    EvalReport report =
        evaluate_model(result.model, enc, ds.val, ds.manifest, setting, eval_opts);

    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.train_loss = loss_sum / static_cast<double>(n_steps);
    stats.val_acc = report.classification.accuracy;
    stats.val_f1 = report.classification.macro_f1;
    stats.lr_last = last_lr;
    result.history.push_back(stats);
    if (log)
      (*log) << "epoch " << stats.epoch << " loss " << stats.train_loss
             << " val_acc " << stats.val_acc << " val_f1 " << stats.val_f1
             << " lr " << stats.lr_last << "\n";

    if (stats.val_acc > result.best_val_acc || result.best_epoch < 0) {
      result.best_val_acc = stats.val_acc;
      result.best_epoch = stats.epoch;
      best_weights.clear();
      for (const NamedTensor& nt : result.model.named_tensors())
        best_weights.emplace_back(nt.name,
                                  std::vector<double>(nt.tensor.data().begin(),
                                                      nt.tensor.data().end()));
    }
  }
  result.steps = global_step;

  // Leave the best-validation weights in the returned model.
  if (!best_weights.empty()) {
    size_t i = 0;
    for (NamedTensor& nt : result.model.named_tensors()) {
      auto dst = nt.tensor.data();
      const auto& src = best_weights[i++].second;
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }
  return result;
}

}  // namespace minivlm
