#pragma once

// Training: warmup + cosine schedule, AdamW over the trainable set (LoRA
// adapters, projector, special-token embedding rows), gradient clipping,
// deterministic batching, per-epoch validation and best-checkpoint retention.

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "minivlm/data.hpp"
#include "minivlm/fusion.hpp"
#include "minivlm/lm.hpp"
#include "minivlm/metrics.hpp"

namespace minivlm {

struct TrainConfig {
  i64 epochs = 6;
  i64 batch_size = 8;  // paper protocol uses 32; desk default is smaller
  double base_lr = 3e-4;
  i64 warmup_epochs = 1;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  double grad_clip = 1.0;
  double min_lr = 0.0;
  bool supervise_all = false;     // loss over every position, not just assistant
  i64 val_max_new_tokens = 48;    // enough to cover the label line
  i64 val_subset = 0;             // per-epoch validation cap, 0 = full split
  void validate() const;
};

// Linear warmup from 0 over warmup_epochs, then cosine decay reaching min_lr
// exactly at the final step.
double lr_at(i64 step, i64 steps_per_epoch, const TrainConfig& cfg);

struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  i64 t = 0;
  std::vector<std::vector<double>> m, v;  // indexed like the trainable list

  // Clips the global gradient norm to grad_clip, then applies the decoupled
  // weight-decay update. Returns the pre-clip gradient norm.
  double step(std::vector<NamedTensor>& trainable, double lr,
              const TrainConfig& cfg);
};

enum class ProjectorKind { agp, mlp };
ProjectorKind projector_kind_from_string(const std::string& s);
std::string to_string(ProjectorKind k);

struct Model {
  ProjectorKind kind = ProjectorKind::agp;
  LMParams lm;
  std::optional<AGPParams> agp;
  std::optional<MLPParams> mlp;

  static Model init(ProjectorKind kind, const LMConfig& lm_cfg,
                    const AGPConfig& agp_cfg, const MLPConfig& mlp_cfg,
                    std::mt19937_64& rng);
  std::vector<NamedTensor> named_tensors() const;
  std::vector<NamedTensor> trainable_tensors() const;
  i64 trainable_param_count() const;
  i64 d_lm() const { return lm.cfg.d_model; }

  // features [B, V, d_view] -> [B, d_lm] through whichever projector is live.
  Tensor fuse_views(const Tensor& features,
                    const std::vector<ViewRole>& roles) const;
};

// Chat text wrapped around each synthetic sample.
struct PromptBuilder {
  std::string system = "You are a visual agent for human performance analysis.";
  std::string user =
      "Here are 8 frames sampled from a video: "
      "<|video_start|><|video|><|video_end|>. Given this video, analyze the "
      "proficiency level of the subject.";
  PromptSample build(const SynthSample& s) const;
};

struct EpochStats {
  i64 epoch = 0;
  double train_loss = 0.0;
  double val_acc = 0.0;
  double val_f1 = 0.0;
  double lr_last = 0.0;
  std::string to_json() const;
};

struct EvalOptions {
  i64 max_new_tokens = 128;
  i64 max_samples = 0;  // 0 = all
  i64 gen_batch = 64;
  PromptBuilder prompts;
};

EvalReport evaluate_model(const Model& model, const FrozenEncoder& enc,
                          const std::vector<SynthSample>& val,
                          const DatasetManifest& manifest, ViewSetting setting,
                          const EvalOptions& opts);

// Masked cross-entropy of a batch through projector, injection and LM.
// Exposed so gradient-check harnesses can differentiate the full pipeline.
Tensor pipeline_loss(const Model& model, const FrozenEncoder& enc,
                     const std::vector<const SynthSample*>& batch,
                     const DatasetManifest& manifest, ViewSetting setting,
                     const PromptBuilder& prompts, bool supervise_all);

// One optimizer step over an explicit batch of samples; exposed for the
// memorization oracle and unit tests. Returns the masked loss.
double train_step(Model& model, AdamW& optim, const FrozenEncoder& enc,
                  const std::vector<const SynthSample*>& batch,
                  const DatasetManifest& manifest, ViewSetting setting,
                  const PromptBuilder& prompts, double lr,
                  const TrainConfig& cfg);

struct TrainResult {
  Model model;  // best-validation weights
  std::vector<EpochStats> history;
  double best_val_acc = 0.0;
  i64 best_epoch = -1;
  i64 steps = 0;
};

TrainResult run_training(const Dataset& ds, ViewSetting setting,
                         ProjectorKind kind, const TrainConfig& cfg,
                         const LMConfig& lm_cfg, const AGPConfig& agp_cfg,
                         const MLPConfig& mlp_cfg,
                         const PromptBuilder& prompts = {},
                         std::ostream* log = nullptr);

// ---- checkpoints -------------------------------------------------------------
// File layout: 8-byte magic "AGPCKPT1", little-endian u64 JSON header length,
// the header (configs, step, rng state, tensor index), then raw little-endian
// float64 payloads.

struct Checkpoint {
  Model model;
  TrainConfig train_cfg;
  i64 step = 0;
  std::string rng_state;
};

void save_checkpoint(const Model& model, const TrainConfig& cfg, i64 step,
                     const std::string& rng_state,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Loads and additionally requires the stored projector kind to match; the
// error lists every tensor that an `expected`-kind model has but the file
// does not (and vice versa).
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           ProjectorKind expected, const AGPConfig& agp_cfg,
                           const MLPConfig& mlp_cfg);

}  // namespace minivlm
