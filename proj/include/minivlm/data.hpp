#pragma once

// Frozen synthetic view encoder plus a multi-view dataset whose label is a
// planted cross-view rule: per-view latent signals s_v ~ U(-1,1) hidden along
// fixed random directions, label = training-quantile bucket of
// r = s_ego * mean(s_exo). No single view determines the label; probes below
// quantify that.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "minivlm/fusion.hpp"
#include "minivlm/tensor.hpp"

namespace minivlm {

inline constexpr int kNumClasses = 4;
const std::array<std::string, kNumClasses>& class_label_names();
// Three fixed commentary template sentences per class.
const std::array<std::array<std::string, 3>, kNumClasses>& commentary_templates();
// "Proficiency Level: <name>.\nProficiency Commentary: <template>"
std::string make_commentary(int label, int template_idx);

struct FrozenEncoder {
  std::uint64_t seed = 0;
  Tensor projection;  // [d_raw, d_view], never trainable

  static FrozenEncoder make(std::uint64_t seed, i64 d_raw, i64 d_view);
};

struct SynthSample {
  std::vector<std::vector<double>> raw_views;  // [V][d_raw], view 0 is ego
  int label = -1;
  std::string label_name;
  std::string commentary;
  std::vector<double> latents;  // diagnostics only, not serialized
};

// Serialized-field equality (latents are generation-time diagnostics).
bool samples_equal(const SynthSample& a, const SynthSample& b);

struct DatasetManifest {
  int version = 1;
  i64 d_raw = 32;
  i64 d_view = 64;
  i64 n_views = 5;  // 1 ego + (n_views-1) exo
  i64 n_train = 512;
  i64 n_val = 128;
  std::uint64_t seed = 0;
  i64 commentaries_per_sample = 1;  // expands the train split only
  std::array<std::string, kNumClasses> label_names = class_label_names();

  void validate() const;
  std::uint64_t encoder_seed() const;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<SynthSample> train;
  std::vector<SynthSample> val;
};

Dataset generate_dataset(const DatasetManifest& manifest);

// Layout: dir/manifest.json, dir/train.jsonl, dir/val.jsonl (one JSON object
// per line; floats carry full round-trip precision).
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

// Ego / Exos / Ego+Exos view filters applied at the reader level.
enum class ViewSetting { ego, exos, ego_exos };
ViewSetting view_setting_from_string(const std::string& s);
std::string to_string(ViewSetting s);
std::vector<i64> selected_views(const DatasetManifest& m, ViewSetting s);
std::vector<ViewRole> selected_roles(const DatasetManifest& m, ViewSetting s);

// Batch-and-view flattened encoding: row b*V + v of the result is sample b's
// view v pushed through the frozen projection.
Tensor encode_views_flat(const FrozenEncoder& enc,
                         const std::vector<const SynthSample*>& batch,
                         const std::vector<i64>& view_idx);
// [B*V, d_view] -> [B, V, d_view] without reordering.
Tensor reshape_views(const Tensor& flat, i64 batch, i64 views);

// Four-class logistic probes on a scalar feature, trained on the train split
// and scored on the val split. Run at generation time to certify the planted
// fusion gap.
struct ProbeReport {
  std::vector<double> single_view_acc;  // probe on each view's latent
  double fused_acc = 0.0;               // probe on r itself
};
ProbeReport run_probes(const Dataset& ds);

}  // namespace minivlm
