// Command-line front end: gen-data, train, eval, compare, verify.
// Exit codes: 0 success, 1 precondition/config error, 2 verification failure.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "minivlm/config_io.hpp"
#include "minivlm/data.hpp"
#include "minivlm/train.hpp"
#include "minivlm/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace minivlm;

namespace {

struct CommonModelFlags {
  std::string projector = "agp";
  std::string views = "ego-exos";
  i64 d_hidden = 64;
  i64 agp_heads = 4;
  i64 d_mlp = 64;
  i64 d_model = 64;
  i64 lm_layers = 2;
  i64 lm_heads = 2;
  i64 lora_rank = 8;
  double lora_alpha = 32.0;
  bool view_embeddings = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--projector", projector, "agp or mlp")
        ->check(CLI::IsMember({"agp", "mlp"}));
    cmd->add_option("--views", views, "ego, exos or ego-exos")
        ->check(CLI::IsMember({"ego", "exos", "ego-exos"}));
    cmd->add_option("--d-hidden", d_hidden, "AGP fusion width");
    cmd->add_option("--agp-heads", agp_heads, "AGP attention heads");
    cmd->add_option("--d-mlp", d_mlp, "MLP projector hidden width");
    cmd->add_option("--d-model", d_model, "LM embedding width");
    cmd->add_option("--lm-layers", lm_layers, "LM transformer layers");
    cmd->add_option("--lm-heads", lm_heads, "LM attention heads");
    cmd->add_option("--lora-rank", lora_rank, "LoRA rank");
    cmd->add_option("--lora-alpha", lora_alpha, "LoRA scaling factor");
    cmd->add_flag("--view-embeddings", view_embeddings,
                  "learnable ego/exo view embeddings (breaks permutation "
                  "invariance)");
  }

  LMConfig lm_config() const {
    LMConfig c;
    c.d_model = d_model;
    c.n_layers = lm_layers;
    c.n_heads = lm_heads;
    c.lora_rank = lora_rank;
    c.lora_alpha = lora_alpha;
    return c;
  }
  AGPConfig agp_config(i64 d_view) const {
    AGPConfig c;
    c.d_view = d_view;
    c.d_hidden = d_hidden;
    c.n_heads = agp_heads;
    c.d_lm = d_model;
    c.use_view_embeddings = view_embeddings;
    return c;
  }
  MLPConfig mlp_config(i64 d_view) const {
    return MLPConfig{d_view, d_mlp, d_model};
  }
};

void echo_config(const fs::path& out_dir, const json& config) {
  fs::create_directories(out_dir);
  std::ofstream out(out_dir / "config.json", std::ios::binary);
  out << config.dump(2) << '\n';
  if (!out) throw std::runtime_error("cannot write " + (out_dir / "config.json").string());
}

int cmd_gen_data(const DatasetManifest& manifest, const std::string& out,
                 bool force) {
  const fs::path dir(out);
  if (fs::exists(dir / "manifest.json") && !force)
    throw std::invalid_argument(dir.string() +
                                " already holds a dataset (use --force to overwrite)");
  Dataset ds = generate_dataset(manifest);
  write_dataset(ds, dir);
  ProbeReport probes = run_probes(ds);
  std::cout << "wrote " << ds.train.size() << " train / " << ds.val.size()
            << " val samples to " << dir.string() << "\n";
  std::cout << "probe self-test (logistic, val accuracy):\n";
  for (size_t v = 0; v < probes.single_view_acc.size(); ++v)
    std::cout << "  view " << v << (v == 0 ? " (ego)" : " (exo)") << " latent: "
              << std::fixed << std::setprecision(3) << probes.single_view_acc[v]
              << "\n";
  std::cout << "  fused r = s_ego * mean(s_exo): " << std::fixed
            << std::setprecision(3) << probes.fused_acc << "\n";
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& out_dir,
              const CommonModelFlags& flags, TrainConfig train_cfg) {
  Dataset ds = read_dataset(data_dir);
  const ViewSetting setting = view_setting_from_string(flags.views);
  const ProjectorKind kind = projector_kind_from_string(flags.projector);
  const LMConfig lm_cfg = flags.lm_config();
  const AGPConfig agp_cfg = flags.agp_config(ds.manifest.d_view);
  const MLPConfig mlp_cfg = flags.mlp_config(ds.manifest.d_view);
  train_cfg.validate();

  json config;
  config["command"] = "train";
  config["data"] = data_dir;
  config["projector"] = flags.projector;
  config["views"] = flags.views;
  config["train_config"] = to_json(train_cfg);
  config["lm_config"] = to_json(lm_cfg);
  config["agp_config"] = to_json(agp_cfg);
  config["mlp_config"] = to_json(mlp_cfg);
  config["manifest"] = to_json(ds.manifest);
  echo_config(out_dir, config);

  TrainResult result = run_training(ds, setting, kind, train_cfg, lm_cfg,
                                    agp_cfg, mlp_cfg, PromptBuilder{}, &std::cout);

  std::ofstream hist(fs::path(out_dir) / "history.jsonl", std::ios::binary);
  for (const EpochStats& e : result.history) hist << e.to_json() << '\n';
  if (!hist) throw std::runtime_error("cannot write history.jsonl");

  std::ostringstream rng_state;
  std::mt19937_64 rng(train_cfg.seed);
  rng.discard(result.steps);
  rng_state << rng;
  save_checkpoint(result.model, train_cfg, result.steps, rng_state.str(),
                  fs::path(out_dir) / "checkpoint.agpckpt");
  std::cout << "trainable params: " << result.model.trainable_param_count()
            << "\nbest val_acc " << result.best_val_acc << " (epoch "
            << result.best_epoch << "); checkpoint written to " << out_dir
            << "\n";
  return 0;
}

int cmd_eval(const std::string& data_dir, const std::string& checkpoint,
             const std::string& views, i64 max_new, const std::string& report_out,
             bool csv) {
  Dataset ds = read_dataset(data_dir);
  Checkpoint ck = load_checkpoint(checkpoint);
  FrozenEncoder enc = FrozenEncoder::make(ds.manifest.encoder_seed(),
                                          ds.manifest.d_raw, ds.manifest.d_view);
  EvalOptions opts;
  opts.max_new_tokens = max_new;
  EvalReport report = evaluate_model(ck.model, enc, ds.val, ds.manifest,
                                     view_setting_from_string(views), opts);
  if (csv)
    std::cout << report.to_csv();
  else
    std::cout << report.to_json() << "\n";
  if (!report_out.empty()) {
    std::ofstream out(report_out, std::ios::binary);
    out << report.to_json() << "\n";
    if (!out) throw std::runtime_error("cannot write " + report_out);
  }
  return 0;
}

int cmd_compare(const std::string& data_dir, const std::string& out_dir,
                CommonModelFlags flags, TrainConfig base_cfg,
                const std::vector<i64>& seeds, bool csv) {
  Dataset ds = read_dataset(data_dir);
  const std::vector<ViewSetting> settings = {ViewSetting::ego, ViewSetting::exos,
                                             ViewSetting::ego_exos};
  json table = json::array();
  std::cout << "projector  views      ";
  for (i64 s : seeds) std::cout << "seed" << s << "    ";
  std::cout << "mean_acc  mean_f1\n";
  for (ProjectorKind kind : {ProjectorKind::mlp, ProjectorKind::agp}) {
    for (ViewSetting setting : settings) {
      double acc_sum = 0.0, f1_sum = 0.0;
      json row;
      row["projector"] = to_string(kind);
      row["views"] = to_string(setting);
      row["seeds"] = json::array();
      std::cout << std::left << std::setw(11) << to_string(kind) << std::setw(11)
                << to_string(setting) << std::flush;
      for (i64 seed : seeds) {
        TrainConfig cfg = base_cfg;
        cfg.seed = static_cast<std::uint64_t>(seed);
        TrainResult r = run_training(ds, setting, kind, cfg, flags.lm_config(),
                                     flags.agp_config(ds.manifest.d_view),
                                     flags.mlp_config(ds.manifest.d_view));
        const EpochStats& last = r.history.back();
        acc_sum += last.val_acc;
        f1_sum += last.val_f1;
        row["seeds"].push_back(
            {{"seed", seed}, {"val_acc", last.val_acc}, {"val_f1", last.val_f1}});
        std::cout << std::fixed << std::setprecision(4) << last.val_acc << "  "
                  << std::flush;
      }
      row["mean_acc"] = acc_sum / static_cast<double>(seeds.size());
      row["mean_f1"] = f1_sum / static_cast<double>(seeds.size());
      table.push_back(row);
      std::cout << std::fixed << std::setprecision(4)
                << acc_sum / static_cast<double>(seeds.size()) << "    "
                << f1_sum / static_cast<double>(seeds.size()) << "\n";
    }
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream out(fs::path(out_dir) / "compare.json", std::ios::binary);
    out << table.dump(2) << "\n";
    if (csv) {
      std::ofstream c(fs::path(out_dir) / "compare.csv", std::ios::binary);
      c << "projector,views,mean_acc,mean_f1\n";
      for (const json& row : table)
        c << row["projector"].get<std::string>() << ","
          << row["views"].get<std::string>() << "," << row["mean_acc"].dump()
          << "," << row["mean_f1"].dump() << "\n";
    }
  }
  return 0;
}

int cmd_verify(bool paper_dims) {
  std::vector<verify::CheckResult> results =
      verify::run_verification(paper_dims, &std::cout);
  i64 failed = 0;
  for (const auto& r : results) failed += r.pass ? 0 : 1;
  std::cout << (failed == 0 ? "all " : "FAILED ") << results.size() - failed
            << "/" << results.size() << " checks passed\n";
  return failed == 0 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view proficiency VLM: attentive gated projector + byte LM"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  DatasetManifest manifest;
  std::string gen_out;
  bool gen_force = false;
  gen->add_option("--n-train", manifest.n_train, "training samples");
  gen->add_option("--n-val", manifest.n_val, "validation samples");
  gen->add_option("--views", manifest.n_views, "views per sample (>= 2)");
  gen->add_option("--d-raw", manifest.d_raw, "raw view dimension");
  gen->add_option("--d-view", manifest.d_view, "encoded view dimension");
  gen->add_option("--commentaries", manifest.commentaries_per_sample,
                  "commentaries per training sample (1..3)");
  gen->add_option("--seed", manifest.seed, "generation seed")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_flag("--force", gen_force, "overwrite an existing dataset");

  // train
  auto* train = app.add_subcommand("train", "train a projector + LoRA LM");
  std::string train_data, train_out;
  CommonModelFlags train_flags;
  TrainConfig train_cfg;
  bool train_seed_set = false;
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "run directory")->required();
  train_flags.attach(train);
  train->add_option("--epochs", train_cfg.epochs, "training epochs");
  train->add_option("--batch-size", train_cfg.batch_size, "batch size");
  train->add_option("--lr", train_cfg.base_lr, "peak learning rate");
  train->add_option("--warmup-epochs", train_cfg.warmup_epochs, "warmup epochs");
  train->add_option("--weight-decay", train_cfg.weight_decay, "AdamW weight decay");
  train->add_option("--grad-clip", train_cfg.grad_clip, "global grad-norm clip");
  train
      ->add_option_function<std::uint64_t>(
          "--seed",
          [&](std::uint64_t s) {
            train_cfg.seed = s;
            train_seed_set = true;
          },
          "run seed")
      ->required();
  train->add_flag("--supervise-all", train_cfg.supervise_all,
                  "loss over the whole sequence, not just the assistant");
  train->add_option("--val-subset", train_cfg.val_subset,
                    "cap intermediate per-epoch validation (0 = full)");
  train->add_option("--val-max-new", train_cfg.val_max_new_tokens,
                    "generation budget during validation");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_data, eval_ckpt, eval_views = "ego-exos", eval_out;
  i64 eval_max_new = 128;
  bool eval_csv = false;
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--views", eval_views, "ego, exos or ego-exos")
      ->check(CLI::IsMember({"ego", "exos", "ego-exos"}));
  eval->add_option("--max-new-tokens", eval_max_new, "generation budget");
  eval->add_option("--report", eval_out, "write the JSON report here");
  eval->add_flag("--csv", eval_csv, "print a CSV row instead of JSON");

  // compare
  auto* compare = app.add_subcommand(
      "compare", "train agp and mlp across the three view settings");
  std::string cmp_data, cmp_out;
  CommonModelFlags cmp_flags;
  TrainConfig cmp_cfg;
  std::vector<i64> cmp_seeds = {1, 2, 3};
  bool cmp_csv = false;
  compare->add_option("--data", cmp_data, "dataset directory")->required();
  compare->add_option("--out", cmp_out, "output directory for the table");
  cmp_flags.attach(compare);
  compare->add_option("--epochs", cmp_cfg.epochs, "epochs per run");
  compare->add_option("--batch-size", cmp_cfg.batch_size, "batch size");
  compare->add_option("--lr", cmp_cfg.base_lr, "peak learning rate");
  compare->add_option("--val-subset", cmp_cfg.val_subset,
                      "cap intermediate per-epoch validation");
  compare->add_option("--val-max-new", cmp_cfg.val_max_new_tokens,
                      "generation budget during validation");
  compare->add_option("--seeds", cmp_seeds, "seeds to average over");
  compare->add_flag("--csv", cmp_csv, "also write compare.csv");

  // verify
  auto* verify_cmd =
      app.add_subcommand("verify", "run the full invariant suite");
  bool paper_dims = false;
  verify_cmd->add_flag("--paper-dims", paper_dims,
                       "also report parameter counts at hidden 1024 / 4 heads "
                       "/ d_lm 576");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(manifest, gen_out, gen_force);
    if (train->parsed()) return cmd_train(train_data, train_out, train_flags, train_cfg);
    if (eval->parsed())
      return cmd_eval(eval_data, eval_ckpt, eval_views, eval_max_new, eval_out,
                      eval_csv);
    if (compare->parsed())
      return cmd_compare(cmp_data, cmp_out, cmp_flags, cmp_cfg, cmp_seeds, cmp_csv);
    if (verify_cmd->parsed()) return cmd_verify(paper_dims);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
