#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

#include "json.hpp"
#include "minivlm/config_io.hpp"
#include "minivlm/train.hpp"

namespace minivlm {

using nlohmann::json;

json to_json(const LMConfig& c) {
  return json{{"d_model", c.d_model},   {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},   {"d_ffn", c.d_ffn},
              {"max_seq", c.max_seq},   {"vocab", c.vocab},
              {"ln_eps", c.ln_eps},     {"lora_rank", c.lora_rank},
              {"lora_alpha", c.lora_alpha}};
}

LMConfig lm_config_from_json(const json& j) {
  LMConfig c;
  c.d_model = j.value("d_model", c.d_model);
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ffn = j.value("d_ffn", c.d_ffn);
  c.max_seq = j.value("max_seq", c.max_seq);
  c.vocab = j.value("vocab", c.vocab);
  c.ln_eps = j.value("ln_eps", c.ln_eps);
  c.lora_rank = j.value("lora_rank", c.lora_rank);
  c.lora_alpha = j.value("lora_alpha", c.lora_alpha);
  return c;
}

json to_json(const AGPConfig& c) {
  return json{{"d_view", c.d_view},
              {"d_hidden", c.d_hidden},
              {"n_heads", c.n_heads},
              {"d_ffn", c.d_ffn},
              {"d_lm", c.d_lm},
              {"use_view_embeddings", c.use_view_embeddings},
              {"eps", c.eps}};
}

AGPConfig agp_config_from_json(const json& j) {
  AGPConfig c;
  c.d_view = j.value("d_view", c.d_view);
  c.d_hidden = j.value("d_hidden", c.d_hidden);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_ffn = j.value("d_ffn", c.d_ffn);
  c.d_lm = j.value("d_lm", c.d_lm);
  c.use_view_embeddings = j.value("use_view_embeddings", c.use_view_embeddings);
  c.eps = j.value("eps", c.eps);
  return c;
}

json to_json(const MLPConfig& c) {
  return json{{"d_view", c.d_view}, {"d_mlp", c.d_mlp}, {"d_lm", c.d_lm}};
}

MLPConfig mlp_config_from_json(const json& j) {
  MLPConfig c;
  c.d_view = j.value("d_view", c.d_view);
  c.d_mlp = j.value("d_mlp", c.d_mlp);
  c.d_lm = j.value("d_lm", c.d_lm);
  return c;
}

json to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},
              {"batch_size", c.batch_size},
              {"base_lr", c.base_lr},
              {"warmup_epochs", c.warmup_epochs},
              {"weight_decay", c.weight_decay},
              {"seed", c.seed},
              {"grad_clip", c.grad_clip},
              {"min_lr", c.min_lr},
              {"supervise_all", c.supervise_all},
              {"val_max_new_tokens", c.val_max_new_tokens},
              {"val_subset", c.val_subset}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.seed = j.value("seed", c.seed);
  c.grad_clip = j.value("grad_clip", c.grad_clip);
  c.min_lr = j.value("min_lr", c.min_lr);
  c.supervise_all = j.value("supervise_all", c.supervise_all);
  c.val_max_new_tokens = j.value("val_max_new_tokens", c.val_max_new_tokens);
  c.val_subset = j.value("val_subset", c.val_subset);
  return c;
}

json to_json(const DatasetManifest& m) {
  return json{{"version", m.version},
              {"d_raw", m.d_raw},
              {"d_view", m.d_view},
              {"n_views", m.n_views},
              {"n_train", m.n_train},
              {"n_val", m.n_val},
              {"seed", m.seed},
              {"commentaries_per_sample", m.commentaries_per_sample},
              {"label_names", m.label_names}};
}

namespace {

constexpr char kMagic[8] = {'A', 'G', 'P', 'C', 'K', 'P', 'T', '1'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian");

}  // namespace

void save_checkpoint(const Model& model, const TrainConfig& cfg, i64 step,
                     const std::string& rng_state,
                     const std::filesystem::path& path) {
  const std::vector<NamedTensor> tensors = model.named_tensors();
  json header;
  header["format_version"] = 1;
  header["kind"] = to_string(model.kind);
  header["lm_config"] = to_json(model.lm.cfg);
  if (model.agp) header["agp_config"] = to_json(model.agp->cfg);
  if (model.mlp) header["mlp_config"] = to_json(model.mlp->cfg);
  header["train_config"] = to_json(cfg);
  header["step"] = step;
  header["rng"] = rng_state;
  json index = json::array();
  std::uint64_t offset = 0;
  for (const NamedTensor& nt : tensors) {
    const std::uint64_t nbytes = nt.tensor.numel() * sizeof(double);
    index.push_back({{"name", nt.name},
                     {"shape", nt.tensor.shape()},
                     {"dtype", "f64"},
                     {"offset", offset},
                     {"nbytes", nbytes}});
    offset += nbytes;
  }
  header["tensors"] = index;
  const std::string header_bytes = header.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t header_len = header_bytes.size();
  out.write(reinterpret_cast<const char*>(&header_len), sizeof(header_len));
  out.write(header_bytes.data(), static_cast<std::streamsize>(header_bytes.size()));
  for (const NamedTensor& nt : tensors) {
    auto d = nt.tensor.data();
    out.write(reinterpret_cast<const char*>(d.data()),
              static_cast<std::streamsize>(d.size() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("short write to " + path.string());
}

namespace {

struct RawCheckpoint {
  json header;
  std::vector<char> payload;
};

RawCheckpoint read_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error(path.string() +
                             ": not a checkpoint (bad magic bytes, expected "
                             "AGPCKPT1)");
  std::uint64_t header_len = 0;
  in.read(reinterpret_cast<char*>(&header_len), sizeof(header_len));
  if (!in || header_len == 0 || header_len > (1u << 30))
    throw std::runtime_error(path.string() + ": corrupt header length");
  std::string header_bytes(header_len, '\0');
  in.read(header_bytes.data(), static_cast<std::streamsize>(header_len));
  if (!in) throw std::runtime_error(path.string() + ": truncated header");
  RawCheckpoint raw;
  try {
    raw.header = json::parse(header_bytes);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": malformed header JSON: " + e.what());
  }
  raw.payload.assign(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
  return raw;
}

Checkpoint finish_load(const RawCheckpoint& raw, const std::filesystem::path& path,
                       Model model) {
  Checkpoint ck;
  ck.train_cfg = train_config_from_json(raw.header.at("train_config"));
  ck.step = raw.header.at("step").get<i64>();
  ck.rng_state = raw.header.at("rng").get<std::string>();

  // Index stored tensors by name, then check both directions against the
  // freshly built model so mismatches list every offending tensor.
  struct Entry {
    Shape shape;
    std::uint64_t offset = 0, nbytes = 0;
  };
  std::map<std::string, Entry> stored;
  for (const json& t : raw.header.at("tensors")) {
    Entry e;
    e.shape = t.at("shape").get<Shape>();
    e.offset = t.at("offset").get<std::uint64_t>();
    e.nbytes = t.at("nbytes").get<std::uint64_t>();
    if (t.at("dtype").get<std::string>() != "f64")
      throw std::runtime_error(path.string() + ": tensor " +
                               t.at("name").get<std::string>() + " is not f64");
    stored[t.at("name").get<std::string>()] = e;
  }

  std::vector<std::string> problems;
  std::vector<NamedTensor> expected = model.named_tensors();
  for (NamedTensor& nt : expected) {
    auto it = stored.find(nt.name);
    if (it == stored.end()) {
      problems.push_back(nt.name + " (missing from file)");
      continue;
    }
    if (it->second.shape != nt.tensor.shape()) {
      problems.push_back(nt.name + " (file " + shape_str(it->second.shape) +
                         " vs model " + shape_str(nt.tensor.shape()) + ")");
    }
  }
  for (const auto& [name, entry] : stored) {
    bool known = false;
    for (const NamedTensor& nt : expected) known = known || nt.name == name;
    if (!known) problems.push_back(name + " (unexpected in file)");
  }
  if (!problems.empty()) {
    std::string msg = path.string() + ": tensor set mismatch:";
    for (const std::string& p : problems) msg += "\n  " + p;
    throw std::runtime_error(msg);
  }

  for (NamedTensor& nt : expected) {
    const Entry& e = stored.at(nt.name);
    const std::uint64_t need = nt.tensor.numel() * sizeof(double);
    if (e.nbytes != need || e.offset + need > raw.payload.size())
      throw std::runtime_error(path.string() + ": payload for " + nt.name +
                               " is truncated");
    std::memcpy(nt.tensor.data().data(), raw.payload.data() + e.offset, need);
  }
  ck.model = std::move(model);
  return ck;
}

Model model_from_header(const json& header) {
  const ProjectorKind kind =
      projector_kind_from_string(header.at("kind").get<std::string>());
  const LMConfig lm_cfg = lm_config_from_json(header.at("lm_config"));
  AGPConfig agp_cfg;
  MLPConfig mlp_cfg;
  if (header.contains("agp_config"))
    agp_cfg = agp_config_from_json(header.at("agp_config"));
  if (header.contains("mlp_config"))
    mlp_cfg = mlp_config_from_json(header.at("mlp_config"));
  std::mt19937_64 scratch_rng(0);  // weights are overwritten from the payload
  return Model::init(kind, lm_cfg, agp_cfg, mlp_cfg, scratch_rng);
}

}  // namespace

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  RawCheckpoint raw = read_raw(path);
  return finish_load(raw, path, model_from_header(raw.header));
}

Checkpoint load_checkpoint(const std::filesystem::path& path,
                           ProjectorKind expected, const AGPConfig& agp_cfg,
                           const MLPConfig& mlp_cfg) {
  RawCheckpoint raw = read_raw(path);
  const ProjectorKind stored_kind =
      projector_kind_from_string(raw.header.at("kind").get<std::string>());
  if (stored_kind == expected) return finish_load(raw, path, model_from_header(raw.header));
  // Wrong projector family: diff against the expected model so the error
  // names the offending tensors.
  std::mt19937_64 scratch_rng(0);
  Model want = Model::init(expected, lm_config_from_json(raw.header.at("lm_config")),
                           agp_cfg, mlp_cfg, scratch_rng);
  return finish_load(raw, path, std::move(want));
}

}  // namespace minivlm
