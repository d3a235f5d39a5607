#include "minivlm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace minivlm {

using nlohmann::json;

const std::array<std::string, kNumClasses>& class_label_names() {
  static const std::array<std::string, kNumClasses> names = {
      "Novice", "Early Expert", "Intermediate Expert", "Late Expert"};
  return names;
}

const std::array<std::array<std::string, 3>, kNumClasses>&
commentary_templates() {
  static const std::array<std::array<std::string, 3>, kNumClasses> t = {{
      {{"Movements are hesitant and fragmented, with frequent corrections.",
        "Basic positioning is unstable and the pacing breaks down often.",
        "Execution is slow and tentative, lacking a consistent rhythm."}},
      {{"Core technique is present though transitions remain uneven.",
        "The subject performs steadily but hesitates under pressure.",
        "Control is adequate while timing and efficiency still vary."}},
      {{"The subject demonstrates smooth, controlled movements with minor lapses.",
        "Technique is consistent and deliberate, with efficient transitions.",
        "Execution shows good balance and timing across the sequence."}},
      {{"Execution is fluid and precise, with excellent anticipation.",
        "The subject shows commanding control and highly efficient technique.",
        "Movements are seamless and confident, with no wasted effort."}},
  }};
  return t;
}

std::string make_commentary(int label, int template_idx) {
  return "Proficiency Level: " + class_label_names()[label] +
         ".\nProficiency Commentary: " +
         commentary_templates()[label][template_idx];
}

FrozenEncoder FrozenEncoder::make(std::uint64_t seed, i64 d_raw, i64 d_view) {
  FrozenEncoder enc;
  enc.seed = seed;
  std::mt19937_64 rng(seed);
  enc.projection = randn({d_raw, d_view}, rng, 0.0,
                         1.0 / std::sqrt(static_cast<double>(d_raw)));
  return enc;
}

bool samples_equal(const SynthSample& a, const SynthSample& b) {
  return a.raw_views == b.raw_views && a.label == b.label &&
         a.label_name == b.label_name && a.commentary == b.commentary;
}

void DatasetManifest::validate() const {
  if (n_views < 2)
    throw std::invalid_argument(
        "dataset: the cross-view rule needs at least 2 views, got " +
        std::to_string(n_views));
  if (n_train < 4 || n_val < 4)
    throw std::invalid_argument("dataset: n_train and n_val must be >= 4");
  if (d_raw < 2 || d_view < 2)
    throw std::invalid_argument("dataset: d_raw and d_view must be >= 2");
  if (commentaries_per_sample < 1 || commentaries_per_sample > 3)
    throw std::invalid_argument("dataset: commentaries_per_sample must be 1..3");
  if (label_names != class_label_names())
    throw std::invalid_argument("dataset: label names are fixed");
}

std::uint64_t DatasetManifest::encoder_seed() const {
  // Offset so the encoder does not replay the generator's random stream.
  return seed ^ 0x9e3779b97f4a7c15ull;
}

namespace {

constexpr double kNoiseSigma = 0.3;

struct RawDraw {
  std::vector<std::vector<double>> views;
  std::vector<double> latents;
  double r = 0.0;
};

RawDraw draw_sample(std::mt19937_64& rng, i64 n_views, i64 d_raw,
                    const std::vector<std::vector<double>>& directions) {
  std::uniform_real_distribution<double> lat(-1.0, 1.0);
  std::normal_distribution<double> noise(0.0, kNoiseSigma);
  RawDraw d;
  d.views.resize(n_views);
  d.latents.resize(n_views);
  for (i64 v = 0; v < n_views; ++v) {
    d.latents[v] = lat(rng);
    d.views[v].resize(d_raw);
    for (i64 i = 0; i < d_raw; ++i)
      d.views[v][i] = d.latents[v] * directions[v][i] + noise(rng);
  }
  double exo_mean = 0.0;
  for (i64 v = 1; v < n_views; ++v) exo_mean += d.latents[v];
  exo_mean /= static_cast<double>(n_views - 1);
  d.r = d.latents[0] * exo_mean;
  return d;
}

int bucket(double r, const std::array<double, 3>& thresholds) {
  int label = 0;
  for (double t : thresholds) label += r >= t ? 1 : 0;
  return label;
}

}  // namespace

Dataset generate_dataset(const DatasetManifest& manifest) {
  manifest.validate();
  std::mt19937_64 rng(manifest.seed);

  // Unit directions, one per view slot, fixed for the whole dataset.
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<std::vector<double>> directions(manifest.n_views);
  for (auto& dir : directions) {
    dir.resize(manifest.d_raw);
    double norm = 0.0;
    for (double& x : dir) {
      x = gauss(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    for (double& x : dir) x /= norm;
  }

  std::vector<RawDraw> train_raw(manifest.n_train);
  for (auto& d : train_raw)
    d = draw_sample(rng, manifest.n_views, manifest.d_raw, directions);
  std::vector<RawDraw> val_raw(manifest.n_val);
  for (auto& d : val_raw)
    d = draw_sample(rng, manifest.n_views, manifest.d_raw, directions);

  // Quartile thresholds over the training distribution of r.
  std::vector<double> rs(manifest.n_train);
  for (i64 i = 0; i < manifest.n_train; ++i) rs[i] = train_raw[i].r;
  std::sort(rs.begin(), rs.end());
  std::array<double, 3> thresholds = {rs[manifest.n_train / 4],
                                      rs[manifest.n_train / 2],
                                      rs[(3 * manifest.n_train) / 4]};

  std::uniform_int_distribution<int> pick_template(0, 2);
  auto finish = [&](std::vector<RawDraw>& raw, i64 k_comment) {
    std::vector<SynthSample> out;
    out.reserve(raw.size() * k_comment);
    for (RawDraw& d : raw) {
      const int label = bucket(d.r, thresholds);
      const int first_template = pick_template(rng);
      for (i64 k = 0; k < k_comment; ++k) {
        SynthSample s;
        s.raw_views = d.views;
        s.latents = d.latents;
        s.label = label;
        s.label_name = class_label_names()[label];
        s.commentary =
            make_commentary(label, static_cast<int>((first_template + k) % 3));
        out.push_back(std::move(s));
      }
    }
    return out;
  };

  Dataset ds;
  ds.manifest = manifest;
  ds.train = finish(train_raw, manifest.commentaries_per_sample);
  ds.val = finish(val_raw, 1);
  return ds;
}

// ---- serialization ----------------------------------------------------------

namespace {

json manifest_to_json(const DatasetManifest& m) {
  json j;
  j["version"] = m.version;
  j["d_raw"] = m.d_raw;
  j["d_view"] = m.d_view;
  j["n_views"] = m.n_views;
  j["n_train"] = m.n_train;
  j["n_val"] = m.n_val;
  j["seed"] = m.seed;
  j["commentaries_per_sample"] = m.commentaries_per_sample;
  j["label_names"] = m.label_names;
  return j;
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  const int version = j.at("version").get<int>();
  if (version != m.version)
    throw std::runtime_error("manifest: found version " +
                             std::to_string(version) + ", this build reads version " +
                             std::to_string(m.version));
  m.d_raw = j.at("d_raw").get<i64>();
  m.d_view = j.at("d_view").get<i64>();
  m.n_views = j.at("n_views").get<i64>();
  m.n_train = j.at("n_train").get<i64>();
  m.n_val = j.at("n_val").get<i64>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.commentaries_per_sample = j.value("commentaries_per_sample", i64{1});
  auto names = j.at("label_names").get<std::vector<std::string>>();
  if (names.size() != kNumClasses)
    throw std::runtime_error("manifest: expected 4 label names");
  std::copy(names.begin(), names.end(), m.label_names.begin());
  return m;
}

void write_split(const std::vector<SynthSample>& split,
                 const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + file.string() + " for writing");
  for (const SynthSample& s : split) {
    json j;
    j["views"] = s.raw_views;
    j["label"] = s.label;
    j["label_name"] = s.label_name;
    j["commentary"] = s.commentary;
    out << j.dump() << '\n';
  }
}

std::vector<SynthSample> read_split(const std::filesystem::path& file,
                                    const DatasetManifest& m, i64 expected) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + file.string());
  std::vector<SynthSample> out;
  std::string line;
  i64 line_no = 0;
  std::uint64_t offset = 0;
  while (true) {
    const std::uint64_t line_start = offset;
    if (!std::getline(in, line)) break;
    ++line_no;
    offset += line.size() + 1;
    if (in.eof() && !line.empty()) {
      // getline consumed bytes but hit EOF before the record's newline
      throw std::runtime_error(file.string() + ": truncated record at byte offset " +
                               std::to_string(line_start) + " (line " +
                               std::to_string(line_no) + ")");
    }
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error(file.string() + ": malformed JSON on line " +
                               std::to_string(line_no) + " (byte offset " +
                               std::to_string(line_start) + "): " + e.what());
    }
    SynthSample s;
    try {
      s.raw_views = j.at("views").get<std::vector<std::vector<double>>>();
      s.label = j.at("label").get<int>();
      s.label_name = j.at("label_name").get<std::string>();
      s.commentary = j.at("commentary").get<std::string>();
    } catch (const json::exception& e) {
      throw std::runtime_error(file.string() + ": bad record on line " +
                               std::to_string(line_no) + ": " + e.what());
    }
    if (static_cast<i64>(s.raw_views.size()) != m.n_views)
      throw std::runtime_error(file.string() + ": line " + std::to_string(line_no) +
                               " has " + std::to_string(s.raw_views.size()) +
                               " views, manifest says " + std::to_string(m.n_views));
    for (const auto& v : s.raw_views)
      if (static_cast<i64>(v.size()) != m.d_raw)
        throw std::runtime_error(file.string() + ": line " +
                                 std::to_string(line_no) + " has a view of length " +
                                 std::to_string(v.size()) + ", manifest says " +
                                 std::to_string(m.d_raw));
    if (s.label < 0 || s.label >= kNumClasses)
      throw std::runtime_error(file.string() + ": line " + std::to_string(line_no) +
                               " has label " + std::to_string(s.label));
    out.push_back(std::move(s));
  }
  if (static_cast<i64>(out.size()) != expected)
    throw std::runtime_error(file.string() + ": expected " +
                             std::to_string(expected) + " records, found " +
                             std::to_string(out.size()) +
                             " (file truncated at byte offset " +
                             std::to_string(offset) + "?)");
  return out;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    if (!out)
      throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
    out << manifest_to_json(ds.manifest).dump(2) << '\n';
  }
  write_split(ds.train, dir / "train.jsonl");
  write_split(ds.val, dir / "val.jsonl");
}

Dataset read_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json", std::ios::binary);
  if (!in)
    throw std::runtime_error("cannot open " + (dir / "manifest.json").string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw std::runtime_error((dir / "manifest.json").string() +
                             ": malformed JSON: " + e.what());
  }
  Dataset ds;
  ds.manifest = manifest_from_json(j);
  ds.train = read_split(dir / "train.jsonl", ds.manifest,
                        ds.manifest.n_train * ds.manifest.commentaries_per_sample);
  ds.val = read_split(dir / "val.jsonl", ds.manifest, ds.manifest.n_val);
  return ds;
}

// ---- view selection ---------------------------------------------------------

ViewSetting view_setting_from_string(const std::string& s) {
  if (s == "ego") return ViewSetting::ego;
  if (s == "exos") return ViewSetting::exos;
  if (s == "ego-exos") return ViewSetting::ego_exos;
  throw std::invalid_argument("unknown view setting '" + s +
                              "' (expected ego, exos or ego-exos)");
}

std::string to_string(ViewSetting s) {
  switch (s) {
    case ViewSetting::ego: return "ego";
    case ViewSetting::exos: return "exos";
    default: return "ego-exos";
  }
}

std::vector<i64> selected_views(const DatasetManifest& m, ViewSetting s) {
  std::vector<i64> idx;
  if (s == ViewSetting::ego) {
    idx.push_back(0);
  } else {
    if (s == ViewSetting::ego_exos) idx.push_back(0);
    for (i64 v = 1; v < m.n_views; ++v) idx.push_back(v);
  }
  return idx;
}

std::vector<ViewRole> selected_roles(const DatasetManifest& m, ViewSetting s) {
  std::vector<ViewRole> roles;
  for (i64 v : selected_views(m, s))
    roles.push_back(v == 0 ? ViewRole::ego : ViewRole::exo);
  return roles;
}

// ---- encoding ---------------------------------------------------------------

Tensor encode_views_flat(const FrozenEncoder& enc,
                         const std::vector<const SynthSample*>& batch,
                         const std::vector<i64>& view_idx) {
  const i64 d_raw = enc.projection.dim(0);
  const i64 n_views = static_cast<i64>(view_idx.size());
  const i64 b = static_cast<i64>(batch.size());
  if (b == 0 || n_views == 0)
    throw std::invalid_argument("encode_views: empty batch or view selection");
  std::vector<double> raw(static_cast<size_t>(b * n_views * d_raw));
  for (i64 s = 0; s < b; ++s) {
    const SynthSample& sample = *batch[s];
    for (i64 v = 0; v < n_views; ++v) {
      const i64 src = view_idx[v];
      if (src < 0 || src >= static_cast<i64>(sample.raw_views.size()))
        throw std::invalid_argument("encode_views: view index " +
                                    std::to_string(src) + " out of range");
      const auto& row = sample.raw_views[src];
      if (static_cast<i64>(row.size()) != d_raw)
        throw std::invalid_argument(
            "encode_views: sample view length " + std::to_string(row.size()) +
            " does not match encoder d_raw " + std::to_string(d_raw));
      std::copy(row.begin(), row.end(),
                raw.begin() + (s * n_views + v) * d_raw);
    }
  }
  NoGradGuard ng;  // the encoder never joins the gradient graph
  Tensor flat = from_vector({b * n_views, d_raw}, std::move(raw));
  return matmul(flat, enc.projection);
}

Tensor reshape_views(const Tensor& flat, i64 batch, i64 views) {
  if (flat.ndim() != 2 || flat.dim(0) != batch * views)
    throw std::invalid_argument("reshape_views: " + shape_str(flat.shape()) +
                                " does not hold " + std::to_string(batch) + "x" +
                                std::to_string(views) + " rows");
  return reshape(flat, {batch, views, flat.dim(1)});
}

// ---- probes ------------------------------------------------------------------

namespace {

// Four-way logistic regression on one scalar feature, full-batch gradient
// descent. Deterministic; good enough to expose interval structure in 1-D.
struct ScalarProbe {
  std::array<double, kNumClasses> w{};
  std::array<double, kNumClasses> b{};
  double mean = 0.0, stddev = 1.0;

  void fit(const std::vector<double>& x, const std::vector<int>& y) {
    const size_t n = x.size();
    mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    stddev = std::sqrt(var / static_cast<double>(n)) + 1e-12;
    const double lr = 0.5;
    for (int it = 0; it < 400; ++it) {
      std::array<double, kNumClasses> gw{}, gb{};
      for (size_t i = 0; i < n; ++i) {
        const double z = (x[i] - mean) / stddev;
        std::array<double, kNumClasses> logits;
        double mx = -1e300;
        for (int c = 0; c < kNumClasses; ++c) {
          logits[c] = w[c] * z + b[c];
          mx = std::max(mx, logits[c]);
        }
        double denom = 0.0;
        for (int c = 0; c < kNumClasses; ++c) denom += std::exp(logits[c] - mx);
        for (int c = 0; c < kNumClasses; ++c) {
          const double p = std::exp(logits[c] - mx) / denom;
          const double g = p - (c == y[i] ? 1.0 : 0.0);
          gw[c] += g * z;
          gb[c] += g;
        }
      }
      for (int c = 0; c < kNumClasses; ++c) {
        w[c] -= lr * gw[c] / static_cast<double>(n);
        b[c] -= lr * gb[c] / static_cast<double>(n);
      }
    }
  }

  double accuracy(const std::vector<double>& x, const std::vector<int>& y) const {
    size_t correct = 0;
    for (size_t i = 0; i < x.size(); ++i) {
      const double z = (x[i] - mean) / stddev;
      int best = 0;
      double best_v = w[0] * z + b[0];
      for (int c = 1; c < kNumClasses; ++c) {
        const double v = w[c] * z + b[c];
        if (v > best_v) {
          best_v = v;
          best = c;
        }
      }
      correct += best == y[i] ? 1 : 0;
    }
    return static_cast<double>(correct) / static_cast<double>(x.size());
  }
};

double fused_r(const SynthSample& s) {
  double exo = 0.0;
  for (size_t v = 1; v < s.latents.size(); ++v) exo += s.latents[v];
  exo /= static_cast<double>(s.latents.size() - 1);
  return s.latents[0] * exo;
}

}  // namespace

ProbeReport run_probes(const Dataset& ds) {
  if (ds.train.empty() || ds.val.empty() || ds.train[0].latents.empty())
    throw std::invalid_argument(
        "run_probes: needs freshly generated samples (latents present)");
  const i64 n_views = ds.manifest.n_views;
  std::vector<int> y_train, y_val;
  for (const auto& s : ds.train) y_train.push_back(s.label);
  for (const auto& s : ds.val) y_val.push_back(s.label);

  ProbeReport report;
  for (i64 v = 0; v < n_views; ++v) {
    std::vector<double> x_train, x_val;
    for (const auto& s : ds.train) x_train.push_back(s.latents[v]);
    for (const auto& s : ds.val) x_val.push_back(s.latents[v]);
    ScalarProbe probe;
    probe.fit(x_train, y_train);
    report.single_view_acc.push_back(probe.accuracy(x_val, y_val));
  }
  std::vector<double> r_train, r_val;
  for (const auto& s : ds.train) r_train.push_back(fused_r(s));
  for (const auto& s : ds.val) r_val.push_back(fused_r(s));
  ScalarProbe probe;
  probe.fit(r_train, y_train);
  report.fused_acc = probe.accuracy(r_val, y_val);
  return report;
}

}  // namespace minivlm
