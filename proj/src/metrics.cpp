#include "minivlm/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"

namespace minivlm {

namespace {

std::string lower(const std::string& s) {
  std::string out(s.size(), '\0');
  std::transform(s.begin(), s.end(), out.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  return out;
}

}  // namespace

std::optional<int> parse_label(const std::string& text) {
  const std::string hay = lower(text);
  static const std::string needle = "proficiency level:";
  // Class names ordered longest-first for the longest-match rule.
  struct Name {
    std::string text;
    int label;
  };
  static const std::vector<Name> names = [] {
    std::vector<Name> n;
    for (int c = 0; c < kNumClasses; ++c)
      n.push_back({lower(class_label_names()[c]), c});
    std::sort(n.begin(), n.end(), [](const Name& a, const Name& b) {
      return a.text.size() > b.text.size();
    });
    return n;
  }();

  size_t pos = 0;
  while ((pos = hay.find(needle, pos)) != std::string::npos) {
    size_t at = pos + needle.size();
    while (at < hay.size() && std::isspace(static_cast<unsigned char>(hay[at])))
      ++at;
    for (const Name& n : names)
      if (hay.compare(at, n.text.size(), n.text) == 0) return n.label;
    ++pos;  // this occurrence had no class name; keep scanning
  }
  return std::nullopt;
}

std::vector<std::string> word_tokens(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

RougeScore rouge_l(const std::string& candidate, const std::string& reference) {
  const std::vector<std::string> cand = word_tokens(candidate);
  const std::vector<std::string> ref = word_tokens(reference);
  if (ref.empty())
    throw std::invalid_argument("rouge_l: reference has no word tokens");
  RougeScore s;
  if (cand.empty()) return s;

  const size_t n = cand.size(), m = ref.size();
  std::vector<i64> prev(m + 1, 0), cur(m + 1, 0);
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j) {
      if (cand[i - 1] == ref[j - 1])
        cur[j] = prev[j - 1] + 1;
      else
        cur[j] = std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev[m]);
  s.precision = lcs / static_cast<double>(n);
  s.recall = lcs / static_cast<double>(m);
  s.f1 = (s.precision + s.recall) > 0.0
             ? 2.0 * s.precision * s.recall / (s.precision + s.recall)
             : 0.0;
  return s;
}

namespace {

// Exhaustive alignment search: maximize matches, then minimize chunks.
// State: cand position, bitmask of used reference tokens, reference index
// matched by the previous cand token (+1; 0 = none).
struct AlignSearch {
  const std::vector<std::string>& cand;
  const std::vector<std::string>& ref;
  std::unordered_map<std::uint64_t, std::pair<i64, i64>> memo;  // (matches, -chunks)

  std::pair<i64, i64> best(size_t i, std::uint32_t mask, i64 prev) {
    if (i == cand.size()) return {0, 0};
    const std::uint64_t key = (static_cast<std::uint64_t>(i) << 38) |
                              (static_cast<std::uint64_t>(prev + 1) << 32) | mask;
    auto it = memo.find(key);
    if (it != memo.end()) return it->second;
    // skip cand[i]
    std::pair<i64, i64> bst = best(i + 1, mask, -1);
    for (size_t j = 0; j < ref.size(); ++j) {
      if (mask & (1u << j)) continue;
      if (ref[j] != cand[i]) continue;
      const i64 new_chunk = (prev >= 0 && static_cast<size_t>(prev + 1) == j) ? 0 : 1;
      auto [m, negc] = best(i + 1, mask | (1u << j), static_cast<i64>(j));
      std::pair<i64, i64> val{m + 1, negc - new_chunk};
      if (val > bst) bst = val;
    }
    memo.emplace(key, bst);
    return bst;
  }
};

// Greedy longest-common-block fallback for inputs past the exact-search
// guard: repeatedly take the longest contiguous run over unused positions
// (leftmost tie-break) until no matchable pair remains.
std::pair<i64, i64> greedy_align(const std::vector<std::string>& cand,
                                 const std::vector<std::string>& ref) {
  std::vector<char> cu(cand.size(), 0), ru(ref.size(), 0);
  i64 matches = 0, chunks = 0;
  while (true) {
    size_t best_i = 0, best_j = 0, best_len = 0;
    for (size_t i = 0; i < cand.size(); ++i) {
      for (size_t j = 0; j < ref.size(); ++j) {
        size_t len = 0;
        while (i + len < cand.size() && j + len < ref.size() && !cu[i + len] &&
               !ru[j + len] && cand[i + len] == ref[j + len])
          ++len;
        if (len > best_len) {
          best_len = len;
          best_i = i;
          best_j = j;
        }
      }
    }
    if (best_len == 0) break;
    for (size_t t = 0; t < best_len; ++t) {
      cu[best_i + t] = 1;
      ru[best_j + t] = 1;
    }
    matches += static_cast<i64>(best_len);
    chunks += 1;
  }
  return {matches, chunks};
}

}  // namespace

MeteorScore meteor_core(const std::string& candidate,
                        const std::string& reference) {
  const std::vector<std::string> cand = word_tokens(candidate);
  const std::vector<std::string> ref = word_tokens(reference);
  if (ref.empty())
    throw std::invalid_argument("meteor_core: reference has no word tokens");
  MeteorScore out;
  if (cand.empty()) return out;

  size_t matchable = 0;
  for (const auto& w : cand)
    if (std::find(ref.begin(), ref.end(), w) != ref.end()) ++matchable;

  i64 matches, chunks;
  if (ref.size() <= 18 && matchable <= 24) {
    AlignSearch search{cand, ref, {}};
    auto [m, negc] = search.best(0, 0, -1);
    matches = m;
    chunks = -negc;
  } else {
    std::tie(matches, chunks) = greedy_align(cand, ref);
  }
  out.matches = matches;
  out.chunks = chunks;
  if (matches == 0) return out;

  const double p = static_cast<double>(matches) / static_cast<double>(cand.size());
  const double r = static_cast<double>(matches) / static_cast<double>(ref.size());
  const double f_mean = 10.0 * p * r / (r + 9.0 * p);
  const double frag = static_cast<double>(chunks) / static_cast<double>(matches);
  const double penalty = 0.5 * frag * frag * frag;
  out.score = f_mean * (1.0 - penalty);
  return out;
}

ClassificationResult classification_metrics(const std::vector<int>& preds,
                                            const std::vector<int>& gold) {
  if (preds.size() != gold.size())
    throw std::invalid_argument("classification_metrics: " +
                                std::to_string(preds.size()) + " predictions vs " +
                                std::to_string(gold.size()) + " labels");
  if (preds.empty())
    throw std::invalid_argument("classification_metrics: empty input");

  ClassificationResult r;
  r.n = static_cast<i64>(preds.size());
  i64 correct = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    if (gold[i] < 0 || gold[i] >= kNumClasses)
      throw std::invalid_argument("classification_metrics: gold label " +
                                  std::to_string(gold[i]) + " out of range");
    if (preds[i] < 0) {
      ++r.parse_failures;
      continue;
    }
    if (preds[i] >= kNumClasses)
      throw std::invalid_argument("classification_metrics: prediction " +
                                  std::to_string(preds[i]) + " out of range");
    r.confusion[gold[i]][preds[i]] += 1;
    correct += preds[i] == gold[i] ? 1 : 0;
  }
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.n);
  const i64 parsed = r.n - r.parse_failures;
  r.accuracy_excl_failures =
      parsed > 0 ? static_cast<double>(correct) / static_cast<double>(parsed) : 0.0;

  double f1_sum = 0.0;
  for (int c = 0; c < kNumClasses; ++c) {
    i64 tp = r.confusion[c][c];
    i64 pred_c = 0, gold_c = 0;
    for (int g = 0; g < kNumClasses; ++g) pred_c += r.confusion[g][c];
    for (int p = 0; p < kNumClasses; ++p) gold_c += r.confusion[c][p];
    i64 gold_total_c = 0;  // includes parse-failed samples of this class
    for (size_t i = 0; i < gold.size(); ++i) gold_total_c += gold[i] == c ? 1 : 0;
    // Failures are wrong predictions: they count against recall.
    r.precision[c] = pred_c > 0 ? static_cast<double>(tp) / pred_c : 0.0;
    r.recall[c] = gold_total_c > 0 ? static_cast<double>(tp) / gold_total_c : 0.0;
    r.f1[c] = (r.precision[c] + r.recall[c]) > 0.0
                  ? 2.0 * r.precision[c] * r.recall[c] /
                        (r.precision[c] + r.recall[c])
                  : 0.0;
    if (pred_c == 0 && gold_total_c == 0)
      r.warnings.push_back("class '" + class_label_names()[c] +
                           "' absent from predictions and gold; F1 counted as 0");
    f1_sum += r.f1[c];
  }
  r.macro_f1 = f1_sum / kNumClasses;
  return r;
}

EvalReport score_generations(const std::vector<std::string>& generated,
                             const std::vector<int>& gold_labels,
                             const std::vector<std::string>& gold_commentaries) {
  if (generated.size() != gold_labels.size() ||
      generated.size() != gold_commentaries.size())
    throw std::invalid_argument("score_generations: size mismatch");
  if (generated.empty())
    throw std::invalid_argument("score_generations: empty validation set");

  std::vector<int> preds;
  preds.reserve(generated.size());
  for (const std::string& g : generated) {
    auto label = parse_label(g);
    preds.push_back(label ? *label : -1);
  }
  EvalReport report;
  report.n_samples = static_cast<i64>(generated.size());
  report.classification = classification_metrics(preds, gold_labels);
  double p = 0, r = 0, f = 0, met = 0;
  for (size_t i = 0; i < generated.size(); ++i) {
    const RougeScore rs = rouge_l(generated[i], gold_commentaries[i]);
    p += rs.precision;
    r += rs.recall;
    f += rs.f1;
    met += meteor_core(generated[i], gold_commentaries[i]).score;
  }
  const double n = static_cast<double>(generated.size());
  report.rouge_mean = {p / n, r / n, f / n};
  report.meteor_mean = met / n;
  return report;
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["n_samples"] = n_samples;
  j["accuracy"] = classification.accuracy;
  j["accuracy_excl_failures"] = classification.accuracy_excl_failures;
  j["macro_f1"] = classification.macro_f1;
  j["parse_failures"] = classification.parse_failures;
  j["per_class"] = nlohmann::json::array();
  for (int c = 0; c < kNumClasses; ++c) {
    j["per_class"].push_back({{"label", class_label_names()[c]},
                              {"precision", classification.precision[c]},
                              {"recall", classification.recall[c]},
                              {"f1", classification.f1[c]}});
  }
  j["confusion"] = classification.confusion;
  j["rouge_l"] = {{"precision", rouge_mean.precision},
                  {"recall", rouge_mean.recall},
                  {"f1", rouge_mean.f1}};
  j["meteor"] = meteor_mean;
  j["warnings"] = classification.warnings;
  return j.dump(2);
}

std::string EvalReport::to_csv() const {
  std::string out =
      "n_samples,accuracy,accuracy_excl_failures,macro_f1,parse_failures,"
      "rouge_l_p,rouge_l_r,rouge_l_f1,meteor\n";
  out += std::to_string(n_samples) + "," + std::to_string(classification.accuracy) +
         "," + std::to_string(classification.accuracy_excl_failures) + "," +
         std::to_string(classification.macro_f1) + "," +
         std::to_string(classification.parse_failures) + "," +
         std::to_string(rouge_mean.precision) + "," +
         std::to_string(rouge_mean.recall) + "," + std::to_string(rouge_mean.f1) +
         "," + std::to_string(meteor_mean) + "\n";
  return out;
}

}  // namespace minivlm
