#pragma once

// Text evaluation: proficiency-label extraction from generated text,
// classification metrics, sentence-level ROUGE-L, and meteor_core (exact
// unigram METEOR without the stem/synonym stages, hence the distinct name).

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "minivlm/data.hpp"

namespace minivlm {

// Case-insensitive scan for "Proficiency Level:" followed by one of the four
// class names (longest match, so "Early Expert" never reads as "Expert").
// Returns std::nullopt on parse failure.
std::optional<int> parse_label(const std::string& text);

// Lowercased alphanumeric word tokens; punctuation acts as a separator.
std::vector<std::string> word_tokens(const std::string& text);

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};
// LCS-based: R = LCS/|ref|, P = LCS/|cand|, F1 = 2PR/(P+R). Empty reference
// is an error; an empty candidate scores all zeros.
RougeScore rouge_l(const std::string& candidate, const std::string& reference);

struct MeteorScore {
  double score = 0.0;
  i64 matches = 0;
  i64 chunks = 0;
};
// Exact unigram alignment maximizing matches then minimizing chunks;
// F_mean = 10PR/(R+9P), penalty = 0.5*(chunks/matches)^3,
// score = F_mean*(1-penalty). Exhaustive chunk minimization up to a size
// guard, greedy longest-block fallback beyond it.
MeteorScore meteor_core(const std::string& candidate,
                        const std::string& reference);

struct ClassificationResult {
  double accuracy = 0.0;             // parse failures count as wrong
  double accuracy_excl_failures = 0.0;
  double macro_f1 = 0.0;
  std::array<double, kNumClasses> precision{}, recall{}, f1{};
  std::array<std::array<i64, kNumClasses>, kNumClasses> confusion{};  // [gold][pred]
  i64 parse_failures = 0;
  i64 n = 0;
  std::vector<std::string> warnings;  // classes absent from pred and gold
};
// preds use -1 for parse failures; failures stay out of the confusion matrix
// (confusion row sums + parse_failures == n).
ClassificationResult classification_metrics(const std::vector<int>& preds,
                                            const std::vector<int>& gold);

struct EvalReport {
  ClassificationResult classification;
  RougeScore rouge_mean;
  double meteor_mean = 0.0;
  i64 n_samples = 0;
  std::string to_json() const;
  std::string to_csv() const;
};

// Scores already-generated texts against gold labels and commentaries.
EvalReport score_generations(const std::vector<std::string>& generated,
                             const std::vector<int>& gold_labels,
                             const std::vector<std::string>& gold_commentaries);

}  // namespace minivlm
