#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "kt/corpus.hpp"

namespace kt::eval {

/// Minimal scored target consumed by the metrics.
struct Scored {
  double score = 0.0;
  int label = 0;
  std::int64_t question = 0;
  std::size_t row = 0;
};

/// Fraction of targets with (score > threshold) == label. Throws
/// ContractViolation on empty input.
double accuracy(std::span<const Scored> targets, double threshold);

/// Mann-Whitney AUC with average ranks for ties, O(n log n). Throws
/// ContractViolation unless both labels are present.
double auc(std::span<const Scored> targets);

/// Threshold maximizing accuracy over the given targets (midpoint between
/// neighbouring distinct scores).
double calibrate_threshold(std::span<const Scored> targets);

/// Scoring targets drawn per question with a balanced label mix. `rows`
/// references rows of the original test pool; duplicates are allowed.
struct UnbiasedTestSet {
  std::vector<std::size_t> rows;
  std::vector<std::int64_t> excluded_questions;
  std::uint64_t seed = 0;
};

/// For each question with n pool targets holding both labels, draws ceil(n/2)
/// of one label and floor(n/2) of the other, with replacement inside each
/// label. For odd n a seeded fair coin picks the larger side. Questions whose
/// pool lacks a label are excluded and listed.
UnbiasedTestSet resample_unbiased(std::span<const Scored> pool, std::uint64_t seed);

void write_index(std::ostream& out, const UnbiasedTestSet& set, std::span<const Scored> pool);
UnbiasedTestSet read_index(std::istream& in);

/// Picks the targets named by the index, duplicates included. Throws DataError
/// if a row is missing from `all`.
std::vector<Scored> select(std::span<const Scored> all, const UnbiasedTestSet& set);

/// Predicts each question's training-majority answer as a 0/1 score; unseen
/// questions and exact ties predict correct.
std::vector<Scored> majority_baseline(const corpus::AnswerStats& stats, std::span<const Scored> targets);

struct Metrics {
  std::size_t count = 0;
  double accuracy = 0.0;
  /// NaN when the subset lacks one of the labels.
  double auc = 0.0;
};

Metrics metrics(std::span<const Scored> targets, double threshold);

struct EvalReport {
  Metrics overall;
  Metrics low, medium, high, unseen;
  double threshold = 0.0;
  std::uint64_t seed = 0;
  std::string model;
  std::string test_set;

  const Metrics& group(corpus::BiasGroup g) const;
  nlohmann::json to_json() const;
};

/// Metrics overall and per bias group; group counts sum to the total.
EvalReport group_report(std::span<const Scored> targets, const corpus::AnswerStats& stats, double threshold);

/// Flat rows `model,test_set,group,count,accuracy,auc` for experiment tables.
void write_report_header(std::ostream& out);
void write_report_rows(std::ostream& out, const EvalReport& report);

}  // namespace kt::eval
