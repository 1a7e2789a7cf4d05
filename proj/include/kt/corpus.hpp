#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

namespace kt::corpus {

/// One student-question event after dense re-indexing.
struct Interaction {
  std::string student_id;
  std::int64_t question = 0;
  std::vector<std::int64_t> concepts;
  int correct = 0;
  /// 0-based position in the student's chronology.
  std::int64_t step = 0;
  /// Position in the normalized corpus; identifies a scoring target.
  std::size_t row = 0;
};

/// Bijection between original ids and dense 0-based indices.
class IdMap {
 public:
  std::int64_t encode_or_insert(std::int64_t original);
  std::optional<std::int64_t> encode(std::int64_t original) const;
  std::int64_t decode(std::int64_t dense) const { return originals_.at(static_cast<std::size_t>(dense)); }
  std::size_t size() const { return originals_.size(); }
  const std::vector<std::int64_t>& originals() const { return originals_; }

  static IdMap from_originals(std::vector<std::int64_t> originals);

 private:
  std::vector<std::int64_t> originals_;
  std::unordered_map<std::int64_t, std::int64_t> index_;
};

struct Vocabulary {
  IdMap questions;
  IdMap concepts;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);
  /// FNV-1a of the canonical JSON text; checkpoints pin it.
  std::uint64_t hash() const;
};

struct Corpus {
  std::vector<Interaction> interactions;  // grouped by student, chronological
  Vocabulary vocab;
  std::vector<std::string> students;  // order of first appearance
};

struct LoadOptions {
  std::size_t min_interactions = 3;
};

/// Parses `student_id,question_id,concept_ids,correct[,order]` (any column
/// order, header required), drops concept-less rows, then students with fewer
/// than `min_interactions` rows, then re-indexes questions and concepts by
/// first appearance. Throws DataError with the line number on a malformed row
/// and on an empty result.
Corpus load_interactions(std::istream& in, const LoadOptions& options = {});
Corpus load_interactions(const std::filesystem::path& path, const LoadOptions& options = {});

/// Writes interactions (already dense) in the same schema, `order` = step.
void write_interactions(std::ostream& out, std::span<const Interaction> interactions);

/// Reads a normalized corpus written by write_interactions, keeping ids as they
/// are and validating them against `vocab`.
Corpus read_normalized(std::istream& in, Vocabulary vocab);

struct LearningSequence {
  std::string student_id;
  std::vector<Interaction> interactions;
};

/// Cuts each student's chronology into consecutive chunks of at most max_len.
std::vector<LearningSequence> build_sequences(std::span<const Interaction> interactions, std::size_t max_len = 200);

struct StudentSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Seeded partition of student ids; the test side gets floor((1 - ratio) * n)
/// students, clamped so both sides are non-empty.
StudentSplit split_students(std::span<const std::string> students, double train_ratio, std::uint64_t seed);

nlohmann::json to_json(const StudentSplit& split);
StudentSplit split_from_json(const nlohmann::json& j);

struct SequenceSplit {
  std::vector<LearningSequence> train;
  std::vector<LearningSequence> test;
};

SequenceSplit split_by_student(std::span<const LearningSequence> sequences, double train_ratio, std::uint64_t seed);

/// Keeps the sequences (or interactions) whose student is listed.
std::vector<LearningSequence> select_students(std::span<const LearningSequence> sequences,
                                              std::span<const std::string> students);
std::vector<Interaction> select_students(std::span<const Interaction> interactions,
                                         std::span<const std::string> students);

enum class BiasGroup { low, medium, high, unseen };

const char* to_string(BiasGroup g);

inline constexpr double kLowBiasBelow = 0.6;
inline constexpr double kHighBiasAbove = 0.8;

/// low < 0.6 <= medium <= 0.8 < high
BiasGroup classify_bias(double strength);

struct QuestionStats {
  std::int64_t n_correct = 0;
  std::int64_t n_incorrect = 0;

  std::int64_t total() const { return n_correct + n_incorrect; }
  /// max(correct, incorrect) / total; empty when the question was never answered.
  std::optional<double> bias_strength() const;
  BiasGroup group() const;
  /// 1 when correct is the more frequent answer; ties and unseen give 1.
  int majority_answer() const { return n_incorrect > n_correct ? 0 : 1; }
};

struct AnswerStats {
  std::vector<QuestionStats> per_question;

  const QuestionStats& at(std::int64_t question) const;
  BiasGroup group(std::int64_t question) const;
  std::int64_t total() const;
  /// Unweighted mean over questions with at least one answer.
  double mean_bias_strength() const;
};

/// Counts answers per question. Pass training interactions only.
AnswerStats compute_answer_stats(std::span<const Interaction> train, std::size_t n_questions);

void write_answer_stats(std::ostream& out, const AnswerStats& stats);
AnswerStats read_answer_stats(std::istream& in);

}  // namespace kt::corpus
