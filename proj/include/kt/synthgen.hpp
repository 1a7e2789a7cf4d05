#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include <nlohmann/json.hpp>

#include "kt/corpus.hpp"

namespace kt::synth {

enum class DifficultyFamily { uniform, two_point };

/// BKT-style student simulator. Each concept is either unlearned or learned;
/// an exposure flips it to learned with the concept's learn rate, and it never
/// flips back. Per-question offsets skew the answer distribution to create
/// answer bias.
struct SynthConfig {
  std::size_t n_students = 500;
  std::size_t n_questions = 60;
  std::size_t n_concepts = 12;
  std::size_t seq_len = 50;
  /// Each question tags between 1 and this many distinct concepts.
  std::size_t concepts_per_question = 1;
  /// One entry per concept, or a single entry broadcast to all concepts.
  std::vector<double> learn_rate{0.05};
  /// Probability that a concept starts learned.
  double prior_mastery = 0.3;
  /// Per-student shift of prior_mastery drawn from U(-spread, spread).
  double ability_spread = 0.45;
  double guess = 0.1;
  double slip = 0.05;
  /// Magnitude of per-question offsets: 0 gives no skew, 1 shifts answer
  /// log-odds by up to 6.
  double difficulty_spread = 0.5;
  DifficultyFamily family = DifficultyFamily::uniform;
  std::uint64_t seed = 1;

  void validate() const;
  double learn_rate_of(std::size_t concept_index) const;
};

nlohmann::json to_json(const SynthConfig& cfg);
SynthConfig config_from_json(const nlohmann::json& j);

/// Probability of a correct answer for a question whose concepts are learned
/// in fraction `mastered` and whose log-odds offset is `offset`. The base is
/// guess + (1 - slip - guess) * mastered and the offset is added to its logit.
/// Working on the logit scale keeps the student's influence intact on heavily
/// skewed questions.
double answer_probability(const SynthConfig& cfg, double offset, double mastered);

/// Ground truth for one generated interaction; never fed to models.
struct TruthRecord {
  std::string student_id;
  std::int64_t step = 0;
  std::int64_t question = 0;
  double mastered_fraction = 0.0;
  double p_correct = 0.0;
};

struct SynthQuestion {
  std::vector<std::int64_t> concepts;
  double offset = 0.0;  // log-odds shift
};

struct SynthResult {
  std::vector<corpus::Interaction> interactions;  // raw generator ids, row order = chronology
  std::vector<TruthRecord> truth;                 // index-aligned with interactions
  std::vector<SynthQuestion> questions;
};

/// Deterministic under cfg.seed; each student draws from its own substream.
SynthResult generate(const SynthConfig& cfg);

/// Mean over questions of max(rate, 1 - rate), where rate is the question's
/// average closed-form answer probability along the simulated mastery
/// trajectories. No answers are sampled.
double expected_mean_bias(const SynthConfig& cfg);

/// Bisects difficulty_spread so expected_mean_bias hits `target`.
SynthConfig calibrate_difficulty_spread(SynthConfig cfg, double target);

void write_truth(std::ostream& out, const SynthResult& result);
nlohmann::json sidecar_json(const SynthConfig& cfg, const SynthResult& result);

}  // namespace kt::synth
