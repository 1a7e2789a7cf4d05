#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kt/backbone.hpp"
#include "kt/corpus.hpp"

namespace kt::core {

using model::Index;
using model::Matrix;
using model::Tape;
using model::Tensor;
using model::Var;

// ---------------------------------------------------------------------------
// Scalar counterfactual algebra

/// Factual response: log sigmoid(R_s + R_q + R_k).
double fuse(double r_s, double r_q, double r_k);
/// Response with student and knowledge voided: log sigmoid(p + R_q + p).
double counterfactual_fuse(double p, double r_q);

/// How the training objectives read a fused response as a probability.
enum class ProbMode {
  /// prob = sigmoid(R_s + R_q + R_k); counterfactual sigmoid(2p + R_q).
  logit,
  /// prob = sigmoid(log sigmoid(...)), exactly as the fusion composes; lies in (0, 1/2].
  literal,
};

const char* to_string(ProbMode m);
ProbMode prob_mode_from_string(const std::string& s);

struct PredictionRecord {
  std::string student_id;
  std::int64_t step = 0;
  std::int64_t question = 0;
  std::size_t row = 0;
  int label = 0;
  double r_s = 0.0;
  double r_q = 0.0;
  double r_k = 0.0;
  double factual = 0.0;
  double counterfactual = 0.0;
  /// factual - counterfactual; the debiased (TE - NDE) score.
  double debiased = 0.0;
};

/// Fills factual, counterfactual and debiased from the branch logits.
PredictionRecord make_record(double r_s, double r_q, double r_k, double p);
inline double debiased_score(const PredictionRecord& r) { return r.factual - r.counterfactual; }

struct LossValues {
  double bce_sq = 0.0;
  double bce_q = 0.0;
  double kl = 0.0;
};

/// Per-record objective values. The counterfactual probability is recovered
/// from record.counterfactual, so p is not needed. Throws ContractViolation
/// unless label is 0 or 1.
LossValues losses(const PredictionRecord& record, int label, ProbMode mode);

// ---------------------------------------------------------------------------
// Model

enum class Variant {
  /// Three branches, fusion and the counterfactual parameter p.
  core,
  /// The student-question branch alone with a plain BCE loss.
  backbone_only,
};

const char* to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct ModelConfig {
  Index d = 64;
  Index branch_hidden = 64;
  Variant variant = Variant::core;
  std::uint64_t seed = 1;
};

class CoreModel {
 public:
  CoreModel(Index n_questions, Index n_concepts, const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  Index n_questions() const { return n_questions_; }
  Index n_concepts() const { return n_concepts_; }

  /// Marks which question ids have training data; the rest route to the cold row.
  void set_seen(std::span<const corpus::Interaction> training);
  Index question_row(std::int64_t question) const;
  Index concept_row(std::int64_t concept_id) const;

  double p() const { return p_.value(0, 0); }
  Tensor& counterfactual_param() { return p_; }

  /// Everything the step-A objective updates (all but p).
  std::vector<Tensor*> branch_parameters();
  /// Every array persisted in a checkpoint, in a fixed order.
  std::vector<Tensor*> all_arrays();

  model::QuestionEncoder encoder;
  std::unique_ptr<model::Backbone> backbone;
  model::Mlp2 student_branch;   // s -> R_s
  model::Mlp2 question_branch;  // q -> R_q

 private:
  ModelConfig cfg_;
  Index n_questions_;
  Index n_concepts_;
  Tensor p_;
  Tensor seen_;  // 1 x (n_questions + 1), 1 where the question row is trained
};

/// Padded, time-major view of up to `batch` sequences plus their scoring targets.
/// The first interaction of each sequence is context only.
struct Batch {
  Index steps = 0;
  Index size = 0;
  std::vector<Index> questions;               // steps * size
  std::vector<std::vector<Index>> concepts;   // steps * size
  std::vector<int> correct;                   // steps * size
  std::vector<Index> target_rows;             // into the time-major layout
  std::vector<int> target_labels;
  std::vector<const corpus::Interaction*> target_refs;
};

Batch make_batch(const CoreModel& model, std::span<const corpus::LearningSequence* const> sequences);

/// Branch logits for every target of a batch, each N x 1.
struct BranchOutputs {
  Var r_s;
  Var r_q;
  Var r_k;
};

BranchOutputs forward(Tape& tape, CoreModel& model, const Batch& batch);

struct Objective {
  Var step_a;   // L_bce_sq (+ L_bce_q), averaged over targets
  Var kl;       // L_kl, averaged; depends on p only
  Var bce_sq;
  Var bce_q;
};

/// Builds both training objectives on the tape. `with_q_loss` toggles L_bce_q.
Objective objectives(Tape& tape, CoreModel& model, const BranchOutputs& out, std::span<const int> labels,
                     ProbMode mode, bool with_q_loss);

// ---------------------------------------------------------------------------
// Training and inference

struct TrainConfig {
  Index batch = 128;
  double lr = 1e-3;
  int epochs = 200;
  int patience = 20;
  /// Share of training students held out for early stopping and threshold calibration.
  double validation_fraction = 0.1;
  ProbMode mode = ProbMode::logit;
  bool no_q_loss = false;
  /// When set, p is pinned to this value and the KL step is skipped.
  std::optional<double> fixed_p;
  std::optional<double> max_grad_norm;
  std::uint64_t seed = 1;
};

struct EpochLog {
  int epoch = 0;
  double loss_a = 0.0;
  double loss_kl = 0.0;
  double val_auc = 0.0;
  double p = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> history;
  int best_epoch = 0;
  double best_val_auc = 0.0;
  /// Debiased-score threshold maximizing validation accuracy.
  double calibrated_threshold = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Alternating optimization per mini-batch: step A minimizes the BCE terms over
/// every parameter except p, step B minimizes KL over p alone. Restores the
/// parameters of the best validation-AUC epoch. Throws NumericalError with the
/// epoch and batch when a loss stops being finite.
TrainResult train(CoreModel& model, std::span<const corpus::LearningSequence> sequences, const TrainConfig& cfg,
                  const EpochCallback& on_epoch = {});

/// Records for every scoring target of every sequence, in input order.
std::vector<PredictionRecord> predict_all(CoreModel& model, std::span<const corpus::LearningSequence> sequences,
                                          Index batch = 128);

/// Record for one target question after `history` (possibly empty).
PredictionRecord predict(CoreModel& model, std::span<const corpus::Interaction> history,
                         const corpus::Interaction& target);

enum class InferenceMode {
  /// TE - NDE, thresholded at 0 by default.
  debiased,
  /// Factual score alone; accuracy thresholds sigmoid(z) at 1/2.
  total_effect,
};

const char* to_string(InferenceMode m);
InferenceMode inference_mode_from_string(const std::string& s);

double inference_score(const PredictionRecord& r, InferenceMode mode);
/// Threshold at which the score means "even odds" for the given mode.
double default_threshold(InferenceMode mode);

void write_records(std::ostream& out, std::span<const PredictionRecord> records);

}  // namespace kt::core
