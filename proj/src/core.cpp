#include "kt/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <unordered_set>

#include "kt/error.hpp"
#include "kt/eval.hpp"
#include "kt/nd/adam.hpp"

namespace kt::core {
namespace {

/// log(1 - e^x) for x < 0.
double log1mexp(double x) { return x > -M_LN2 ? std::log(-std::expm1(x)) : std::log1p(-std::exp(x)); }

/// Bernoulli KL between probabilities given as (log p, log(1 - p)) pairs.
double bernoulli_kl(double log_a, double log_1ma, double log_b, double log_1mb) {
  return std::exp(log_a) * (log_a - log_b) + std::exp(log_1ma) * (log_1ma - log_1mb);
}

Var bce_from_logit(const Var& u, const Var& labels) {
  const Var pos = labels * nd::log_sigmoid(u);
  const Var neg_part = nd::one_minus(labels) * nd::log_sigmoid(nd::neg(u));
  return nd::neg(nd::mean(pos + neg_part));
}

/// KL(Bernoulli(sigmoid(a)) || Bernoulli(sigmoid(b))) averaged over rows; `a` is constant.
Var kl_from_logits(Tape& tape, const Matrix& a, const Var& b) {
  const Matrix pa = a.unaryExpr([](double x) { return nd::sigmoid(x); });
  const Matrix lpa = a.unaryExpr([](double x) { return nd::log_sigmoid(x); });
  const Matrix lna = a.unaryExpr([](double x) { return nd::log_sigmoid(-x); });
  const Var w_pos = tape.constant(pa);
  const Var w_neg = tape.constant((1.0 - pa.array()).matrix());
  const Var t_pos = w_pos * (tape.constant(lpa) - nd::log_sigmoid(b));
  const Var t_neg = w_neg * (tape.constant(lna) - nd::log_sigmoid(nd::neg(b)));
  return nd::mean(t_pos + t_neg);
}

Batch batch_from(const CoreModel& model, std::span<const corpus::LearningSequence* const> sequences,
                 bool score_first) {
  Batch b;
  b.size = static_cast<Index>(sequences.size());
  for (const auto* s : sequences) b.steps = std::max(b.steps, static_cast<Index>(s->interactions.size()));
  const auto cells = static_cast<std::size_t>(b.steps * b.size);
  b.questions.assign(cells, model.encoder.cold_question());
  b.concepts.assign(cells, std::vector<Index>{model.encoder.cold_concept()});
  b.correct.assign(cells, 0);
  for (Index j = 0; j < b.size; ++j) {
    const auto& its = sequences[static_cast<std::size_t>(j)]->interactions;
    for (Index t = 0; t < static_cast<Index>(its.size()); ++t) {
      const auto& it = its[static_cast<std::size_t>(t)];
      const auto cell = static_cast<std::size_t>(t * b.size + j);
      b.questions[cell] = model.question_row(it.question);
      auto& bag = b.concepts[cell];
      bag.clear();
      for (auto c : it.concepts) bag.push_back(model.concept_row(c));
      if (bag.empty()) bag.push_back(model.encoder.cold_concept());
      if (it.correct != 0 && it.correct != 1) throw ContractViolation("make_batch: correct must be 0 or 1");
      b.correct[cell] = it.correct;
      if (t > 0 || score_first) {
        b.target_rows.push_back(t * b.size + j);
        b.target_labels.push_back(it.correct);
        b.target_refs.push_back(&it);
      }
    }
  }
  return b;
}

std::vector<PredictionRecord> records_from(const BranchOutputs& out, const Batch& batch, double p) {
  std::vector<PredictionRecord> recs;
  recs.reserve(batch.target_rows.size());
  for (std::size_t i = 0; i < batch.target_rows.size(); ++i) {
    const auto r = static_cast<Index>(i);
    PredictionRecord rec = make_record(out.r_s.value()(r, 0), out.r_q.value()(r, 0), out.r_k.value()(r, 0), p);
    const corpus::Interaction& it = *batch.target_refs[i];
    rec.student_id = it.student_id;
    rec.step = it.step;
    rec.question = it.question;
    rec.row = it.row;
    rec.label = it.correct;
    recs.push_back(std::move(rec));
  }
  return recs;
}

std::vector<eval::Scored> to_scored(std::span<const PredictionRecord> recs, bool factual) {
  std::vector<eval::Scored> out;
  out.reserve(recs.size());
  for (const auto& r : recs) out.push_back({factual ? r.factual : r.debiased, r.label, r.question, r.row});
  return out;
}

}  // namespace

double fuse(double r_s, double r_q, double r_k) { return nd::log_sigmoid(r_s + r_q + r_k); }

double counterfactual_fuse(double p, double r_q) { return nd::log_sigmoid(p + r_q + p); }

const char* to_string(ProbMode m) { return m == ProbMode::logit ? "logit" : "literal"; }

ProbMode prob_mode_from_string(const std::string& s) {
  if (s == "logit") return ProbMode::logit;
  if (s == "literal") return ProbMode::literal;
  throw ConfigError("unknown probability mode '" + s + "' (expected logit or literal)");
}

PredictionRecord make_record(double r_s, double r_q, double r_k, double p) {
  PredictionRecord r;
  r.r_s = r_s;
  r.r_q = r_q;
  r.r_k = r_k;
  r.factual = fuse(r_s, r_q, r_k);
  r.counterfactual = counterfactual_fuse(p, r_q);
  r.debiased = r.factual - r.counterfactual;
  return r;
}

LossValues losses(const PredictionRecord& record, int label, ProbMode mode) {
  if (label != 0 && label != 1) throw ContractViolation("losses: label must be 0 or 1");
  const double r = label;
  LossValues v;
  v.bce_q = nd::bce_with_logit(record.r_q, r);
  if (mode == ProbMode::logit) {
    const double z = record.r_s + record.r_q + record.r_k;
    v.bce_sq = nd::bce_with_logit(z, r);
    // exp(factual) = sigmoid(z) and exp(counterfactual) = sigmoid(2p + R_q). Both
    // complements go through the same formula so equal inputs give exactly 0.
    v.kl = bernoulli_kl(record.factual, log1mexp(record.factual), record.counterfactual, log1mexp(record.counterfactual));
  } else {
    v.bce_sq = nd::bce_with_logit(record.factual, r);
    v.kl = bernoulli_kl(nd::log_sigmoid(record.factual), nd::log_sigmoid(-record.factual),
                        nd::log_sigmoid(record.counterfactual), nd::log_sigmoid(-record.counterfactual));
  }
  return v;
}

const char* to_string(Variant v) { return v == Variant::core ? "core" : "backbone"; }

Variant variant_from_string(const std::string& s) {
  if (s == "core") return Variant::core;
  if (s == "backbone" || s == "backbone-only" || s == "backbone_only") return Variant::backbone_only;
  throw ConfigError("unknown model variant '" + s + "' (expected core or backbone)");
}

CoreModel::CoreModel(Index n_questions, Index n_concepts, const ModelConfig& cfg)
    : cfg_(cfg), n_questions_(n_questions), n_concepts_(n_concepts) {
  if (n_questions <= 0 || n_concepts <= 0 || cfg.d <= 0 || cfg.branch_hidden <= 0) {
    throw ContractViolation("CoreModel: sizes must be positive");
  }
  Rng rng = derive_rng(cfg.seed, 0x5EED);
  encoder = model::QuestionEncoder(n_questions, n_concepts, cfg.d, rng);
  backbone = std::make_unique<model::GruBackbone>(cfg.d, rng);
  student_branch = model::Mlp2("student_branch", cfg.d, cfg.branch_hidden, rng);
  question_branch = model::Mlp2("question_branch", 2 * cfg.d, cfg.branch_hidden, rng);
  p_ = Tensor("p", Matrix::Zero(1, 1));
  seen_ = Tensor("question_seen", Matrix::Ones(1, n_questions), false);
}

void CoreModel::set_seen(std::span<const corpus::Interaction> training) {
  seen_.value.setZero();
  for (const auto& it : training) {
    if (it.question >= 0 && it.question < n_questions_) seen_.value(0, it.question) = 1.0;
  }
}

Index CoreModel::question_row(std::int64_t question) const {
  if (question < 0 || question >= n_questions_ || seen_.value(0, question) == 0.0) return encoder.cold_question();
  return question;
}

Index CoreModel::concept_row(std::int64_t concept_id) const {
  if (concept_id < 0 || concept_id >= n_concepts_) return encoder.cold_concept();
  return concept_id;
}

std::vector<Tensor*> CoreModel::branch_parameters() {
  std::vector<Tensor*> out = encoder.parameters();
  for (Tensor* t : backbone->parameters()) out.push_back(t);
  if (cfg_.variant == Variant::core) {
    for (Tensor* t : student_branch.parameters()) out.push_back(t);
    for (Tensor* t : question_branch.parameters()) out.push_back(t);
  }
  return out;
}

std::vector<Tensor*> CoreModel::all_arrays() {
  std::vector<Tensor*> out = encoder.parameters();
  for (Tensor* t : backbone->parameters()) out.push_back(t);
  for (Tensor* t : student_branch.parameters()) out.push_back(t);
  for (Tensor* t : question_branch.parameters()) out.push_back(t);
  out.push_back(&p_);
  out.push_back(&seen_);
  return out;
}

Batch make_batch(const CoreModel& model, std::span<const corpus::LearningSequence* const> sequences) {
  return batch_from(model, sequences, false);
}

BranchOutputs forward(Tape& tape, CoreModel& model, const Batch& batch) {
  if (batch.target_rows.empty()) throw ContractViolation("forward: batch has no scoring targets");
  const Var q_all = model.encoder.encode(tape, batch.questions, batch.concepts);
  const Var i_all = model::encode_interaction(q_all, batch.correct);
  const auto states = model.backbone->unroll(tape, i_all, batch.steps, batch.size);
  const Var s_all = nd::concat_rows(states);
  const Var s = nd::gather_rows(s_all, batch.target_rows);
  const Var q = nd::gather_rows(q_all, batch.target_rows);

  BranchOutputs out;
  out.r_k = model.backbone->knowledge_logit(tape, s, q);
  if (model.config().variant == Variant::core) {
    out.r_s = model.student_branch.forward(tape, s);
    out.r_q = model.question_branch.forward(tape, q);
  } else {
    out.r_s = tape.constant(Matrix::Zero(out.r_k.rows(), 1));
    out.r_q = tape.constant(Matrix::Zero(out.r_k.rows(), 1));
  }
  return out;
}

Objective objectives(Tape& tape, CoreModel& model, const BranchOutputs& out, std::span<const int> labels,
                     ProbMode mode, bool with_q_loss) {
  if (static_cast<Index>(labels.size()) != out.r_k.rows()) {
    throw ContractViolation("objectives: label count does not match outputs");
  }
  Matrix lab(out.r_k.rows(), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ContractViolation("objectives: labels must be 0 or 1");
    lab(static_cast<Index>(i), 0) = labels[i];
  }
  const Var y = tape.constant(lab);

  Objective obj;
  if (model.config().variant == Variant::backbone_only) {
    obj.bce_sq = bce_from_logit(out.r_k, y);
    obj.bce_q = tape.constant(0.0);
    obj.step_a = obj.bce_sq;
    obj.kl = tape.constant(0.0);
    return obj;
  }

  const Var z = out.r_s + out.r_q + out.r_k;
  const Var u = mode == ProbMode::logit ? z : nd::log_sigmoid(z);
  obj.bce_sq = bce_from_logit(u, y);
  obj.bce_q = bce_from_logit(out.r_q, y);
  obj.step_a = with_q_loss ? obj.bce_sq + obj.bce_q : obj.bce_sq;

  // Counterfactual side: only p carries gradient.
  const Var two_p = nd::affine(tape.leaf(model.counterfactual_param()), 2.0, 0.0);
  const Var c = nd::detach(out.r_q) + two_p;
  const Var v = mode == ProbMode::logit ? c : nd::log_sigmoid(c);
  obj.kl = kl_from_logits(tape, u.value(), v);
  return obj;
}

TrainResult train(CoreModel& model, std::span<const corpus::LearningSequence> sequences, const TrainConfig& cfg,
                  const EpochCallback& on_epoch) {
  if (sequences.empty()) throw ContractViolation("train: empty training set");
  if (cfg.batch <= 0 || cfg.epochs <= 0 || !(cfg.lr > 0.0)) throw ConfigError("train: batch, epochs and lr must be positive");

  // Hold out whole students for early stopping.
  std::vector<std::string> students;
  {
    std::unordered_set<std::string> seen;
    for (const auto& s : sequences) {
      if (seen.insert(s.student_id).second) students.push_back(s.student_id);
    }
  }
  std::vector<corpus::LearningSequence> fit(sequences.begin(), sequences.end());
  std::vector<corpus::LearningSequence> validation;
  if (cfg.validation_fraction > 0.0 && students.size() >= 2) {
    const auto ids = corpus::split_students(students, 1.0 - cfg.validation_fraction, cfg.seed ^ 0x9E3779B97F4A7C15ULL);
    fit = corpus::select_students(sequences, ids.train);
    validation = corpus::select_students(sequences, ids.test);
  }

  std::vector<corpus::Interaction> fit_interactions;
  for (const auto& s : fit) fit_interactions.insert(fit_interactions.end(), s.interactions.begin(), s.interactions.end());
  model.set_seen(fit_interactions);

  const bool is_core = model.config().variant == Variant::core;
  if (cfg.fixed_p) model.counterfactual_param().value(0, 0) = *cfg.fixed_p;
  const bool learn_p = is_core && !cfg.fixed_p;

  nd::AdamOptions opt_a;
  opt_a.lr = cfg.lr;
  opt_a.max_grad_norm = cfg.max_grad_norm;
  nd::Adam adam_a(model.branch_parameters(), opt_a);
  nd::AdamOptions opt_b;
  opt_b.lr = cfg.lr;
  nd::Adam adam_b({&model.counterfactual_param()}, opt_b);

  std::vector<Tensor*> arrays = model.all_arrays();
  std::vector<Matrix> best_values;
  auto snapshot = [&] {
    best_values.clear();
    for (Tensor* t : arrays) best_values.push_back(t->value);
  };

  TrainResult result;
  result.best_val_auc = -1.0;
  Rng rng(cfg.seed);
  std::vector<const corpus::LearningSequence*> order;
  for (const auto& s : fit) order.push_back(&s);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle(std::span<const corpus::LearningSequence*>(order), rng);
    double loss_a = 0.0;
    double loss_kl = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0, bi = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch), ++bi) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      const Batch batch = make_batch(model, std::span(order).subspan(start, end - start));
      if (batch.target_rows.empty()) continue;

      Tape tape;
      const BranchOutputs out = forward(tape, model, batch);
      const Objective obj = objectives(tape, model, out, batch.target_labels, cfg.mode, !cfg.no_q_loss);
      const double a = obj.step_a.item();
      const double k = obj.kl.item();
      if (!std::isfinite(a) || !std::isfinite(k)) {
        throw NumericalError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                             std::to_string(bi));
      }
      adam_a.zero_grad();
      tape.backward(obj.step_a);
      adam_a.step();
      if (learn_p) {
        adam_b.zero_grad();
        tape.backward(obj.kl);
        adam_b.step();
      }
      loss_a += a;
      loss_kl += k;
      ++n_batches;
    }

    EpochLog log;
    log.epoch = epoch;
    log.loss_a = n_batches ? loss_a / static_cast<double>(n_batches) : 0.0;
    log.loss_kl = n_batches ? loss_kl / static_cast<double>(n_batches) : 0.0;
    log.p = model.p();
    log.val_auc = std::nan("");
    if (!validation.empty()) {
      // The validation students share the training bias, so the debiased score
      // would be penalized for the very effect it removes; track the fit instead.
      const auto scored = to_scored(predict_all(model, validation, cfg.batch), true);
      const bool both = std::any_of(scored.begin(), scored.end(), [](const auto& s) { return s.label == 1; }) &&
                        std::any_of(scored.begin(), scored.end(), [](const auto& s) { return s.label == 0; });
      if (both) log.val_auc = eval::auc(scored);
    }
    result.history.push_back(log);
    if (on_epoch) on_epoch(log);

    if (std::isnan(log.val_auc)) {
      result.best_epoch = epoch;
      snapshot();
      continue;
    }
    if (log.val_auc > result.best_val_auc) {
      result.best_val_auc = log.val_auc;
      result.best_epoch = epoch;
      snapshot();
    } else if (epoch - result.best_epoch >= cfg.patience) {
      break;
    }
  }

  for (std::size_t i = 0; i < arrays.size(); ++i) arrays[i]->value = best_values[i];
  if (!validation.empty()) {
    result.calibrated_threshold = eval::calibrate_threshold(to_scored(predict_all(model, validation, cfg.batch), false));
  }
  return result;
}

std::vector<PredictionRecord> predict_all(CoreModel& model, std::span<const corpus::LearningSequence> sequences,
                                          Index batch) {
  std::vector<PredictionRecord> out;
  std::vector<const corpus::LearningSequence*> ptrs;
  for (const auto& s : sequences) ptrs.push_back(&s);
  for (std::size_t start = 0; start < ptrs.size(); start += static_cast<std::size_t>(batch)) {
    const std::size_t end = std::min(ptrs.size(), start + static_cast<std::size_t>(batch));
    const Batch b = make_batch(model, std::span(ptrs).subspan(start, end - start));
    if (b.target_rows.empty()) continue;
    Tape tape;
    auto recs = records_from(forward(tape, model, b), b, model.p());
    out.insert(out.end(), std::make_move_iterator(recs.begin()), std::make_move_iterator(recs.end()));
  }
  return out;
}

PredictionRecord predict(CoreModel& model, std::span<const corpus::Interaction> history,
                         const corpus::Interaction& target) {
  corpus::LearningSequence seq;
  seq.student_id = target.student_id;
  seq.interactions.assign(history.begin(), history.end());
  seq.interactions.push_back(target);
  const corpus::LearningSequence* ptr[] = {&seq};
  Batch b = batch_from(model, ptr, true);
  const std::size_t last = b.target_rows.size() - 1;
  b.target_rows = {b.target_rows[last]};
  b.target_labels = {b.target_labels[last]};
  b.target_refs = {b.target_refs[last]};
  Tape tape;
  auto recs = records_from(forward(tape, model, b), b, model.p());
  return recs.front();
}

const char* to_string(InferenceMode m) { return m == InferenceMode::debiased ? "debiased" : "te"; }

InferenceMode inference_mode_from_string(const std::string& s) {
  if (s == "debiased" || s == "te-nde") return InferenceMode::debiased;
  if (s == "te" || s == "te_only" || s == "total") return InferenceMode::total_effect;
  throw ConfigError("unknown inference mode '" + s + "' (expected debiased or te)");
}

double inference_score(const PredictionRecord& r, InferenceMode mode) {
  return mode == InferenceMode::debiased ? r.debiased : r.factual;
}

double default_threshold(InferenceMode mode) { return mode == InferenceMode::debiased ? 0.0 : -M_LN2; }

void write_records(std::ostream& out, std::span<const PredictionRecord> records) {
  out << "student_id,step,question_id,label,R_s,R_q,R_k,factual,counterfactual,debiased\n";
  char buf[256];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.r_s, r.r_q, r.r_k, r.factual,
                  r.counterfactual, r.debiased);
    out << r.student_id << ',' << r.step << ',' << r.question << ',' << r.label << ',' << buf << '\n';
  }
}

}  // namespace kt::core
