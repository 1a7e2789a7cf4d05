#include <doctest.h>

#include <cmath>
#include <sstream>

#include "kt/core.hpp"
#include "kt/error.hpp"
#include "kt/nd/grad_check.hpp"
#include "kt/nd/ops.hpp"
#include "kt/synthgen.hpp"

using namespace kt;
using namespace kt::core;

namespace {

constexpr double kLn2 = 0.69314718055994530942;

std::vector<corpus::LearningSequence> random_sequences(Rng& rng, std::size_t n, std::size_t len, std::int64_t n_q,
                                                       std::int64_t n_c) {
  std::vector<corpus::LearningSequence> out(n);
  std::size_t row = 0;
  for (std::size_t s = 0; s < n; ++s) {
    out[s].student_id = "u" + std::to_string(s);
    for (std::size_t t = 0; t < len; ++t) {
      corpus::Interaction it;
      it.student_id = out[s].student_id;
      it.question = static_cast<std::int64_t>(uniform_index(rng, static_cast<std::size_t>(n_q)));
      it.concepts = {it.question % n_c};
      it.correct = bernoulli(rng, 0.6) ? 1 : 0;
      it.step = static_cast<std::int64_t>(t);
      it.row = row++;
      out[s].interactions.push_back(it);
    }
  }
  return out;
}

ModelConfig small(Variant v = Variant::core) {
  ModelConfig cfg;
  cfg.d = 4;
  cfg.branch_hidden = 3;
  cfg.variant = v;
  cfg.seed = 42;
  return cfg;
}

std::vector<const corpus::LearningSequence*> pointers(const std::vector<corpus::LearningSequence>& seqs) {
  std::vector<const corpus::LearningSequence*> out;
  for (const auto& s : seqs) out.push_back(&s);
  return out;
}

void zero_out(model::Mlp2& m) {
  m.w2.value.setZero();
  m.b2.value.setZero();
}

}  // namespace

TEST_CASE("fusion examples") {
  CHECK(fuse(0, 0, 0) == doctest::Approx(-kLn2).epsilon(1e-15));
  CHECK(std::abs(fuse(1, 2, 1) - -0.018149) <= 1e-6);
  CHECK(fuse(1, 2, 1) == nd::log_sigmoid(4.0));
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const double a = uniform(rng, -5, 5), b = uniform(rng, -5, 5), c = uniform(rng, -5, 5);
    const double bump = uniform(rng, 0.01, 1.0);
    CHECK(fuse(a + bump, b, c) > fuse(a, b, c));
    CHECK(fuse(a, b + bump, c) > fuse(a, b, c));
    CHECK(fuse(a, b, c + bump) > fuse(a, b, c));
  }
}

TEST_CASE("counterfactual examples") {
  CHECK(counterfactual_fuse(0, 0) == doctest::Approx(-kLn2).epsilon(1e-15));
  CHECK(std::abs(counterfactual_fuse(0, 2) - -0.126928) <= 1e-6);
  CHECK(counterfactual_fuse(0.5, 1.0) == nd::log_sigmoid(2.0));
}

TEST_CASE("debiased score examples") {
  const PredictionRecord r = make_record(1, 2, 1, 0);
  CHECK(std::abs(r.debiased - 0.108779) <= 1e-6);
  CHECK(r.debiased == nd::log_sigmoid(4.0) - nd::log_sigmoid(2.0));
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const double p = uniform(rng, -3, 3), rq = uniform(rng, -3, 3);
    CHECK(make_record(p, rq, p, p).debiased == 0.0);
  }
}

TEST_CASE("shifting the question logit keeps the debiased ordering of two students") {
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    const double p = uniform(rng, -2, 2), rq = uniform(rng, -4, 4), shift = uniform(rng, -4, 4);
    const double a = uniform(rng, -4, 4), b = uniform(rng, -4, 4);  // each student's R_s + R_k
    if (std::abs(a - b) < 1e-6) continue;
    const bool before = make_record(a, rq, 0, p).debiased > make_record(b, rq, 0, p).debiased;
    const bool after = make_record(a, rq + shift, 0, p).debiased > make_record(b, rq + shift, 0, p).debiased;
    CHECK(before == after);
    CHECK(before == (a > b));
  }
}

TEST_CASE("loss examples") {
  const PredictionRecord zero = make_record(0, 0, 0, 0);
  const LossValues one = losses(zero, 1, ProbMode::logit);
  CHECK(one.bce_sq == doctest::Approx(kLn2).epsilon(1e-15));
  CHECK(one.bce_q == doctest::Approx(kLn2).epsilon(1e-15));
  CHECK(losses(zero, 0, ProbMode::logit).bce_q == doctest::Approx(kLn2).epsilon(1e-15));
  CHECK(std::abs(one.kl) <= 1e-15);

  // Equal probabilities on both sides: R_s = R_k = p.
  for (ProbMode m : {ProbMode::logit, ProbMode::literal}) {
    CHECK(std::abs(losses(make_record(0.3, -1.2, 0.3, 0.3), 1, m).kl) <= 1e-12);
    CHECK(losses(make_record(2.0, -1.2, 0.3, 0.0), 0, m).kl > 0.0);
  }
  CHECK_THROWS_AS(losses(zero, 2, ProbMode::logit), ContractViolation);
}

TEST_CASE("literal mode reads the fused score as a logit") {
  const PredictionRecord r = make_record(0.5, 0.25, -1.0, 0.1);
  const LossValues v = losses(r, 1, ProbMode::literal);
  CHECK(v.bce_sq == doctest::Approx(-std::log(1.0 / (1.0 + std::exp(-r.factual)))).epsilon(1e-14));
  // sigma(log sigma(z)) never exceeds 1/2, so a correct label costs at least ln 2.
  CHECK(v.bce_sq >= kLn2);
}

TEST_CASE("the KL objective only reaches p") {
  Rng rng(4);
  auto seqs = random_sequences(rng, 3, 5, 6, 3);
  CoreModel model(6, 3, small());
  model.counterfactual_param().value(0, 0) = 0.3;
  const auto ptrs = pointers(seqs);
  const Batch batch = make_batch(model, ptrs);
  Tape tape;
  const BranchOutputs out = forward(tape, model, batch);
  const Objective obj = objectives(tape, model, out, batch.target_labels, ProbMode::logit, true);
  for (Tensor* t : model.all_arrays()) t->grad.resize(0, 0);
  tape.backward(obj.kl);
  for (Tensor* t : model.branch_parameters()) {
    INFO(t->name);
    CHECK((!t->has_grad() || t->grad.isZero(0.0)));
  }
  REQUIRE(model.counterfactual_param().has_grad());
  CHECK(model.counterfactual_param().grad(0, 0) != 0.0);
}

TEST_CASE("the KL objective matches the per-record losses") {
  Rng rng(5);
  auto seqs = random_sequences(rng, 2, 4, 6, 3);
  CoreModel model(6, 3, small());
  model.counterfactual_param().value(0, 0) = -0.4;
  const auto ptrs = pointers(seqs);
  const Batch batch = make_batch(model, ptrs);
  for (ProbMode mode : {ProbMode::logit, ProbMode::literal}) {
    Tape tape;
    const BranchOutputs out = forward(tape, model, batch);
    const Objective obj = objectives(tape, model, out, batch.target_labels, mode, true);
    double kl = 0.0, bce_sq = 0.0, bce_q = 0.0;
    const auto n = static_cast<Index>(batch.target_labels.size());
    for (Index i = 0; i < n; ++i) {
      const auto rec = make_record(out.r_s.value()(i, 0), out.r_q.value()(i, 0), out.r_k.value()(i, 0), model.p());
      const auto v = losses(rec, batch.target_labels[static_cast<std::size_t>(i)], mode);
      kl += v.kl / static_cast<double>(n);
      bce_sq += v.bce_sq / static_cast<double>(n);
      bce_q += v.bce_q / static_cast<double>(n);
    }
    CHECK(obj.kl.item() == doctest::Approx(kl).epsilon(1e-12));
    CHECK(obj.bce_sq.item() == doctest::Approx(bce_sq).epsilon(1e-12));
    CHECK(obj.bce_q.item() == doctest::Approx(bce_q).epsilon(1e-12));
    CHECK(obj.step_a.item() == doctest::Approx(bce_sq + bce_q).epsilon(1e-12));
  }
}

TEST_CASE("step-A objective passes grad_check on a two-interaction toy") {
  Rng rng(6);
  auto seqs = random_sequences(rng, 1, 2, 3, 2);
  seqs[0].interactions[1].correct = 1;
  for (ProbMode mode : {ProbMode::logit, ProbMode::literal}) {
    CoreModel model(3, 2, small());
    const auto ptrs = pointers(seqs);
    const Batch batch = make_batch(model, ptrs);
    REQUIRE(batch.target_rows.size() == 1);
    const auto params = model.branch_parameters();
    const auto r = nd::grad_check(params, [&](Tape& tape) {
      return objectives(tape, model, forward(tape, model, batch), batch.target_labels, mode, true).step_a;
    });
    INFO(to_string(mode));
    CHECK(r.max_relative_error < 1e-4);
  }
}

TEST_CASE("KL objective passes grad_check in p") {
  Rng rng(7);
  auto seqs = random_sequences(rng, 2, 3, 3, 2);
  CoreModel model(3, 2, small());
  model.counterfactual_param().value(0, 0) = 0.7;
  const auto ptrs = pointers(seqs);
  const Batch batch = make_batch(model, ptrs);
  Tensor* params[] = {&model.counterfactual_param()};
  for (ProbMode mode : {ProbMode::logit, ProbMode::literal}) {
    const auto r = nd::grad_check(params, [&](Tape& tape) {
      return objectives(tape, model, forward(tape, model, batch), batch.target_labels, mode, true).kl;
    });
    CHECK(r.max_relative_error < 1e-4);
  }
}

TEST_CASE("records obey the counterfactual algebra bit for bit") {
  Rng rng(8);
  auto seqs = random_sequences(rng, 7, 9, 8, 3);
  CoreModel model(8, 3, small());
  model.counterfactual_param().value(0, 0) = -0.25;
  const auto recs = predict_all(model, seqs, 3);
  REQUIRE(recs.size() == 7 * 8);
  for (const auto& r : recs) {
    CHECK(r.debiased == r.factual - r.counterfactual);
    CHECK(r.debiased == debiased_score(r));
    CHECK(r.factual <= 0.0);
    CHECK(r.counterfactual <= 0.0);
    CHECK(std::isfinite(r.factual));
    CHECK(std::isfinite(r.counterfactual));
  }
  // Input order: by sequence, then by time, skipping each first interaction.
  CHECK(recs.front().row == seqs[0].interactions[1].row);
  CHECK(recs.back().row == seqs[6].interactions[8].row);
}

TEST_CASE("silent student and knowledge branches cancel the bias exactly") {
  Rng rng(9);
  auto seqs = random_sequences(rng, 4, 6, 5, 2);
  CoreModel model(5, 2, small());
  zero_out(model.student_branch);
  auto& gru = dynamic_cast<model::GruBackbone&>(*model.backbone);
  zero_out(gru.head);
  for (const auto& r : predict_all(model, seqs)) {
    CHECK(r.r_q != 0.0);
    CHECK(r.debiased == 0.0);
  }
  for (Tensor* t : model.all_arrays()) t->value.setZero();
  for (const auto& r : predict_all(model, seqs)) CHECK(r.debiased == 0.0);
}

TEST_CASE("predict handles empty histories and is pure") {
  Rng rng(10);
  auto seqs = random_sequences(rng, 1, 6, 5, 2);
  CoreModel model(5, 2, small());
  const auto& its = seqs[0].interactions;
  const PredictionRecord first = predict(model, {}, its[0]);
  const PredictionRecord again = predict(model, {}, its[0]);
  CHECK(first.debiased == again.debiased);
  CHECK(first.r_s == again.r_s);

  const PredictionRecord late = predict(model, std::span(its).first(5), its[5]);
  const auto all = predict_all(model, seqs);
  CHECK(late.factual == doctest::Approx(all.back().factual).epsilon(1e-12));
}

TEST_CASE("questions without training data share the cold row") {
  Rng rng(11);
  auto seqs = random_sequences(rng, 3, 4, 2, 1);  // questions 0 and 1 only
  CoreModel model(6, 1, small());
  std::vector<corpus::Interaction> seen;
  for (const auto& s : seqs) seen.insert(seen.end(), s.interactions.begin(), s.interactions.end());
  model.set_seen(seen);
  CHECK(model.question_row(4) == model.encoder.cold_question());
  CHECK(model.question_row(5) == model.encoder.cold_question());
  CHECK(model.question_row(-1) == model.encoder.cold_question());
  CHECK(model.question_row(1) == 1);
  corpus::Interaction a = seqs[0].interactions[0];
  corpus::Interaction b = a;
  a.question = 4;
  b.question = 5;
  const auto history = std::span(seqs[0].interactions).first(3);
  CHECK(predict(model, history, a).r_q == predict(model, history, b).r_q);
}

TEST_CASE("backbone-only variant has no question or student branch") {
  Rng rng(12);
  auto seqs = random_sequences(rng, 3, 5, 5, 2);
  CoreModel model(5, 2, small(Variant::backbone_only));
  for (const auto& r : predict_all(model, seqs)) {
    CHECK(r.r_s == 0.0);
    CHECK(r.r_q == 0.0);
  }
  for (Tensor* t : model.student_branch.parameters()) {
    for (Tensor* u : model.branch_parameters()) CHECK(t != u);
  }
}

TEST_CASE("training flags switch the ablations") {
  Rng rng(13);
  auto seqs = random_sequences(rng, 30, 8, 6, 3);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch = 8;
  cfg.lr = 0.01;

  SUBCASE("full configuration moves p") {
    CoreModel model(6, 3, small());
    train(model, seqs, cfg);
    CHECK(model.p() != 0.0);
  }
  SUBCASE("fixed p skips the KL step") {
    CoreModel model(6, 3, small());
    cfg.fixed_p = 0.0;
    const auto result = train(model, seqs, cfg);
    CHECK(model.p() == 0.0);
    CHECK(result.history.size() == 3);
  }
  SUBCASE("no_q_loss drops the question term") {
    CoreModel model(6, 3, small());
    const auto ptrs = pointers(seqs);
    const Batch batch = make_batch(model, ptrs);
    Tape tape;
    const Objective obj = objectives(tape, model, forward(tape, model, batch), batch.target_labels,
                                     ProbMode::logit, false);
    CHECK(obj.step_a.item() == obj.bce_sq.item());
  }
  SUBCASE("backbone-only keeps p at zero") {
    CoreModel model(6, 3, small(Variant::backbone_only));
    train(model, seqs, cfg);
    CHECK(model.p() == 0.0);
  }
}

TEST_CASE("total-effect inference reads the factual score") {
  const PredictionRecord r = make_record(0.2, 0.4, -0.1, 0.3);
  CHECK(inference_score(r, InferenceMode::total_effect) == r.factual);
  CHECK(inference_score(r, InferenceMode::debiased) == r.debiased);
  CHECK(default_threshold(InferenceMode::debiased) == 0.0);
  CHECK(default_threshold(InferenceMode::total_effect) == doctest::Approx(-kLn2).epsilon(1e-15));
  CHECK(inference_mode_from_string("te") == InferenceMode::total_effect);
  CHECK_THROWS_AS(inference_mode_from_string("bogus"), ConfigError);
}

TEST_CASE("divergence aborts with the epoch and batch") {
  Rng rng(14);
  auto seqs = random_sequences(rng, 10, 5, 4, 2);
  CoreModel model(4, 2, small());
  model.encoder.question_table.value(0, 0) = std::nan("");
  TrainConfig cfg;
  cfg.epochs = 2;
  try {
    train(model, seqs, cfg);
    FAIL("training accepted a non-finite loss");
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epoch 1") != std::string::npos);
    CHECK(msg.find("batch 0") != std::string::npos);
  }
}

TEST_CASE("training restores the best epoch and reports a finite history") {
  Rng rng(15);
  auto seqs = random_sequences(rng, 40, 10, 6, 3);
  CoreModel model(6, 3, small());
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.patience = 2;
  cfg.batch = 16;
  cfg.lr = 0.01;
  std::vector<EpochLog> seen;
  const TrainResult result = train(model, seqs, cfg, [&](const EpochLog& log) { seen.push_back(log); });
  CHECK(seen.size() == result.history.size());
  CHECK(result.best_epoch >= 1);
  CHECK(result.best_epoch <= static_cast<int>(result.history.size()));
  for (const auto& log : result.history) {
    CHECK(std::isfinite(log.loss_a));
    CHECK(std::isfinite(log.val_auc));
  }
  CHECK(result.best_val_auc == result.history[static_cast<std::size_t>(result.best_epoch - 1)].val_auc);
}

TEST_CASE("a trained model scores mastered students above unmastered ones on easy questions") {
  synth::SynthConfig sc;
  sc.n_students = 150;
  sc.n_questions = 15;
  sc.n_concepts = 5;
  sc.seq_len = 30;
  sc.difficulty_spread = 0.4;
  sc.seed = 3;
  const synth::SynthResult data = synth::generate(sc);
  const auto seqs = corpus::build_sequences(data.interactions);

  ModelConfig mc;
  mc.d = 16;
  mc.branch_hidden = 16;
  CoreModel model(static_cast<Index>(sc.n_questions), static_cast<Index>(sc.n_concepts), mc);
  TrainConfig tc;
  tc.epochs = 25;
  tc.batch = 32;
  tc.lr = 0.01;
  tc.validation_fraction = 0.0;
  train(model, seqs, tc);

  double sum_mastered = 0.0, sum_unmastered = 0.0;
  int n_mastered = 0, n_unmastered = 0;
  for (const auto& r : predict_all(model, seqs)) {
    const auto& truth = data.truth[r.row];
    if (data.questions[static_cast<std::size_t>(truth.question)].offset <= 0.0) continue;
    if (truth.mastered_fraction == 1.0) {
      sum_mastered += r.debiased;
      ++n_mastered;
    } else if (truth.mastered_fraction == 0.0) {
      sum_unmastered += r.debiased;
      ++n_unmastered;
    }
  }
  REQUIRE(n_mastered > 50);
  REQUIRE(n_unmastered > 50);
  CHECK(sum_mastered / n_mastered > sum_unmastered / n_unmastered);
}

TEST_CASE("records export with the documented header") {
  std::ostringstream out;
  PredictionRecord r = make_record(0.5, -0.5, 0.25, 0.0);
  r.student_id = "s1";
  r.step = 3;
  r.question = 7;
  r.label = 1;
  const PredictionRecord recs[] = {r};
  write_records(out, recs);
  std::istringstream in(out.str());
  std::string header, line;
  std::getline(in, header);
  std::getline(in, line);
  CHECK(header == "student_id,step,question_id,label,R_s,R_q,R_k,factual,counterfactual,debiased");
  CHECK(line.rfind("s1,3,7,1,0.5,-0.5,0.25,", 0) == 0);
}
