#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kt/nd/ops.hpp"
#include "kt/random.hpp"

namespace kt::model {

using nd::Index;
using nd::Matrix;
using nd::Tape;
using nd::Tensor;
using nd::Var;

/// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
Matrix uniform_init(Index rows, Index cols, Index fan_in, Rng& rng);

/// Two-layer perceptron with a tanh hidden layer and a scalar output.
struct Mlp2 {
  Tensor w1, b1, w2, b2;

  Mlp2() = default;
  Mlp2(const std::string& name, Index in, Index hidden, Rng& rng);

  /// x: N x in  ->  N x 1
  Var forward(Tape& tape, const Var& x);
  /// Also returns the hidden activations (N x hidden).
  Var forward(Tape& tape, const Var& x, Var* hidden);
  std::vector<Tensor*> parameters() { return {&w1, &b1, &w2, &b2}; }
};

/// Question and concept embedding tables. Each table carries one extra
/// trailing row reserved for ids never seen in training.
class QuestionEncoder {
 public:
  QuestionEncoder() = default;
  QuestionEncoder(Index n_questions, Index n_concepts, Index d, Rng& rng);

  Index d() const { return d_; }
  Index cold_question() const { return question_table.value.rows() - 1; }
  Index cold_concept() const { return concept_table.value.rows() - 1; }

  /// Rows e_q (+) mean(e_c), N x 2d.
  Var encode(Tape& tape, std::span<const Index> questions, std::span<const std::vector<Index>> concepts);

  std::vector<Tensor*> parameters() { return {&question_table, &concept_table}; }

  Tensor question_table;
  Tensor concept_table;

 private:
  Index d_ = 0;
};

/// Interaction encoding: q (+) 0 for a correct answer, 0 (+) q otherwise.
Var encode_interaction(const Var& q, std::span<const int> correct);

/// Sequence encoder for the student-question branch. Inputs are time-major:
/// row t * batch + b holds interaction t of sequence b.
class Backbone {
 public:
  virtual ~Backbone() = default;

  /// Returns `steps` states of shape batch x d. State t summarizes
  /// interactions 0..t-1; state 0 is the zero vector.
  virtual std::vector<Var> unroll(Tape& tape, const Var& interactions, Index steps, Index batch) = 0;

  /// Scalar logit R_k for each row of s (N x d) against q (N x 2d).
  virtual Var knowledge_logit(Tape& tape, const Var& s, const Var& q) = 0;

  virtual std::vector<Tensor*> parameters() = 0;
  virtual std::string kind() const = 0;
};

/// Gated recurrent cell with a tanh candidate, followed by a two-layer
/// knowledge head on s (+) q:
///   r = sig(x W_r + h U_r + b_r),  u = sig(x W_u + h U_u + b_u)
///   n = tanh(x W_n + b_n + r * (h U_n + c_n)),  h' = n + u * (h - n)
class GruBackbone final : public Backbone {
 public:
  GruBackbone(Index d, Rng& rng);

  std::vector<Var> unroll(Tape& tape, const Var& interactions, Index steps, Index batch) override;
  Var knowledge_logit(Tape& tape, const Var& s, const Var& q) override;
  std::vector<Tensor*> parameters() override;
  std::string kind() const override { return "gru"; }

  Index d() const { return d_; }

  Tensor input_weight;      // 4d x 3d, gate order [reset, update, candidate]
  Tensor input_bias;        // 1 x 3d
  Tensor recurrent_weight;  // d x 3d
  Tensor recurrent_bias;    // 1 x 3d
  Mlp2 head;                // (d + 2d) -> 1, hidden d

 private:
  Index d_;
};

}  // namespace kt::model
