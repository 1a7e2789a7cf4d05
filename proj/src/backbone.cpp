#include "kt/backbone.hpp"

#include <cmath>

#include "kt/error.hpp"

namespace kt::model {

Matrix uniform_init(Index rows, Index cols, Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng, -bound, bound);
  return m;
}

Mlp2::Mlp2(const std::string& name, Index in, Index hidden, Rng& rng)
    : w1(name + ".w1", uniform_init(in, hidden, in, rng)),
      b1(name + ".b1", Matrix::Zero(1, hidden)),
      w2(name + ".w2", uniform_init(hidden, 1, hidden, rng)),
      b2(name + ".b2", Matrix::Zero(1, 1)) {}

Var Mlp2::forward(Tape& tape, const Var& x) { return forward(tape, x, nullptr); }

Var Mlp2::forward(Tape& tape, const Var& x, Var* hidden) {
  Var h = nd::tanh(nd::matmul(x, tape.leaf(w1)) + tape.leaf(b1));
  if (hidden) *hidden = h;
  return nd::matmul(h, tape.leaf(w2)) + tape.leaf(b2);
}

QuestionEncoder::QuestionEncoder(Index n_questions, Index n_concepts, Index d, Rng& rng)
    : question_table("encoder.question", uniform_init(n_questions + 1, d, d, rng)),
      concept_table("encoder.concept", uniform_init(n_concepts + 1, d, d, rng)),
      d_(d) {}

Var QuestionEncoder::encode(Tape& tape, std::span<const Index> questions,
                            std::span<const std::vector<Index>> concepts) {
  if (questions.size() != concepts.size()) {
    throw ContractViolation("encode: question and concept lists differ in length");
  }
  const Var eq = nd::gather_rows(tape.leaf(question_table), questions);
  const Var ec = nd::bag_mean_rows(tape.leaf(concept_table), concepts);
  const Var parts[] = {eq, ec};
  return nd::concat_cols(parts);
}

Var encode_interaction(const Var& q, std::span<const int> correct) {
  if (static_cast<Index>(correct.size()) != q.rows()) {
    throw ContractViolation("encode_interaction: label count does not match rows");
  }
  Matrix mask(q.rows(), 1);
  for (Index i = 0; i < q.rows(); ++i) {
    const int r = correct[static_cast<std::size_t>(i)];
    if (r != 0 && r != 1) throw ContractViolation("encode_interaction: correct must be 0 or 1");
    mask(i, 0) = r;
  }
  Tape& tape = *q.tape();
  const Var m = tape.constant(mask);
  const Var parts[] = {nd::mul(q, m), nd::mul(q, nd::one_minus(m))};
  return nd::concat_cols(parts);
}

GruBackbone::GruBackbone(Index d, Rng& rng)
    : input_weight("gru.input_weight", uniform_init(4 * d, 3 * d, 4 * d, rng)),
      input_bias("gru.input_bias", Matrix::Zero(1, 3 * d)),
      recurrent_weight("gru.recurrent_weight", uniform_init(d, 3 * d, d, rng)),
      recurrent_bias("gru.recurrent_bias", Matrix::Zero(1, 3 * d)),
      head("knowledge_head", 3 * d, d, rng),
      d_(d) {}

std::vector<Var> GruBackbone::unroll(Tape& tape, const Var& interactions, Index steps, Index batch) {
  if (interactions.cols() != 4 * d_ || interactions.rows() != steps * batch) {
    throw ContractViolation("unroll: expected a (steps*batch) x 4d interaction matrix");
  }
  std::vector<Var> states;
  states.reserve(static_cast<std::size_t>(steps));
  Var h = tape.constant(Matrix::Zero(batch, d_));
  states.push_back(h);
  if (steps <= 1) return states;

  // Only interactions 0..steps-2 feed a state that is read.
  const Var x_all = nd::matmul(nd::slice_rows(interactions, 0, (steps - 1) * batch), tape.leaf(input_weight)) +
                    tape.leaf(input_bias);
  const Var u_weight = tape.leaf(recurrent_weight);
  const Var u_bias = tape.leaf(recurrent_bias);
  for (Index t = 0; t + 1 < steps; ++t) {
    const Var x = nd::slice_rows(x_all, t * batch, batch);
    const Var hh = nd::matmul(h, u_weight) + u_bias;
    const Var gates = nd::sigmoid(nd::slice_cols(x, 0, 2 * d_) + nd::slice_cols(hh, 0, 2 * d_));
    const Var reset = nd::slice_cols(gates, 0, d_);
    const Var update = nd::slice_cols(gates, d_, d_);
    const Var cand = nd::tanh(nd::slice_cols(x, 2 * d_, d_) + reset * nd::slice_cols(hh, 2 * d_, d_));
    h = cand + update * (h - cand);
    states.push_back(h);
  }
  return states;
}

Var GruBackbone::knowledge_logit(Tape& tape, const Var& s, const Var& q) {
  if (s.cols() != d_ || q.cols() != 2 * d_ || s.rows() != q.rows()) {
    throw ContractViolation("knowledge_logit: expected s: N x d and q: N x 2d");
  }
  const Var parts[] = {s, q};
  return head.forward(tape, nd::concat_cols(parts));
}

std::vector<Tensor*> GruBackbone::parameters() {
  std::vector<Tensor*> p{&input_weight, &input_bias, &recurrent_weight, &recurrent_bias};
  for (Tensor* t : head.parameters()) p.push_back(t);
  return p;
}

}  // namespace kt::model
