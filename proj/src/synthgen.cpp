#include "kt/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "kt/error.hpp"
#include "kt/random.hpp"

namespace kt::synth {
namespace {

constexpr std::uint64_t kQuestionStream = 0xC0FFEEULL;
/// Log-odds shift at difficulty_spread 1; odds move by a factor of about 400.
constexpr double kMaxOffset = 6.0;

std::vector<SynthQuestion> make_questions(const SynthConfig& cfg) {
  Rng rng = derive_rng(cfg.seed, kQuestionStream);
  std::vector<SynthQuestion> qs(cfg.n_questions);
  std::vector<std::int64_t> pool(cfg.n_concepts);
  for (std::size_t c = 0; c < cfg.n_concepts; ++c) pool[c] = static_cast<std::int64_t>(c);
  const std::size_t max_k = std::min(cfg.concepts_per_question, cfg.n_concepts);
  for (auto& q : qs) {
    const std::size_t k = 1 + uniform_index(rng, max_k);
    shuffle(std::span<std::int64_t>(pool), rng);
    q.concepts.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(q.concepts.begin(), q.concepts.end());
    // The unit draw is taken regardless of family so both families share the
    // concept assignment for a given seed.
    const double u = uniform(rng, -1.0, 1.0);
    const double reach = cfg.difficulty_spread * kMaxOffset;
    q.offset = cfg.family == DifficultyFamily::uniform ? reach * u : (u < 0.0 ? -reach : reach);
  }
  return qs;
}

struct Step {
  std::int64_t question;
  double mastered;
};

/// Mastery trajectory of one student: question sequence plus the learned
/// fraction of each question's concepts at the moment it is answered.
std::vector<Step> trajectory(const SynthConfig& cfg, const std::vector<SynthQuestion>& qs, std::size_t student) {
  Rng rng = derive_rng(cfg.seed, 2 * static_cast<std::uint64_t>(student));
  const double prior =
      std::clamp(cfg.prior_mastery + uniform(rng, -cfg.ability_spread, cfg.ability_spread), 0.0, 1.0);
  std::vector<char> learned(cfg.n_concepts);
  for (auto& l : learned) l = bernoulli(rng, prior) ? 1 : 0;

  std::vector<Step> steps;
  steps.reserve(cfg.seq_len);
  for (std::size_t t = 0; t < cfg.seq_len; ++t) {
    const auto q = static_cast<std::int64_t>(uniform_index(rng, cfg.n_questions));
    const auto& concepts = qs[static_cast<std::size_t>(q)].concepts;
    double m = 0.0;
    for (auto c : concepts) m += learned[static_cast<std::size_t>(c)];
    steps.push_back({q, m / static_cast<double>(concepts.size())});
    for (auto c : concepts) {
      auto& l = learned[static_cast<std::size_t>(c)];
      if (!l && bernoulli(rng, cfg.learn_rate_of(static_cast<std::size_t>(c)))) l = 1;
    }
  }
  return steps;
}

std::string student_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%05zu", i);
  return buf;
}

}  // namespace

void SynthConfig::validate() const {
  if (n_students == 0 || n_questions == 0 || n_concepts == 0 || seq_len == 0) {
    throw ConfigError("synth: students, questions, concepts and seq_len must be positive");
  }
  if (concepts_per_question == 0) throw ConfigError("synth: concepts_per_question must be >= 1");
  if (learn_rate.size() != 1 && learn_rate.size() != n_concepts) {
    throw ConfigError("synth: learn_rate needs 1 or n_concepts entries");
  }
  for (double r : learn_rate) {
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("synth: learn_rate outside [0, 1]");
  }
  if (!(prior_mastery >= 0.0 && prior_mastery <= 1.0)) throw ConfigError("synth: prior_mastery outside [0, 1]");
  if (!(ability_spread >= 0.0 && ability_spread <= 1.0)) throw ConfigError("synth: ability_spread outside [0, 1]");
  if (!(guess >= 0.0 && guess < 1.0)) throw ConfigError("synth: guess outside [0, 1)");
  if (!(slip >= 0.0 && slip < 1.0)) throw ConfigError("synth: slip outside [0, 1)");
  if (!(1.0 - slip > guess)) throw ConfigError("synth: need 1 - slip > guess so mastery helps");
  if (!(difficulty_spread >= 0.0 && difficulty_spread <= 1.0)) {
    throw ConfigError("synth: difficulty_spread outside [0, 1]");
  }
}

double SynthConfig::learn_rate_of(std::size_t concept_index) const {
  return learn_rate.size() == 1 ? learn_rate[0] : learn_rate.at(concept_index);
}

nlohmann::json to_json(const SynthConfig& cfg) {
  return nlohmann::json{{"n_students", cfg.n_students},
                        {"n_questions", cfg.n_questions},
                        {"n_concepts", cfg.n_concepts},
                        {"seq_len", cfg.seq_len},
                        {"concepts_per_question", cfg.concepts_per_question},
                        {"learn_rate", cfg.learn_rate},
                        {"prior_mastery", cfg.prior_mastery},
                        {"ability_spread", cfg.ability_spread},
                        {"guess", cfg.guess},
                        {"slip", cfg.slip},
                        {"difficulty_spread", cfg.difficulty_spread},
                        {"family", cfg.family == DifficultyFamily::uniform ? "uniform" : "two_point"},
                        {"seed", cfg.seed}};
}

SynthConfig config_from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.n_students = j.at("n_students");
  c.n_questions = j.at("n_questions");
  c.n_concepts = j.at("n_concepts");
  c.seq_len = j.at("seq_len");
  c.concepts_per_question = j.at("concepts_per_question");
  c.learn_rate = j.at("learn_rate").get<std::vector<double>>();
  c.prior_mastery = j.at("prior_mastery");
  c.ability_spread = j.at("ability_spread");
  c.guess = j.at("guess");
  c.slip = j.at("slip");
  c.difficulty_spread = j.at("difficulty_spread");
  c.family = j.at("family") == "two_point" ? DifficultyFamily::two_point : DifficultyFamily::uniform;
  c.seed = j.at("seed");
  return c;
}

double answer_probability(const SynthConfig& cfg, double offset, double mastered) {
  const double base = cfg.guess + (1.0 - cfg.slip - cfg.guess) * mastered;
  // sigma(logit(base) + offset), written so that a base of exactly 0 or 1 stays put.
  const double up = base * std::exp(0.5 * offset);
  const double down = (1.0 - base) * std::exp(-0.5 * offset);
  return up / (up + down);
}

SynthResult generate(const SynthConfig& cfg) {
  cfg.validate();
  SynthResult out;
  out.questions = make_questions(cfg);
  out.interactions.reserve(cfg.n_students * cfg.seq_len);
  for (std::size_t s = 0; s < cfg.n_students; ++s) {
    const std::string name = student_name(s);
    Rng answers = derive_rng(cfg.seed, 2 * static_cast<std::uint64_t>(s) + 1);
    std::int64_t step = 0;
    for (const Step& st : trajectory(cfg, out.questions, s)) {
      const SynthQuestion& q = out.questions[static_cast<std::size_t>(st.question)];
      const double p = answer_probability(cfg, q.offset, st.mastered);
      corpus::Interaction it;
      it.student_id = name;
      it.question = st.question;
      it.concepts = q.concepts;
      it.correct = bernoulli(answers, p) ? 1 : 0;
      it.step = step;
      it.row = out.interactions.size();
      out.interactions.push_back(std::move(it));
      out.truth.push_back({name, step, st.question, st.mastered, p});
      ++step;
    }
  }
  return out;
}

double expected_mean_bias(const SynthConfig& cfg) {
  cfg.validate();
  const auto qs = make_questions(cfg);
  std::vector<double> p_sum(cfg.n_questions, 0.0);
  std::vector<std::size_t> count(cfg.n_questions, 0);
  for (std::size_t s = 0; s < cfg.n_students; ++s) {
    for (const Step& st : trajectory(cfg, qs, s)) {
      const auto q = static_cast<std::size_t>(st.question);
      p_sum[q] += answer_probability(cfg, qs[q].offset, st.mastered);
      count[q] += 1;
    }
  }
  double total = 0.0;
  std::size_t seen = 0;
  for (std::size_t q = 0; q < cfg.n_questions; ++q) {
    if (count[q] == 0) continue;
    const double rate = p_sum[q] / static_cast<double>(count[q]);
    total += std::max(rate, 1.0 - rate);
    ++seen;
  }
  return seen ? total / static_cast<double>(seen) : 0.5;
}

SynthConfig calibrate_difficulty_spread(SynthConfig cfg, double target) {
  if (!(target >= 0.5 && target <= 1.0)) throw ConfigError("synth: target bias must lie in [0.5, 1]");
  double lo = 0.0;
  double hi = 1.0;
  cfg.difficulty_spread = hi;
  if (expected_mean_bias(cfg) < target) return cfg;
  cfg.difficulty_spread = lo;
  if (expected_mean_bias(cfg) > target) return cfg;
  for (int iter = 0; iter < 40; ++iter) {
    cfg.difficulty_spread = 0.5 * (lo + hi);
    (expected_mean_bias(cfg) < target ? lo : hi) = cfg.difficulty_spread;
  }
  cfg.difficulty_spread = 0.5 * (lo + hi);
  return cfg;
}

void write_truth(std::ostream& out, const SynthResult& result) {
  out << "student_id,step,question_id,mastered_fraction,p_correct\n";
  char buf[64];
  for (const auto& t : result.truth) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g", t.mastered_fraction, t.p_correct);
    out << t.student_id << ',' << t.step << ',' << t.question << ',' << buf << '\n';
  }
}

nlohmann::json sidecar_json(const SynthConfig& cfg, const SynthResult& result) {
  nlohmann::json qs = nlohmann::json::array();
  for (std::size_t q = 0; q < result.questions.size(); ++q) {
    qs.push_back({{"question_id", q}, {"concepts", result.questions[q].concepts}, {"offset", result.questions[q].offset}});
  }
  return nlohmann::json{{"config", to_json(cfg)}, {"questions", qs}, {"expected_mean_bias", expected_mean_bias(cfg)}};
}

}  // namespace kt::synth
