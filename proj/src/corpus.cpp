#include "kt/corpus.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include "kt/error.hpp"
#include "kt/random.hpp"

namespace kt::corpus {
namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\"");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\"");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

[[noreturn]] void row_error(std::size_t line, const std::string& what) {
  throw DataError("line " + std::to_string(line) + ": " + what);
}

std::int64_t parse_int(const std::string& s, std::size_t line, const char* field) {
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    row_error(line, std::string("field '") + field + "' is not an integer: '" + s + "'");
  }
  return v;
}

struct RawRow {
  std::string student;
  std::int64_t question;
  std::vector<std::int64_t> concepts;
  int correct;
  std::optional<std::int64_t> order;
};

struct Columns {
  int student = -1, question = -1, concepts = -1, correct = -1, order = -1;
  std::size_t count = 0;
};

Columns parse_header(const std::string& line) {
  Columns c;
  const auto names = split(line, ',');
  c.count = names.size();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const int idx = static_cast<int>(i);
    if (names[i] == "student_id") c.student = idx;
    else if (names[i] == "question_id") c.question = idx;
    else if (names[i] == "concept_ids") c.concepts = idx;
    else if (names[i] == "correct") c.correct = idx;
    else if (names[i] == "order") c.order = idx;
  }
  if (c.student < 0 || c.question < 0 || c.concepts < 0 || c.correct < 0) {
    throw DataError("line 1: header must contain student_id,question_id,concept_ids,correct");
  }
  return c;
}

std::vector<RawRow> read_rows(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty input: missing header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const Columns cols = parse_header(line);

  std::vector<RawRow> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != cols.count) {
      row_error(line_no, "expected " + std::to_string(cols.count) + " fields, got " + std::to_string(f.size()));
    }
    RawRow r;
    r.student = f[cols.student];
    if (r.student.empty()) row_error(line_no, "empty student_id");
    r.question = parse_int(f[cols.question], line_no, "question_id");
    for (const auto& c : split(f[cols.concepts], ';')) {
      if (!c.empty()) r.concepts.push_back(parse_int(c, line_no, "concept_ids"));
    }
    const std::int64_t correct = parse_int(f[cols.correct], line_no, "correct");
    if (correct != 0 && correct != 1) row_error(line_no, "correct must be 0 or 1");
    r.correct = static_cast<int>(correct);
    if (cols.order >= 0 && !f[cols.order].empty()) r.order = parse_int(f[cols.order], line_no, "order");
    rows.push_back(std::move(r));
  }
  return rows;
}

/// Groups rows by student (first-appearance order) keeping chronology.
std::vector<std::pair<std::string, std::vector<RawRow>>> group_by_student(std::vector<RawRow> rows) {
  std::vector<std::pair<std::string, std::vector<RawRow>>> groups;
  std::unordered_map<std::string, std::size_t> where;
  for (auto& r : rows) {
    auto [it, inserted] = where.emplace(r.student, groups.size());
    if (inserted) groups.emplace_back(r.student, std::vector<RawRow>{});
    groups[it->second].second.push_back(std::move(r));
  }
  for (auto& [student, list] : groups) {
    const bool ordered = std::any_of(list.begin(), list.end(), [](const RawRow& r) { return r.order.has_value(); });
    if (ordered) {
      std::stable_sort(list.begin(), list.end(), [](const RawRow& a, const RawRow& b) {
        return a.order.value_or(INT64_MAX) < b.order.value_or(INT64_MAX);
      });
    }
  }
  return groups;
}

}  // namespace

std::int64_t IdMap::encode_or_insert(std::int64_t original) {
  auto [it, inserted] = index_.emplace(original, static_cast<std::int64_t>(originals_.size()));
  if (inserted) originals_.push_back(original);
  return it->second;
}

std::optional<std::int64_t> IdMap::encode(std::int64_t original) const {
  const auto it = index_.find(original);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

IdMap IdMap::from_originals(std::vector<std::int64_t> originals) {
  IdMap m;
  for (std::int64_t o : originals) {
    if (m.encode(o)) throw DataError("vocabulary lists id " + std::to_string(o) + " twice");
    m.encode_or_insert(o);
  }
  return m;
}

nlohmann::json Vocabulary::to_json() const {
  return nlohmann::json{{"questions", questions.originals()}, {"concepts", concepts.originals()}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  Vocabulary v;
  v.questions = IdMap::from_originals(j.at("questions").get<std::vector<std::int64_t>>());
  v.concepts = IdMap::from_originals(j.at("concepts").get<std::vector<std::int64_t>>());
  return v;
}

std::uint64_t Vocabulary::hash() const {
  const std::string text = to_json().dump();
  return fnv1a(std::span<const char>(text.data(), text.size()));
}

Corpus load_interactions(std::istream& in, const LoadOptions& options) {
  std::vector<RawRow> rows = read_rows(in);
  std::erase_if(rows, [](const RawRow& r) { return r.concepts.empty(); });
  auto groups = group_by_student(std::move(rows));
  std::erase_if(groups, [&](const auto& g) { return g.second.size() < options.min_interactions; });
  if (groups.empty()) throw DataError("empty corpus after filtering");

  Corpus c;
  for (auto& [student, list] : groups) {
    c.students.push_back(student);
    std::int64_t step = 0;
    for (RawRow& r : list) {
      Interaction it;
      it.student_id = student;
      it.question = c.vocab.questions.encode_or_insert(r.question);
      for (std::int64_t k : r.concepts) it.concepts.push_back(c.vocab.concepts.encode_or_insert(k));
      it.correct = r.correct;
      it.step = step++;
      it.row = c.interactions.size();
      c.interactions.push_back(std::move(it));
    }
  }
  return c;
}

Corpus load_interactions(const std::filesystem::path& path, const LoadOptions& options) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return load_interactions(in, options);
}

void write_interactions(std::ostream& out, std::span<const Interaction> interactions) {
  out << "student_id,question_id,concept_ids,correct,order\n";
  for (const Interaction& it : interactions) {
    out << it.student_id << ',' << it.question << ',';
    for (std::size_t k = 0; k < it.concepts.size(); ++k) out << (k ? ";" : "") << it.concepts[k];
    out << ',' << it.correct << ',' << it.step << '\n';
  }
}

Corpus read_normalized(std::istream& in, Vocabulary vocab) {
  auto groups = group_by_student(read_rows(in));
  Corpus c;
  c.vocab = std::move(vocab);
  const auto nq = static_cast<std::int64_t>(c.vocab.questions.size());
  const auto nc = static_cast<std::int64_t>(c.vocab.concepts.size());
  for (auto& [student, list] : groups) {
    c.students.push_back(student);
    std::int64_t step = 0;
    for (RawRow& r : list) {
      if (r.question < 0 || r.question >= nq) throw DataError("question index outside vocabulary in normalized corpus");
      if (r.concepts.empty()) throw DataError("normalized corpus row without concepts");
      for (std::int64_t k : r.concepts) {
        if (k < 0 || k >= nc) throw DataError("concept index outside vocabulary in normalized corpus");
      }
      Interaction it;
      it.student_id = student;
      it.question = r.question;
      it.concepts = std::move(r.concepts);
      it.correct = r.correct;
      it.step = step++;
      it.row = c.interactions.size();
      c.interactions.push_back(std::move(it));
    }
  }
  if (c.interactions.empty()) throw DataError("empty corpus");
  return c;
}

std::vector<LearningSequence> build_sequences(std::span<const Interaction> interactions, std::size_t max_len) {
  if (max_len == 0) throw ContractViolation("build_sequences: max_len must be positive");
  std::vector<LearningSequence> out;
  std::size_t i = 0;
  while (i < interactions.size()) {
    const std::string& student = interactions[i].student_id;
    std::size_t end = i;
    while (end < interactions.size() && interactions[end].student_id == student) ++end;
    for (std::size_t b = i; b < end; b += max_len) {
      LearningSequence seq;
      seq.student_id = student;
      seq.interactions.assign(interactions.begin() + static_cast<std::ptrdiff_t>(b),
                              interactions.begin() + static_cast<std::ptrdiff_t>(std::min(end, b + max_len)));
      out.push_back(std::move(seq));
    }
    i = end;
  }
  return out;
}

StudentSplit split_students(std::span<const std::string> students, double train_ratio, std::uint64_t seed) {
  if (!(train_ratio > 0.0 && train_ratio < 1.0)) throw ConfigError("train_ratio must lie in (0, 1)");
  const std::size_t n = students.size();
  if (n < 2) throw DataError("split needs at least 2 students, got " + std::to_string(n));

  std::vector<std::string> order(students.begin(), students.end());
  Rng rng(seed);
  shuffle(std::span<std::string>(order), rng);

  // The epsilon absorbs representation error in 1 - ratio (1 - 0.8 < 0.2).
  auto n_test = static_cast<std::size_t>(std::floor((1.0 - train_ratio) * static_cast<double>(n) + 1e-9));
  n_test = std::clamp<std::size_t>(n_test, 1, n - 1);

  StudentSplit s;
  s.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  s.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
  return s;
}

nlohmann::json to_json(const StudentSplit& split) {
  return nlohmann::json{{"train", split.train}, {"test", split.test}};
}

StudentSplit split_from_json(const nlohmann::json& j) {
  StudentSplit s;
  s.train = j.at("train").get<std::vector<std::string>>();
  s.test = j.at("test").get<std::vector<std::string>>();
  return s;
}

std::vector<LearningSequence> select_students(std::span<const LearningSequence> sequences,
                                              std::span<const std::string> students) {
  const std::unordered_set<std::string> keep(students.begin(), students.end());
  std::vector<LearningSequence> out;
  for (const auto& s : sequences) {
    if (keep.contains(s.student_id)) out.push_back(s);
  }
  return out;
}

std::vector<Interaction> select_students(std::span<const Interaction> interactions,
                                         std::span<const std::string> students) {
  const std::unordered_set<std::string> keep(students.begin(), students.end());
  std::vector<Interaction> out;
  for (const auto& it : interactions) {
    if (keep.contains(it.student_id)) out.push_back(it);
  }
  return out;
}

SequenceSplit split_by_student(std::span<const LearningSequence> sequences, double train_ratio, std::uint64_t seed) {
  std::vector<std::string> students;
  std::unordered_set<std::string> seen;
  for (const auto& s : sequences) {
    if (seen.insert(s.student_id).second) students.push_back(s.student_id);
  }
  const StudentSplit ids = split_students(students, train_ratio, seed);
  return {select_students(sequences, ids.train), select_students(sequences, ids.test)};
}

const char* to_string(BiasGroup g) {
  switch (g) {
    case BiasGroup::low: return "low";
    case BiasGroup::medium: return "medium";
    case BiasGroup::high: return "high";
    case BiasGroup::unseen: return "unseen";
  }
  return "unseen";
}

BiasGroup classify_bias(double strength) {
  if (strength < kLowBiasBelow) return BiasGroup::low;
  if (strength > kHighBiasAbove) return BiasGroup::high;
  return BiasGroup::medium;
}

std::optional<double> QuestionStats::bias_strength() const {
  if (total() == 0) return std::nullopt;
  return static_cast<double>(std::max(n_correct, n_incorrect)) / static_cast<double>(total());
}

BiasGroup QuestionStats::group() const {
  const auto s = bias_strength();
  return s ? classify_bias(*s) : BiasGroup::unseen;
}

const QuestionStats& AnswerStats::at(std::int64_t question) const {
  static const QuestionStats empty{};
  if (question < 0 || static_cast<std::size_t>(question) >= per_question.size()) return empty;
  return per_question[static_cast<std::size_t>(question)];
}

BiasGroup AnswerStats::group(std::int64_t question) const { return at(question).group(); }

std::int64_t AnswerStats::total() const {
  return std::accumulate(per_question.begin(), per_question.end(), std::int64_t{0},
                         [](std::int64_t acc, const QuestionStats& q) { return acc + q.total(); });
}

double AnswerStats::mean_bias_strength() const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& q : per_question) {
    if (const auto s = q.bias_strength()) {
      sum += *s;
      ++n;
    }
  }
  return n ? sum / static_cast<double>(n) : 0.0;
}

AnswerStats compute_answer_stats(std::span<const Interaction> train, std::size_t n_questions) {
  AnswerStats stats;
  stats.per_question.resize(n_questions);
  for (const auto& it : train) {
    if (it.question < 0 || static_cast<std::size_t>(it.question) >= n_questions) {
      throw ContractViolation("compute_answer_stats: question index outside vocabulary");
    }
    auto& q = stats.per_question[static_cast<std::size_t>(it.question)];
    (it.correct ? q.n_correct : q.n_incorrect) += 1;
  }
  return stats;
}

void write_answer_stats(std::ostream& out, const AnswerStats& stats) {
  out << "question_id,n_correct,n_incorrect,bias_strength,group\n";
  for (std::size_t q = 0; q < stats.per_question.size(); ++q) {
    const auto& s = stats.per_question[q];
    out << q << ',' << s.n_correct << ',' << s.n_incorrect << ',';
    if (const auto b = s.bias_strength()) {
      std::ostringstream v;
      v.precision(17);
      v << *b;
      out << v.str();
    }
    out << ',' << to_string(s.group()) << '\n';
  }
}

AnswerStats read_answer_stats(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("answer stats: missing header");
  AnswerStats stats;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 5) row_error(line_no, "answer stats row needs 5 fields");
    const auto q = parse_int(f[0], line_no, "question_id");
    if (q != static_cast<std::int64_t>(stats.per_question.size())) row_error(line_no, "question ids must be dense");
    stats.per_question.push_back({parse_int(f[1], line_no, "n_correct"), parse_int(f[2], line_no, "n_incorrect")});
  }
  return stats;
}

}  // namespace kt::corpus
