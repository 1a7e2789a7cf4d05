#include "kt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <unordered_map>

#include "kt/error.hpp"
#include "kt/random.hpp"

namespace kt::eval {

double accuracy(std::span<const Scored> targets, double threshold) {
  if (targets.empty()) throw ContractViolation("accuracy: no targets");
  std::size_t hit = 0;
  for (const auto& t : targets) {
    if ((t.score > threshold ? 1 : 0) == t.label) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(targets.size());
}

double auc(std::span<const Scored> targets) {
  std::vector<std::size_t> order(targets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return targets[a].score < targets[b].score; });

  double positive_rank_sum = 0.0;
  std::size_t n_pos = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && targets[order[j]].score == targets[order[i]].score) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (targets[order[k]].label == 1) {
        positive_rank_sum += avg_rank;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = targets.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ContractViolation("auc: undefined without both labels");
  const double np = static_cast<double>(n_pos);
  return (positive_rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

double calibrate_threshold(std::span<const Scored> targets) {
  if (targets.empty()) return 0.0;
  std::vector<Scored> sorted(targets.begin(), targets.end());
  std::sort(sorted.begin(), sorted.end(), [](const Scored& a, const Scored& b) { return a.score < b.score; });

  // Threshold below everything: all predicted correct.
  std::size_t positives = 0;
  for (const auto& t : sorted) positives += static_cast<std::size_t>(t.label);
  std::size_t best_hits = positives;
  double best = sorted.front().score - 1.0;
  std::size_t hits = positives;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    // Moving the threshold past sorted[i] flips it to "incorrect".
    hits += sorted[i].label ? std::size_t(0) : std::size_t(1);
    hits -= static_cast<std::size_t>(sorted[i].label);
    const bool boundary = i + 1 == sorted.size() || sorted[i + 1].score != sorted[i].score;
    if (boundary && hits > best_hits) {
      best_hits = hits;
      best = i + 1 == sorted.size() ? sorted[i].score : 0.5 * (sorted[i].score + sorted[i + 1].score);
    }
  }
  return best;
}

UnbiasedTestSet resample_unbiased(std::span<const Scored> pool, std::uint64_t seed) {
  // Ordered map: the draw order, and so the output, depends only on the seed.
  std::map<std::int64_t, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> by_question;
  for (const auto& t : pool) {
    auto& [neg, pos] = by_question[t.question];
    (t.label ? pos : neg).push_back(t.row);
  }

  UnbiasedTestSet out;
  out.seed = seed;
  for (const auto& [question, classes] : by_question) {
    const auto& [neg, pos] = classes;
    if (neg.empty() || pos.empty()) {
      out.excluded_questions.push_back(question);
      continue;
    }
    Rng rng = derive_rng(seed, static_cast<std::uint64_t>(question));
    const std::size_t n = neg.size() + pos.size();
    std::size_t n_pos = n / 2;
    if (n % 2 == 1 && bernoulli(rng, 0.5)) n_pos += 1;
    const std::size_t n_neg = n - n_pos;
    for (std::size_t k = 0; k < n_pos; ++k) out.rows.push_back(pos[uniform_index(rng, pos.size())]);
    for (std::size_t k = 0; k < n_neg; ++k) out.rows.push_back(neg[uniform_index(rng, neg.size())]);
  }
  return out;
}

void write_index(std::ostream& out, const UnbiasedTestSet& set, std::span<const Scored> pool) {
  std::unordered_map<std::size_t, const Scored*> by_row;
  for (const auto& t : pool) by_row.emplace(t.row, &t);
  out << "# seed=" << set.seed << "\n";
  out << "# excluded=";
  for (std::size_t i = 0; i < set.excluded_questions.size(); ++i) out << (i ? ";" : "") << set.excluded_questions[i];
  out << "\n";
  out << "row,question_id,label\n";
  for (std::size_t r : set.rows) {
    const auto it = by_row.find(r);
    if (it == by_row.end()) throw ContractViolation("write_index: row not in pool");
    out << r << ',' << it->second->question << ',' << it->second->label << '\n';
  }
}

UnbiasedTestSet read_index(std::istream& in) {
  UnbiasedTestSet set;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line.rfind("# seed=", 0) == 0) {
      set.seed = std::stoull(line.substr(7));
    } else if (line.rfind("# excluded=", 0) == 0) {
      std::string rest = line.substr(11);
      std::size_t start = 0;
      while (start < rest.size()) {
        const auto end = rest.find(';', start);
        set.excluded_questions.push_back(std::stoll(rest.substr(start, end - start)));
        if (end == std::string::npos) break;
        start = end + 1;
      }
    } else if (line.rfind("row,", 0) == 0) {
      continue;
    } else {
      const auto comma = line.find(',');
      try {
        set.rows.push_back(std::stoull(line.substr(0, comma)));
      } catch (const std::exception&) {
        throw DataError("index line " + std::to_string(line_no) + ": malformed row");
      }
    }
  }
  return set;
}

std::vector<Scored> select(std::span<const Scored> all, const UnbiasedTestSet& set) {
  std::unordered_map<std::size_t, const Scored*> by_row;
  for (const auto& t : all) by_row.emplace(t.row, &t);
  std::vector<Scored> out;
  out.reserve(set.rows.size());
  for (std::size_t r : set.rows) {
    const auto it = by_row.find(r);
    if (it == by_row.end()) throw DataError("index references row " + std::to_string(r) + " absent from the test pool");
    out.push_back(*it->second);
  }
  return out;
}

std::vector<Scored> majority_baseline(const corpus::AnswerStats& stats, std::span<const Scored> targets) {
  std::vector<Scored> out(targets.begin(), targets.end());
  for (auto& t : out) t.score = stats.at(t.question).majority_answer();
  return out;
}

Metrics metrics(std::span<const Scored> targets, double threshold) {
  Metrics m;
  m.count = targets.size();
  if (targets.empty()) {
    m.accuracy = std::numeric_limits<double>::quiet_NaN();
    m.auc = std::numeric_limits<double>::quiet_NaN();
    return m;
  }
  m.accuracy = accuracy(targets, threshold);
  const bool has_pos = std::any_of(targets.begin(), targets.end(), [](const Scored& t) { return t.label == 1; });
  const bool has_neg = std::any_of(targets.begin(), targets.end(), [](const Scored& t) { return t.label == 0; });
  m.auc = has_pos && has_neg ? auc(targets) : std::numeric_limits<double>::quiet_NaN();
  return m;
}

const Metrics& EvalReport::group(corpus::BiasGroup g) const {
  switch (g) {
    case corpus::BiasGroup::low: return low;
    case corpus::BiasGroup::medium: return medium;
    case corpus::BiasGroup::high: return high;
    case corpus::BiasGroup::unseen: return unseen;
  }
  return unseen;
}

namespace {

nlohmann::json metrics_json(const Metrics& m) {
  auto num = [](double v) { return std::isnan(v) ? nlohmann::json(nullptr) : nlohmann::json(v); };
  return nlohmann::json{{"count", m.count}, {"accuracy", num(m.accuracy)}, {"auc", num(m.auc)}};
}

std::string fmt(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

nlohmann::json EvalReport::to_json() const {
  return nlohmann::json{{"model", model},
                        {"test_set", test_set},
                        {"overall", metrics_json(overall)},
                        {"groups",
                         {{"low", metrics_json(low)},
                          {"medium", metrics_json(medium)},
                          {"high", metrics_json(high)},
                          {"unseen", metrics_json(unseen)}}},
                        {"config", {{"threshold", threshold}, {"seed", seed}}}};
}

EvalReport group_report(std::span<const Scored> targets, const corpus::AnswerStats& stats, double threshold) {
  std::vector<Scored> parts[4];
  for (const auto& t : targets) parts[static_cast<int>(stats.group(t.question))].push_back(t);
  EvalReport r;
  r.threshold = threshold;
  r.overall = metrics(targets, threshold);
  r.low = metrics(parts[static_cast<int>(corpus::BiasGroup::low)], threshold);
  r.medium = metrics(parts[static_cast<int>(corpus::BiasGroup::medium)], threshold);
  r.high = metrics(parts[static_cast<int>(corpus::BiasGroup::high)], threshold);
  r.unseen = metrics(parts[static_cast<int>(corpus::BiasGroup::unseen)], threshold);
  return r;
}

void write_report_header(std::ostream& out) { out << "model,test_set,group,count,accuracy,auc\n"; }

void write_report_rows(std::ostream& out, const EvalReport& r) {
  auto row = [&](const char* group, const Metrics& m) {
    out << r.model << ',' << r.test_set << ',' << group << ',' << m.count << ',' << fmt(m.accuracy) << ','
        << fmt(m.auc) << '\n';
  };
  row("all", r.overall);
  row("low", r.low);
  row("medium", r.medium);
  row("high", r.high);
  if (r.unseen.count > 0) row("unseen", r.unseen);
}

}  // namespace kt::eval
