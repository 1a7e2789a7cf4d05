#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "kt/core.hpp"
#include "kt/corpus.hpp"
#include "kt/eval.hpp"

namespace kt::cli {

/// Entry point shared by the kt-core binary and the tests. `args` excludes
/// the program name. Returns the process exit status.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Ingested data directory: corpus.csv, vocab.json, split.json,
/// answer_stats.csv and ingest.json.
struct Dataset {
  corpus::Corpus corpus;
  corpus::StudentSplit split;
  std::vector<corpus::LearningSequence> train;
  std::vector<corpus::LearningSequence> test;
  corpus::AnswerStats stats;
  std::size_t max_len = 200;
};

struct IngestOptions {
  double train_ratio = 0.8;
  std::uint64_t seed = 1;
  std::size_t max_len = 200;
};

/// Splits, computes training answer statistics and writes the data directory.
Dataset ingest(corpus::Corpus corpus, const IngestOptions& options);
void write_dataset(const std::filesystem::path& dir, const Dataset& data, const IngestOptions& options);
Dataset load_dataset(const std::filesystem::path& dir);

/// Every scoring target of the test sequences (first interaction of each
/// sequence excluded), score zero.
std::vector<eval::Scored> test_pool(const Dataset& data);

std::vector<eval::Scored> to_scored(std::span<const core::PredictionRecord> records, core::InferenceMode mode);

}  // namespace kt::cli
