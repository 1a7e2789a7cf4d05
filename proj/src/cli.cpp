#include "kt/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "kt/checkpoint.hpp"
#include "kt/error.hpp"
#include "kt/synthgen.hpp"

namespace kt::cli {
namespace fs = std::filesystem;

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return in;
}

nlohmann::json read_json(const fs::path& path) {
  auto in = open_in(path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  auto out = open_out(path);
  out << j.dump(2) << '\n';
}


// ---------------------------------------------------------------------------

struct SynthArgs {
  fs::path out;
  synth::SynthConfig cfg;
  double learn_rate = synth::SynthConfig{}.learn_rate.front();
  std::string family = "uniform";
  std::optional<double> target_bias;
};

void cmd_synth(const SynthArgs& a, std::ostream& out) {
  synth::SynthConfig cfg = a.cfg;
  cfg.learn_rate = {a.learn_rate};
  if (a.family == "uniform") cfg.family = synth::DifficultyFamily::uniform;
  else if (a.family == "two_point") cfg.family = synth::DifficultyFamily::two_point;
  else throw ConfigError("unknown difficulty family '" + a.family + "'");
  cfg.validate();
  if (a.target_bias) cfg = synth::calibrate_difficulty_spread(cfg, *a.target_bias);

  const auto result = synth::generate(cfg);
  fs::create_directories(a.out);
  {
    auto f = open_out(a.out / "interactions.csv");
    corpus::write_interactions(f, result.interactions);
  }
  {
    auto f = open_out(a.out / "mastery.csv");
    synth::write_truth(f, result);
  }
  write_json(a.out / "synth.json", synth::sidecar_json(cfg, result));
  out << "synth: " << result.interactions.size() << " interactions, difficulty_spread=" << cfg.difficulty_spread
      << " -> " << (a.out / "interactions.csv").string() << '\n';
}

struct IngestArgs {
  fs::path input;
  fs::path out;
  IngestOptions opts;
};

void cmd_ingest(const IngestArgs& a, std::ostream& out) {
  Dataset data = ingest(corpus::load_interactions(a.input), a.opts);
  write_dataset(a.out, data, a.opts);
  out << "ingest: " << data.corpus.interactions.size() << " interactions, " << data.corpus.students.size()
      << " students (" << data.split.train.size() << " train / " << data.split.test.size() << " test), "
      << data.corpus.vocab.questions.size() << " questions, " << data.corpus.vocab.concepts.size()
      << " concepts, mean bias strength " << data.stats.mean_bias_strength() << '\n';
}

struct TrainArgs {
  fs::path data;
  fs::path out;
  fs::path curve;
  std::string variant = "core";
  std::string prob_mode = "logit";
  core::ModelConfig model;
  core::TrainConfig train;
  std::optional<double> fixed_p;
  std::optional<double> max_grad_norm;
  bool quiet = false;
};

nlohmann::json train_echo(const TrainArgs& a, const core::TrainConfig& t, std::size_t max_len) {
  nlohmann::json j{{"variant", a.variant},
                   {"d", a.model.d},
                   {"branch_hidden", a.model.branch_hidden},
                   {"max_len", max_len},
                   {"batch", t.batch},
                   {"lr", t.lr},
                   {"epochs", t.epochs},
                   {"patience", t.patience},
                   {"validation_fraction", t.validation_fraction},
                   {"prob_mode", core::to_string(t.mode)},
                   {"no_q_loss", t.no_q_loss},
                   {"seed", t.seed}};
  j["fixed_p"] = t.fixed_p ? nlohmann::json(*t.fixed_p) : nlohmann::json(nullptr);
  j["max_grad_norm"] = t.max_grad_norm ? nlohmann::json(*t.max_grad_norm) : nlohmann::json(nullptr);
  return j;
}

void cmd_train(const TrainArgs& a, std::ostream& out) {
  const Dataset data = load_dataset(a.data);
  core::ModelConfig mc = a.model;
  mc.variant = core::variant_from_string(a.variant);
  mc.seed = a.train.seed;
  core::TrainConfig tc = a.train;
  tc.mode = core::prob_mode_from_string(a.prob_mode);
  tc.fixed_p = a.fixed_p;
  tc.max_grad_norm = a.max_grad_norm;

  const nlohmann::json echo = train_echo(a, tc, data.max_len);
  out << "train config: " << echo.dump() << '\n';

  core::CoreModel model(static_cast<core::Index>(data.corpus.vocab.questions.size()),
                        static_cast<core::Index>(data.corpus.vocab.concepts.size()), mc);
  const auto result = core::train(model, data.train, tc, [&](const core::EpochLog& e) {
    if (!a.quiet) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "epoch %3d  loss_a %.5f  kl %.5f  val_auc %.4f  p %.4f\n", e.epoch, e.loss_a,
                    e.loss_kl, e.val_auc, e.p);
      out << buf << std::flush;
    }
  });

  nlohmann::json extra{{"config", echo},
                       {"calibrated_threshold", result.calibrated_threshold},
                       {"best_epoch", result.best_epoch},
                       {"best_val_auc", result.best_val_auc}};
  io::save_checkpoint(a.out, model, data.corpus.vocab.hash(), extra);

  const fs::path curve = a.curve.empty() ? fs::path(a.out.string() + ".curve.csv") : a.curve;
  auto f = open_out(curve);
  f << "epoch,loss_a,loss_kl,val_auc,p\n";
  for (const auto& e : result.history) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g,%.10g,%.10g\n", e.epoch, e.loss_a, e.loss_kl, e.val_auc, e.p);
    f << buf;
  }
  out << "train: best epoch " << result.best_epoch << " (val AUC " << result.best_val_auc << "), checkpoint "
      << a.out.string() << ", curve " << curve.string() << '\n';
}

struct ResampleArgs {
  fs::path data;
  fs::path out;
  std::uint64_t seed = 1;
};

void cmd_resample(const ResampleArgs& a, std::ostream& out) {
  const Dataset data = load_dataset(a.data);
  const auto pool = test_pool(data);
  const auto set = eval::resample_unbiased(pool, a.seed);
  auto f = open_out(a.out);
  eval::write_index(f, set, pool);
  out << "resample: " << set.rows.size() << " of " << pool.size() << " targets, " << set.excluded_questions.size()
      << " questions excluded -> " << a.out.string() << '\n';
}

struct EvalArgs {
  fs::path data;
  fs::path checkpoint;
  std::string baseline;
  fs::path unbiased;
  std::string inference = "debiased";
  std::string threshold_policy = "zero";
  fs::path out;
};

struct Scoring {
  std::string name;
  std::vector<eval::Scored> scored;
  std::vector<core::PredictionRecord> records;
  double threshold = 0.0;
};

Scoring score_model(const Dataset& data, const fs::path& checkpoint, const std::string& inference,
                    const std::string& threshold_policy) {
  auto ck = io::load_checkpoint(checkpoint, data.corpus.vocab.hash());
  // Cold-start routing follows the seen mask stored with the checkpoint.
  const auto mode = core::inference_mode_from_string(inference);
  Scoring s;
  s.name = std::string(core::to_string(ck.model->config().variant)) +
           (mode == core::InferenceMode::total_effect ? "-te" : "");
  s.records = core::predict_all(*ck.model, data.test);
  s.scored = to_scored(s.records, mode);
  if (threshold_policy == "zero") {
    s.threshold = core::default_threshold(mode);
  } else if (threshold_policy == "calibrated") {
    if (mode != core::InferenceMode::debiased) throw ConfigError("calibrated threshold applies to debiased scores only");
    s.threshold = ck.calibrated_threshold();
  } else {
    throw ConfigError("unknown threshold policy '" + threshold_policy + "' (expected zero or calibrated)");
  }
  return s;
}

Scoring score_baseline(const Dataset& data, const std::string& baseline) {
  if (baseline != "majority") throw ConfigError("unknown baseline '" + baseline + "' (expected majority)");
  Scoring s;
  s.name = "majority";
  s.scored = eval::majority_baseline(data.stats, test_pool(data));
  s.threshold = 0.5;
  return s;
}

std::vector<eval::EvalReport> reports_for(const Dataset& data, const Scoring& s,
                                          const std::optional<eval::UnbiasedTestSet>& unbiased) {
  std::vector<eval::EvalReport> out;
  auto biased = eval::group_report(s.scored, data.stats, s.threshold);
  biased.model = s.name;
  biased.test_set = "biased";
  out.push_back(biased);
  if (unbiased) {
    const auto sel = eval::select(s.scored, *unbiased);
    auto r = eval::group_report(sel, data.stats, s.threshold);
    r.model = s.name;
    r.test_set = "unbiased";
    r.seed = unbiased->seed;
    out.push_back(r);
  }
  return out;
}

std::optional<eval::UnbiasedTestSet> maybe_index(const fs::path& p) {
  if (p.empty()) return std::nullopt;
  auto in = open_in(p);
  return eval::read_index(in);
}

void cmd_eval(const EvalArgs& a, std::ostream& out) {
  const Dataset data = load_dataset(a.data);
  if (a.checkpoint.empty() == a.baseline.empty()) throw ConfigError("eval needs exactly one of --checkpoint or --baseline");
  const Scoring s = a.baseline.empty() ? score_model(data, a.checkpoint, a.inference, a.threshold_policy)
                                       : score_baseline(data, a.baseline);
  const auto reports = reports_for(data, s, maybe_index(a.unbiased));

  const std::string prefix = a.out.string();
  if (!s.records.empty()) {
    auto f = open_out(prefix + ".records.csv");
    core::write_records(f, s.records);
  }
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reports) j.push_back(r.to_json());
  write_json(prefix + ".report.json", j);
  auto f = open_out(prefix + ".report.csv");
  eval::write_report_header(f);
  for (const auto& r : reports) {
    eval::write_report_rows(f, r);
    out << "eval " << r.model << " on " << r.test_set << ": accuracy " << r.overall.accuracy << ", auc "
        << r.overall.auc << " (" << r.overall.count << " targets)\n";
  }
}

struct ReportArgs {
  fs::path data;
  fs::path backbone;
  fs::path core;
  fs::path unbiased;
  fs::path out;
};

void cmd_report(const ReportArgs& a, std::ostream& out) {
  const Dataset data = load_dataset(a.data);
  const auto unbiased = maybe_index(a.unbiased);
  std::vector<Scoring> models;
  models.push_back(score_baseline(data, "majority"));
  if (!a.backbone.empty()) models.push_back(score_model(data, a.backbone, "debiased", "zero"));
  if (!a.core.empty()) models.push_back(score_model(data, a.core, "debiased", "zero"));

  auto f = open_out(a.out);
  eval::write_report_header(f);
  for (const auto& m : models) {
    for (const auto& r : reports_for(data, m, unbiased)) {
      eval::write_report_rows(f, r);
      out << r.model << " / " << r.test_set << ": accuracy " << r.overall.accuracy << ", auc " << r.overall.auc
          << '\n';
    }
  }
  out << "report -> " << a.out.string() << '\n';
}

}  // namespace

// ---------------------------------------------------------------------------

Dataset ingest(corpus::Corpus c, const IngestOptions& options) {
  Dataset d;
  d.max_len = options.max_len;
  d.split = corpus::split_students(c.students, options.train_ratio, options.seed);
  d.corpus = std::move(c);
  const auto sequences = corpus::build_sequences(d.corpus.interactions, d.max_len);
  d.train = corpus::select_students(sequences, d.split.train);
  d.test = corpus::select_students(sequences, d.split.test);
  // Statistics come from unpartitioned training interactions.
  const auto train_its = corpus::select_students(d.corpus.interactions, d.split.train);
  d.stats = corpus::compute_answer_stats(train_its, d.corpus.vocab.questions.size());
  return d;
}

void write_dataset(const fs::path& dir, const Dataset& data, const IngestOptions& options) {
  fs::create_directories(dir);
  {
    auto f = open_out(dir / "corpus.csv");
    corpus::write_interactions(f, data.corpus.interactions);
  }
  write_json(dir / "vocab.json", data.corpus.vocab.to_json());
  write_json(dir / "split.json", corpus::to_json(data.split));
  {
    auto f = open_out(dir / "answer_stats.csv");
    corpus::write_answer_stats(f, data.stats);
  }
  write_json(dir / "ingest.json", {{"train_ratio", options.train_ratio},
                                   {"seed", options.seed},
                                   {"max_len", options.max_len},
                                   {"vocab_hash", io::hash_hex(data.corpus.vocab.hash())},
                                   {"interactions", data.corpus.interactions.size()},
                                   {"students", data.corpus.students.size()}});
}

Dataset load_dataset(const fs::path& dir) {
  const auto meta = read_json(dir / "ingest.json");
  auto vocab = corpus::Vocabulary::from_json(read_json(dir / "vocab.json"));
  auto in = open_in(dir / "corpus.csv");
  Dataset d;
  d.corpus = corpus::read_normalized(in, std::move(vocab));
  d.split = corpus::split_from_json(read_json(dir / "split.json"));
  d.max_len = meta.at("max_len");
  const auto sequences = corpus::build_sequences(d.corpus.interactions, d.max_len);
  d.train = corpus::select_students(sequences, d.split.train);
  d.test = corpus::select_students(sequences, d.split.test);
  auto stats_in = open_in(dir / "answer_stats.csv");
  d.stats = corpus::read_answer_stats(stats_in);
  if (d.stats.per_question.size() != d.corpus.vocab.questions.size()) {
    throw DataError("answer_stats.csv does not match the vocabulary");
  }
  return d;
}

std::vector<eval::Scored> test_pool(const Dataset& data) {
  std::vector<eval::Scored> out;
  for (const auto& s : data.test) {
    for (std::size_t t = 1; t < s.interactions.size(); ++t) {
      const auto& it = s.interactions[t];
      out.push_back({0.0, it.correct, it.question, it.row});
    }
  }
  return out;
}

std::vector<eval::Scored> to_scored(std::span<const core::PredictionRecord> records, core::InferenceMode mode) {
  std::vector<eval::Scored> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({core::inference_score(r, mode), r.label, r.question, r.row});
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Knowledge tracing with counterfactual answer-bias removal", "kt-core"};
  app.set_config("--config", "", "ini file; options go under a [command] section, flags override them");
  app.fallthrough();  // so that `train --config f.ini` works as well as `--config f.ini train`
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic interaction log with controllable answer bias");
  synth_cmd->add_option("--out", sa.out, "Output directory")->required();
  synth_cmd->add_option("--students", sa.cfg.n_students)->capture_default_str();
  synth_cmd->add_option("--questions", sa.cfg.n_questions)->capture_default_str();
  synth_cmd->add_option("--concepts", sa.cfg.n_concepts)->capture_default_str();
  synth_cmd->add_option("--seq-len", sa.cfg.seq_len)->capture_default_str();
  synth_cmd->add_option("--concepts-per-question", sa.cfg.concepts_per_question)->capture_default_str();
  synth_cmd->add_option("--learn-rate", sa.learn_rate, "Learn rate shared by all concepts")->capture_default_str();
  synth_cmd->add_option("--prior-mastery", sa.cfg.prior_mastery)->capture_default_str();
  synth_cmd->add_option("--ability-spread", sa.cfg.ability_spread)->capture_default_str();
  synth_cmd->add_option("--guess", sa.cfg.guess)->capture_default_str();
  synth_cmd->add_option("--slip", sa.cfg.slip)->capture_default_str();
  synth_cmd->add_option("--difficulty-spread", sa.cfg.difficulty_spread)->capture_default_str();
  synth_cmd->add_option("--family", sa.family, "uniform or two_point")->capture_default_str();
  synth_cmd->add_option("--target-bias", sa.target_bias, "Calibrate difficulty spread to this mean bias strength");
  synth_cmd->add_option("--seed", sa.cfg.seed)->capture_default_str();

  IngestArgs ia;
  auto* ingest_cmd = app.add_subcommand("ingest", "Normalize a CSV log, split students, compute answer statistics");
  ingest_cmd->add_option("--input", ia.input, "student_id,question_id,concept_ids,correct[,order] CSV")
      ->required()
      ->check(CLI::ExistingFile);
  ingest_cmd->add_option("--out", ia.out, "Data directory")->required();
  ingest_cmd->add_option("--train-ratio", ia.opts.train_ratio)->capture_default_str();
  ingest_cmd->add_option("--max-len", ia.opts.max_len)->capture_default_str();
  ingest_cmd->add_option("--seed", ia.opts.seed)->capture_default_str();

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write a checkpoint");
  train_cmd->add_option("--data", ta.data, "Data directory from ingest")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out", ta.out, "Checkpoint path")->required();
  train_cmd->add_option("--curve", ta.curve, "Loss curve CSV (default <out>.curve.csv)");
  train_cmd->add_option("--variant", ta.variant, "core or backbone")->capture_default_str();
  train_cmd->add_option("--d", ta.model.d, "Embedding and hidden size")->capture_default_str();
  train_cmd->add_option("--branch-hidden", ta.model.branch_hidden)->capture_default_str();
  train_cmd->add_option("--batch", ta.train.batch)->capture_default_str();
  train_cmd->add_option("--lr", ta.train.lr)->capture_default_str();
  train_cmd->add_option("--epochs", ta.train.epochs)->capture_default_str();
  train_cmd->add_option("--patience", ta.train.patience)->capture_default_str();
  train_cmd->add_option("--validation-fraction", ta.train.validation_fraction)->capture_default_str();
  train_cmd->add_option("--prob-mode", ta.prob_mode, "logit or literal")->capture_default_str();
  train_cmd->add_flag("--no-q-loss", ta.train.no_q_loss, "Drop the question-only BCE term");
  train_cmd->add_option("--fixed-p", ta.fixed_p, "Pin p and skip the KL step");
  train_cmd->add_option("--max-grad-norm", ta.max_grad_norm, "Global gradient clipping");
  train_cmd->add_option("--seed", ta.train.seed)->capture_default_str();
  train_cmd->add_flag("--quiet", ta.quiet);

  ResampleArgs ra;
  auto* resample_cmd = app.add_subcommand("resample", "Build the balanced (unbiased) test index");
  resample_cmd->add_option("--data", ra.data)->required()->check(CLI::ExistingDirectory);
  resample_cmd->add_option("--out", ra.out, "Index file")->required();
  resample_cmd->add_option("--seed", ra.seed)->capture_default_str();

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint or baseline on the biased and unbiased test sets");
  eval_cmd->add_option("--data", ea.data)->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--checkpoint", ea.checkpoint)->check(CLI::ExistingFile);
  eval_cmd->add_option("--baseline", ea.baseline, "majority");
  eval_cmd->add_option("--unbiased", ea.unbiased, "Index file from resample")->check(CLI::ExistingFile);
  eval_cmd->add_option("--inference", ea.inference, "debiased or te")->capture_default_str();
  eval_cmd->add_option("--threshold-policy", ea.threshold_policy, "zero or calibrated")->capture_default_str();
  eval_cmd->add_option("--out", ea.out, "Output prefix")->required();

  ReportArgs pa;
  auto* report_cmd = app.add_subcommand("report", "Compare majority, backbone-only and CORE across test sets and bias groups");
  report_cmd->add_option("--data", pa.data)->required()->check(CLI::ExistingDirectory);
  report_cmd->add_option("--backbone", pa.backbone)->check(CLI::ExistingFile);
  report_cmd->add_option("--core", pa.core)->check(CLI::ExistingFile);
  report_cmd->add_option("--unbiased", pa.unbiased)->check(CLI::ExistingFile);
  report_cmd->add_option("--out", pa.out, "Report CSV")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*synth_cmd) cmd_synth(sa, out);
    else if (*ingest_cmd) cmd_ingest(ia, out);
    else if (*train_cmd) cmd_train(ta, out);
    else if (*resample_cmd) cmd_resample(ra, out);
    else if (*eval_cmd) cmd_eval(ea, out);
    else if (*report_cmd) cmd_report(pa, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace kt::cli
