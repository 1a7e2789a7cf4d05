#include "kt/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "kt/error.hpp"

namespace kt::io {
namespace {

constexpr std::array<char, 8> kMagic{'K', 'T', 'C', 'O', 'R', 'E', '\0', '\1'};

void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) throw DataError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::uint64_t Checkpoint::vocab_hash() const {
  return std::stoull(manifest.at("vocab_hash").get<std::string>(), nullptr, 16);
}

void save_checkpoint(std::ostream& out, core::CoreModel& model, std::uint64_t vocab_hash, const nlohmann::json& extra) {
  const auto& cfg = model.config();
  nlohmann::json manifest = extra.is_object() ? extra : nlohmann::json::object();
  manifest["format_version"] = kCheckpointVersion;
  manifest["variant"] = core::to_string(cfg.variant);
  manifest["backbone"] = model.backbone->kind();
  manifest["vocab_hash"] = hash_hex(vocab_hash);
  manifest["dims"] = {{"d", cfg.d},
                      {"question_dim", 2 * cfg.d},
                      {"branch_hidden", cfg.branch_hidden},
                      {"n_questions", model.n_questions()},
                      {"n_concepts", model.n_concepts()}};
  nlohmann::json arrays = nlohmann::json::array();
  for (const core::Tensor* t : model.all_arrays()) {
    arrays.push_back({{"name", t->name}, {"rows", t->value.rows()}, {"cols", t->value.cols()}});
  }
  manifest["arrays"] = arrays;

  const std::string text = manifest.dump();
  out.write(kMagic.data(), kMagic.size());
  put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const core::Tensor* t : model.all_arrays()) {
    for (core::Index i = 0; i < t->value.size(); ++i) put_u64(out, std::bit_cast<std::uint64_t>(t->value.data()[i]));
  }
  if (!out) throw DataError("checkpoint: write failed");
}

void save_checkpoint(const std::filesystem::path& path, core::CoreModel& model, std::uint64_t vocab_hash,
                     const nlohmann::json& extra) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  save_checkpoint(out, model, vocab_hash, extra);
}

Checkpoint load_checkpoint(std::istream& in, std::optional<std::uint64_t> expected_vocab_hash) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw DataError("checkpoint: bad magic");
  const std::uint64_t len = get_u64(in);
  if (len > (1ULL << 30)) throw DataError("checkpoint: implausible manifest length");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw DataError("checkpoint: truncated manifest");

  Checkpoint ck;
  try {
    ck.manifest = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  if (ck.manifest.value("format_version", 0) != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported format version");
  }
  if (expected_vocab_hash && ck.vocab_hash() != *expected_vocab_hash) {
    throw DataError("checkpoint: vocabulary hash " + ck.manifest.at("vocab_hash").get<std::string>() +
                    " does not match corpus vocabulary " + hash_hex(*expected_vocab_hash));
  }

  const auto& dims = ck.manifest.at("dims");
  core::ModelConfig cfg;
  cfg.d = dims.at("d");
  cfg.branch_hidden = dims.at("branch_hidden");
  cfg.variant = core::variant_from_string(ck.manifest.at("variant"));
  ck.model = std::make_unique<core::CoreModel>(dims.at("n_questions").get<core::Index>(),
                                               dims.at("n_concepts").get<core::Index>(), cfg);

  const auto& listed = ck.manifest.at("arrays");
  const auto arrays = ck.model->all_arrays();
  if (listed.size() != arrays.size()) throw DataError("checkpoint: array count mismatch");
  for (std::size_t k = 0; k < arrays.size(); ++k) {
    core::Tensor& t = *arrays[k];
    if (listed[k].at("name") != t.name || listed[k].at("rows") != t.value.rows() || listed[k].at("cols") != t.value.cols()) {
      throw DataError("checkpoint: array '" + t.name + "' missing or reshaped");
    }
    for (core::Index i = 0; i < t.value.size(); ++i) t.value.data()[i] = std::bit_cast<double>(get_u64(in));
  }
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_vocab_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return load_checkpoint(in, expected_vocab_hash);
}

}  // namespace kt::io
