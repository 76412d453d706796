#pragma once

// On-disk formats: dataset manifests (text), model checkpoints (binary,
// little-endian float32 body), evaluation reports (text) and per-file
// ground-truth records (JSON).

#include <openssl/evp.h>

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "maladv/error.hpp"
#include "maladv/model.hpp"
#include "maladv/pefile.hpp"
#include "maladv/report.hpp"
#include "maladv/train.hpp"

namespace maladv {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Raw files and digests

inline std::vector<std::uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::uint8_t> bytes(size);
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size)))
    throw Error(ErrorCode::io, "cannot read " + path.string());
  return bytes;
}

inline void write_file(const fs::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot create " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
}

inline void write_text(const fs::path& path, std::string_view text) {
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

inline std::string read_text(const fs::path& path) {
  const auto bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

/// Lowercase hex SHA-256.
inline std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error(ErrorCode::io, "SHA-256 computation failed");
  std::ostringstream os;
  os << std::hex << std::setfill('0');
  for (unsigned int i = 0; i < len; ++i) os << std::setw(2) << static_cast<int>(md[i]);
  return os.str();
}

namespace detail {

inline std::vector<std::string> split(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <class T>
bool parse_number(std::string_view s, T& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && ptr == end;
}

inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size();
}

/// Shortest text that parses back to exactly `v`.
inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, end);
}

inline std::vector<std::string> read_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

/// Parses "# <kind> v<N>: <fields>" and checks kind, version and field list.
inline void check_header(const std::string& line, std::string_view kind, std::string_view fields, ErrorCode code,
                         const fs::path& path) {
  const std::string expected_prefix = "# " + std::string(kind) + " v";
  if (line.rfind(expected_prefix, 0) != 0)
    throw Error(code, path.string() + ":1: missing '" + expected_prefix + "' header");
  const auto colon = line.find(':', expected_prefix.size());
  std::uint32_t version = 0;
  if (colon == std::string::npos ||
      !parse_number(std::string_view(line).substr(expected_prefix.size(), colon - expected_prefix.size()), version))
    throw Error(code, path.string() + ":1: malformed header");
  if (version != 1) throw Error(code, path.string() + ":1: unsupported version " + std::to_string(version));
  if (std::string_view(line).substr(colon + 1) != " " + std::string(fields))
    throw Error(code, path.string() + ":1: unexpected field list");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dataset manifest

enum class Split { train, test };

inline const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct ManifestRecord {
  std::string path;  // relative to the manifest's directory
  Label label = Label::benign;
  Split split = Split::train;
  std::size_t size = 0;
  std::string digest;  // SHA-256 hex of the file contents

  friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

struct DatasetManifest {
  std::vector<ManifestRecord> records;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

inline constexpr std::string_view kManifestFields = "path,label,split,size,digest";

inline void write_manifest(const DatasetManifest& manifest, const fs::path& path) {
  std::ostringstream os;
  os << "# maladv-manifest v1: " << kManifestFields << '\n';
  for (const auto& r : manifest.records)
    os << r.path << ',' << static_cast<int>(r.label) << ',' << to_string(r.split) << ',' << r.size << ','
       << r.digest << '\n';
  write_text(path, os.str());
}

/// One record per line. The version header is optional; an empty file is an
/// empty manifest.
inline DatasetManifest read_manifest(const fs::path& path) {
  const auto lines = detail::read_lines(path);
  DatasetManifest manifest;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    const std::string where = path.string() + ":" + std::to_string(i + 1);
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (i != 0) throw Error(ErrorCode::manifest_format, where + ": header only allowed on line 1");
      detail::check_header(line, "maladv-manifest", kManifestFields, ErrorCode::manifest_format, path);
      continue;
    }
    const auto f = detail::split(line, ',');
    if (f.size() != 5) throw Error(ErrorCode::manifest_format, where + ": expected 5 fields, got " + std::to_string(f.size()));
    ManifestRecord r;
    r.path = f[0];
    if (r.path.empty()) throw Error(ErrorCode::manifest_format, where + ": empty path");
    if (f[1] == "0") r.label = Label::benign;
    else if (f[1] == "1") r.label = Label::malware;
    else throw Error(ErrorCode::manifest_format, where + ": label must be 0 or 1");
    if (f[2] == "train") r.split = Split::train;
    else if (f[2] == "test") r.split = Split::test;
    else throw Error(ErrorCode::manifest_format, where + ": unknown split '" + f[2] + "'");
    if (!detail::parse_number(f[3], r.size)) throw Error(ErrorCode::manifest_format, where + ": bad size");
    r.digest = f[4];
    if (r.digest.size() != 64 || r.digest.find_first_not_of("0123456789abcdef") != std::string::npos)
      throw Error(ErrorCode::manifest_format, where + ": digest must be 64 lowercase hex characters");
    if (!seen.insert(r.path).second) throw Error(ErrorCode::duplicate_path, where + ": duplicate path " + r.path);
    manifest.records.push_back(std::move(r));
  }
  return manifest;
}

/// Manifest plus file contents, held in memory.
struct Corpus {
  DatasetManifest manifest;
  std::vector<std::vector<std::uint8_t>> files;  // parallel to manifest.records

  std::size_t size() const { return files.size(); }

  std::vector<std::size_t> indices(Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < manifest.records.size(); ++i)
      if (manifest.records[i].split == split) out.push_back(i);
    return out;
  }

  std::vector<std::size_t> indices(Split split, Label label) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < manifest.records.size(); ++i)
      if (manifest.records[i].split == split && manifest.records[i].label == label) out.push_back(i);
    return out;
  }

  std::vector<TrainingExample> examples(Split split) const {
    std::vector<TrainingExample> out;
    for (std::size_t i : indices(split)) out.push_back({files[i], manifest.records[i].label});
    return out;
  }
};

/// Loads every file named by the manifest and verifies size and digest.
inline Corpus load_corpus(const fs::path& manifest_path) {
  Corpus corpus;
  corpus.manifest = read_manifest(manifest_path);
  const fs::path root = manifest_path.parent_path();
  for (const auto& r : corpus.manifest.records) {
    auto bytes = read_file(root / r.path);
    if (bytes.size() != r.size || sha256_hex(bytes) != r.digest)
      throw Error(ErrorCode::digest_mismatch, r.path + " does not match its manifest record");
    corpus.files.push_back(std::move(bytes));
  }
  return corpus;
}

/// Training examples drawn from a corpus split, with the class check train() requires.
inline std::vector<TrainingExample> split_examples(const Corpus& corpus, Split split) {
  auto ex = corpus.examples(split);
  if (ex.empty()) throw Error(ErrorCode::empty_dataset, std::string(to_string(split)) + " split is empty");
  return ex;
}

inline TrainResult train(MalConvModel model, const Corpus& corpus, const TrainConfig& cfg) {
  const auto ex = split_examples(corpus, Split::train);
  return train(std::move(model), std::span<const TrainingExample>(ex), cfg);
}

// ---------------------------------------------------------------------------
// Ground-truth records

inline nlohmann::json to_json(const GroundTruth& t) {
  nlohmann::json j;
  j["version"] = 1;
  j["label"] = static_cast<int>(t.label);
  j["e_lfanew"] = t.e_lfanew;
  j["optional_header_size"] = t.optional_header_size;
  j["size"] = t.size;
  auto& secs = j["sections"] = nlohmann::json::array();
  for (const auto& s : t.sections)
    secs.push_back({{"name", s.name_string()},
                    {"virtual_size", s.virtual_size},
                    {"virtual_address", s.virtual_address},
                    {"raw_size", s.raw_size},
                    {"raw_address", s.raw_address},
                    {"characteristics", s.characteristics}});
  auto& slack = j["slack"] = nlohmann::json::array();
  for (const auto& r : t.slack) slack.push_back({{"start", r.start}, {"length", r.length}});
  j["malicious_motif_positions"] = t.malicious_motif_positions;
  j["benign_motif_positions"] = t.benign_motif_positions;
  return j;
}

inline GroundTruth ground_truth_from_json(const nlohmann::json& j) {
  if (j.value("version", 0) != 1) throw Error(ErrorCode::manifest_format, "unsupported ground-truth version");
  GroundTruth t;
  t.label = j.at("label").get<int>() == 1 ? Label::malware : Label::benign;
  t.e_lfanew = j.at("e_lfanew").get<std::uint32_t>();
  t.optional_header_size = j.at("optional_header_size").get<std::uint16_t>();
  t.size = j.at("size").get<std::size_t>();
  for (const auto& s : j.at("sections")) {
    SectionHeader h;
    const auto name = s.at("name").get<std::string>();
    std::copy_n(name.begin(), std::min<std::size_t>(name.size(), 8), h.name.begin());
    h.virtual_size = s.at("virtual_size").get<std::uint32_t>();
    h.virtual_address = s.at("virtual_address").get<std::uint32_t>();
    h.raw_size = s.at("raw_size").get<std::uint32_t>();
    h.raw_address = s.at("raw_address").get<std::uint32_t>();
    h.characteristics = s.at("characteristics").get<std::uint32_t>();
    t.sections.push_back(h);
  }
  for (const auto& r : j.at("slack")) t.slack.push_back({r.at("start").get<std::size_t>(), r.at("length").get<std::size_t>()});
  t.malicious_motif_positions = j.at("malicious_motif_positions").get<std::vector<std::size_t>>();
  t.benign_motif_positions = j.at("benign_motif_positions").get<std::vector<std::size_t>>();
  return t;
}

inline void write_ground_truth(const GroundTruth& t, const fs::path& path) { write_text(path, to_json(t).dump(2) + "\n"); }

inline GroundTruth read_ground_truth(const fs::path& path) {
  try {
    return ground_truth_from_json(nlohmann::json::parse(read_text(path)));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::manifest_format, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Model checkpoints
//
// Header: "MCKP", u32 version, eight u64 hyperparameter fields, nine u64
// parameter-array byte lengths. Body: the arrays as little-endian float32.

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kCheckpointHeaderSize = 4 + 4 + 8 * 8 + 8 * kParameterArrayCount;

namespace detail {

inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>(v >> (8 * i)));
}
inline void put_u64(std::string& s, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>(v >> (8 * i)));
}
inline std::uint64_t get_le(const unsigned char* p, int n) {
  std::uint64_t v = 0;
  for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const MalConvModel& model) {
  model.check_shapes();
  const auto& h = model.hyper;
  std::string s = "MCKP";
  detail::put_u32(s, kCheckpointVersion);
  for (std::uint64_t v : {std::uint64_t{h.max_len}, std::uint64_t{h.vocab_size}, std::uint64_t{h.embed_dim},
                          std::uint64_t{h.kernel_size}, std::uint64_t{h.stride}, std::uint64_t{h.num_filters},
                          std::uint64_t{h.hidden_units}, h.seed})
    detail::put_u64(s, v);
  for (const auto* arr : model.parameter_arrays()) detail::put_u64(s, arr->size() * 4);
  for (const auto* arr : model.parameter_arrays())
    for (float v : *arr) detail::put_u32(s, std::bit_cast<std::uint32_t>(v));
  return s;
}

inline void save_checkpoint(const MalConvModel& model, const fs::path& path) { write_text(path, serialize_checkpoint(model)); }

inline MalConvModel load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open " + path.string());
  unsigned char header[kCheckpointHeaderSize];
  if (!in.read(reinterpret_cast<char*>(header), sizeof(header)))
    throw Error(ErrorCode::corrupt_checkpoint, path.string() + ": truncated header");
  if (std::string_view(reinterpret_cast<char*>(header), 4) != "MCKP")
    throw Error(ErrorCode::incompatible_checkpoint, path.string() + ": bad magic");
  const auto version = detail::get_le(header + 4, 4);
  if (version != kCheckpointVersion)
    throw Error(ErrorCode::incompatible_checkpoint, path.string() + ": unsupported version " + std::to_string(version));

  Hyperparams h;
  const unsigned char* p = header + 8;
  h.max_len = detail::get_le(p, 8);
  h.vocab_size = detail::get_le(p + 8, 8);
  h.embed_dim = detail::get_le(p + 16, 8);
  h.kernel_size = detail::get_le(p + 24, 8);
  h.stride = detail::get_le(p + 32, 8);
  h.num_filters = detail::get_le(p + 40, 8);
  h.hidden_units = detail::get_le(p + 48, 8);
  h.seed = detail::get_le(p + 56, 8);
  try {
    h.validate();
  } catch (const Error& e) {
    throw Error(ErrorCode::incompatible_checkpoint, path.string() + ": " + e.what());
  }
  const auto expected = MalConvModel::parameter_sizes(h);
  std::uint64_t body = 0;
  for (std::size_t i = 0; i < kParameterArrayCount; ++i) {
    const auto len = detail::get_le(p + 64 + 8 * i, 8);
    if (len != expected[i] * 4)
      throw Error(ErrorCode::incompatible_checkpoint,
                  path.string() + ": parameter array " + std::to_string(i) + " length disagrees with hyperparameters");
    body += len;
  }

  MalConvModel model = MalConvModel::zeros(h);
  std::vector<unsigned char> buf(body);
  if (!in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(body)))
    throw Error(ErrorCode::corrupt_checkpoint, path.string() + ": body shorter than header declares");
  if (in.peek() != std::ifstream::traits_type::eof())
    throw Error(ErrorCode::corrupt_checkpoint, path.string() + ": trailing bytes after body");
  std::size_t off = 0;
  for (auto* arr : model.parameter_arrays())
    for (auto& v : *arr) {
      v = std::bit_cast<float>(static_cast<std::uint32_t>(detail::get_le(buf.data() + off, 4)));
      off += 4;
    }
  return model;
}

// ---------------------------------------------------------------------------
// Evaluation reports

inline constexpr std::string_view kReportFields =
    "attack,budget,eps_step,eps_ball,n_candidates,n_success,success_rate,mean_modified_bytes,mean_gradient_evals,"
    "model_id,seed,n_excluded";

inline std::string format_report(const EvalReport& report) {
  std::ostringstream os;
  os << "# maladv-report v1: " << kReportFields << '\n';
  for (const auto& r : report.rows)
    os << to_string(r.attack) << ',' << r.budget << ',' << detail::format_double(r.eps_step) << ','
       << detail::format_double(r.eps_ball) << ',' << r.n_candidates << ',' << r.n_success << ','
       << detail::format_double(r.success_rate) << ',' << detail::format_double(r.mean_modified_bytes) << ','
       << detail::format_double(r.mean_gradient_evals) << ',' << r.model_id << ',' << r.seed << ',' << r.n_excluded
       << '\n';
  return os.str();
}

inline void write_report(const EvalReport& report, const fs::path& path) { write_text(path, format_report(report)); }

inline EvalReport read_report(const fs::path& path) {
  const auto lines = detail::read_lines(path);
  if (lines.empty()) throw Error(ErrorCode::report_format, path.string() + ": missing header");
  detail::check_header(lines[0], "maladv-report", kReportFields, ErrorCode::report_format, path);
  EvalReport report;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(i + 1);
    const auto f = detail::split(lines[i], ',');
    if (f.size() != 12) throw Error(ErrorCode::report_format, where + ": expected 12 fields");
    EvalRow r;
    const auto kind = parse_attack_kind(f[0]);
    if (!kind) throw Error(ErrorCode::report_format, where + ": unknown attack " + f[0]);
    r.attack = *kind;
    r.model_id = f[9];
    const bool ok = detail::parse_number(f[1], r.budget) && detail::parse_double(f[2], r.eps_step) &&
                    detail::parse_double(f[3], r.eps_ball) && detail::parse_number(f[4], r.n_candidates) &&
                    detail::parse_number(f[5], r.n_success) && detail::parse_double(f[6], r.success_rate) &&
                    detail::parse_double(f[7], r.mean_modified_bytes) &&
                    detail::parse_double(f[8], r.mean_gradient_evals) && detail::parse_number(f[10], r.seed) &&
                    detail::parse_number(f[11], r.n_excluded);
    if (!ok) throw Error(ErrorCode::report_format, where + ": malformed number");
    report.rows.push_back(std::move(r));
  }
  return report;
}

}  // namespace maladv
