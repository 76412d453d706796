#pragma once

// key=value configuration files and typed bindings onto the library's
// configuration structs. Used by the command-line tool for --config,
// --hyper, --train-cfg and the effective-config record.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "maladv/attack.hpp"
#include "maladv/corpus.hpp"
#include "maladv/error.hpp"
#include "maladv/model.hpp"
#include "maladv/store.hpp"
#include "maladv/train.hpp"

namespace maladv {

/// Ordered key -> value map. Later assignments override earlier ones.
using KeyValues = std::map<std::string, std::string, std::less<>>;

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// One `key=value` per line; blank lines and lines starting with '#' are ignored.
inline KeyValues parse_key_values(std::string_view text, std::string_view source = "<config>") {
  KeyValues kv;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const std::string_view raw = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    const auto line = detail::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    const auto key = detail::trim(line.substr(0, eq == std::string_view::npos ? 0 : eq));
    if (eq == std::string_view::npos || key.empty())
      throw Error(ErrorCode::invalid_config,
                  std::string(source) + ":" + std::to_string(line_no) + ": expected key=value, got '" + std::string(line) + "'");
    kv[std::string(key)] = std::string(detail::trim(line.substr(eq + 1)));
  }
  return kv;
}

inline KeyValues read_key_values(const fs::path& path) { return parse_key_values(read_text(path), path.string()); }

inline std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Value codecs

namespace detail {

[[noreturn]] inline void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  throw Error(ErrorCode::invalid_config,
              "bad value '" + std::string(value) + "' for " + std::string(key) + ": expected " + std::string(expected));
}

inline std::uint64_t to_u64(std::string_view key, std::string_view v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) bad_value(key, v, "a non-negative integer");
  return out;
}

inline double to_real(std::string_view key, std::string_view v) {
  if (v == "inf") return std::numeric_limits<double>::infinity();
  double out = 0;
  if (!parse_double(std::string(v), out)) bad_value(key, v, "a real number");
  return out;
}

inline std::string hex_bytes(std::span<const std::uint8_t> bytes) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s;
  for (auto b : bytes) {
    s += digits[b >> 4];
    s += digits[b & 15];
  }
  return s;
}

inline std::vector<std::uint8_t> from_hex(std::string_view key, std::string_view v) {
  if (v.size() % 2 != 0) bad_value(key, v, "an even number of hex digits");
  std::vector<std::uint8_t> out;
  for (std::size_t i = 0; i < v.size(); i += 2) {
    unsigned b = 0;
    auto [p, ec] = std::from_chars(v.data() + i, v.data() + i + 2, b, 16);
    if (ec != std::errc() || p != v.data() + i + 2) bad_value(key, v, "hex digits");
    out.push_back(static_cast<std::uint8_t>(b));
  }
  return out;
}

inline std::string real_text(double v) { return std::isinf(v) && v > 0 ? "inf" : format_double(v); }

}  // namespace detail

/// A named, typed view onto one field of a configuration struct.
struct Field {
  std::string key;
  std::function<void(std::string_view)> set;
  std::function<std::string()> get;
};

using Fields = std::vector<Field>;

inline Field size_field(std::string key, std::size_t& ref) {
  return {key, [&ref, key](std::string_view v) { ref = static_cast<std::size_t>(detail::to_u64(key, v)); },
          [&ref] { return std::to_string(ref); }};
}

inline Field u32_field(std::string key, std::uint32_t& ref) {
  return {key,
          [&ref, key](std::string_view v) {
            const auto x = detail::to_u64(key, v);
            if (x > 0xFFFFFFFFu) detail::bad_value(key, v, "a 32-bit value");
            ref = static_cast<std::uint32_t>(x);
          },
          [&ref] { return std::to_string(ref); }};
}

inline Field u64_field(std::string key, std::uint64_t& ref) {
  return {key, [&ref, key](std::string_view v) { ref = detail::to_u64(key, v); },
          [&ref] { return std::to_string(ref); }};
}

inline Field real_field(std::string key, double& ref) {
  return {key, [&ref, key](std::string_view v) { ref = detail::to_real(key, v); },
          [&ref] { return detail::real_text(ref); }};
}

inline Field hex_field(std::string key, std::vector<std::uint8_t>& ref) {
  return {key, [&ref, key](std::string_view v) { ref = detail::from_hex(key, v); },
          [&ref] { return detail::hex_bytes(ref); }};
}

inline Field string_field(std::string key, std::string& ref) {
  return {key, [&ref](std::string_view v) { ref = std::string(v); }, [&ref] { return ref; }};
}

inline Fields fields(Hyperparams& h) {
  return {size_field("max-len", h.max_len),         size_field("embed-dim", h.embed_dim),
          size_field("kernel-size", h.kernel_size), size_field("stride", h.stride),
          size_field("num-filters", h.num_filters), size_field("hidden-units", h.hidden_units)};
}

inline Fields fields(TrainConfig& t) {
  return {real_field("learning-rate", t.learning_rate), real_field("momentum", t.momentum),
          real_field("decay", t.decay), size_field("batch-size", t.batch_size), size_field("epochs", t.epochs)};
}

inline Fields fields(SynthConfig& s) {
  return {size_field("min-sections", s.min_sections),
          size_field("max-sections", s.max_sections),
          u32_field("file-alignment", s.file_alignment),
          size_field("min-payload", s.min_payload),
          size_field("max-payload", s.max_payload),
          hex_field("malicious-motif", s.malicious_motif.pattern),
          real_field("malicious-density", s.malicious_motif.per_kib),
          hex_field("benign-motif", s.benign_motif.pattern),
          real_field("benign-density", s.benign_motif.per_kib),
          real_field("cross-motif-prob", s.cross_motif_probability),
          real_field("benign-zero-frac", s.benign_zero_fraction),
          real_field("malware-zero-frac", s.malware_zero_fraction),
          real_field("benign-text-frac", s.benign_text_fraction),
          real_field("malware-text-frac", s.malware_text_fraction)};
}

inline Fields fields(CorpusSpec& c) {
  Fields f = {size_field("count", c.count), real_field("malware-frac", c.malware_fraction),
              real_field("test-frac", c.test_fraction)};
  for (auto& x : fields(c.synth)) f.push_back(std::move(x));
  return f;
}

/// Applies every key of `kv` that names a field. Returns the keys that matched.
inline std::vector<std::string> apply_values(const Fields& fs_, const KeyValues& kv) {
  std::vector<std::string> used;
  for (const auto& f : fs_) {
    auto it = kv.find(f.key);
    if (it == kv.end()) continue;
    f.set(it->second);
    used.push_back(f.key);
  }
  return used;
}

inline void record_values(const Fields& fs_, KeyValues& out) {
  for (const auto& f : fs_) out[f.key] = f.get();
}

/// Rejects keys that no field consumed.
inline void reject_unknown(const KeyValues& kv, const std::vector<Fields>& groups, std::string_view source) {
  for (const auto& [k, v] : kv) {
    bool known = false;
    for (const auto& g : groups)
      for (const auto& f : g) known = known || f.key == k;
    if (!known) throw Error(ErrorCode::invalid_config, "unknown key '" + k + "' in " + std::string(source));
  }
}

}  // namespace maladv
