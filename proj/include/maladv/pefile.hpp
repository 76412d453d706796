#pragma once

// Minimal PE reader (headers + section table), slack extraction, and a
// generator for labeled synthetic PE files with recorded ground truth.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "maladv/error.hpp"
#include "maladv/model.hpp"
#include "maladv/rng.hpp"

namespace maladv {

inline constexpr std::size_t kLfanewOffset = 0x3C;
inline constexpr std::size_t kCoffHeaderSize = 20;
inline constexpr std::size_t kSectionEntrySize = 40;

struct SectionHeader {
  std::array<char, 8> name{};
  std::uint32_t virtual_size = 0;
  std::uint32_t virtual_address = 0;
  std::uint32_t raw_size = 0;     // SizeOfRawData
  std::uint32_t raw_address = 0;  // PointerToRawData
  std::uint32_t characteristics = 0;

  std::string name_string() const {
    return std::string(name.data(), strnlen(name.data(), name.size()));
  }

  friend bool operator==(const SectionHeader&, const SectionHeader&) = default;
};

struct PEFile {
  std::uint32_t e_lfanew = 0;
  std::uint16_t num_sections = 0;
  std::uint16_t optional_header_size = 0;
  std::vector<SectionHeader> sections;
  std::size_t total_size = 0;

  std::size_t section_table_offset() const { return e_lfanew + 4 + kCoffHeaderSize + optional_header_size; }
  /// End of everything the loader reads before the first section.
  std::size_t headers_end() const { return section_table_offset() + kSectionEntrySize * num_sections; }
};

struct SlackRegion {
  std::size_t start = 0;
  std::size_t length = 0;

  std::size_t end() const { return start + length; }
  friend bool operator==(const SlackRegion&, const SlackRegion&) = default;
};

namespace detail {

inline std::string hex_offset(std::size_t off) {
  std::ostringstream os;
  os << "0x" << std::hex << off;
  return os.str();
}

inline std::uint16_t read_u16(std::span<const std::uint8_t> b, std::size_t off) {
  return static_cast<std::uint16_t>(b[off] | (b[off + 1] << 8));
}

inline std::uint32_t read_u32(std::span<const std::uint8_t> b, std::size_t off) {
  return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
         (static_cast<std::uint32_t>(b[off + 2]) << 16) | (static_cast<std::uint32_t>(b[off + 3]) << 24);
}

inline void write_u16(std::span<std::uint8_t> b, std::size_t off, std::uint16_t v) {
  b[off] = static_cast<std::uint8_t>(v);
  b[off + 1] = static_cast<std::uint8_t>(v >> 8);
}

inline void write_u32(std::span<std::uint8_t> b, std::size_t off, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b[off + i] = static_cast<std::uint8_t>(v >> (8 * i));
}

}  // namespace detail

/// Reads the DOS header, PE signature, COFF header and section table.
/// Rejects files whose sections run past EOF, overlap, or are out of order.
inline PEFile parse_pe(std::span<const std::uint8_t> bytes) {
  using detail::hex_offset;
  const std::size_t n = bytes.size();
  if (n < 2 || bytes[0] != 'M' || bytes[1] != 'Z') throw Error(ErrorCode::not_a_pe, "missing MZ magic at offset 0x0");
  if (n < kLfanewOffset + 4)
    throw Error(ErrorCode::truncated_file, "DOS header truncated at offset " + hex_offset(kLfanewOffset));

  PEFile pe;
  pe.total_size = n;
  pe.e_lfanew = detail::read_u32(bytes, kLfanewOffset);
  const std::uint64_t sig = pe.e_lfanew;
  if (sig + 4 + kCoffHeaderSize > n)
    throw Error(ErrorCode::truncated_file, "PE/COFF header truncated at offset " + hex_offset(sig));
  if (bytes[sig] != 'P' || bytes[sig + 1] != 'E' || bytes[sig + 2] != 0 || bytes[sig + 3] != 0)
    throw Error(ErrorCode::not_a_pe, "missing PE signature at offset " + hex_offset(sig));

  pe.num_sections = detail::read_u16(bytes, sig + 6);
  pe.optional_header_size = detail::read_u16(bytes, sig + 20);
  const std::uint64_t table = pe.section_table_offset();
  if (table + static_cast<std::uint64_t>(kSectionEntrySize) * pe.num_sections > n)
    throw Error(ErrorCode::truncated_file, "section table truncated at offset " + hex_offset(table));

  pe.sections.reserve(pe.num_sections);
  std::uint64_t previous_end = 0;
  for (std::size_t i = 0; i < pe.num_sections; ++i) {
    const std::size_t entry = table + i * kSectionEntrySize;
    SectionHeader s;
    std::memcpy(s.name.data(), bytes.data() + entry, 8);
    s.virtual_size = detail::read_u32(bytes, entry + 8);
    s.virtual_address = detail::read_u32(bytes, entry + 12);
    s.raw_size = detail::read_u32(bytes, entry + 16);
    s.raw_address = detail::read_u32(bytes, entry + 20);
    s.characteristics = detail::read_u32(bytes, entry + 36);
    const std::uint64_t raw_end = static_cast<std::uint64_t>(s.raw_address) + s.raw_size;
    if (raw_end > n)
      throw Error(ErrorCode::bounds, "section " + std::to_string(i) + " (entry at " + hex_offset(entry) +
                                         ") extends to " + hex_offset(raw_end) + " past EOF " + hex_offset(n));
    if (s.raw_size > 0) {
      if (s.raw_address < previous_end)
        throw Error(ErrorCode::malformed_sections, "section " + std::to_string(i) + " (entry at " +
                                                       hex_offset(entry) + ") overlaps or precedes its predecessor");
      previous_end = raw_end;
    }
    pe.sections.push_back(s);
  }
  return pe;
}

/// Tail gap of every section whose raw size exceeds its virtual size:
/// [raw_address + virtual_size, raw_address + raw_size).
inline std::vector<SlackRegion> slack_regions(const PEFile& pe) {
  std::vector<SlackRegion> out;
  for (const auto& s : pe.sections)
    if (s.raw_size > s.virtual_size)
      out.push_back({static_cast<std::size_t>(s.raw_address) + s.virtual_size,
                     static_cast<std::size_t>(s.raw_size) - s.virtual_size});
  return out;
}

/// Flattened, ascending slack byte indices (the modifiable set).
inline std::vector<std::size_t> slack_indices(const PEFile& pe) {
  std::vector<std::size_t> m;
  for (const auto& r : slack_regions(pe))
    for (std::size_t i = r.start; i < r.end(); ++i) m.push_back(i);
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic corpus generation

struct Motif {
  std::vector<std::uint8_t> pattern;
  double per_kib = 1.0;  // planting density per KiB of section payload, at least one per file
};

struct SynthConfig {
  std::size_t min_sections = 1;
  std::size_t max_sections = 4;
  std::uint32_t file_alignment = 512;
  std::size_t min_payload = 64;
  std::size_t max_payload = 1200;
  Motif malicious_motif{{0xE8, 0x13, 0x37, 0xC0, 0xDE, 0x6A, 0x40, 0x68, 0x00, 0x30, 0xFF, 0x15, 0xBA, 0xD0, 0x5E, 0xC3},
                        1.0};
  Motif benign_motif{{0x55, 0x8B, 0xEC, 0x83, 0xEC, 0x10, 0x53, 0x56, 0x57, 0x8D, 0x7D, 0xF0, 0xB9, 0x04, 0xF3, 0xAB},
                     1.0};
  /// Probability that a file also carries one instance of the other class's motif.
  double cross_motif_probability = 0.0;
  /// Fraction of payload filler bytes that are zero, per label; the rest are
  /// uniform. Malware filler defaults to denser (packed-looking) content.
  double benign_zero_fraction = 0.5;
  double malware_zero_fraction = 0.0;
  /// Fraction of payload covered by printable-ASCII string runs, per label.
  double benign_text_fraction = 0.4;
  double malware_text_fraction = 0.0;
  std::uint64_t seed = 0;

  void validate(std::size_t kernel_size = 50) const {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::invalid_config, msg); };
    if (min_sections == 0 || min_sections > max_sections || max_sections > 96)
      fail("section count range must satisfy 1 <= min <= max <= 96");
    if (file_alignment < 16 || (file_alignment & (file_alignment - 1)) != 0)
      fail("file_alignment must be a power of two >= 16");
    if (min_payload == 0 || min_payload > max_payload) fail("payload range must satisfy 1 <= min <= max");
    for (const Motif* m : {&malicious_motif, &benign_motif}) {
      if (m->pattern.empty() || m->pattern.size() >= kernel_size) fail("motifs must be nonempty and shorter than kernel_size");
      if (m->pattern.size() > min_payload) fail("motifs must fit in the smallest section payload");
      if (!(m->per_kib >= 0)) fail("motif density must be >= 0");
    }
    if (!(cross_motif_probability >= 0 && cross_motif_probability <= 1)) fail("cross_motif_probability must lie in [0, 1]");
    for (double z : {benign_zero_fraction, malware_zero_fraction})
      if (!(z >= 0 && z <= 1)) fail("zero fractions must lie in [0, 1]");
    for (double t : {benign_text_fraction, malware_text_fraction})
      if (!(t >= 0 && t <= 1)) fail("text fractions must lie in [0, 1]");
  }
};

/// What the generator actually wrote, for checking the parser and slack extraction.
struct GroundTruth {
  Label label = Label::benign;
  std::uint32_t e_lfanew = 0;
  std::uint16_t optional_header_size = 0;
  std::vector<SectionHeader> sections;
  std::vector<SlackRegion> slack;
  std::vector<std::size_t> malicious_motif_positions;
  std::vector<std::size_t> benign_motif_positions;
  std::size_t size = 0;

  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

struct SyntheticPE {
  std::vector<std::uint8_t> bytes;
  GroundTruth truth;
};

namespace detail {

inline std::uint32_t align_up(std::uint64_t v, std::uint32_t alignment) {
  return static_cast<std::uint32_t>((v + alignment - 1) / alignment * alignment);
}

inline constexpr std::uint32_t kSectionAlignment = 0x1000;
inline constexpr std::uint32_t kSynthLfanew = 0x80;
inline constexpr std::uint16_t kPe32OptionalHeaderSize = 0xE0;

inline void write_dos_header(std::span<std::uint8_t> b) {
  static constexpr std::uint8_t stub_code[] = {0x0E, 0x1F, 0xBA, 0x0E, 0x00, 0xB4, 0x09,
                                               0xCD, 0x21, 0xB8, 0x01, 0x4C, 0xCD, 0x21};
  static constexpr std::string_view stub_text = "This program cannot be run in DOS mode.\r\r\n$";
  b[0] = 'M';
  b[1] = 'Z';
  write_u16(b, 0x02, 0x90);    // e_cblp
  write_u16(b, 0x04, 0x03);    // e_cp
  write_u16(b, 0x08, 0x04);    // e_cparhdr
  write_u16(b, 0x0C, 0xFFFF);  // e_maxalloc
  write_u16(b, 0x10, 0xB8);    // e_sp
  write_u16(b, 0x18, 0x40);    // e_lfarlc
  write_u32(b, kLfanewOffset, kSynthLfanew);
  std::copy(std::begin(stub_code), std::end(stub_code), b.begin() + 0x40);
  std::copy(stub_text.begin(), stub_text.end(), b.begin() + 0x40 + sizeof(stub_code));
}

inline std::size_t motif_count(const Motif& m, std::size_t payload_total) {
  const auto planned = static_cast<std::size_t>(m.per_kib * static_cast<double>(payload_total) / 1024.0 + 0.5);
  return std::max<std::size_t>(1, planned);
}

}  // namespace detail

/// Builds a well-formed PE32 image with label-dependent motifs planted in
/// section bodies. Section raw sizes are rounded to file_alignment and the
/// tail of each section is zero-filled slack.
inline SyntheticPE generate_synthetic_pe(const SynthConfig& cfg, Label label, Rng& rng) {
  using namespace detail;
  static constexpr std::array<const char*, 8> names = {".text", ".rdata", ".data", ".rsrc",
                                                       ".reloc", ".pdata", ".tls", ".idata"};
  static constexpr std::array<std::uint32_t, 8> flags = {0x60000020, 0x40000040, 0xC0000040, 0x40000040,
                                                         0x42000040, 0x40000040, 0xC0000040, 0xC0000040};

  const auto num_sections = std::uniform_int_distribution<std::size_t>(cfg.min_sections, cfg.max_sections)(rng);
  std::uniform_int_distribution<std::size_t> payload_dist(cfg.min_payload, cfg.max_payload);

  GroundTruth truth;
  truth.label = label;
  truth.e_lfanew = kSynthLfanew;
  truth.optional_header_size = kPe32OptionalHeaderSize;

  const std::size_t table = kSynthLfanew + 4 + kCoffHeaderSize + kPe32OptionalHeaderSize;
  const std::uint32_t size_of_headers = align_up(table + kSectionEntrySize * num_sections, cfg.file_alignment);
  std::uint32_t raw_cursor = size_of_headers;
  std::uint32_t va_cursor = kSectionAlignment;
  std::size_t payload_total = 0;
  for (std::size_t i = 0; i < num_sections; ++i) {
    SectionHeader s;
    const std::string_view nm = names[i % names.size()];
    std::copy(nm.begin(), nm.end(), s.name.begin());
    s.characteristics = flags[i % flags.size()];
    s.virtual_size = static_cast<std::uint32_t>(payload_dist(rng));
    s.raw_size = align_up(s.virtual_size, cfg.file_alignment);
    s.raw_address = raw_cursor;
    s.virtual_address = va_cursor;
    raw_cursor += s.raw_size;
    va_cursor += align_up(s.virtual_size, kSectionAlignment);
    payload_total += s.virtual_size;
    truth.sections.push_back(s);
    if (s.raw_size > s.virtual_size) truth.slack.push_back({s.raw_address + s.virtual_size, s.raw_size - s.virtual_size});
  }

  std::vector<std::uint8_t> b(raw_cursor, 0);
  write_dos_header(b);
  const std::size_t sig = kSynthLfanew;
  b[sig] = 'P';
  b[sig + 1] = 'E';
  write_u16(b, sig + 4, 0x014C);
  write_u16(b, sig + 6, static_cast<std::uint16_t>(num_sections));
  write_u32(b, sig + 8, static_cast<std::uint32_t>(std::uniform_int_distribution<std::uint32_t>(0x50000000, 0x66000000)(rng)));
  write_u16(b, sig + 20, kPe32OptionalHeaderSize);
  write_u16(b, sig + 22, 0x0102);

  const std::size_t opt = sig + 4 + kCoffHeaderSize;
  std::uint32_t size_of_code = 0, size_of_data = 0;
  for (const auto& s : truth.sections) (s.characteristics & 0x20 ? size_of_code : size_of_data) += s.raw_size;
  write_u16(b, opt + 0, 0x010B);
  b[opt + 2] = 14;
  write_u32(b, opt + 4, size_of_code);
  write_u32(b, opt + 8, size_of_data);
  write_u32(b, opt + 16, truth.sections.front().virtual_address);
  write_u32(b, opt + 20, truth.sections.front().virtual_address);
  write_u32(b, opt + 28, 0x00400000);
  write_u32(b, opt + 32, kSectionAlignment);
  write_u32(b, opt + 36, cfg.file_alignment);
  write_u16(b, opt + 40, 6);
  write_u16(b, opt + 48, 6);
  write_u32(b, opt + 56, va_cursor);
  write_u32(b, opt + 60, size_of_headers);
  write_u16(b, opt + 68, std::bernoulli_distribution(0.5)(rng) ? 2 : 3);
  write_u16(b, opt + 70, 0x8140);
  write_u32(b, opt + 72, 0x100000);
  write_u32(b, opt + 76, 0x1000);
  write_u32(b, opt + 80, 0x100000);
  write_u32(b, opt + 84, 0x1000);
  write_u32(b, opt + 92, 16);

  for (std::size_t i = 0; i < num_sections; ++i) {
    const auto& s = truth.sections[i];
    const std::size_t e = table + i * kSectionEntrySize;
    std::copy(s.name.begin(), s.name.end(), b.begin() + e);
    write_u32(b, e + 8, s.virtual_size);
    write_u32(b, e + 12, s.virtual_address);
    write_u32(b, e + 16, s.raw_size);
    write_u32(b, e + 20, s.raw_address);
    write_u32(b, e + 36, s.characteristics);
  }

  // Filler in every section body; slack stays zero.
  std::bernoulli_distribution zero(label == Label::malware ? cfg.malware_zero_fraction : cfg.benign_zero_fraction);
  for (const auto& s : truth.sections)
    for (std::size_t p = s.raw_address; p < s.raw_address + s.virtual_size; ++p) b[p] = zero(rng) ? 0 : random_byte(rng);

  // String runs: printable ASCII, 16..128 bytes, until the text fraction is reached.
  const double text_fraction = label == Label::malware ? cfg.malware_text_fraction : cfg.benign_text_fraction;
  std::uniform_int_distribution<int> printable(0x20, 0x7E);
  for (const auto& s : truth.sections) {
    const auto want = static_cast<std::size_t>(text_fraction * static_cast<double>(s.virtual_size));
    std::size_t written = 0;
    while (written < want) {
      const std::size_t len = std::min<std::size_t>(std::uniform_int_distribution<std::size_t>(16, 128)(rng), want - written);
      const std::size_t pos = s.raw_address + std::uniform_int_distribution<std::size_t>(0, s.virtual_size - len)(rng);
      for (std::size_t p = pos; p < pos + len; ++p) b[p] = static_cast<std::uint8_t>(printable(rng));
      written += len;
    }
  }

  // Plant motifs at non-overlapping offsets inside section payloads.
  std::vector<std::pair<std::size_t, std::size_t>> taken;
  auto plant = [&](const Motif& motif, std::vector<std::size_t>& positions, std::size_t count) {
    const std::size_t len = motif.pattern.size();
    for (std::size_t c = 0; c < count; ++c) {
      for (int attempt = 0; attempt < 64; ++attempt) {
        const auto& s = truth.sections[std::uniform_int_distribution<std::size_t>(0, num_sections - 1)(rng)];
        if (s.virtual_size < len) continue;
        const std::size_t pos =
            s.raw_address + std::uniform_int_distribution<std::size_t>(0, s.virtual_size - len)(rng);
        const bool clash = std::any_of(taken.begin(), taken.end(), [&](auto& t) {
          return pos < t.second && t.first < pos + len;
        });
        if (clash) continue;
        std::copy(motif.pattern.begin(), motif.pattern.end(), b.begin() + pos);
        taken.emplace_back(pos, pos + len);
        positions.push_back(pos);
        break;
      }
    }
  };
  const bool malware = label == Label::malware;
  const Motif& own = malware ? cfg.malicious_motif : cfg.benign_motif;
  const Motif& other = malware ? cfg.benign_motif : cfg.malicious_motif;
  auto& own_pos = malware ? truth.malicious_motif_positions : truth.benign_motif_positions;
  auto& other_pos = malware ? truth.benign_motif_positions : truth.malicious_motif_positions;
  plant(own, own_pos, motif_count(own, payload_total));
  if (std::bernoulli_distribution(cfg.cross_motif_probability)(rng)) plant(other, other_pos, 1);
  std::sort(truth.malicious_motif_positions.begin(), truth.malicious_motif_positions.end());
  std::sort(truth.benign_motif_positions.begin(), truth.benign_motif_positions.end());

  truth.size = b.size();
  return {std::move(b), std::move(truth)};
}

/// Non-overlapping occurrences of `pattern` in `bytes`.
inline std::size_t count_occurrences(std::span<const std::uint8_t> bytes, std::span<const std::uint8_t> pattern) {
  if (pattern.empty() || pattern.size() > bytes.size()) return 0;
  std::size_t count = 0;
  auto it = bytes.begin();
  while (true) {
    it = std::search(it, bytes.end(), pattern.begin(), pattern.end());
    if (it == bytes.end()) break;
    ++count;
    it += static_cast<std::ptrdiff_t>(pattern.size());
  }
  return count;
}

}  // namespace maladv
