#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "maladv/pefile.hpp"
#include "maladv/rng.hpp"
#include "maladv/store.hpp"

namespace maladv {

struct CorpusSpec {
  std::size_t count = 100;
  double malware_fraction = 0.5;
  /// Files are split by generation order: the last test_fraction go to test.
  double test_fraction = 0.2;
  SynthConfig synth;
  std::uint64_t seed = 0;

  void validate(std::size_t kernel_size = 50) const {
    if (!(malware_fraction >= 0 && malware_fraction <= 1))
      throw Error(ErrorCode::invalid_config, "malware fraction must lie in [0, 1]");
    if (!(test_fraction >= 0 && test_fraction <= 1))
      throw Error(ErrorCode::invalid_config, "test fraction must lie in [0, 1]");
    synth.validate(kernel_size);
  }
};

struct GeneratedCorpus {
  Corpus corpus;
  std::vector<GroundTruth> truths;  // parallel to corpus.files
};

inline std::string sample_path(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "samples/%06zu.exe", i);
  return buf;
}

inline GeneratedCorpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  const auto n_malware = static_cast<std::size_t>(std::llround(static_cast<double>(spec.count) * spec.malware_fraction));
  const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(spec.count) * spec.test_fraction));
  std::vector<Label> labels(spec.count, Label::benign);
  std::fill_n(labels.begin(), n_malware, Label::malware);
  Rng label_rng = derive_rng(spec.seed, {0x6c61626c});
  std::shuffle(labels.begin(), labels.end(), label_rng);

  GeneratedCorpus out;
  for (std::size_t i = 0; i < spec.count; ++i) {
    Rng rng = derive_rng(spec.seed, {0x66696c65, i});
    auto pe = generate_synthetic_pe(spec.synth, labels[i], rng);
    ManifestRecord r;
    r.path = sample_path(i);
    r.label = labels[i];
    r.split = i < spec.count - n_test ? Split::train : Split::test;
    r.size = pe.bytes.size();
    r.digest = sha256_hex(pe.bytes);
    out.corpus.manifest.records.push_back(std::move(r));
    out.corpus.files.push_back(std::move(pe.bytes));
    out.truths.push_back(std::move(pe.truth));
  }
  return out;
}

/// Writes samples, a ground-truth JSON next to each sample, and manifest.csv.
inline fs::path write_corpus(const GeneratedCorpus& g, const fs::path& dir) {
  for (std::size_t i = 0; i < g.corpus.size(); ++i) {
    const fs::path file = dir / g.corpus.manifest.records[i].path;
    write_file(file, g.corpus.files[i]);
    if (i < g.truths.size()) write_ground_truth(g.truths[i], fs::path(file).replace_extension(".json"));
  }
  const fs::path manifest = dir / "manifest.csv";
  write_manifest(g.corpus.manifest, manifest);
  return manifest;
}

}  // namespace maladv
