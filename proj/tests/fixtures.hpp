#pragma once

// Synthetic corpora and small configurations shared by the unit tests and
// the acceptance runner.

#include <filesystem>
#include <string>
#include <vector>

#include "stacktag/corpus.hpp"
#include "stacktag/rng.hpp"
#include "stacktag/tagger.hpp"

namespace fixtures {

inline const std::vector<std::string>& drug_names() {
  static const std::vector<std::string> v{"Aspirin", "Ibuprofen", "Naproxen", "Paracetamol", "Codeine", "Lisinopril"};
  return v;
}

inline const std::vector<std::string>& filler_words() {
  static const std::vector<std::string> v{"i", "felt", "tired", "after", "the", "dose", "today", "and", "slept", "badly"};
  return v;
}

/// Sentences "<fillers> took <Drug> <fillers>" where the drug is the only
/// entity (B-DRUG). Every sentence has exactly one entity.
inline std::vector<stacktag::Sentence> drug_corpus(std::size_t count, std::uint64_t seed, bool with_pos = false) {
  stacktag::Xoshiro256 rng(seed);
  std::vector<stacktag::Sentence> out;
  for (std::size_t s = 0; s < count; ++s) {
    stacktag::Sentence sent;
    sent.id = s;
    std::vector<std::string> tags;
    auto add = [&](const std::string& w, const std::string& pos, const std::string& tag) {
      sent.tokens.push_back({w, with_pos ? std::optional<std::string>(pos) : std::nullopt});
      tags.push_back(tag);
    };
    const auto pre = 1 + rng.below(2), post = rng.below(3);
    for (std::uint64_t k = 0; k < pre; ++k) add(filler_words()[rng.below(filler_words().size())], "XX", "O");
    add("took", "VBD", "O");
    add(drug_names()[rng.below(drug_names().size())], "NNP", "B-DRUG");
    for (std::uint64_t k = 0; k < post; ++k) add(filler_words()[rng.below(filler_words().size())], "XX", "O");
    sent.gold_tags = tags;
    out.push_back(std::move(sent));
  }
  return out;
}

inline std::vector<stacktag::TaggerSample> as_samples(const std::vector<stacktag::Sentence>& sents) {
  return stacktag::attach_ctx(sents, nullptr);
}

/// Very small network for gradient checks and fast round-trip tests.
inline stacktag::TaggerConfig tiny_tagger_config(std::uint64_t seed = 7) {
  stacktag::TaggerConfig c;
  c.hidden = 3;
  c.char_dim = 3;
  c.char_hidden = 2;
  c.feature_dims = {2, 2, 2};
  c.epochs = 3;
  c.batch = 4;
  c.seed = seed;
  c.init_range = 0.5;
  return c;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("stacktag_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace fixtures
