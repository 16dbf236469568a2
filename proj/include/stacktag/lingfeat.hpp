#pragma once

// Discrete linguistic features per token: POS tag, capitalization class and
// collapsed orthographic shape.

#include <array>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "stacktag/corpus.hpp"
#include "stacktag/utf8.hpp"

namespace stacktag {

enum class CapClass : int { kAllLower = 0, kAllUpper = 1, kInitCap = 2, kMixed = 3, kNoLetters = 4 };

inline constexpr int kCapClassCount = 5;

struct FeatureDims {
  int pos_dim = 50;
  int ortho_dim = 50;
  int cap_dim = 5;
};

/// Map uppercase to X, lowercase to x, digits to d and keep anything else,
/// then collapse runs of the same symbol.
inline std::string ortho_shape(std::string_view surface) {
  std::string out;
  char32_t prev = 0;
  bool have_prev = false;
  for (char32_t c : utf8::decode(surface)) {
    char32_t m = c;
    if (utf8::is_upper(c)) m = U'X';
    else if (utf8::is_lower(c)) m = U'x';
    else if (utf8::is_digit(c)) m = U'd';
    if (have_prev && m == prev) continue;
    utf8::append(out, m);
    prev = m;
    have_prev = true;
  }
  return out;
}

inline CapClass cap_class(std::string_view surface) {
  const auto cps = utf8::decode(surface);
  bool any_letter = false, all_lower = true, all_upper = true, rest_lower = true;
  for (std::size_t i = 0; i < cps.size(); ++i) {
    const char32_t c = cps[i];
    any_letter |= utf8::is_letter(c);
    all_lower &= utf8::is_lower(c);
    all_upper &= utf8::is_upper(c);
    if (i > 0) rest_lower &= utf8::is_lower(c);
  }
  if (!any_letter) return CapClass::kNoLetters;
  if (all_lower) return CapClass::kAllLower;
  if (all_upper) return CapClass::kAllUpper;
  if (utf8::is_upper(cps.front()) && rest_lower) return CapClass::kInitCap;
  return CapClass::kMixed;
}

/// String -> id index with 0 reserved for unknown values.
class Vocab {
 public:
  static constexpr int kUnk = 0;

  int add(const std::string& key) {
    auto [it, inserted] = ids_.emplace(key, static_cast<int>(ids_.size()) + 1);
    return it->second;
  }

  int id(const std::string& key) const {
    auto it = ids_.find(key);
    return it == ids_.end() ? kUnk : it->second;
  }

  /// Number of ids including UNK.
  int size() const { return static_cast<int>(ids_.size()) + 1; }

  const std::map<std::string, int>& entries() const { return ids_; }

  friend void to_json(nlohmann::json& j, const Vocab& v) { j = v.ids_; }
  friend void from_json(const nlohmann::json& j, Vocab& v) {
    v.ids_ = j.get<std::map<std::string, int>>();
    std::vector<bool> seen(v.ids_.size() + 1, false);
    for (const auto& [k, id] : v.ids_) {
      if (id < 1 || id > static_cast<int>(v.ids_.size()) || seen[static_cast<std::size_t>(id)])
        throw DataError(DataErrc::kBadFormat, "vocabulary ids are not a bijection onto 1..n");
      seen[static_cast<std::size_t>(id)] = true;
    }
  }

 private:
  std::map<std::string, int> ids_;
};

struct FeatureIds {
  int pos = 0;
  int shape = 0;
  int cap = 0;

  bool operator==(const FeatureIds&) const = default;
};

struct FeatureVocab {
  Vocab pos;
  Vocab shape;

  /// Built from the training split only; ids are assigned in first-seen order.
  static FeatureVocab build(std::span<const Sentence> train) {
    FeatureVocab v;
    for (const auto& s : train) {
      for (const auto& t : s.tokens) {
        if (t.pos) v.pos.add(*t.pos);
        v.shape.add(ortho_shape(t.surface));
      }
    }
    return v;
  }
};

inline void to_json(nlohmann::json& j, const FeatureVocab& v) { j = {{"pos", v.pos}, {"shape", v.shape}}; }

inline void from_json(const nlohmann::json& j, FeatureVocab& v) {
  j.at("pos").get_to(v.pos);
  j.at("shape").get_to(v.shape);
}

inline std::vector<FeatureIds> featurize(const Sentence& sentence, const FeatureVocab& vocab) {
  std::vector<FeatureIds> out;
  out.reserve(sentence.size());
  for (const auto& t : sentence.tokens) {
    FeatureIds f;
    f.pos = t.pos ? vocab.pos.id(*t.pos) : Vocab::kUnk;
    f.shape = vocab.shape.id(ortho_shape(t.surface));
    f.cap = static_cast<int>(cap_class(t.surface));
    out.push_back(f);
  }
  return out;
}

}  // namespace stacktag
