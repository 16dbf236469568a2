#pragma once

// Corpus ingestion: CoNLL-style NER columns, classification TSV, BIO <-> span
// conversion and the three-fold bagging plan.

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "stacktag/error.hpp"
#include "stacktag/rng.hpp"

namespace stacktag {

struct Token {
  std::string surface;
  std::optional<std::string> pos;
};

struct Sentence {
  std::size_t id = 0;
  std::vector<Token> tokens;
  std::optional<std::vector<std::string>> gold_tags;

  std::size_t size() const { return tokens.size(); }
};

struct EntitySpan {
  std::size_t start = 0;  // inclusive
  std::size_t end = 0;    // exclusive
  std::string etype;

  auto operator<=>(const EntitySpan&) const = default;
};

/// BIO inventory: tag 0 is O, then B-t, I-t for each entity type in order.
class TagScheme {
 public:
  TagScheme() : TagScheme(std::vector<std::string>{}) {}

  explicit TagScheme(std::vector<std::string> entity_types) : types_(std::move(entity_types)) {
    std::unordered_set<std::string> seen;
    tags_.push_back("O");
    for (const auto& t : types_) {
      if (t.empty() || !seen.insert(t).second)
        throw ConfigError("entity types must be non-empty and unique (got '" + t + "')");
      tags_.push_back("B-" + t);
      tags_.push_back("I-" + t);
    }
    for (std::size_t i = 0; i < tags_.size(); ++i) index_.emplace(tags_[i], static_cast<int>(i));
  }

  /// Entity types in order of first appearance among the B-/I- tags of `tags`.
  static TagScheme infer(std::span<const std::string> tags) {
    std::vector<std::string> types;
    std::unordered_set<std::string> seen;
    for (const auto& tag : tags) {
      if (tag == "O") continue;
      if (tag.size() < 3 || (tag[0] != 'B' && tag[0] != 'I') || tag[1] != '-')
        throw DataError(DataErrc::kUnknownTag, "not a BIO tag: '" + tag + "'");
      auto type = tag.substr(2);
      if (seen.insert(type).second) types.push_back(type);
    }
    return TagScheme(std::move(types));
  }

  const std::vector<std::string>& entity_types() const { return types_; }
  const std::vector<std::string>& tags() const { return tags_; }
  std::size_t size() const { return tags_.size(); }

  std::optional<int> index(std::string_view tag) const {
    auto it = index_.find(std::string(tag));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  bool contains(std::string_view tag) const { return index(tag).has_value(); }

  const std::string& tag(int i) const { return tags_.at(static_cast<std::size_t>(i)); }

  std::vector<int> indices(std::span<const std::string> tags) const {
    std::vector<int> out;
    out.reserve(tags.size());
    for (const auto& t : tags) {
      auto i = index(t);
      if (!i) throw DataError(DataErrc::kUnknownTag, "tag '" + t + "' not in scheme");
      out.push_back(*i);
    }
    return out;
  }

  std::vector<std::string> names(std::span<const int> ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(tag(i));
    return out;
  }

 private:
  std::vector<std::string> types_;
  std::vector<std::string> tags_;
  std::unordered_map<std::string, int> index_;
};

namespace detail {

inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) {
      if (start < text.size()) lines.push_back(text.substr(start));
      break;
    }
    lines.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  for (auto& l : lines)
    if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
  return lines;
}

inline bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\v' || c == '\f'; }

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> cols;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && is_space(line[i])) ++i;
    std::size_t j = i;
    while (j < line.size() && !is_space(line[j])) ++j;
    if (j > i) cols.push_back(line.substr(i, j - i));
    i = j;
  }
  return cols;
}

inline std::string where(const std::string& source, std::size_t line) {
  return source + ":" + std::to_string(line);
}

}  // namespace detail

enum class TagColumn { kRequired, kAbsent, kOptional };

struct ConllOptions {
  bool has_pos = false;
  TagColumn tags = TagColumn::kRequired;
  std::string source = "<input>";
};

/// Parses the column format: surface [POS] [TAG], blank line between
/// sentences. With TagColumn::kOptional the presence of the tag column is
/// decided by the first token line and must then hold for the whole file.
inline std::vector<Sentence> parse_conll(std::string_view text, const TagScheme& scheme,
                                         const ConllOptions& opts) {
  const std::size_t base = opts.has_pos ? 2 : 1;
  std::optional<bool> with_tags;
  if (opts.tags == TagColumn::kRequired) with_tags = true;
  if (opts.tags == TagColumn::kAbsent) with_tags = false;

  std::vector<Sentence> out;
  Sentence cur;
  std::vector<std::string> cur_tags;
  auto flush = [&] {
    if (cur.tokens.empty()) return;
    cur.id = out.size();
    if (with_tags.value_or(false)) cur.gold_tags = std::move(cur_tags);
    out.push_back(std::move(cur));
    cur = Sentence{};
    cur_tags.clear();
  };

  const auto lines = detail::split_lines(text);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    const auto cols = detail::split_ws(lines[ln]);
    if (cols.empty()) {
      flush();
      continue;
    }
    if (!with_tags) {
      if (cols.size() == base) with_tags = false;
      else if (cols.size() == base + 1) with_tags = true;
    }
    const std::size_t expected = base + (with_tags.value_or(false) ? 1 : 0);
    if (cols.size() != expected) {
      throw DataError(DataErrc::kMalformedLine,
                      detail::where(opts.source, ln + 1) + ": expected " + std::to_string(expected) +
                          " columns, got " + std::to_string(cols.size()));
    }
    Token tok{std::string(cols[0]), std::nullopt};
    if (opts.has_pos) tok.pos = std::string(cols[1]);
    cur.tokens.push_back(std::move(tok));
    if (*with_tags) {
      std::string tag(cols.back());
      if (!scheme.contains(tag))
        throw DataError(DataErrc::kUnknownTag,
                        detail::where(opts.source, ln + 1) + ": unknown tag '" + tag + "'");
      cur_tags.push_back(std::move(tag));
    }
  }
  flush();
  if (out.empty()) throw DataError(DataErrc::kEmptyInput, opts.source + ": no sentences");
  return out;
}

inline std::vector<Sentence> parse_conll(std::string_view text, const TagScheme& scheme, bool has_pos) {
  return parse_conll(text, scheme, ConllOptions{has_pos, TagColumn::kRequired, "<input>"});
}

/// Tag column of a column-format file (last column of every token line),
/// used to infer a scheme before strict parsing.
inline std::vector<std::string> scan_tag_column(std::string_view text) {
  std::vector<std::string> tags;
  for (auto line : detail::split_lines(text)) {
    auto cols = detail::split_ws(line);
    if (cols.size() >= 2) tags.emplace_back(cols.back());
  }
  return tags;
}

/// Column count of the first token line (0 if none).
inline std::size_t first_line_columns(std::string_view text) {
  for (auto line : detail::split_lines(text)) {
    auto cols = detail::split_ws(line);
    if (!cols.empty()) return cols.size();
  }
  return 0;
}

/// Serializes sentences with tab-separated columns. `tags` overrides the gold
/// column (prediction interchange); if neither is present no tag column is written.
inline std::string write_conll(std::span<const Sentence> sentences,
                               std::span<const std::vector<std::string>> tags = {}) {
  std::string out;
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    const auto& sent = sentences[s];
    const std::vector<std::string>* col = nullptr;
    if (!tags.empty()) col = &tags[s];
    else if (sent.gold_tags) col = &*sent.gold_tags;
    if (col && col->size() != sent.size())
      throw DataError(DataErrc::kMisaligned, "tag count mismatch at sentence " + std::to_string(s));
    for (std::size_t i = 0; i < sent.size(); ++i) {
      out += sent.tokens[i].surface;
      if (sent.tokens[i].pos) {
        out += '\t';
        out += *sent.tokens[i].pos;
      }
      if (col) {
        out += '\t';
        out += (*col)[i];
      }
      out += '\n';
    }
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Classification corpora

struct LabeledText {
  std::string id;
  bool positive = false;
  std::string text;
};

inline std::vector<LabeledText> parse_clf_tsv(std::string_view text, const std::string& source = "<input>") {
  std::vector<LabeledText> out;
  const auto lines = detail::split_lines(text);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    auto line = lines[ln];
    if (line.empty()) continue;
    auto t1 = line.find('\t');
    auto t2 = t1 == std::string_view::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string_view::npos)
      throw DataError(DataErrc::kMalformedLine,
                      detail::where(source, ln + 1) + ": expected id<TAB>label<TAB>text");
    auto id = line.substr(0, t1);
    auto label = line.substr(t1 + 1, t2 - t1 - 1);
    if (id.empty())
      throw DataError(DataErrc::kMalformedLine, detail::where(source, ln + 1) + ": empty id");
    if (label != "0" && label != "1")
      throw DataError(DataErrc::kBadLabel,
                      detail::where(source, ln + 1) + ": label must be 0 or 1, got '" + std::string(label) + "'");
    out.push_back({std::string(id), label == "1", std::string(line.substr(t2 + 1))});
  }
  if (out.empty()) throw DataError(DataErrc::kEmptyInput, source + ": no records");
  return out;
}

/// Prediction interchange for classification: id<TAB>label per line.
inline std::string write_clf_predictions(std::span<const std::string> ids, std::span<const int> labels) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out += ids[i];
    out += '\t';
    out += labels[i] ? '1' : '0';
    out += '\n';
  }
  return out;
}

inline std::vector<std::pair<std::string, int>> parse_clf_predictions(std::string_view text,
                                                                      const std::string& source = "<input>") {
  std::vector<std::pair<std::string, int>> out;
  const auto lines = detail::split_lines(text);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    auto line = lines[ln];
    if (line.empty()) continue;
    auto t1 = line.find('\t');
    if (t1 == std::string_view::npos)
      throw DataError(DataErrc::kMalformedLine, detail::where(source, ln + 1) + ": expected id<TAB>label");
    auto label = line.substr(t1 + 1);
    auto t2 = label.find('\t');
    if (t2 != std::string_view::npos) label = label.substr(0, t2);
    if (label != "0" && label != "1")
      throw DataError(DataErrc::kBadLabel, detail::where(source, ln + 1) + ": label must be 0 or 1");
    out.emplace_back(std::string(line.substr(0, t1)), label == "1" ? 1 : 0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// BIO <-> spans

namespace detail {

// Splits "B-TYPE" into ('B', "TYPE"); "O" gives ('O', "").
inline std::pair<char, std::string_view> split_tag(std::string_view tag) {
  if (tag.size() >= 2 && (tag[0] == 'B' || tag[0] == 'I') && tag[1] == '-') return {tag[0], tag.substr(2)};
  return {'O', {}};
}

}  // namespace detail

/// Maximal runs B-t (I-t)* become spans. A stray I-t (not continuing a span
/// of type t) opens a new span.
inline std::vector<EntitySpan> decode_bio(std::span<const std::string> tags) {
  std::vector<EntitySpan> spans;
  std::optional<EntitySpan> open;
  for (std::size_t i = 0; i < tags.size(); ++i) {
    auto [prefix, type] = detail::split_tag(tags[i]);
    const bool continues = prefix == 'I' && open && open->etype == type;
    if (continues) {
      open->end = i + 1;
      continue;
    }
    if (open) spans.push_back(std::move(*open));
    open.reset();
    if (prefix != 'O') open = EntitySpan{i, i + 1, std::string(type)};
  }
  if (open) spans.push_back(std::move(*open));
  return spans;
}

inline std::vector<std::string> encode_bio(std::span<const EntitySpan> spans, std::size_t len) {
  std::vector<std::string> tags(len, "O");
  std::vector<bool> used(len, false);
  for (const auto& sp : spans) {
    if (sp.start >= sp.end || sp.end > len)
      throw DataError(DataErrc::kInvalidArgument,
                      "span [" + std::to_string(sp.start) + "," + std::to_string(sp.end) + ") out of range");
    for (std::size_t i = sp.start; i < sp.end; ++i) {
      if (used[i])
        throw DataError(DataErrc::kOverlap, "overlapping spans at token " + std::to_string(i));
      used[i] = true;
      tags[i] = (i == sp.start ? "B-" : "I-") + sp.etype;
    }
  }
  return tags;
}

// ---------------------------------------------------------------------------
// Bagging fold plan

struct Fold {
  std::vector<std::string> train;
  std::vector<std::string> dev;
};

/// Three folds over one id universe; fold `confident` reproduces the
/// original train/dev split.
struct FoldPlan {
  std::vector<Fold> folds;
  int confident = 0;

  /// Throws DataError if any plan invariant is violated.
  void validate() const {
    if (folds.size() != 3) throw DataError(DataErrc::kBadFormat, "fold plan must have exactly 3 folds");
    if (confident != 0) throw DataError(DataErrc::kBadFormat, "confident fold must be 0");
    std::set<std::string> universe;
    for (const auto& id : folds[0].train) universe.insert(id);
    for (const auto& id : folds[0].dev) universe.insert(id);
    std::set<std::string> in_dev, in_train;
    for (std::size_t f = 0; f < folds.size(); ++f) {
      std::set<std::string> tr(folds[f].train.begin(), folds[f].train.end());
      std::set<std::string> dv(folds[f].dev.begin(), folds[f].dev.end());
      if (tr.size() != folds[f].train.size() || dv.size() != folds[f].dev.size())
        throw DataError(DataErrc::kDuplicateEntry, "fold " + std::to_string(f) + " repeats an id");
      if (tr.size() + dv.size() != universe.size())
        throw DataError(DataErrc::kBadFormat, "fold " + std::to_string(f) + " does not cover all ids");
      for (const auto& id : tr) {
        if (dv.count(id) || !universe.count(id))
          throw DataError(DataErrc::kBadFormat, "fold " + std::to_string(f) + " is not a partition (id " + id + ")");
        in_train.insert(id);
      }
      for (const auto& id : dv) {
        if (!universe.count(id))
          throw DataError(DataErrc::kBadFormat, "fold " + std::to_string(f) + " has unknown id " + id);
        in_dev.insert(id);
      }
    }
    if (in_dev.size() != universe.size() || in_train.size() != universe.size())
      throw DataError(DataErrc::kBadFormat, "some id is never in dev or never in train");
  }
};

inline void to_json(nlohmann::json& j, const FoldPlan& plan) {
  j = nlohmann::json::object();
  auto folds = nlohmann::json::array();
  for (const auto& f : plan.folds) folds.push_back({{"train", f.train}, {"dev", f.dev}});
  j["folds"] = std::move(folds);
  j["confident"] = plan.confident;
}

inline void from_json(const nlohmann::json& j, FoldPlan& plan) {
  plan.folds.clear();
  for (const auto& f : j.at("folds"))
    plan.folds.push_back({f.at("train").get<std::vector<std::string>>(), f.at("dev").get<std::vector<std::string>>()});
  plan.confident = j.at("confident").get<int>();
}

/// Fold 0 is the given split. The training ids are shuffled with `seed` and
/// cut into halves H1, H2; fold k (k = 1, 2) uses Hk as dev and everything
/// else as train. Within each list ids keep universe order (train then dev).
inline FoldPlan make_folds(std::span<const std::string> train_ids, std::span<const std::string> dev_ids,
                           std::uint64_t seed) {
  if (dev_ids.empty()) throw DataError(DataErrc::kInvalidArgument, "make_folds: empty dev set");
  if (train_ids.size() < 2) throw DataError(DataErrc::kInvalidArgument, "make_folds: need at least 2 training ids");
  std::unordered_set<std::string> train_set(train_ids.begin(), train_ids.end());
  if (train_set.size() != train_ids.size())
    throw DataError(DataErrc::kDuplicateEntry, "make_folds: duplicate training id");
  std::unordered_set<std::string> dev_set;
  for (const auto& id : dev_ids) {
    if (train_set.count(id)) throw DataError(DataErrc::kInvalidArgument, "make_folds: id in both splits: " + id);
    if (!dev_set.insert(id).second) throw DataError(DataErrc::kDuplicateEntry, "make_folds: duplicate dev id");
  }

  std::vector<std::string> universe(train_ids.begin(), train_ids.end());
  universe.insert(universe.end(), dev_ids.begin(), dev_ids.end());

  Xoshiro256 rng(seed);
  auto order = shuffled_indices(train_ids.size(), rng);
  const std::size_t half = train_ids.size() / 2;
  std::vector<int> half_of(universe.size(), 0);  // 0 = dev id, 1 = H1, 2 = H2
  for (std::size_t k = 0; k < order.size(); ++k) half_of[order[k]] = k < half ? 1 : 2;

  FoldPlan plan;
  plan.folds.push_back({std::vector<std::string>(train_ids.begin(), train_ids.end()),
                        std::vector<std::string>(dev_ids.begin(), dev_ids.end())});
  for (int h = 1; h <= 2; ++h) {
    Fold f;
    for (std::size_t i = 0; i < universe.size(); ++i) (half_of[i] == h ? f.dev : f.train).push_back(universe[i]);
    plan.folds.push_back(std::move(f));
  }
  plan.confident = 0;
  return plan;
}

}  // namespace stacktag
