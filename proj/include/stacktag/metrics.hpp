#pragma once

// Strict entity-level P/R/F1 for tagging and positive-class P/R/F1 for
// binary classification.

#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stacktag/corpus.hpp"
#include "stacktag/error.hpp"

namespace stacktag {

struct PrfCounts {
  long tp = 0;
  long fp = 0;
  long fn = 0;

  double precision() const { return tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0; }
  double recall() const { return tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0; }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r > 0 ? 2.0 * p * r / (p + r) : 0.0;
  }

  PrfCounts& operator+=(const PrfCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }

  bool operator==(const PrfCounts&) const = default;
};

struct EvalReport {
  PrfCounts micro;
  std::map<std::string, PrfCounts> per_type;

  EvalReport& operator+=(const EvalReport& o) {
    micro += o.micro;
    for (const auto& [t, c] : o.per_type) per_type[t] += c;
    return *this;
  }
};

inline nlohmann::json counts_json(const PrfCounts& c) {
  return {{"tp", c.tp},
          {"fp", c.fp},
          {"fn", c.fn},
          {"precision", c.precision()},
          {"recall", c.recall()},
          {"f1", c.f1()}};
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["micro"] = counts_json(r.micro);
  j["per_type"] = nlohmann::json::object();
  for (const auto& [t, c] : r.per_type) j["per_type"][t] = counts_json(c);
  return j;
}

/// Aligned plain-text table, one row per type followed by the micro average.
inline std::string to_table(const EvalReport& r) {
  std::size_t width = 5;
  for (const auto& [t, c] : r.per_type) width = std::max(width, t.size());
  std::string out;
  char buf[256];
  auto row = [&](const std::string& name, const PrfCounts& c) {
    std::snprintf(buf, sizeof buf, "%-*s %7ld %7ld %7ld %9.4f %9.4f %9.4f\n", static_cast<int>(width), name.c_str(),
                  c.tp, c.fp, c.fn, c.precision(), c.recall(), c.f1());
    out += buf;
  };
  std::snprintf(buf, sizeof buf, "%-*s %7s %7s %7s %9s %9s %9s\n", static_cast<int>(width), "type", "tp", "fp", "fn",
                "precision", "recall", "f1");
  out += buf;
  for (const auto& [t, c] : r.per_type) row(t, c);
  row("micro", r.micro);
  return out;
}

/// A predicted span counts only if (start, end, type) matches a gold span of
/// the same sentence. Spans of types outside `include_types` are dropped from
/// both sides first; an empty optional keeps every type.
inline EvalReport ner_prf(std::span<const std::vector<EntitySpan>> gold, std::span<const std::vector<EntitySpan>> pred,
                          const std::optional<std::set<std::string>>& include_types = std::nullopt) {
  if (gold.size() != pred.size())
    throw DataError(DataErrc::kMisaligned, "ner_prf: gold has " + std::to_string(gold.size()) +
                                               " sentences, prediction has " + std::to_string(pred.size()));
  auto keep = [&](const EntitySpan& s) { return !include_types || include_types->count(s.etype) > 0; };
  EvalReport r;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    std::set<EntitySpan> g, p;
    for (const auto& s : gold[i])
      if (keep(s)) g.insert(s);
    for (const auto& s : pred[i])
      if (keep(s)) p.insert(s);
    for (const auto& s : p) {
      auto& c = r.per_type[s.etype];
      if (g.count(s)) ++c.tp;
      else ++c.fp;
    }
    for (const auto& s : g)
      if (!p.count(s)) ++r.per_type[s.etype].fn;
  }
  for (const auto& [t, c] : r.per_type) r.micro += c;
  return r;
}

/// Convenience overload over BIO tag sequences.
inline EvalReport ner_prf_tags(std::span<const std::vector<std::string>> gold,
                               std::span<const std::vector<std::string>> pred,
                               const std::optional<std::set<std::string>>& include_types = std::nullopt) {
  if (gold.size() != pred.size())
    throw DataError(DataErrc::kMisaligned, "ner_prf: gold and prediction differ in sentence count");
  std::vector<std::vector<EntitySpan>> gs, ps;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i].size() != pred[i].size())
      throw DataError(DataErrc::kMisaligned, "ner_prf: token count mismatch at sentence " + std::to_string(i));
    gs.push_back(decode_bio(gold[i]));
    ps.push_back(decode_bio(pred[i]));
  }
  return ner_prf(gs, ps, include_types);
}

/// Precision/recall/F1 of the positive class (label 1).
inline EvalReport clf_prf(std::span<const int> gold, std::span<const int> pred) {
  if (gold.size() != pred.size())
    throw DataError(DataErrc::kMisaligned, "clf_prf: gold has " + std::to_string(gold.size()) + " labels, prediction has " +
                                               std::to_string(pred.size()));
  EvalReport r;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (pred[i] && gold[i]) ++r.micro.tp;
    else if (pred[i] && !gold[i]) ++r.micro.fp;
    else if (!pred[i] && gold[i]) ++r.micro.fn;
  }
  r.per_type["positive"] = r.micro;
  return r;
}

}  // namespace stacktag
