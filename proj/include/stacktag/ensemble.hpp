#pragma once

// Three-fold bagging: train one model per fold, then combine test predictions
// by token-level (tagging) or record-level (classification) majority vote.
// Fold 0, trained on the original split, is the confident model that breaks ties.

#include <array>
#include <exception>
#include <future>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "stacktag/corpus.hpp"
#include "stacktag/error.hpp"

namespace stacktag {

/// Strict-majority tag of three votes, or `confident` when all three differ.
inline const std::string& vote_token(const std::string& a, const std::string& b, const std::string& c,
                                     const std::string& confident) {
  if (a == b || a == c) return a;
  if (b == c) return b;
  return confident;
}

/// Rewrites every I-t that does not continue a B-t/I-t of the same type as B-t.
inline std::vector<std::string> repair_bio(std::span<const std::string> tags) {
  std::vector<std::string> out(tags.begin(), tags.end());
  std::string_view prev_type;
  bool prev_entity = false;
  for (auto& tag : out) {
    auto [prefix, type] = detail::split_tag(tag);
    if (prefix == 'I' && !(prev_entity && prev_type == type)) tag[0] = 'B';
    // `type` views into `tag`, which is only touched at index 0 above.
    prev_entity = prefix != 'O';
    prev_type = type;
  }
  return out;
}

inline int vote_label(int a, int b, int c) { return (a + b + c) >= 2 ? 1 : 0; }

/// Per-sentence tag sequences predicted by each of the three models.
using TagPredictions = std::vector<std::vector<std::string>>;

/// Token-level vote across three aligned prediction sets followed by BIO
/// repair. `confident` selects the tie-breaking model.
inline TagPredictions vote_sequences(std::span<const TagPredictions> models, std::size_t confident = 0) {
  if (models.size() != 3) throw DataError(DataErrc::kInvalidArgument, "ensemble needs exactly 3 prediction sets");
  const auto n = models[0].size();
  for (const auto& m : models)
    if (m.size() != n) throw DataError(DataErrc::kMisaligned, "ensemble members predict different sentence counts");
  TagPredictions out(n);
  for (std::size_t s = 0; s < n; ++s) {
    const auto len = models[0][s].size();
    if (models[1][s].size() != len || models[2][s].size() != len)
      throw DataError(DataErrc::kMisaligned, "ensemble members disagree on the length of sentence " + std::to_string(s));
    std::vector<std::string> voted;
    voted.reserve(len);
    for (std::size_t t = 0; t < len; ++t)
      voted.push_back(vote_token(models[0][s][t], models[1][s][t], models[2][s][t], models[confident][s][t]));
    out[s] = repair_bio(voted);
  }
  return out;
}

inline std::vector<int> vote_labels(std::span<const std::vector<int>> models) {
  if (models.size() != 3) throw DataError(DataErrc::kInvalidArgument, "ensemble needs exactly 3 prediction sets");
  const auto n = models[0].size();
  for (const auto& m : models)
    if (m.size() != n) throw DataError(DataErrc::kMisaligned, "ensemble members predict different record counts");
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = vote_label(models[0][i], models[1][i], models[2][i]);
  return out;
}

template <typename Pred>
struct BaggingResult {
  Pred final;
  std::vector<Pred> per_fold;  // index = fold; fold 0 is the confident model
};

namespace detail {

template <typename F>
auto with_fold_context(int fold, F&& f) -> decltype(f()) {
  const std::string prefix = "fold " + std::to_string(fold) + ": ";
  try {
    return f();
  } catch (const DataError& e) {
    throw DataError(e.code(), prefix + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(prefix + e.what());
  } catch (const std::exception& e) {
    throw RuntimeFailure(prefix + e.what());
  }
}

}  // namespace detail

/// Runs `fold_fn(fold_index, fold)` for the three folds (concurrently when
/// `parallel`) and returns the per-fold predictions in fold order. A failure
/// in any fold is rethrown with its fold index.
template <typename FoldFn>
auto run_folds(const FoldPlan& plan, FoldFn&& fold_fn, bool parallel = false) {
  using Pred = std::decay_t<std::invoke_result_t<FoldFn&, int, const Fold&>>;
  plan.validate();
  std::vector<Pred> out;
  if (parallel) {
    std::vector<std::future<Pred>> jobs;
    for (int f = 0; f < 3; ++f)
      jobs.push_back(std::async(std::launch::async, [&, f] {
        return detail::with_fold_context(f, [&] { return fold_fn(f, plan.folds[static_cast<std::size_t>(f)]); });
      }));
    for (auto& j : jobs) out.push_back(j.get());
  } else {
    for (int f = 0; f < 3; ++f)
      out.push_back(detail::with_fold_context(f, [&] { return fold_fn(f, plan.folds[static_cast<std::size_t>(f)]); }));
  }
  return out;
}

/// Tagging ensemble: per-fold tag predictions on one test corpus, voted per token.
template <typename FoldFn>
BaggingResult<TagPredictions> run_bagging_ner(const FoldPlan& plan, FoldFn&& fold_fn, bool parallel = false) {
  BaggingResult<TagPredictions> r;
  r.per_fold = run_folds(plan, std::forward<FoldFn>(fold_fn), parallel);
  r.final = vote_sequences(r.per_fold, static_cast<std::size_t>(plan.confident));
  return r;
}

/// Classification ensemble: per-fold labels, majority per record.
template <typename FoldFn>
BaggingResult<std::vector<int>> run_bagging_clf(const FoldPlan& plan, FoldFn&& fold_fn, bool parallel = false) {
  BaggingResult<std::vector<int>> r;
  r.per_fold = run_folds(plan, std::forward<FoldFn>(fold_fn), parallel);
  r.final = vote_labels(r.per_fold);
  return r;
}

}  // namespace stacktag
