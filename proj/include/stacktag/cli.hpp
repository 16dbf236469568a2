#pragma once

// Command surface: split-folds, train-ner, train-clf, predict, evaluate and
// ensemble, driven by a JSON run config plus flag overrides.
//
// Exit codes: 0 ok, 2 config error, 3 data error, 4 runtime failure.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stacktag/binio.hpp"
#include "stacktag/corpus.hpp"
#include "stacktag/embeddings.hpp"
#include "stacktag/ensemble.hpp"
#include "stacktag/error.hpp"
#include "stacktag/metrics.hpp"
#include "stacktag/rng.hpp"
#include "stacktag/tagger.hpp"
#include "stacktag/textclf.hpp"

#ifndef STACKTAG_VERSION
#define STACKTAG_VERSION "0.0.0"
#endif

namespace stacktag::cli {

namespace fs = std::filesystem;

struct DataPaths {
  fs::path train, dev, test;
  bool has_pos = false;
  std::vector<std::string> entity_types;  // empty: inferred from the training tags
  fs::path train_ctx, dev_ctx, test_ctx;
  fs::path train_sent, dev_sent, test_sent;
};

struct ResourcePaths {
  fs::path static_vectors, bpe_merges, bpe_vectors;
};

struct RunConfig {
  std::string task = "ner";
  std::uint64_t seed = 1;
  DataPaths data;
  ResourcePaths resources;
  TaggerConfig tagger;
  ClfConfig classifier;
  std::vector<std::string> include_types;
  bool parallel = false;

  nlohmann::json to_json() const {
    auto p = [](const fs::path& x) { return x.string(); };
    return {{"task", task},
            {"seed", seed},
            {"data",
             {{"train", p(data.train)},
              {"dev", p(data.dev)},
              {"test", p(data.test)},
              {"has_pos", data.has_pos},
              {"entity_types", data.entity_types},
              {"train_ctx", p(data.train_ctx)},
              {"dev_ctx", p(data.dev_ctx)},
              {"test_ctx", p(data.test_ctx)},
              {"train_sent", p(data.train_sent)},
              {"dev_sent", p(data.dev_sent)},
              {"test_sent", p(data.test_sent)}}},
            {"resources",
             {{"static_vectors", p(resources.static_vectors)},
              {"bpe_merges", p(resources.bpe_merges)},
              {"bpe_vectors", p(resources.bpe_vectors)}}},
            {"tagger", tagger},
            {"classifier", classifier},
            {"include_types", include_types},
            {"parallel", parallel}};
  }

  std::uint32_t hash() const { return io::crc32(to_json().dump()); }
};

namespace detail {

inline fs::path resolve(const fs::path& base, const std::string& value) {
  if (value.empty()) return {};
  fs::path p(value);
  if (p.is_relative()) p = base / p;
  return fs::absolute(p).lexically_normal();
}

inline void require_exists(const fs::path& p, const std::string& key) {
  if (!p.empty() && !fs::exists(p)) throw ConfigError("config: " + key + ": file not found: " + p.string());
}

}  // namespace detail

/// Reads a run config. Relative paths are taken relative to the config
/// file's directory; the top-level seed is copied into the tagger and
/// classifier sections (a `seed_override` wins over the file).
inline RunConfig load_run_config(const fs::path& file, std::optional<std::uint64_t> seed_override = std::nullopt) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(file));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(file.string() + ": " + e.what());
  }
  const fs::path base = fs::absolute(file).parent_path();
  RunConfig c;
  try {
    c.task = j.value("task", c.task);
    c.seed = j.value("seed", c.seed);
    if (j.contains("data")) {
      const auto& d = j.at("data");
      auto path = [&](const char* key, fs::path& out) {
        if (d.contains(key)) out = detail::resolve(base, d.at(key).get<std::string>());
      };
      path("train", c.data.train);
      path("dev", c.data.dev);
      path("test", c.data.test);
      path("train_ctx", c.data.train_ctx);
      path("dev_ctx", c.data.dev_ctx);
      path("test_ctx", c.data.test_ctx);
      path("train_sent", c.data.train_sent);
      path("dev_sent", c.data.dev_sent);
      path("test_sent", c.data.test_sent);
      c.data.has_pos = d.value("has_pos", false);
      if (d.contains("entity_types")) d.at("entity_types").get_to(c.data.entity_types);
    }
    if (j.contains("resources")) {
      const auto& r = j.at("resources");
      auto path = [&](const char* key, fs::path& out) {
        if (r.contains(key)) out = detail::resolve(base, r.at(key).get<std::string>());
      };
      path("static_vectors", c.resources.static_vectors);
      path("bpe_merges", c.resources.bpe_merges);
      path("bpe_vectors", c.resources.bpe_vectors);
    }
    if (j.contains("tagger")) j.at("tagger").get_to(c.tagger);
    if (j.contains("classifier")) j.at("classifier").get_to(c.classifier);
    if (j.contains("include_types")) j.at("include_types").get_to(c.include_types);
    c.parallel = j.value("parallel", false);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(file.string() + ": " + e.what());
  }
  if (seed_override) c.seed = *seed_override;
  c.tagger.seed = c.seed;
  c.classifier.seed = c.seed;

  if (c.task != "ner" && c.task != "clf") throw ConfigError("config: task must be 'ner' or 'clf'");
  c.tagger.validate();
  c.classifier.validate();
  const std::pair<const fs::path*, const char*> paths[] = {
      {&c.data.train, "data.train"},         {&c.data.dev, "data.dev"},
      {&c.data.test, "data.test"},           {&c.data.train_ctx, "data.train_ctx"},
      {&c.data.dev_ctx, "data.dev_ctx"},     {&c.data.test_ctx, "data.test_ctx"},
      {&c.data.train_sent, "data.train_sent"}, {&c.data.dev_sent, "data.dev_sent"},
      {&c.data.test_sent, "data.test_sent"}, {&c.resources.static_vectors, "resources.static_vectors"},
      {&c.resources.bpe_merges, "resources.bpe_merges"}, {&c.resources.bpe_vectors, "resources.bpe_vectors"}};
  for (const auto& [p, key] : paths) detail::require_exists(*p, key);
  return c;
}

/// Appends one JSON line to <dir>/runs.jsonl.
inline void append_run_record(const fs::path& dir, const std::string& command, std::uint32_t config_hash,
                              std::uint64_t seed) {
  fs::create_directories(dir);
  const nlohmann::json rec = {{"command", command},
                              {"config_crc32", config_hash},
                              {"seed", seed},
                              {"version", STACKTAG_VERSION},
                              {"prng", Xoshiro256::kName},
                              {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                            "." + std::to_string(EIGEN_MINOR_VERSION)},
                              {"json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                           std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
  std::ofstream out(dir / "runs.jsonl", std::ios::app | std::ios::binary);
  if (!out) throw RuntimeFailure("cannot append to " + (dir / "runs.jsonl").string());
  out << rec.dump() << '\n';
}

// ---------------------------------------------------------------------------
// Data loading

namespace detail {

inline void require(const fs::path& p, const std::string& what) {
  if (p.empty()) throw ConfigError("missing " + what);
}

inline TagScheme scheme_for(const RunConfig& c) {
  if (!c.data.entity_types.empty()) return TagScheme(c.data.entity_types);
  require(c.data.train, "data.train");
  const auto tags = scan_tag_column(io::read_file(c.data.train));
  try {
    return TagScheme::infer(tags);
  } catch (const DataError& e) {
    throw DataError(e.code(), c.data.train.string() + ": " + e.what());
  }
}

inline std::vector<Sentence> read_conll(const fs::path& p, const TagScheme& scheme, bool has_pos, TagColumn tags) {
  return parse_conll(io::read_file(p), scheme, ConllOptions{has_pos, tags, p.string()});
}

inline std::vector<LabeledText> read_tsv(const fs::path& p) { return parse_clf_tsv(io::read_file(p), p.string()); }

inline std::vector<TaggerSample> ner_samples(std::vector<Sentence> sents, const fs::path& ctx_path, bool need_ctx,
                                             const std::string& what) {
  if (!need_ctx) return attach_ctx(std::move(sents), nullptr);
  if (ctx_path.empty()) throw ConfigError("the embedding stack includes ctx but no contextual file was given for " + what);
  const auto ctx = read_ctx_file(io::read_file(ctx_path), sents, ctx_path.string());
  return attach_ctx(std::move(sents), &ctx);
}

inline TaggerResources load_resources(const ResourcePaths& r, const std::vector<ProviderKind>& providers) {
  TaggerResources res;
  auto has = [&](ProviderKind k) { return std::find(providers.begin(), providers.end(), k) != providers.end(); };
  if (has(ProviderKind::kStatic)) {
    require(r.static_vectors, "resources.static_vectors (stack includes static)");
    res.static_vecs = std::make_shared<StaticVecTable>(
        load_static_vecs(io::read_file(r.static_vectors), r.static_vectors.string()));
  }
  if (has(ProviderKind::kBpe)) {
    require(r.bpe_merges, "resources.bpe_merges (stack includes bpe)");
    require(r.bpe_vectors, "resources.bpe_vectors (stack includes bpe)");
    res.bpe = std::make_shared<BpeModel>(
        parse_bpe_merges(io::read_file(r.bpe_merges), r.bpe_merges.string()),
        load_static_vecs(io::read_file(r.bpe_vectors), r.bpe_vectors.string()));
  }
  return res;
}

inline nlohmann::json resource_provenance(const ResourcePaths& r) {
  return {{"static_vectors", r.static_vectors.string()},
          {"bpe_merges", r.bpe_merges.string()},
          {"bpe_vectors", r.bpe_vectors.string()}};
}

inline ResourcePaths resources_from_provenance(const nlohmann::json& p) {
  ResourcePaths r;
  r.static_vectors = p.value("static_vectors", "");
  r.bpe_merges = p.value("bpe_merges", "");
  r.bpe_vectors = p.value("bpe_vectors", "");
  return r;
}

/// Feature rows for classification records in the configured embedding.
inline Eigen::MatrixXd clf_features(const ClfConfig& cfg, std::span<const LabeledText> records,
                                    const StaticVecTable* vecs, const fs::path& sent_path, const std::string& what) {
  Eigen::MatrixXd x;
  if (cfg.embedding == SentEmbKind::kStaticMean) {
    if (!vecs) throw ConfigError("embedding static_mean needs resources.static_vectors");
    x.resize(static_cast<Eigen::Index>(records.size()), vecs->dim());
    for (std::size_t i = 0; i < records.size(); ++i) {
      auto toks = whitespace_tokens(records[i].text);
      if (toks.empty())
        throw DataError(DataErrc::kEmptyInput, what + ": record " + records[i].id + " has no tokens");
      x.row(static_cast<Eigen::Index>(i)) = sent_embed_static(*vecs, toks).transpose();
    }
    return x;
  }
  if (sent_path.empty()) throw ConfigError("embedding " + to_string(cfg.embedding) + " needs a SENT file for " + what);
  const auto file = read_sent_file(io::read_file(sent_path), records.size(), sent_path.string());
  x.resize(static_cast<Eigen::Index>(records.size()), file.dim);
  for (std::size_t i = 0; i < records.size(); ++i)
    x.row(static_cast<Eigen::Index>(i)) = sent_embed_ctx(file, cfg.embedding, i).transpose();
  return x;
}

inline std::shared_ptr<StaticVecTable> maybe_static(const ClfConfig& cfg, const fs::path& p) {
  if (cfg.embedding != SentEmbKind::kStaticMean) return nullptr;
  require(p, "resources.static_vectors (embedding static_mean)");
  return std::make_shared<StaticVecTable>(load_static_vecs(io::read_file(p), p.string()));
}

inline bool has_ctx(const TaggerConfig& c) {
  return std::find(c.providers.begin(), c.providers.end(), ProviderKind::kCtx) != c.providers.end();
}

inline std::string model_task(const fs::path& dir) {
  try {
    const auto meta = nlohmann::json::parse(io::read_file(dir / "meta.json"));
    return meta.at("task").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrc::kBadFormat, (dir / "meta.json").string() + ": " + e.what());
  }
}

inline void emit(const fs::path& out, const std::string& bytes, std::ostream& stdout_) {
  if (out.empty()) {
    stdout_ << bytes;
    return;
  }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  io::write_file(out, bytes);
}

inline FoldPlan read_plan(const fs::path& p) {
  FoldPlan plan;
  try {
    nlohmann::json::parse(io::read_file(p)).get_to(plan);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrc::kBadFormat, p.string() + ": " + e.what());
  }
  plan.validate();
  return plan;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Tagging universe: train sentences then dev sentences, ids "train:i"/"dev:i"

struct NerUniverse {
  TagScheme scheme;
  std::vector<std::string> train_ids, dev_ids;
  std::map<std::string, TaggerSample> samples;

  std::vector<TaggerSample> select(std::span<const std::string> ids) const {
    std::vector<TaggerSample> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
      auto it = samples.find(id);
      if (it == samples.end()) throw DataError(DataErrc::kInvalidArgument, "fold plan references unknown id " + id);
      out.push_back(it->second);
    }
    return out;
  }
};

inline NerUniverse load_ner_universe(const RunConfig& c) {
  detail::require(c.data.train, "data.train");
  detail::require(c.data.dev, "data.dev");
  NerUniverse u;
  u.scheme = detail::scheme_for(c);
  const bool ctx = detail::has_ctx(c.tagger);
  auto tr = detail::ner_samples(detail::read_conll(c.data.train, u.scheme, c.data.has_pos, TagColumn::kRequired),
                                c.data.train_ctx, ctx, "data.train");
  auto dv = detail::ner_samples(detail::read_conll(c.data.dev, u.scheme, c.data.has_pos, TagColumn::kRequired),
                                c.data.dev_ctx, ctx, "data.dev");
  for (std::size_t i = 0; i < tr.size(); ++i) {
    u.train_ids.push_back("train:" + std::to_string(i));
    u.samples.emplace(u.train_ids.back(), std::move(tr[i]));
  }
  for (std::size_t i = 0; i < dv.size(); ++i) {
    u.dev_ids.push_back("dev:" + std::to_string(i));
    u.samples.emplace(u.dev_ids.back(), std::move(dv[i]));
  }
  return u;
}

struct ClfUniverse {
  std::vector<std::string> train_ids, dev_ids;
  std::map<std::string, std::size_t> row_of;
  Eigen::MatrixXd x;
  std::vector<int> labels;

  std::pair<Eigen::MatrixXd, std::vector<int>> select(std::span<const std::string> ids) const {
    Eigen::MatrixXd out(static_cast<Eigen::Index>(ids.size()), x.cols());
    std::vector<int> y;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      auto it = row_of.find(ids[i]);
      if (it == row_of.end()) throw DataError(DataErrc::kInvalidArgument, "fold plan references unknown id " + ids[i]);
      out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(it->second));
      y.push_back(labels[it->second]);
    }
    return {out, y};
  }
};

inline ClfUniverse load_clf_universe(const RunConfig& c) {
  detail::require(c.data.train, "data.train");
  detail::require(c.data.dev, "data.dev");
  const auto tr = detail::read_tsv(c.data.train);
  const auto dv = detail::read_tsv(c.data.dev);
  const auto vecs = detail::maybe_static(c.classifier, c.resources.static_vectors);
  const Eigen::MatrixXd xt = detail::clf_features(c.classifier, tr, vecs.get(), c.data.train_sent, "data.train");
  const Eigen::MatrixXd xd = detail::clf_features(c.classifier, dv, vecs.get(), c.data.dev_sent, "data.dev");
  if (xt.cols() != xd.cols())
    throw DataError(DataErrc::kDimensionMismatch, "train and dev sentence vectors differ in dimension");
  ClfUniverse u;
  u.x.resize(xt.rows() + xd.rows(), xt.cols());
  u.x << xt, xd;
  std::size_t row = 0;
  for (const auto* split : {&tr, &dv}) {
    for (const auto& r : *split) {
      if (!u.row_of.emplace(r.id, row++).second)
        throw DataError(DataErrc::kDuplicateEntry, "record id '" + r.id + "' appears more than once");
      (split == &tr ? u.train_ids : u.dev_ids).push_back(r.id);
      u.labels.push_back(r.positive ? 1 : 0);
    }
  }
  return u;
}

// ---------------------------------------------------------------------------
// Commands

inline FoldPlan plan_for(const RunConfig& c, const fs::path& folds_path) {
  if (!folds_path.empty()) return detail::read_plan(folds_path);
  if (c.task == "ner") {
    const auto u = load_ner_universe(c);
    return make_folds(u.train_ids, u.dev_ids, c.seed);
  }
  detail::require(c.data.train, "data.train");
  detail::require(c.data.dev, "data.dev");
  std::vector<std::string> tr, dv;
  for (const auto& r : detail::read_tsv(c.data.train)) tr.push_back(r.id);
  for (const auto& r : detail::read_tsv(c.data.dev)) dv.push_back(r.id);
  return make_folds(tr, dv, c.seed);
}

inline int cmd_split_folds(const RunConfig& c, const fs::path& out, std::ostream& log) {
  const FoldPlan plan = plan_for(c, {});
  nlohmann::json j = plan;
  j["seed"] = c.seed;
  j["prng"] = Xoshiro256::kName;
  detail::emit(out, j.dump(2) + "\n", std::cout);
  for (std::size_t f = 0; f < plan.folds.size(); ++f)
    log << "fold " << f << ": train " << plan.folds[f].train.size() << ", dev " << plan.folds[f].dev.size() << "\n";
  return 0;
}

inline TrainResult train_ner_fold(const RunConfig& c, const NerUniverse& u, const Fold& fold,
                                  const TaggerResources& res) {
  const auto tr = u.select(fold.train);
  const auto dv = u.select(fold.dev);
  auto result = train(c.tagger, u.scheme, tr, dv, res);
  result.model.provenance = detail::resource_provenance(c.resources);
  result.model.provenance["has_pos"] = c.data.has_pos;
  return result;
}

inline ClfTrainResult train_clf_fold(const RunConfig& c, const ClfUniverse& u, const Fold& fold) {
  const auto [xt, yt] = u.select(fold.train);
  const auto [xd, yd] = u.select(fold.dev);
  auto result = train_classifier(xt, yt, c.classifier);
  std::vector<int> pred;
  for (Eigen::Index i = 0; i < xd.rows(); ++i) pred.push_back(predict_label(result.model, xd.row(i).transpose()).label);
  result.report["dev"] = to_json(clf_prf(yd, pred));
  result.model.provenance = detail::resource_provenance(c.resources);
  return result;
}

inline Fold select_fold(const RunConfig& c, const fs::path& folds_path, int fold_index,
                        std::span<const std::string> train_ids, std::span<const std::string> dev_ids) {
  if (folds_path.empty()) {
    if (fold_index != 0) throw ConfigError("--fold other than 0 needs --folds");
    return Fold{{train_ids.begin(), train_ids.end()}, {dev_ids.begin(), dev_ids.end()}};
  }
  (void)c;
  if (fold_index < 0 || fold_index > 2) throw ConfigError("--fold must be 0, 1 or 2");
  return detail::read_plan(folds_path).folds[static_cast<std::size_t>(fold_index)];
}

inline int cmd_train_ner(const RunConfig& c, const fs::path& model_dir, const fs::path& folds, int fold_index,
                         std::ostream& log) {
  detail::require(model_dir, "--model-dir");
  const auto u = load_ner_universe(c);
  const auto res = detail::load_resources(c.resources, c.tagger.providers);
  const auto fold = select_fold(c, folds, fold_index, u.train_ids, u.dev_ids);
  auto result = train_ner_fold(c, u, fold, res);
  result.report.model_path = fs::absolute(model_dir).string();
  save(result.model, model_dir, to_json(result.report));
  append_run_record(model_dir, "train-ner", c.hash(), c.seed);
  log << "best dev F1 " << result.report.best_f1 << " at epoch " << result.report.best_epoch << "\n";
  return 0;
}

inline int cmd_train_clf(const RunConfig& c, const fs::path& model_dir, const fs::path& folds, int fold_index,
                         std::ostream& log) {
  detail::require(model_dir, "--model-dir");
  const auto u = load_clf_universe(c);
  const auto fold = select_fold(c, folds, fold_index, u.train_ids, u.dev_ids);
  auto result = train_clf_fold(c, u, fold);
  save(result.model, model_dir, result.report);
  append_run_record(model_dir, "train-clf", c.hash(), c.seed);
  log << "dev F1 " << result.report["dev"]["micro"]["f1"].get<double>() << "\n";
  return 0;
}

/// Test inputs shared by predict and ensemble.
struct PredictInputs {
  fs::path input, ctx_file, sent_file;
};

struct NerPrediction {
  std::vector<Sentence> sentences;
  std::vector<std::vector<std::string>> tags;
};

inline NerPrediction predict_ner(const TaggerModel& model, const PredictInputs& in) {
  detail::require(in.input, "--input");
  const bool has_pos = model.provenance.value("has_pos", false);
  NerPrediction p;
  p.sentences = detail::read_conll(in.input, model.scheme, has_pos, TagColumn::kOptional);
  const auto samples = detail::ner_samples(p.sentences, in.ctx_file, detail::has_ctx(model.config), "--input");
  const auto res = detail::load_resources(detail::resources_from_provenance(model.provenance), model.config.providers);
  p.tags = predict(model, samples, res);
  return p;
}

struct ClfPrediction {
  std::vector<LabeledText> records;
  std::vector<int> labels;
};

inline ClfPrediction predict_clf(const ClfModel& model, const PredictInputs& in) {
  detail::require(in.input, "--input");
  ClfPrediction p;
  p.records = detail::read_tsv(in.input);
  const auto prov = detail::resources_from_provenance(model.provenance);
  const auto vecs = detail::maybe_static(model.config, prov.static_vectors);
  const auto x = detail::clf_features(model.config, p.records, vecs.get(), in.sent_file, "--input");
  for (Eigen::Index i = 0; i < x.rows(); ++i) p.labels.push_back(predict_label(model, x.row(i).transpose()).label);
  return p;
}

inline std::vector<std::string> ids_of(std::span<const LabeledText> records) {
  std::vector<std::string> ids;
  for (const auto& r : records) ids.push_back(r.id);
  return ids;
}

inline int cmd_predict(const fs::path& model_dir, const PredictInputs& in, const fs::path& out) {
  detail::require(model_dir, "--model-dir");
  const std::string task = detail::model_task(model_dir);
  std::uint64_t seed = 0;
  if (task == "ner") {
    const auto model = load(model_dir);
    seed = model.config.seed;
    const auto p = predict_ner(model, in);
    detail::emit(out, write_conll(p.sentences, p.tags), std::cout);
  } else {
    const auto model = load_classifier(model_dir);
    seed = model.config.seed;
    const auto p = predict_clf(model, in);
    detail::emit(out, write_clf_predictions(ids_of(p.records), p.labels), std::cout);
  }
  // The model's own meta.json is the configuration of a prediction run.
  append_run_record(model_dir, "predict", io::crc32(io::read_file(model_dir / "meta.json")), seed);
  return 0;
}

/// Strict entity scores of a predicted column file against a gold one. Both
/// must have the same tokens; the tag is the last column.
inline EvalReport evaluate_ner_files(const fs::path& gold_path, const fs::path& pred_path,
                                     const std::optional<std::set<std::string>>& include) {
  const std::string gold_text = io::read_file(gold_path);
  const std::string pred_text = io::read_file(pred_path);
  auto tags = scan_tag_column(gold_text);
  const auto pred_tags = scan_tag_column(pred_text);
  tags.insert(tags.end(), pred_tags.begin(), pred_tags.end());
  const TagScheme scheme = TagScheme::infer(tags);
  auto parse = [&](const std::string& text, const fs::path& p) {
    const bool pos = first_line_columns(text) >= 3;
    return parse_conll(text, scheme, ConllOptions{pos, TagColumn::kRequired, p.string()});
  };
  const auto gold = parse(gold_text, gold_path);
  const auto pred = parse(pred_text, pred_path);
  if (gold.size() != pred.size())
    throw DataError(DataErrc::kMisaligned, "gold has " + std::to_string(gold.size()) + " sentences, prediction has " +
                                               std::to_string(pred.size()));
  std::vector<std::vector<std::string>> g, p;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i].size() != pred[i].size())
      throw DataError(DataErrc::kMisaligned, "token count differs at sentence " + std::to_string(i));
    for (std::size_t t = 0; t < gold[i].size(); ++t)
      if (gold[i].tokens[t].surface != pred[i].tokens[t].surface)
        throw DataError(DataErrc::kMisaligned,
                        "token mismatch at sentence " + std::to_string(i) + ", token " + std::to_string(t));
    g.push_back(*gold[i].gold_tags);
    p.push_back(*pred[i].gold_tags);
  }
  return ner_prf_tags(g, p, include);
}

inline EvalReport evaluate_clf_files(const fs::path& gold_path, const fs::path& pred_path) {
  const auto gold = detail::read_tsv(gold_path);
  const auto pred = parse_clf_predictions(io::read_file(pred_path), pred_path.string());
  if (gold.size() != pred.size())
    throw DataError(DataErrc::kMisaligned, "gold has " + std::to_string(gold.size()) + " records, prediction has " +
                                               std::to_string(pred.size()));
  std::vector<int> g, p;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if (gold[i].id != pred[i].first)
      throw DataError(DataErrc::kMisaligned, pred_path.string() + ":" + std::to_string(i + 1) + ": expected id '" +
                                                 gold[i].id + "', got '" + pred[i].first + "'");
    g.push_back(gold[i].positive ? 1 : 0);
    p.push_back(pred[i].second);
  }
  return clf_prf(g, p);
}

inline int cmd_evaluate(const std::string& task, const fs::path& gold, const fs::path& pred,
                        const std::optional<std::set<std::string>>& include, const fs::path& out, std::ostream& log) {
  detail::require(gold, "--gold");
  detail::require(pred, "--pred");
  const EvalReport rep = task == "ner" ? evaluate_ner_files(gold, pred, include) : evaluate_clf_files(gold, pred);
  log << to_table(rep);
  if (!out.empty()) detail::emit(out, to_json(rep).dump(2) + "\n", std::cout);
  return 0;
}

struct EnsembleArgs {
  std::vector<fs::path> model_dirs;  // 3 = consume existing models, 1 = output root for training
  fs::path folds;
  PredictInputs test;
  fs::path out;
  std::optional<std::set<std::string>> include;
};

inline fs::path fold_output(const fs::path& out, int f) {
  fs::path p = out;
  p += ".fold" + std::to_string(f);
  return p;
}

inline int cmd_ensemble(const RunConfig* c, const EnsembleArgs& a, std::ostream& log) {
  detail::require(a.out, "--out");
  const bool consume = a.model_dirs.size() == 3;
  if (!consume && a.model_dirs.size() != 1)
    throw ConfigError("ensemble takes one --model-dir (train) or three (consume existing models)");
  if (!consume && !c) throw ConfigError("training an ensemble needs --config");
  PredictInputs test = a.test;
  if (c) {
    if (test.input.empty()) test.input = c->data.test;
    if (test.ctx_file.empty()) test.ctx_file = c->data.test_ctx;
    if (test.sent_file.empty()) test.sent_file = c->data.test_sent;
  }
  detail::require(test.input, "--input (or data.test)");
  const std::string task = consume ? detail::model_task(a.model_dirs[0]) : c->task;
  const bool parallel = c && c->parallel;
  nlohmann::json report;
  std::string final_bytes;

  if (task == "ner") {
    BaggingResult<TagPredictions> r;
    std::vector<Sentence> sentences;
    if (consume) {
      for (const auto& dir : a.model_dirs) {
        auto p = predict_ner(load(dir), test);
        sentences = std::move(p.sentences);
        r.per_fold.push_back(std::move(p.tags));
      }
      r.final = vote_sequences(r.per_fold, 0);
    } else {
      const auto plan = plan_for(*c, a.folds);
      const auto u = load_ner_universe(*c);
      const auto res = detail::load_resources(c->resources, c->tagger.providers);
      r = run_bagging_ner(
          plan,
          [&](int f, const Fold& fold) {
            auto trained = train_ner_fold(*c, u, fold, res);
            const fs::path dir = a.model_dirs[0] / ("fold" + std::to_string(f));
            trained.report.model_path = fs::absolute(dir).string();
            save(trained.model, dir, to_json(trained.report));
            append_run_record(dir, "ensemble", c->hash(), c->seed);
            return predict_ner(trained.model, test).tags;
          },
          parallel);
      sentences = detail::read_conll(test.input, u.scheme, c->data.has_pos, TagColumn::kOptional);
    }
    for (int f = 0; f < 3; ++f)
      detail::emit(fold_output(a.out, f), write_conll(sentences, r.per_fold[static_cast<std::size_t>(f)]), std::cout);
    final_bytes = write_conll(sentences, r.final);
    if (!sentences.empty() && sentences[0].gold_tags) {
      std::vector<std::vector<std::string>> gold;
      for (const auto& s : sentences) gold.push_back(*s.gold_tags);
      report["ensemble"] = to_json(ner_prf_tags(gold, r.final, a.include));
      for (int f = 0; f < 3; ++f)
        report["fold" + std::to_string(f)] = to_json(ner_prf_tags(gold, r.per_fold[static_cast<std::size_t>(f)], a.include));
    }
  } else {
    BaggingResult<std::vector<int>> r;
    std::vector<LabeledText> records;
    if (consume) {
      for (const auto& dir : a.model_dirs) {
        auto p = predict_clf(load_classifier(dir), test);
        records = std::move(p.records);
        r.per_fold.push_back(std::move(p.labels));
      }
      r.final = vote_labels(r.per_fold);
    } else {
      const auto plan = plan_for(*c, a.folds);
      const auto u = load_clf_universe(*c);
      r = run_bagging_clf(
          plan,
          [&](int f, const Fold& fold) {
            auto trained = train_clf_fold(*c, u, fold);
            const fs::path dir = a.model_dirs[0] / ("fold" + std::to_string(f));
            save(trained.model, dir, trained.report);
            append_run_record(dir, "ensemble", c->hash(), c->seed);
            return predict_clf(trained.model, test).labels;
          },
          parallel);
      records = detail::read_tsv(test.input);
    }
    const auto ids = ids_of(records);
    for (int f = 0; f < 3; ++f)
      detail::emit(fold_output(a.out, f), write_clf_predictions(ids, r.per_fold[static_cast<std::size_t>(f)]), std::cout);
    final_bytes = write_clf_predictions(ids, r.final);
    std::vector<int> gold;
    for (const auto& rec : records) gold.push_back(rec.positive ? 1 : 0);
    report["ensemble"] = to_json(clf_prf(gold, r.final));
    for (int f = 0; f < 3; ++f)
      report["fold" + std::to_string(f)] = to_json(clf_prf(gold, r.per_fold[static_cast<std::size_t>(f)]));
  }

  detail::emit(a.out, final_bytes, std::cout);
  if (!report.is_null()) {
    fs::path rp = a.out;
    rp += ".report.json";
    detail::emit(rp, report.dump(2) + "\n", std::cout);
    log << "ensemble F1 " << report["ensemble"]["micro"]["f1"].get<double>() << "\n";
  }
  if (!consume) append_run_record(a.model_dirs[0], "ensemble", c->hash(), c->seed);
  return 0;
}

// ---------------------------------------------------------------------------
// Entry point

namespace detail {

inline std::optional<std::set<std::string>> parse_types(const std::string& flag, const RunConfig* c) {
  std::set<std::string> out;
  if (!flag.empty()) {
    std::stringstream ss(flag);
    std::string t;
    while (std::getline(ss, t, ','))
      if (!t.empty()) out.insert(t);
  } else if (c) {
    out.insert(c->include_types.begin(), c->include_types.end());
  }
  if (out.empty()) return std::nullopt;
  return out;
}

}  // namespace detail

/// Parses argv, runs the subcommand and maps errors to exit codes.
inline int run(int argc, const char* const* argv, std::ostream& log = std::cerr) {
  CLI::App app{"stacktag: BiLSTM-CRF tagging and text classification with bagging ensembles"};
  app.set_version_flag("--version", STACKTAG_VERSION);
  app.require_subcommand(1);

  std::string config_path, folds_path, out_path, ctx_file, sent_file, include_types, input, gold, pred, task = "ner";
  std::vector<std::string> model_dirs;
  std::optional<std::uint64_t> seed;
  int fold_index = 0;

  auto add_config = [&](CLI::App* s, bool required) {
    auto* o = s->add_option("--config", config_path, "run config (JSON)");
    if (required) o->required();
    s->add_option("--seed", seed, "overrides the config seed");
  };

  auto* split = app.add_subcommand("split-folds", "write the 3-fold bagging plan");
  add_config(split, true);
  split->add_option("--out", out_path, "plan file (default: stdout)");
  split->add_option("--model-dir", model_dirs, "directory that receives the run record");

  auto* train_ner_cmd = app.add_subcommand("train-ner", "train one tagger");
  auto* train_clf_cmd = app.add_subcommand("train-clf", "train one classifier");
  for (auto* s : {train_ner_cmd, train_clf_cmd}) {
    add_config(s, true);
    s->add_option("--model-dir", model_dirs, "output model directory")->required();
    s->add_option("--folds", folds_path, "fold plan; train on --fold of it");
    s->add_option("--fold", fold_index, "fold index 0-2 (default 0)");
  }

  auto* predict_cmd = app.add_subcommand("predict", "predict with a saved model");
  predict_cmd->add_option("--model-dir", model_dirs, "model directory")->required();
  predict_cmd->add_option("--input", input, "CoNLL or TSV input")->required();
  predict_cmd->add_option("--ctx-file", ctx_file, "CTXE file aligned with --input");
  predict_cmd->add_option("--sent-file", sent_file, "SENT file aligned with --input");
  predict_cmd->add_option("--out", out_path, "prediction file (default: stdout)");

  auto* eval_cmd = app.add_subcommand("evaluate", "score predictions against gold");
  eval_cmd->add_option("--task", task, "ner or clf")->check(CLI::IsMember({"ner", "clf"}));
  eval_cmd->add_option("--gold", gold, "gold file")->required();
  eval_cmd->add_option("--pred", pred, "prediction file")->required();
  eval_cmd->add_option("--include-types", include_types, "comma-separated entity types to score");
  eval_cmd->add_option("--out", out_path, "JSON report");
  add_config(eval_cmd, false);

  auto* ens_cmd = app.add_subcommand("ensemble", "train or load 3 fold models and vote");
  add_config(ens_cmd, false);
  ens_cmd->add_option("--folds", folds_path, "fold plan (default: generated from the seed)");
  ens_cmd->add_option("--model-dir", model_dirs, "one output root, or three existing models")->required();
  ens_cmd->add_option("--input", input, "test corpus (default: data.test)");
  ens_cmd->add_option("--ctx-file", ctx_file, "CTXE file aligned with the test corpus");
  ens_cmd->add_option("--sent-file", sent_file, "SENT file aligned with the test corpus");
  ens_cmd->add_option("--include-types", include_types, "comma-separated entity types to score");
  ens_cmd->add_option("--out", out_path, "voted prediction file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream out, err;
    const int code = app.exit(e, out, err);
    std::cout << out.str();
    log << err.str();
    return code == 0 ? 0 : 2;
  }

  try {
    std::optional<RunConfig> cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path, seed);
    const fs::path model_dir = model_dirs.empty() ? fs::path() : fs::path(model_dirs.front());
    if (split->parsed()) {
      const int rc = cmd_split_folds(*cfg, out_path, log);
      if (!model_dir.empty()) append_run_record(model_dir, "split-folds", cfg->hash(), cfg->seed);
      return rc;
    }
    if (train_ner_cmd->parsed()) {
      if (cfg->task != "ner") throw ConfigError("train-ner needs a config with task 'ner'");
      return cmd_train_ner(*cfg, model_dir, folds_path, fold_index, log);
    }
    if (train_clf_cmd->parsed()) {
      if (cfg->task != "clf") throw ConfigError("train-clf needs a config with task 'clf'");
      return cmd_train_clf(*cfg, model_dir, folds_path, fold_index, log);
    }
    if (predict_cmd->parsed()) return cmd_predict(model_dir, {input, ctx_file, sent_file}, out_path);
    if (eval_cmd->parsed()) {
      const std::string t = (cfg && eval_cmd->count("--task") == 0) ? cfg->task : task;
      return cmd_evaluate(t, gold, pred, detail::parse_types(include_types, cfg ? &*cfg : nullptr), out_path, log);
    }
    EnsembleArgs a;
    for (const auto& d : model_dirs) a.model_dirs.emplace_back(d);
    a.folds = folds_path;
    a.test = {input, ctx_file, sent_file};
    a.out = out_path;
    a.include = detail::parse_types(include_types, cfg ? &*cfg : nullptr);
    return cmd_ensemble(cfg ? &*cfg : nullptr, a, log);
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    log << "data error: " << e.what() << "\n";
    return 3;
  } catch (const RuntimeFailure& e) {
    log << "runtime error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    log << "runtime error: " << e.what() << "\n";
    return 4;
  }
}

}  // namespace stacktag::cli
