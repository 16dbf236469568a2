#pragma once

// BiLSTM-CRF sequence tagger over a stack of token embeddings and embedded
// linguistic features: forward pass, manual backprop, SGD training with
// best-dev checkpointing, Viterbi prediction and model persistence.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stacktag/binio.hpp"
#include "stacktag/corpus.hpp"
#include "stacktag/crf.hpp"
#include "stacktag/embeddings.hpp"
#include "stacktag/error.hpp"
#include "stacktag/lingfeat.hpp"
#include "stacktag/lstm.hpp"
#include "stacktag/metrics.hpp"
#include "stacktag/rng.hpp"
#include "stacktag/utf8.hpp"

namespace stacktag {

inline constexpr int kTaggerFormatVersion = 1;

struct TaggerConfig {
  double learning_rate = 0.1;
  std::string optimizer = "sgd";
  int hidden = 256;  // per direction
  int batch = 32;
  int epochs = 150;
  double gradient_clip = 5.0;  // global norm, per sentence; <= 0 disables
  std::uint64_t seed = 1;
  double init_range = 0.1;
  double forget_bias = 1.0;
  double dropout = 0.0;  // reserved; only 0 is supported
  int char_dim = 25;
  int char_hidden = 25;  // per direction
  bool features = true;
  FeatureDims feature_dims;
  std::vector<ProviderKind> providers{ProviderKind::kChar};

  void validate() const {
    if (epochs < 1) throw ConfigError("tagger: epochs must be >= 1");
    if (batch < 1) throw ConfigError("tagger: batch must be >= 1");
    if (hidden < 1 || char_dim < 1 || char_hidden < 1) throw ConfigError("tagger: dimensions must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("tagger: learning_rate must be positive");
    if (optimizer != "sgd") throw ConfigError("tagger: only the 'sgd' optimizer is supported");
    if (dropout != 0.0) throw ConfigError("tagger: dropout is not implemented; leave it at 0");
    if (feature_dims.pos_dim < 1 || feature_dims.ortho_dim < 1 || feature_dims.cap_dim < 1)
      throw ConfigError("tagger: feature dimensions must be positive");
    if (providers.empty()) throw ConfigError("tagger: the embedding stack is empty");
  }
};

inline void to_json(nlohmann::json& j, const TaggerConfig& c) {
  std::vector<std::string> providers;
  for (auto p : c.providers) providers.push_back(to_string(p));
  j = {{"learning_rate", c.learning_rate},
       {"optimizer", c.optimizer},
       {"hidden", c.hidden},
       {"batch", c.batch},
       {"epochs", c.epochs},
       {"gradient_clip", c.gradient_clip},
       {"seed", c.seed},
       {"init_range", c.init_range},
       {"forget_bias", c.forget_bias},
       {"dropout", c.dropout},
       {"char_dim", c.char_dim},
       {"char_hidden", c.char_hidden},
       {"features", c.features},
       {"pos_dim", c.feature_dims.pos_dim},
       {"ortho_dim", c.feature_dims.ortho_dim},
       {"cap_dim", c.feature_dims.cap_dim},
       {"stack", providers}};
}

/// Missing keys keep their defaults.
inline void from_json(const nlohmann::json& j, TaggerConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("learning_rate", c.learning_rate);
  get("optimizer", c.optimizer);
  get("hidden", c.hidden);
  get("batch", c.batch);
  get("epochs", c.epochs);
  get("gradient_clip", c.gradient_clip);
  get("seed", c.seed);
  get("init_range", c.init_range);
  get("forget_bias", c.forget_bias);
  get("dropout", c.dropout);
  get("char_dim", c.char_dim);
  get("char_hidden", c.char_hidden);
  get("features", c.features);
  get("pos_dim", c.feature_dims.pos_dim);
  get("ortho_dim", c.feature_dims.ortho_dim);
  get("cap_dim", c.feature_dims.cap_dim);
  if (j.contains("stack")) {
    c.providers.clear();
    for (const auto& p : j.at("stack")) c.providers.push_back(provider_from_string(p.get<std::string>()));
  }
}

/// Frozen lookup tables shared by training and prediction.
struct TaggerResources {
  std::shared_ptr<const StaticVecTable> static_vecs;
  std::shared_ptr<const BpeModel> bpe;
};

/// A sentence together with its precomputed contextual vectors (row-major
/// n x ctx_dim; empty when the stack has no ctx provider).
struct TaggerSample {
  Sentence sentence;
  std::vector<float> ctx;
  int ctx_dim = 0;
};

inline std::vector<TaggerSample> attach_ctx(std::vector<Sentence> sentences, const CtxEmbeddingFile* ctx) {
  if (ctx && ctx->sentence_count() != sentences.size())
    throw DataError(DataErrc::kMisaligned, "contextual file has " + std::to_string(ctx->sentence_count()) +
                                               " sentences, corpus has " + std::to_string(sentences.size()));
  std::vector<TaggerSample> out;
  out.reserve(sentences.size());
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    TaggerSample s;
    if (ctx) {
      if (ctx->token_count(i) != sentences[i].size())
        throw DataError(DataErrc::kMisaligned, "contextual vectors misaligned at sentence " + std::to_string(i));
      auto b = ctx->block(i);
      s.ctx.assign(b.begin(), b.end());
      s.ctx_dim = ctx->dim();
    }
    s.sentence = std::move(sentences[i]);
    out.push_back(std::move(s));
  }
  return out;
}

/// All trainable arrays. Visiting order is the on-disk order of weights.bin.
struct TaggerParams {
  Eigen::MatrixXd char_embed;  // char_dim x |chars|, one column per char id
  lstm::Weights char_fwd, char_bwd;
  Eigen::MatrixXd pos_table;    // pos_dim x |pos vocab|
  Eigen::MatrixXd shape_table;  // ortho_dim x |shape vocab|
  Eigen::MatrixXd cap_table;    // cap_dim x 5
  lstm::Weights word_fwd, word_bwd;
  Eigen::MatrixXd out_w;  // K x 2H
  Eigen::MatrixXd out_b;  // K x 1
  Eigen::MatrixXd transitions;
  Eigen::MatrixXd start;  // K x 1
  Eigen::MatrixXd stop;   // K x 1

  template <typename Self, typename F>
  static void visit_impl(Self& self, F&& f) {
    f("char_embed", self.char_embed);
    f("char_fwd.w", self.char_fwd.w);
    f("char_fwd.u", self.char_fwd.u);
    f("char_fwd.b", self.char_fwd.b);
    f("char_bwd.w", self.char_bwd.w);
    f("char_bwd.u", self.char_bwd.u);
    f("char_bwd.b", self.char_bwd.b);
    f("pos_table", self.pos_table);
    f("shape_table", self.shape_table);
    f("cap_table", self.cap_table);
    f("word_fwd.w", self.word_fwd.w);
    f("word_fwd.u", self.word_fwd.u);
    f("word_fwd.b", self.word_fwd.b);
    f("word_bwd.w", self.word_bwd.w);
    f("word_bwd.u", self.word_bwd.u);
    f("word_bwd.b", self.word_bwd.b);
    f("out_w", self.out_w);
    f("out_b", self.out_b);
    f("crf.transitions", self.transitions);
    f("crf.start", self.start);
    f("crf.stop", self.stop);
  }

  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, std::forward<F>(f));
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, std::forward<F>(f));
  }

  TaggerParams zeros_like() const {
    TaggerParams z = *this;
    z.visit([](const char*, Eigen::MatrixXd& m) { m.setZero(); });
    return z;
  }

  double squared_norm() const {
    double s = 0.0;
    visit([&](const char*, const Eigen::MatrixXd& m) { s += m.squaredNorm(); });
    return s;
  }

  std::size_t size() const {
    std::size_t n = 0;
    visit([&](const char*, const Eigen::MatrixXd& m) { n += static_cast<std::size_t>(m.size()); });
    return n;
  }

  crf::CrfParams crf() const { return {transitions, start.col(0), stop.col(0)}; }
};

/// Adds `scale * other` into `acc`, array by array.
inline void axpy(TaggerParams& acc, double scale, const TaggerParams& other) {
  std::vector<const Eigen::MatrixXd*> src;
  other.visit([&](const char*, const Eigen::MatrixXd& m) { src.push_back(&m); });
  std::size_t i = 0;
  acc.visit([&](const char*, Eigen::MatrixXd& m) { m += scale * *src[i++]; });
}

struct TaggerModel {
  TaggerConfig config;
  TagScheme scheme;
  FeatureVocab features;
  Vocab chars;
  EmbeddingStackSpec stack;
  TaggerParams params;
  nlohmann::json provenance = nlohmann::json::object();  // resource paths and corpus format, for prediction

  int num_tags() const { return static_cast<int>(scheme.size()); }
};

/// Stack spec from the config's provider order and the dims of the frozen inputs.
inline EmbeddingStackSpec make_stack_spec(const TaggerConfig& config, int static_dim, int bpe_dim, int ctx_dim) {
  EmbeddingStackSpec spec;
  for (auto kind : config.providers) {
    int dim = 0;
    switch (kind) {
      case ProviderKind::kStatic: dim = static_dim; break;
      case ProviderKind::kBpe: dim = bpe_dim; break;
      case ProviderKind::kChar: dim = 2 * config.char_hidden; break;
      case ProviderKind::kCtx: dim = ctx_dim; break;
    }
    if (dim <= 0) throw ConfigError("provider '" + to_string(kind) + "' is in the stack but its resource is missing");
    spec.providers.emplace_back(kind, dim);
  }
  spec.features = config.features;
  spec.feature_dims = config.feature_dims;
  spec.validate();
  return spec;
}

/// Zero-filled parameters with every shape implied by the model metadata.
inline TaggerParams shaped_params(const TaggerConfig& c, const EmbeddingStackSpec& stack, int num_chars, int num_pos,
                                  int num_shapes, int num_tags) {
  const bool use_char = stack.has(ProviderKind::kChar);
  const bool feats = stack.features;
  TaggerParams p;
  p.char_embed = Eigen::MatrixXd::Zero(use_char ? c.char_dim : 0, use_char ? num_chars : 0);
  p.char_fwd = use_char ? lstm::Weights::zeros(c.char_dim, c.char_hidden) : lstm::Weights::zeros(0, 0);
  p.char_bwd = p.char_fwd;
  p.pos_table = Eigen::MatrixXd::Zero(feats ? c.feature_dims.pos_dim : 0, feats ? num_pos : 0);
  p.shape_table = Eigen::MatrixXd::Zero(feats ? c.feature_dims.ortho_dim : 0, feats ? num_shapes : 0);
  p.cap_table = Eigen::MatrixXd::Zero(feats ? c.feature_dims.cap_dim : 0, feats ? kCapClassCount : 0);
  p.word_fwd = lstm::Weights::zeros(stack.total_dim(), c.hidden);
  p.word_bwd = p.word_fwd;
  p.out_w = Eigen::MatrixXd::Zero(num_tags, 2 * c.hidden);
  p.out_b = Eigen::MatrixXd::Zero(num_tags, 1);
  p.transitions = Eigen::MatrixXd::Zero(num_tags, num_tags);
  p.start = Eigen::MatrixXd::Zero(num_tags, 1);
  p.stop = Eigen::MatrixXd::Zero(num_tags, 1);
  return p;
}

/// Uniform(-r, r) for every entry, in visiting order, then forget-gate biases
/// set to `forget_bias`.
inline void init_params(TaggerParams& p, const TaggerConfig& c) {
  Xoshiro256 rng = Xoshiro256::derive(c.seed, {0x1417});
  p.visit([&](const char*, Eigen::MatrixXd& m) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = rng.uniform(-c.init_range, c.init_range);
  });
  for (auto* w : {&p.char_fwd, &p.char_bwd, &p.word_fwd, &p.word_bwd}) {
    const auto h = w->hidden();
    if (h > 0) w->b.block(h, 0, h, 1).setConstant(c.forget_bias);
  }
}

inline Vocab build_char_vocab(std::span<const TaggerSample> train) {
  Vocab v;
  for (const auto& s : train)
    for (const auto& t : s.sentence.tokens)
      for (char32_t c : utf8::decode(t.surface)) v.add(utf8::encode(c));
  return v;
}

/// Model inputs for one sentence with frozen provider vectors resolved.
struct PreparedSentence {
  Eigen::MatrixXd frozen;  // frozen segments stacked in spec order, one column per token
  std::vector<std::vector<int>> chars;
  std::vector<FeatureIds> feats;
  std::vector<int> gold;  // empty when the sentence has no gold tags

  std::size_t size() const { return static_cast<std::size_t>(frozen.cols()); }
};

inline PreparedSentence prepare(const TaggerModel& model, const TaggerSample& sample, const TaggerResources& res) {
  const auto& sent = sample.sentence;
  const auto n = static_cast<Eigen::Index>(sent.size());
  int frozen_dim = 0;
  for (auto [kind, dim] : model.stack.providers)
    if (kind != ProviderKind::kChar) frozen_dim += dim;

  PreparedSentence p;
  p.frozen = Eigen::MatrixXd::Zero(frozen_dim, n);
  int row = 0;
  for (auto [kind, dim] : model.stack.providers) {
    if (kind == ProviderKind::kChar) continue;
    for (Eigen::Index t = 0; t < n; ++t) {
      const auto& surface = sent.tokens[static_cast<std::size_t>(t)].surface;
      std::vector<float> v;
      if (kind == ProviderKind::kStatic) {
        if (!res.static_vecs) throw ConfigError("static vectors required by the stack are not loaded");
        v = lookup_static(*res.static_vecs, surface);
      } else if (kind == ProviderKind::kBpe) {
        if (!res.bpe) throw ConfigError("BPE model required by the stack is not loaded");
        v = bpe_embed(*res.bpe, surface);
      } else {
        if (sample.ctx_dim != dim || sample.ctx.size() != static_cast<std::size_t>(n * dim))
          throw DataError(DataErrc::kMisaligned, "contextual vectors for sentence " + std::to_string(sent.id) +
                                                     " do not match (dim " + std::to_string(sample.ctx_dim) +
                                                     ", expected " + std::to_string(dim) + ")");
        auto first = sample.ctx.begin() + t * dim;
        v.assign(first, first + dim);
      }
      if (static_cast<int>(v.size()) != dim)
        throw DataError(DataErrc::kDimensionMismatch,
                        "provider '" + to_string(kind) + "' yields dim " + std::to_string(v.size()) + ", model expects " +
                            std::to_string(dim));
      for (int k = 0; k < dim; ++k) p.frozen(row + k, t) = v[static_cast<std::size_t>(k)];
    }
    row += dim;
  }
  if (model.stack.has(ProviderKind::kChar)) {
    for (const auto& tok : sent.tokens) {
      std::vector<int> ids;
      for (char32_t c : utf8::decode(tok.surface)) ids.push_back(model.chars.id(utf8::encode(c)));
      p.chars.push_back(std::move(ids));
    }
  }
  if (model.stack.features) p.feats = featurize(sent, model.features);
  if (sent.gold_tags) p.gold = model.scheme.indices(*sent.gold_tags);
  return p;
}

/// Forward activations of one sentence, kept for backprop.
struct ForwardCache {
  Eigen::MatrixXd x;  // D x n stacked inputs
  std::vector<lstm::Cache> char_f, char_b;
  lstm::Cache word_f, word_b;
  Eigen::MatrixXd hidden;  // 2H x n
};

/// n x K emission scores from the BiLSTM encoder.
inline crf::EmissionMatrix encode(const TaggerModel& model, const PreparedSentence& in, ForwardCache& cache) {
  const auto& p = model.params;
  const auto n = static_cast<Eigen::Index>(in.size());
  const int total = model.stack.total_dim();
  if (p.word_fwd.input() != total) throw DataError(DataErrc::kShape, "encoder input dim differs from stack dim");

  cache.x.resize(total, n);
  int row = 0, frozen_row = 0;
  for (auto [kind, dim] : model.stack.providers) {
    if (kind == ProviderKind::kChar) {
      cache.char_f.assign(static_cast<std::size_t>(n), {});
      cache.char_b.assign(static_cast<std::size_t>(n), {});
      const int ch = model.config.char_hidden;
      for (Eigen::Index t = 0; t < n; ++t) {
        const auto& ids = in.chars[static_cast<std::size_t>(t)];
        Eigen::MatrixXd emb(p.char_embed.rows(), static_cast<Eigen::Index>(ids.size()));
        for (std::size_t c = 0; c < ids.size(); ++c) emb.col(static_cast<Eigen::Index>(c)) = p.char_embed.col(ids[c]);
        const auto hf = lstm::forward(p.char_fwd, emb, false, cache.char_f[static_cast<std::size_t>(t)]);
        const auto hb = lstm::forward(p.char_bwd, emb, true, cache.char_b[static_cast<std::size_t>(t)]);
        cache.x.block(row, t, ch, 1) = hf.col(hf.cols() - 1);
        cache.x.block(row + ch, t, ch, 1) = hb.col(0);
      }
    } else {
      cache.x.middleRows(row, dim) = in.frozen.middleRows(frozen_row, dim);
      frozen_row += dim;
    }
    row += dim;
  }
  if (model.stack.features) {
    const auto& fd = model.stack.feature_dims;
    for (Eigen::Index t = 0; t < n; ++t) {
      const auto& f = in.feats[static_cast<std::size_t>(t)];
      cache.x.block(row, t, fd.pos_dim, 1) = p.pos_table.col(f.pos);
      cache.x.block(row + fd.pos_dim, t, fd.ortho_dim, 1) = p.shape_table.col(f.shape);
      cache.x.block(row + fd.pos_dim + fd.ortho_dim, t, fd.cap_dim, 1) = p.cap_table.col(f.cap);
    }
  }

  const auto hf = lstm::forward(p.word_fwd, cache.x, false, cache.word_f);
  const auto hb = lstm::forward(p.word_bwd, cache.x, true, cache.word_b);
  cache.hidden.resize(2 * p.word_fwd.hidden(), n);
  cache.hidden << hf, hb;
  Eigen::MatrixXd scores = p.out_w * cache.hidden;
  scores.colwise() += p.out_b.col(0);
  return scores.transpose();
}

inline crf::EmissionMatrix encode(const TaggerModel& model, const PreparedSentence& in) {
  ForwardCache cache;
  return encode(model, in, cache);
}

/// CRF negative log-likelihood of the gold path; gradients of every
/// trainable array are accumulated into `grad`.
inline double loss_and_grad(const TaggerModel& model, const PreparedSentence& in, TaggerParams& grad) {
  const auto& p = model.params;
  ForwardCache cache;
  const auto emissions = encode(model, in, cache);
  const auto nll = crf::nll_and_grad(emissions, p.crf(), in.gold);
  grad.transitions += nll.grad.transitions;
  grad.start.col(0) += nll.grad.start;
  grad.stop.col(0) += nll.grad.stop;

  const Eigen::MatrixXd d_scores = nll.grad.emissions.transpose();  // K x n
  grad.out_w.noalias() += d_scores * cache.hidden.transpose();
  grad.out_b.col(0) += d_scores.rowwise().sum();
  const Eigen::MatrixXd d_hidden = p.out_w.transpose() * d_scores;
  const auto h = p.word_fwd.hidden();
  Eigen::MatrixXd dx = lstm::backward(p.word_fwd, cache.word_f, d_hidden.topRows(h), grad.word_fwd);
  dx += lstm::backward(p.word_bwd, cache.word_b, d_hidden.bottomRows(h), grad.word_bwd);

  const auto n = static_cast<Eigen::Index>(in.size());
  int row = 0;
  for (auto [kind, dim] : model.stack.providers) {
    if (kind == ProviderKind::kChar) {
      const int ch = model.config.char_hidden;
      for (Eigen::Index t = 0; t < n; ++t) {
        const auto& ids = in.chars[static_cast<std::size_t>(t)];
        const auto m = static_cast<Eigen::Index>(ids.size());
        Eigen::MatrixXd df = Eigen::MatrixXd::Zero(ch, m), db = Eigen::MatrixXd::Zero(ch, m);
        df.col(m - 1) = dx.block(row, t, ch, 1);
        db.col(0) = dx.block(row + ch, t, ch, 1);
        Eigen::MatrixXd demb = lstm::backward(p.char_fwd, cache.char_f[static_cast<std::size_t>(t)], df, grad.char_fwd);
        demb += lstm::backward(p.char_bwd, cache.char_b[static_cast<std::size_t>(t)], db, grad.char_bwd);
        for (Eigen::Index c = 0; c < m; ++c) grad.char_embed.col(ids[static_cast<std::size_t>(c)]) += demb.col(c);
      }
    }
    row += dim;
  }
  if (model.stack.features) {
    const auto& fd = model.stack.feature_dims;
    for (Eigen::Index t = 0; t < n; ++t) {
      const auto& f = in.feats[static_cast<std::size_t>(t)];
      grad.pos_table.col(f.pos) += dx.block(row, t, fd.pos_dim, 1);
      grad.shape_table.col(f.shape) += dx.block(row + fd.pos_dim, t, fd.ortho_dim, 1);
      grad.cap_table.col(f.cap) += dx.block(row + fd.pos_dim + fd.ortho_dim, t, fd.cap_dim, 1);
    }
  }
  return nll.loss;
}

inline std::vector<int> predict_indices(const TaggerModel& model, const PreparedSentence& in) {
  return crf::viterbi(encode(model, in), model.params.crf()).path;
}

/// Viterbi tags for every sample.
inline std::vector<std::vector<std::string>> predict(const TaggerModel& model, std::span<const TaggerSample> samples,
                                                     const TaggerResources& res) {
  std::vector<std::vector<std::string>> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(model.scheme.names(predict_indices(model, prepare(model, s, res))));
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct EpochStats {
  int epoch = 0;
  double loss = 0.0;  // mean per-sentence NLL over the epoch
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  int best_epoch = 0;
  double best_f1 = 0.0;
  std::string model_path;
};

inline nlohmann::json to_json(const TrainReport& r) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : r.epochs)
    epochs.push_back({{"epoch", e.epoch}, {"loss", e.loss}, {"precision", e.precision}, {"recall", e.recall}, {"f1", e.f1}});
  return {{"epochs", epochs}, {"best_epoch", r.best_epoch}, {"best_f1", r.best_f1}, {"model_path", r.model_path}};
}

struct TrainResult {
  TaggerModel model;
  TrainReport report;
};

namespace detail {

inline int ctx_dim_of(std::span<const TaggerSample> samples) {
  int dim = 0;
  for (const auto& s : samples) {
    if (s.ctx_dim == 0) continue;
    if (dim != 0 && s.ctx_dim != dim)
      throw DataError(DataErrc::kMisaligned, "contextual vectors differ in dimension across sentences");
    dim = s.ctx_dim;
  }
  return dim;
}

inline void round_to_float(TaggerParams& p) {
  p.visit([](const char*, Eigen::MatrixXd& m) {
    m = m.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
  });
}

}  // namespace detail

/// Dev-set strict entity scores of the current model.
inline EvalReport evaluate_prepared(const TaggerModel& model, std::span<const PreparedSentence> data) {
  std::vector<std::vector<std::string>> gold, pred;
  for (const auto& d : data) {
    gold.push_back(model.scheme.names(d.gold));
    pred.push_back(model.scheme.names(predict_indices(model, d)));
  }
  return ner_prf_tags(gold, pred);
}

/// Untrained model: vocabularies from `train`, stack dims from the resources
/// and samples, parameters initialized from the config seed.
inline TaggerModel init_model(const TaggerConfig& config, const TagScheme& scheme, std::span<const TaggerSample> train,
                              const TaggerResources& res) {
  config.validate();
  TaggerModel m;
  m.config = config;
  m.scheme = scheme;
  m.stack = make_stack_spec(config, res.static_vecs ? res.static_vecs->dim() : 0, res.bpe ? res.bpe->dim() : 0,
                            detail::ctx_dim_of(train));
  std::vector<Sentence> sents;
  for (const auto& s : train) sents.push_back(s.sentence);
  m.features = FeatureVocab::build(sents);
  m.chars = build_char_vocab(train);
  m.params = shaped_params(config, m.stack, m.chars.size(), m.features.pos.size(), m.features.shape.size(),
                           static_cast<int>(scheme.size()));
  init_params(m.params, config);
  return m;
}

/// Minibatch SGD on the mean per-sentence NLL. Each sentence gradient is
/// clipped to the configured global norm before averaging. After every epoch
/// the dev set is scored and the best-F1 parameters are kept (earliest epoch
/// wins ties). The returned parameters are rounded to float32, the storage
/// precision, so a saved and reloaded model predicts identically.
inline TrainResult train(const TaggerConfig& config, const TagScheme& scheme, std::span<const TaggerSample> train_set,
                         std::span<const TaggerSample> dev_set, const TaggerResources& res) {
  config.validate();
  if (train_set.empty()) throw DataError(DataErrc::kEmptyInput, "tagger: empty training set");
  if (dev_set.empty()) throw DataError(DataErrc::kEmptyInput, "tagger: empty dev set");
  for (const auto* split : {&train_set, &dev_set})
    for (const auto& s : *split)
      if (!s.sentence.gold_tags) throw DataError(DataErrc::kInvalidArgument, "tagger: training data lacks gold tags");

  TrainResult result;
  TaggerModel& model = result.model;
  model = init_model(config, scheme, train_set, res);

  std::vector<PreparedSentence> train_in, dev_in;
  for (const auto& s : train_set) train_in.push_back(prepare(model, s, res));
  for (const auto& s : dev_set) dev_in.push_back(prepare(model, s, res));

  TaggerParams best = model.params;
  double best_f1 = -1.0;
  int best_epoch = 0;
  TaggerParams batch_grad = model.params.zeros_like();
  TaggerParams sample_grad = model.params.zeros_like();

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    Xoshiro256 rng = Xoshiro256::derive(config.seed, {0xE90C, static_cast<std::uint64_t>(epoch)});
    const auto order = shuffled_indices(train_in.size(), rng);
    double loss_sum = 0.0;
    for (std::size_t first = 0, b = 0; first < order.size(); first += static_cast<std::size_t>(config.batch), ++b) {
      const std::size_t last = std::min(order.size(), first + static_cast<std::size_t>(config.batch));
      batch_grad.visit([](const char*, Eigen::MatrixXd& m) { m.setZero(); });
      for (std::size_t k = first; k < last; ++k) {
        sample_grad.visit([](const char*, Eigen::MatrixXd& m) { m.setZero(); });
        const double loss = loss_and_grad(model, train_in[order[k]], sample_grad);
        if (!std::isfinite(loss))
          throw RuntimeFailure("non-finite loss at epoch " + std::to_string(epoch) + ", batch " + std::to_string(b));
        loss_sum += loss;
        double scale = 1.0;
        if (config.gradient_clip > 0.0) {
          const double norm = std::sqrt(sample_grad.squared_norm());
          if (norm > config.gradient_clip) scale = config.gradient_clip / norm;
        }
        axpy(batch_grad, scale, sample_grad);
      }
      axpy(model.params, -config.learning_rate / static_cast<double>(last - first), batch_grad);
    }

    const auto rep = evaluate_prepared(model, dev_in);
    EpochStats st{epoch, loss_sum / static_cast<double>(train_in.size()), rep.micro.precision(), rep.micro.recall(),
                  rep.micro.f1()};
    result.report.epochs.push_back(st);
    if (st.f1 > best_f1) {
      best_f1 = st.f1;
      best_epoch = epoch;
      best = model.params;
    }
  }
  model.params = std::move(best);
  detail::round_to_float(model.params);
  result.report.best_epoch = best_epoch;
  result.report.best_f1 = best_f1;
  return result;
}

// ---------------------------------------------------------------------------
// Persistence: <dir>/meta.json + <dir>/weights.bin (float32 LE, visit order)

inline void save(const TaggerModel& model, const std::filesystem::path& dir,
                 const nlohmann::json& report = nlohmann::json()) {
  std::filesystem::create_directories(dir);
  io::Writer w;
  nlohmann::json arrays = nlohmann::json::array();
  model.params.visit([&](const char* name, const Eigen::MatrixXd& m) {
    arrays.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) w.f32(static_cast<float>(m(i, j)));
  });
  const std::string weights = w.take();

  nlohmann::json stack = nlohmann::json::array();
  for (auto [kind, dim] : model.stack.providers) stack.push_back({{"provider", to_string(kind)}, {"dim", dim}});
  nlohmann::json meta = {
      {"format", "stacktag-tagger"},
      {"format_version", kTaggerFormatVersion},
      {"task", "ner"},
      {"config", model.config},
      {"entity_types", model.scheme.entity_types()},
      {"tags", model.scheme.tags()},
      {"stack", stack},
      {"vocab", {{"pos", model.features.pos}, {"shape", model.features.shape}, {"char", model.chars}}},
      {"provenance", model.provenance},
      {"arrays", arrays},
      {"weights", {{"file", "weights.bin"}, {"bytes", weights.size()}, {"crc32", io::crc32(weights)}}},
      {"prng", Xoshiro256::kName},
      {"training_choices",
       {{"dropout", model.config.dropout},
        {"gradient_clip", model.config.gradient_clip},
        {"checkpoint", "best dev entity F1"},
        {"init", "uniform(-init_range, init_range), forget-gate bias = forget_bias"}}},
  };
  if (!report.is_null()) meta["report"] = report;
  io::write_file(dir / "weights.bin", weights);
  io::write_file(dir / "meta.json", meta.dump(2) + "\n");
}

inline TaggerModel load(const std::filesystem::path& dir) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(io::read_file(dir / "meta.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrc::kBadFormat, (dir / "meta.json").string() + ": " + e.what());
  }
  try {
    if (meta.at("format").get<std::string>() != "stacktag-tagger")
      throw DataError(DataErrc::kBadFormat, "not a tagger model directory: " + dir.string());
    const int version = meta.at("format_version").get<int>();
    if (version != kTaggerFormatVersion)
      throw DataError(DataErrc::kVersion, "unsupported tagger format version " + std::to_string(version));

    const std::string weights = io::read_file(dir / meta.at("weights").at("file").get<std::string>());
    if (weights.size() != meta.at("weights").at("bytes").get<std::size_t>() ||
        io::crc32(weights) != meta.at("weights").at("crc32").get<std::uint32_t>())
      throw DataError(DataErrc::kChecksum, (dir / "weights.bin").string() + ": checksum mismatch");

    TaggerModel m;
    m.config = meta.at("config").get<TaggerConfig>();
    m.config.validate();
    m.scheme = TagScheme(meta.at("entity_types").get<std::vector<std::string>>());
    meta.at("vocab").at("pos").get_to(m.features.pos);
    meta.at("vocab").at("shape").get_to(m.features.shape);
    meta.at("vocab").at("char").get_to(m.chars);
    m.provenance = meta.value("provenance", nlohmann::json::object());
    int static_dim = 0, bpe_dim = 0, ctx_dim = 0;
    for (const auto& s : meta.at("stack")) {
      const auto kind = provider_from_string(s.at("provider").get<std::string>());
      const int dim = s.at("dim").get<int>();
      if (kind == ProviderKind::kStatic) static_dim = dim;
      if (kind == ProviderKind::kBpe) bpe_dim = dim;
      if (kind == ProviderKind::kCtx) ctx_dim = dim;
    }
    m.stack = make_stack_spec(m.config, static_dim, bpe_dim, ctx_dim);
    m.params = shaped_params(m.config, m.stack, m.chars.size(), m.features.pos.size(), m.features.shape.size(),
                             static_cast<int>(m.scheme.size()));
    if (m.params.size() * 4 != weights.size())
      throw DataError(DataErrc::kShape, "weights.bin holds " + std::to_string(weights.size() / 4) +
                                            " values but the metadata implies " + std::to_string(m.params.size()));
    io::Reader r(weights, "weights.bin");
    m.params.visit([&](const char*, Eigen::MatrixXd& a) {
      for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = r.f32();
    });
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrc::kBadFormat, (dir / "meta.json").string() + ": " + e.what());
  }
}

}  // namespace stacktag
