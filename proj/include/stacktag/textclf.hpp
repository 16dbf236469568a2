#pragma once

// Binary text classification over fixed sentence embeddings: logistic
// regression, RBF-kernel SVM trained with SMO, and a one-hidden-layer network,
// all with a class weight on the positive class.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <json.hpp>

#include "stacktag/binio.hpp"
#include "stacktag/corpus.hpp"
#include "stacktag/embeddings.hpp"
#include "stacktag/error.hpp"
#include "stacktag/metrics.hpp"
#include "stacktag/rng.hpp"

namespace stacktag {

// ---------------------------------------------------------------------------
// Sentence embeddings

enum class SentEmbKind { kStaticMean, kCtxCls, kCtxTokenMean };

inline std::string to_string(SentEmbKind k) {
  switch (k) {
    case SentEmbKind::kStaticMean: return "static-mean";
    case SentEmbKind::kCtxCls: return "ctx-cls";
    case SentEmbKind::kCtxTokenMean: return "ctx-token-mean";
  }
  return "?";
}

inline SentEmbKind sent_emb_from_string(std::string_view s) {
  if (s == "static-mean") return SentEmbKind::kStaticMean;
  if (s == "ctx-cls") return SentEmbKind::kCtxCls;
  if (s == "ctx-token-mean") return SentEmbKind::kCtxTokenMean;
  throw ConfigError("unknown sentence embedding '" + std::string(s) +
                    "' (expected static-mean, ctx-cls or ctx-token-mean)");
}

inline constexpr std::string_view kSentMagic = "SENT";
inline constexpr std::uint32_t kSentVersion = 1;

/// Precomputed sentence vectors, row i aligned with record i of a corpus.
struct SentEmbeddingFile {
  int dim = 0;
  SentEmbKind kind = SentEmbKind::kCtxCls;  // kCtxCls or kCtxTokenMean
  Eigen::MatrixXf rows;                     // count x dim

  std::size_t count() const { return static_cast<std::size_t>(rows.rows()); }
};

inline std::string write_sent_file(const SentEmbeddingFile& f) {
  if (f.kind == SentEmbKind::kStaticMean) throw ConfigError("SENT files hold contextual embeddings only");
  io::Writer w;
  w.raw(kSentMagic);
  w.u32(kSentVersion);
  w.u32(static_cast<std::uint32_t>(f.dim));
  w.u32(static_cast<std::uint32_t>(f.count()));
  w.u8(f.kind == SentEmbKind::kCtxCls ? 0 : 1);
  for (Eigen::Index i = 0; i < f.rows.rows(); ++i)
    for (Eigen::Index j = 0; j < f.rows.cols(); ++j) w.f32(f.rows(i, j));
  return w.take();
}

/// Decodes a SENT file that must describe exactly `expected_count` records.
inline SentEmbeddingFile read_sent_file(std::string_view bytes, std::size_t expected_count,
                                        const std::string& source = "<sent>") {
  io::Reader r(bytes, source);
  if (bytes.size() < 4 || r.raw(4) != kSentMagic)
    throw DataError(DataErrc::kBadFormat, source + ": not a SENT file (bad magic)");
  const auto version = r.u32();
  if (version != kSentVersion)
    throw DataError(DataErrc::kVersion, source + ": unsupported SENT version " + std::to_string(version));
  SentEmbeddingFile f;
  f.dim = static_cast<int>(r.u32());
  const auto count = r.u32();
  const auto kind = r.u8();
  if (f.dim <= 0) throw DataError(DataErrc::kBadFormat, source + ": zero dimension");
  if (kind > 1) throw DataError(DataErrc::kBadFormat, source + ": unknown kind byte " + std::to_string(kind));
  f.kind = kind == 0 ? SentEmbKind::kCtxCls : SentEmbKind::kCtxTokenMean;
  if (count != expected_count)
    throw DataError(DataErrc::kMisaligned, source + ": file has " + std::to_string(count) + " rows, corpus has " +
                                               std::to_string(expected_count) + " (first unmatched sentence " +
                                               std::to_string(std::min<std::size_t>(count, expected_count)) + ")");
  const std::size_t need = static_cast<std::size_t>(count) * static_cast<std::size_t>(f.dim) * 4;
  if (r.remaining() < need) {
    const std::size_t complete = r.remaining() / (static_cast<std::size_t>(f.dim) * 4);
    throw DataError(DataErrc::kMisaligned, source + ": data ends inside sentence " + std::to_string(complete));
  }
  if (r.remaining() > need) throw DataError(DataErrc::kBadFormat, source + ": trailing bytes after last row");
  f.rows.resize(count, f.dim);
  for (Eigen::Index i = 0; i < f.rows.rows(); ++i)
    for (Eigen::Index j = 0; j < f.rows.cols(); ++j) f.rows(i, j) = r.f32();
  return f;
}

/// Whitespace tokens of raw text (classification input is not pre-tokenized).
inline std::vector<std::string> whitespace_tokens(std::string_view text) {
  std::vector<std::string> out;
  for (auto t : detail::split_ws(text)) out.emplace_back(t);
  return out;
}

/// Mean of the static vectors of the tokens (OOV tokens contribute zeros).
inline Eigen::VectorXd sent_embed_static(const StaticVecTable& table, std::span<const std::string> tokens) {
  if (tokens.empty()) throw DataError(DataErrc::kEmptyInput, "sentence embedding of an empty token list");
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(table.dim());
  for (const auto& t : tokens) {
    const auto v = lookup_static(table, t);
    for (int k = 0; k < table.dim(); ++k) acc(k) += v[static_cast<std::size_t>(k)];
  }
  return acc / static_cast<double>(tokens.size());
}

/// Row `i` of a contextual sentence-embedding file, verbatim.
inline Eigen::VectorXd sent_embed_ctx(const SentEmbeddingFile& file, SentEmbKind kind, std::size_t i) {
  if (file.kind != kind)
    throw DataError(DataErrc::kBadFormat, "sentence file holds " + to_string(file.kind) + " vectors, " +
                                              to_string(kind) + " requested");
  if (i >= file.count()) throw DataError(DataErrc::kMisaligned, "no sentence vector for record " + std::to_string(i));
  return file.rows.row(static_cast<Eigen::Index>(i)).transpose().cast<double>();
}

// ---------------------------------------------------------------------------
// Kernel

inline double rbf_kernel(const Eigen::Ref<const Eigen::VectorXd>& x, const Eigen::Ref<const Eigen::VectorXd>& z,
                         double gamma) {
  if (x.size() != z.size()) throw DataError(DataErrc::kDimensionMismatch, "rbf_kernel: dimension mismatch");
  if (!(gamma > 0.0)) throw ConfigError("rbf_kernel: gamma must be positive");
  return std::exp(-gamma * (x - z).squaredNorm());
}

/// Kernel matrix over the rows of X. Small problems are precomputed in full;
/// larger ones compute rows on demand and keep a bounded FIFO cache.
class KernelMatrix {
 public:
  KernelMatrix(const Eigen::MatrixXd& x, double gamma, std::size_t max_full_bytes = std::size_t{1} << 30)
      : x_(x), gamma_(gamma), norms_(x.rowwise().squaredNorm()) {
    const auto n = static_cast<std::size_t>(x.rows());
    diag_ = Eigen::VectorXd::Ones(x.rows());
    if (n * n * sizeof(double) <= max_full_bytes) {
      full_ = Eigen::MatrixXd(x.rows(), x.rows());
      for (Eigen::Index i = 0; i < x.rows(); ++i) full_->col(i) = compute_row(i);
    } else {
      cache_limit_ = std::max<std::size_t>(2, max_full_bytes / (n * sizeof(double)));
    }
  }

  Eigen::Index size() const { return x_.rows(); }
  double diag(Eigen::Index i) const { return diag_(i); }

  /// Column i of the kernel matrix (symmetric, so also row i).
  Eigen::VectorXd row(Eigen::Index i) const {
    if (full_) return full_->col(i);
    auto it = cache_.find(i);
    if (it != cache_.end()) return it->second;
    if (cache_.size() >= cache_limit_) {
      cache_.erase(fifo_.front());
      fifo_.pop_front();
    }
    fifo_.push_back(i);
    return cache_.emplace(i, compute_row(i)).first->second;
  }

  double operator()(Eigen::Index i, Eigen::Index j) const {
    if (full_) return (*full_)(i, j);
    return std::exp(-gamma_ * std::max(0.0, norms_(i) + norms_(j) - 2.0 * x_.row(i).dot(x_.row(j))));
  }

 private:
  Eigen::VectorXd compute_row(Eigen::Index i) const {
    Eigen::VectorXd r(x_.rows());
    for (Eigen::Index j = 0; j < x_.rows(); ++j) r(j) = std::exp(-gamma_ * (x_.row(i) - x_.row(j)).squaredNorm());
    return r;
  }

  const Eigen::MatrixXd& x_;
  double gamma_;
  Eigen::VectorXd norms_;
  Eigen::VectorXd diag_;
  std::optional<Eigen::MatrixXd> full_;
  std::size_t cache_limit_ = 0;
  mutable std::unordered_map<Eigen::Index, Eigen::VectorXd> cache_;
  mutable std::deque<Eigen::Index> fifo_;
};

// ---------------------------------------------------------------------------
// SVM (SMO on the dual)

struct SvmConfig {
  double gamma = 0.0;  // <= 0 means 1/dim
  std::vector<double> c_grid{0.01, 0.1, 1.0, 10.0, 100.0};
  double tolerance = 1e-3;
  long max_iterations = 10'000'000;
};

struct SvmModel {
  Eigen::MatrixXd support_vectors;  // one row per support vector
  Eigen::VectorXd coef;             // alpha_i * y_i
  double bias = 0.0;
  double gamma = 1.0;
  double c = 1.0;
  double positive_weight = 1.0;

  double decision(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    if (support_vectors.rows() > 0 && x.size() != support_vectors.cols())
      throw DataError(DataErrc::kDimensionMismatch, "svm: input dimension mismatch");
    double f = bias;
    for (Eigen::Index i = 0; i < support_vectors.rows(); ++i)
      f += coef(i) * std::exp(-gamma * (support_vectors.row(i).transpose() - x).squaredNorm());
    return f;
  }
};

struct SvmFit {
  SvmModel model;
  std::vector<double> alpha;  // one per training point
  std::vector<double> upper;  // per-point box constraint C_i
  long iterations = 0;
  bool converged = false;
};

inline double resolve_gamma(double gamma, Eigen::Index dim) {
  return gamma > 0.0 ? gamma : 1.0 / static_cast<double>(std::max<Eigen::Index>(1, dim));
}

/// 0.5 * a'Qa - sum(a) with Q_ij = y_i y_j K_ij.
inline double svm_dual_objective(const Eigen::MatrixXd& k, std::span<const int> y, std::span<const double> alpha) {
  double obj = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    obj -= alpha[i];
    for (std::size_t j = 0; j < alpha.size(); ++j)
      obj += 0.5 * alpha[i] * alpha[j] * y[i] * y[j] * k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  return obj;
}

/// Solves min 0.5 a'Qa - e'a s.t. y'a = 0, 0 <= a_i <= C_i with SMO using
/// second-order working-set selection. C_i is C * positive_weight for y_i = +1
/// and C otherwise. Stops when the maximal KKT violation is below the tolerance.
inline SvmFit train_svm(const Eigen::MatrixXd& x, std::span<const int> y, double c, double positive_weight,
                        const SvmConfig& cfg) {
  const auto n = x.rows();
  if (static_cast<std::size_t>(n) != y.size()) throw DataError(DataErrc::kShape, "svm: label count mismatch");
  if (n < 2) throw DataError(DataErrc::kInvalidArgument, "svm: need at least 2 samples");
  bool has_pos = false, has_neg = false;
  for (int v : y) {
    if (v != 1 && v != -1) throw DataError(DataErrc::kBadLabel, "svm: labels must be +1 or -1");
    (v > 0 ? has_pos : has_neg) = true;
  }
  if (!has_pos || !has_neg) throw DataError(DataErrc::kInvalidArgument, "svm: both classes must be present");
  if (!(c > 0.0) || !(positive_weight > 0.0)) throw ConfigError("svm: C and class weight must be positive");

  const double gamma = resolve_gamma(cfg.gamma, x.cols());
  const KernelMatrix kern(x, gamma);
  constexpr double kTau = 1e-12;

  std::vector<double> alpha(static_cast<std::size_t>(n), 0.0), upper(static_cast<std::size_t>(n));
  Eigen::VectorXd grad = Eigen::VectorXd::Constant(n, -1.0);  // Qa - e
  for (Eigen::Index i = 0; i < n; ++i) upper[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(i)] > 0 ? c * positive_weight : c;

  auto yi = [&](Eigen::Index i) { return static_cast<double>(y[static_cast<std::size_t>(i)]); };
  auto a = [&](Eigen::Index i) -> double& { return alpha[static_cast<std::size_t>(i)]; };
  auto ub = [&](Eigen::Index i) { return upper[static_cast<std::size_t>(i)]; };
  auto in_up = [&](Eigen::Index t) { return yi(t) > 0 ? a(t) < ub(t) : a(t) > 0.0; };
  auto in_low = [&](Eigen::Index t) { return yi(t) > 0 ? a(t) > 0.0 : a(t) < ub(t); };

  SvmFit fit;
  for (fit.iterations = 0; fit.iterations < cfg.max_iterations; ++fit.iterations) {
    Eigen::Index i = -1;
    double gmax = -std::numeric_limits<double>::infinity();
    for (Eigen::Index t = 0; t < n; ++t) {
      if (in_up(t) && -yi(t) * grad(t) >= gmax) {
        gmax = -yi(t) * grad(t);
        i = t;
      }
    }
    double gmax2 = -std::numeric_limits<double>::infinity();
    Eigen::Index j = -1;
    double best_obj = std::numeric_limits<double>::infinity();
    if (i >= 0) {
      const Eigen::VectorXd ki = kern.row(i);
      for (Eigen::Index t = 0; t < n; ++t) {
        if (!in_low(t)) continue;
        const double v = yi(t) * grad(t);
        gmax2 = std::max(gmax2, v);
        const double grad_diff = gmax + v;
        if (grad_diff > 0.0) {
          double quad = kern.diag(i) + kern.diag(t) - 2.0 * ki(t);
          if (quad <= 0.0) quad = kTau;
          const double obj = -(grad_diff * grad_diff) / quad;
          if (obj <= best_obj) {
            best_obj = obj;
            j = t;
          }
        }
      }
    }
    if (i < 0 || j < 0 || gmax + gmax2 < cfg.tolerance) {
      fit.converged = true;
      break;
    }

    const Eigen::VectorXd ki = kern.row(i);
    const Eigen::VectorXd kj = kern.row(j);
    const double ci = ub(i), cj = ub(j);
    const double old_ai = a(i), old_aj = a(j);
    double quad = kern.diag(i) + kern.diag(j) - 2.0 * ki(j);
    if (quad <= 0.0) quad = kTau;
    if (yi(i) != yi(j)) {
      const double delta = (-grad(i) - grad(j)) / quad;
      const double diff = a(i) - a(j);
      a(i) += delta;
      a(j) += delta;
      if (diff > 0.0) {
        if (a(j) < 0.0) {
          a(j) = 0.0;
          a(i) = diff;
        }
      } else if (a(i) < 0.0) {
        a(i) = 0.0;
        a(j) = -diff;
      }
      if (diff > ci - cj) {
        if (a(i) > ci) {
          a(i) = ci;
          a(j) = ci - diff;
        }
      } else if (a(j) > cj) {
        a(j) = cj;
        a(i) = cj + diff;
      }
    } else {
      const double delta = (grad(i) - grad(j)) / quad;
      const double sum = a(i) + a(j);
      a(i) -= delta;
      a(j) += delta;
      if (sum > ci) {
        if (a(i) > ci) {
          a(i) = ci;
          a(j) = sum - ci;
        }
      } else if (a(j) < 0.0) {
        a(j) = 0.0;
        a(i) = sum;
      }
      if (sum > cj) {
        if (a(j) > cj) {
          a(j) = cj;
          a(i) = sum - cj;
        }
      } else if (a(i) < 0.0) {
        a(i) = 0.0;
        a(j) = sum;
      }
    }
    const double dai = a(i) - old_ai, daj = a(j) - old_aj;
    // grad_k += Q_ki dai + Q_kj daj, Q_kl = y_k y_l K_kl
    for (Eigen::Index t = 0; t < n; ++t) grad(t) += yi(t) * (yi(i) * ki(t) * dai + yi(j) * kj(t) * daj);
  }

  // Bias from free vectors, or the midpoint of the feasible interval.
  double ub_r = std::numeric_limits<double>::infinity(), lb_r = -std::numeric_limits<double>::infinity();
  double sum_free = 0.0;
  int nr_free = 0;
  for (Eigen::Index t = 0; t < n; ++t) {
    const double yg = yi(t) * grad(t);
    if (a(t) >= ub(t)) {
      if (yi(t) < 0) ub_r = std::min(ub_r, yg);
      else lb_r = std::max(lb_r, yg);
    } else if (a(t) <= 0.0) {
      if (yi(t) > 0) ub_r = std::min(ub_r, yg);
      else lb_r = std::max(lb_r, yg);
    } else {
      ++nr_free;
      sum_free += yg;
    }
  }
  const double rho = nr_free > 0 ? sum_free / nr_free : (ub_r + lb_r) / 2.0;

  SvmModel& m = fit.model;
  m.bias = -rho;
  m.gamma = gamma;
  m.c = c;
  m.positive_weight = positive_weight;
  std::vector<Eigen::Index> sv;
  for (Eigen::Index t = 0; t < n; ++t)
    if (a(t) > 0.0) sv.push_back(t);
  m.support_vectors.resize(static_cast<Eigen::Index>(sv.size()), x.cols());
  m.coef.resize(static_cast<Eigen::Index>(sv.size()));
  for (std::size_t k = 0; k < sv.size(); ++k) {
    m.support_vectors.row(static_cast<Eigen::Index>(k)) = x.row(sv[k]);
    m.coef(static_cast<Eigen::Index>(k)) = a(sv[k]) * yi(sv[k]);
  }
  fit.alpha = std::move(alpha);
  fit.upper = std::move(upper);
  return fit;
}

inline std::vector<int> to_signed_labels(std::span<const int> labels01) {
  std::vector<int> y;
  y.reserve(labels01.size());
  for (int v : labels01) y.push_back(v ? 1 : -1);
  return y;
}

struct GridSearchResult {
  double best_c = 0.0;
  std::vector<std::pair<double, double>> scores;  // (C, mean CV F1)
  std::vector<std::string> warnings;
};

namespace detail {

inline Eigen::MatrixXd select_rows(const Eigen::MatrixXd& x, std::span<const std::size_t> idx) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) out.row(static_cast<Eigen::Index>(k)) = x.row(static_cast<Eigen::Index>(idx[k]));
  return out;
}

}  // namespace detail

/// Mean positive-class F1 over `folds`-fold cross-validation for each C;
/// the best mean wins and ties go to the smaller C. Folds whose training part
/// holds a single class are skipped with a warning.
inline GridSearchResult grid_search_c(const Eigen::MatrixXd& x, std::span<const int> labels01,
                                      std::span<const double> grid, double positive_weight, const SvmConfig& cfg,
                                      std::uint64_t seed, int folds = 3) {
  if (grid.empty()) throw ConfigError("grid search: empty C grid");
  GridSearchResult res;
  std::vector<double> cs(grid.begin(), grid.end());
  std::sort(cs.begin(), cs.end());
  if (cs.size() == 1) {
    res.best_c = cs[0];
    return res;
  }

  Xoshiro256 rng = Xoshiro256::derive(seed, {0xC6});
  const auto order = shuffled_indices(labels01.size(), rng);
  std::vector<std::vector<std::size_t>> parts(static_cast<std::size_t>(folds));
  for (std::size_t k = 0; k < order.size(); ++k) parts[k % static_cast<std::size_t>(folds)].push_back(order[k]);

  double best = -1.0;
  for (double c : cs) {
    double total = 0.0;
    int used = 0;
    for (int f = 0; f < folds; ++f) {
      std::vector<std::size_t> tr;
      for (int g = 0; g < folds; ++g)
        if (g != f) tr.insert(tr.end(), parts[static_cast<std::size_t>(g)].begin(), parts[static_cast<std::size_t>(g)].end());
      const auto& va = parts[static_cast<std::size_t>(f)];
      std::vector<int> ytr;
      for (auto i : tr) ytr.push_back(labels01[i] ? 1 : -1);
      const bool has_pos = std::count(ytr.begin(), ytr.end(), 1) > 0;
      const bool has_neg = std::count(ytr.begin(), ytr.end(), -1) > 0;
      if (va.empty() || !has_pos || !has_neg) {
        res.warnings.push_back("C=" + std::to_string(c) + ": fold " + std::to_string(f) + " skipped (single class)");
        continue;
      }
      const auto fit = train_svm(detail::select_rows(x, tr), ytr, c, positive_weight, cfg);
      std::vector<int> gold, pred;
      for (auto i : va) {
        gold.push_back(labels01[i]);
        pred.push_back(fit.model.decision(x.row(static_cast<Eigen::Index>(i)).transpose()) > 0.0 ? 1 : 0);
      }
      total += clf_prf(gold, pred).micro.f1();
      ++used;
    }
    const double score = used > 0 ? total / used : 0.0;
    res.scores.emplace_back(c, score);
    if (score > best) {
      best = score;
      res.best_c = c;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Logistic regression

struct LogRegConfig {
  double learning_rate = 0.1;
  int epochs = 1000;
  double l2 = 1e-4;
};

struct LogRegModel {
  Eigen::VectorXd w;
  double b = 0.0;

  double probability(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    if (x.size() != w.size()) throw DataError(DataErrc::kDimensionMismatch, "logreg: input dimension mismatch");
    return 1.0 / (1.0 + std::exp(-(w.dot(x) + b)));
  }
};

struct LogRegGrad {
  double loss = 0.0;
  Eigen::VectorXd w;
  double b = 0.0;
};

/// Mean class-weighted binary cross-entropy plus (l2/2)|w|^2. Each example's
/// gradient is formed unweighted and then scaled by its class weight.
inline LogRegGrad logreg_loss_grad(const LogRegModel& m, const Eigen::MatrixXd& x, std::span<const int> labels01,
                                   double positive_weight, double l2) {
  LogRegGrad g;
  g.w = Eigen::VectorXd::Zero(x.cols());
  const auto n = x.rows();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double y = labels01[static_cast<std::size_t>(i)] ? 1.0 : 0.0;
    const double wt = y > 0 ? positive_weight : 1.0;
    const double z = m.w.dot(x.row(i).transpose()) + m.b;
    // log(1 + e^z) - y z, evaluated stably
    const double ce = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y * z;
    const double p = 1.0 / (1.0 + std::exp(-z));
    const double dz = p - y;
    const Eigen::VectorXd gw = dz * x.row(i).transpose();
    g.loss += wt * ce;
    g.w += wt * gw;
    g.b += wt * dz;
  }
  g.loss /= static_cast<double>(n);
  g.w /= static_cast<double>(n);
  g.b /= static_cast<double>(n);
  if (l2 != 0.0) {
    g.loss += 0.5 * l2 * m.w.squaredNorm();
    g.w += l2 * m.w;
  }
  return g;
}

/// Full-batch gradient descent from zero weights.
inline LogRegModel train_logreg(const Eigen::MatrixXd& x, std::span<const int> labels01, double positive_weight,
                                const LogRegConfig& cfg, std::vector<double>* loss_curve = nullptr) {
  const bool has_pos = std::count(labels01.begin(), labels01.end(), 1) > 0;
  const bool has_neg = std::count(labels01.begin(), labels01.end(), 0) > 0;
  if (!has_pos || !has_neg) throw DataError(DataErrc::kInvalidArgument, "logreg: both classes must be present");
  LogRegModel m{Eigen::VectorXd::Zero(x.cols()), 0.0};
  for (int e = 0; e < cfg.epochs; ++e) {
    const auto g = logreg_loss_grad(m, x, labels01, positive_weight, cfg.l2);
    if (!std::isfinite(g.loss)) throw RuntimeFailure("logreg: non-finite loss at epoch " + std::to_string(e + 1));
    if (loss_curve) loss_curve->push_back(g.loss);
    m.w -= cfg.learning_rate * g.w;
    m.b -= cfg.learning_rate * g.b;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Feed-forward network: d -> hidden (ReLU) -> 2 (softmax)

struct NnConfig {
  double learning_rate = 0.00003;
  int batch = 16;
  int epochs = 10;
  int hidden = 256;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct NnModel {
  Eigen::MatrixXd w1;  // hidden x d
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;  // 2 x hidden
  Eigen::VectorXd b2;

  template <typename F>
  void visit(F&& f) {
    f(w1);
    f(b1);
    f(w2);
    f(b2);
  }

  NnModel zeros_like() const {
    return {Eigen::MatrixXd::Zero(w1.rows(), w1.cols()), Eigen::VectorXd::Zero(b1.size()),
            Eigen::MatrixXd::Zero(w2.rows(), w2.cols()), Eigen::VectorXd::Zero(b2.size())};
  }

  /// Softmax probabilities of (negative, positive).
  Eigen::Vector2d probabilities(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    if (x.size() != w1.cols()) throw DataError(DataErrc::kDimensionMismatch, "nn: input dimension mismatch");
    const Eigen::VectorXd h = (w1 * x + b1).cwiseMax(0.0);
    const Eigen::Vector2d z = w2 * h + b2;
    const double m = z.maxCoeff();
    Eigen::Vector2d e = (z.array() - m).exp();
    return e / e.sum();
  }
};

/// Glorot-uniform weights from the seed, zero biases.
inline NnModel init_nn(int input_dim, int hidden, std::uint64_t seed) {
  Xoshiro256 rng = Xoshiro256::derive(seed, {0x4E4E});
  NnModel m{Eigen::MatrixXd(hidden, input_dim), Eigen::VectorXd::Zero(hidden), Eigen::MatrixXd(2, hidden),
            Eigen::VectorXd::Zero(2)};
  const double r1 = std::sqrt(6.0 / (input_dim + hidden)), r2 = std::sqrt(6.0 / (hidden + 2));
  for (Eigen::Index j = 0; j < m.w1.cols(); ++j)
    for (Eigen::Index i = 0; i < m.w1.rows(); ++i) m.w1(i, j) = rng.uniform(-r1, r1);
  for (Eigen::Index j = 0; j < m.w2.cols(); ++j)
    for (Eigen::Index i = 0; i < m.w2.rows(); ++i) m.w2(i, j) = rng.uniform(-r2, r2);
  return m;
}

/// Unweighted cross-entropy of one example; its gradient is added to `grad`
/// scaled by `weight`.
inline double nn_example_grad(const NnModel& m, const Eigen::Ref<const Eigen::VectorXd>& x, int label, double weight,
                              NnModel& grad) {
  const Eigen::VectorXd pre = m.w1 * x + m.b1;
  const Eigen::VectorXd h = pre.cwiseMax(0.0);
  const Eigen::Vector2d z = m.w2 * h + m.b2;
  const double zmax = z.maxCoeff();
  const double lse = zmax + std::log((z.array() - zmax).exp().sum());
  const Eigen::Vector2d p = (z.array() - lse).exp();
  const double loss = lse - z(label ? 1 : 0);

  Eigen::Vector2d dz = p;
  dz(label ? 1 : 0) -= 1.0;
  const Eigen::MatrixXd gw2 = dz * h.transpose();
  Eigen::VectorXd dh = m.w2.transpose() * dz;
  for (Eigen::Index k = 0; k < dh.size(); ++k)
    if (pre(k) <= 0.0) dh(k) = 0.0;
  const Eigen::MatrixXd gw1 = dh * x.transpose();
  grad.w2 += weight * gw2;
  grad.b2 += weight * dz;
  grad.w1 += weight * gw1;
  grad.b1 += weight * dh;
  return loss;
}

/// Mean class-weighted loss and gradient over the rows listed in `batch`.
inline double nn_batch_grad(const NnModel& m, const Eigen::MatrixXd& x, std::span<const int> labels01,
                            std::span<const std::size_t> batch, double positive_weight, NnModel& grad) {
  grad = m.zeros_like();
  double loss = 0.0;
  for (auto i : batch) {
    const int y = labels01[i];
    const double w = y ? positive_weight : 1.0;
    loss += w * nn_example_grad(m, x.row(static_cast<Eigen::Index>(i)).transpose(), y, w, grad);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  grad.visit([&](auto& a) { a *= inv; });
  return loss * inv;
}

/// Minibatch Adam; the sample order of epoch e depends only on (seed, e).
inline NnModel train_nn(const Eigen::MatrixXd& x, std::span<const int> labels01, double positive_weight,
                        const NnConfig& cfg, std::uint64_t seed, std::vector<double>* loss_curve = nullptr) {
  const bool has_pos = std::count(labels01.begin(), labels01.end(), 1) > 0;
  const bool has_neg = std::count(labels01.begin(), labels01.end(), 0) > 0;
  if (!has_pos || !has_neg) throw DataError(DataErrc::kInvalidArgument, "nn: both classes must be present");
  if (cfg.batch < 1 || cfg.epochs < 1 || cfg.hidden < 1) throw ConfigError("nn: batch, epochs and hidden must be >= 1");

  NnModel m = init_nn(static_cast<int>(x.cols()), cfg.hidden, seed);
  NnModel mom = m.zeros_like(), vel = m.zeros_like(), grad;
  long step = 0;
  for (int e = 1; e <= cfg.epochs; ++e) {
    Xoshiro256 rng = Xoshiro256::derive(seed, {0xADA, static_cast<std::uint64_t>(e)});
    const auto order = shuffled_indices(labels01.size(), rng);
    double epoch_loss = 0.0;
    for (std::size_t first = 0; first < order.size(); first += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t last = std::min(order.size(), first + static_cast<std::size_t>(cfg.batch));
      const std::span<const std::size_t> batch(order.data() + first, last - first);
      const double loss = nn_batch_grad(m, x, labels01, batch, positive_weight, grad);
      if (!std::isfinite(loss)) throw RuntimeFailure("nn: non-finite loss at epoch " + std::to_string(e));
      epoch_loss += loss * static_cast<double>(batch.size());
      ++step;
      const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      auto update = [&](auto& p, const auto& g, auto& mo, auto& ve) {
        mo = cfg.beta1 * mo + (1.0 - cfg.beta1) * g;
        ve = cfg.beta2 * ve + (1.0 - cfg.beta2) * g.cwiseProduct(g);
        p.array() -= cfg.learning_rate * (mo.array() / c1) / ((ve.array() / c2).sqrt() + cfg.epsilon);
      };
      update(m.w1, grad.w1, mom.w1, vel.w1);
      update(m.b1, grad.b1, mom.b1, vel.b1);
      update(m.w2, grad.w2, mom.w2, vel.w2);
      update(m.b2, grad.b2, mom.b2, vel.b2);
    }
    if (loss_curve) loss_curve->push_back(epoch_loss / static_cast<double>(order.size()));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Unified classifier model

enum class ClfFamily { kLogReg, kSvm, kNn };

inline std::string to_string(ClfFamily f) {
  switch (f) {
    case ClfFamily::kLogReg: return "logreg";
    case ClfFamily::kSvm: return "svm";
    case ClfFamily::kNn: return "nn";
  }
  return "?";
}

inline ClfFamily clf_family_from_string(std::string_view s) {
  if (s == "logreg") return ClfFamily::kLogReg;
  if (s == "svm") return ClfFamily::kSvm;
  if (s == "nn") return ClfFamily::kNn;
  throw ConfigError("unknown classifier '" + std::string(s) + "' (expected logreg, svm or nn)");
}

struct ClfConfig {
  ClfFamily family = ClfFamily::kNn;
  SentEmbKind embedding = SentEmbKind::kCtxTokenMean;
  double positive_class_weight = 10.0;
  std::uint64_t seed = 1;
  NnConfig nn;
  SvmConfig svm;
  LogRegConfig logreg;

  void validate() const {
    if (!(positive_class_weight > 0.0)) throw ConfigError("classifier: positive_class_weight must be positive");
    if (svm.c_grid.empty()) throw ConfigError("classifier: svm C grid is empty");
    for (double c : svm.c_grid)
      if (!(c > 0.0)) throw ConfigError("classifier: C values must be positive");
    if (nn.batch < 1 || nn.epochs < 1 || nn.hidden < 1 || !(nn.learning_rate > 0.0))
      throw ConfigError("classifier: invalid nn settings");
    if (logreg.epochs < 1 || !(logreg.learning_rate > 0.0)) throw ConfigError("classifier: invalid logreg settings");
  }
};

inline void to_json(nlohmann::json& j, const ClfConfig& c) {
  j = {{"model", to_string(c.family)},
       {"embedding", to_string(c.embedding)},
       {"positive_class_weight", c.positive_class_weight},
       {"seed", c.seed},
       {"nn",
        {{"learning_rate", c.nn.learning_rate},
         {"batch", c.nn.batch},
         {"epochs", c.nn.epochs},
         {"hidden", c.nn.hidden},
         {"beta1", c.nn.beta1},
         {"beta2", c.nn.beta2},
         {"epsilon", c.nn.epsilon}}},
       {"svm",
        {{"gamma", c.svm.gamma},
         {"c_grid", c.svm.c_grid},
         {"tolerance", c.svm.tolerance},
         {"max_iterations", c.svm.max_iterations}}},
       {"logreg", {{"learning_rate", c.logreg.learning_rate}, {"epochs", c.logreg.epochs}, {"l2", c.logreg.l2}}}};
}

inline void from_json(const nlohmann::json& j, ClfConfig& c) {
  auto get = [](const nlohmann::json& o, const char* key, auto& field) {
    if (o.contains(key)) o.at(key).get_to(field);
  };
  if (j.contains("model")) c.family = clf_family_from_string(j.at("model").get<std::string>());
  if (j.contains("embedding")) c.embedding = sent_emb_from_string(j.at("embedding").get<std::string>());
  get(j, "positive_class_weight", c.positive_class_weight);
  get(j, "seed", c.seed);
  if (j.contains("nn")) {
    const auto& o = j.at("nn");
    get(o, "learning_rate", c.nn.learning_rate);
    get(o, "batch", c.nn.batch);
    get(o, "epochs", c.nn.epochs);
    get(o, "hidden", c.nn.hidden);
    get(o, "beta1", c.nn.beta1);
    get(o, "beta2", c.nn.beta2);
    get(o, "epsilon", c.nn.epsilon);
  }
  if (j.contains("svm")) {
    const auto& o = j.at("svm");
    get(o, "gamma", c.svm.gamma);
    get(o, "c_grid", c.svm.c_grid);
    get(o, "tolerance", c.svm.tolerance);
    get(o, "max_iterations", c.svm.max_iterations);
  }
  if (j.contains("logreg")) {
    const auto& o = j.at("logreg");
    get(o, "learning_rate", c.logreg.learning_rate);
    get(o, "epochs", c.logreg.epochs);
    get(o, "l2", c.logreg.l2);
  }
}

struct ClfModel {
  ClfConfig config;
  int dim = 0;
  std::variant<LogRegModel, SvmModel, NnModel> model;
  nlohmann::json provenance = nlohmann::json::object();
};

struct LabelPrediction {
  int label = 0;       // 1 = positive
  double score = 0.0;  // SVM margin, otherwise positive-class probability
};

inline LabelPrediction predict_label(const LogRegModel& m, const Eigen::Ref<const Eigen::VectorXd>& x) {
  const double p = m.probability(x);
  return {p >= 0.5 ? 1 : 0, p};
}

inline LabelPrediction predict_label(const SvmModel& m, const Eigen::Ref<const Eigen::VectorXd>& x) {
  const double f = m.decision(x);
  return {f > 0.0 ? 1 : 0, f};
}

inline LabelPrediction predict_label(const NnModel& m, const Eigen::Ref<const Eigen::VectorXd>& x) {
  const auto p = m.probabilities(x);
  return {p(1) > p(0) ? 1 : 0, p(1)};
}

inline LabelPrediction predict_label(const ClfModel& m, const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (x.size() != m.dim) throw DataError(DataErrc::kDimensionMismatch, "classifier: input dimension mismatch");
  return std::visit([&](const auto& inner) { return predict_label(inner, x); }, m.model);
}

namespace detail {

template <typename Mat>
void round_array(Mat& a) {
  a = a.unaryExpr([](double v) { return static_cast<double>(static_cast<float>(v)); });
}

inline double round_scalar(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace detail

/// Rounds every stored array to float32, the on-disk precision.
inline void round_to_storage(ClfModel& m) {
  std::visit(
      [](auto& inner) {
        using T = std::decay_t<decltype(inner)>;
        if constexpr (std::is_same_v<T, LogRegModel>) {
          detail::round_array(inner.w);
          inner.b = detail::round_scalar(inner.b);
        } else if constexpr (std::is_same_v<T, SvmModel>) {
          detail::round_array(inner.support_vectors);
          detail::round_array(inner.coef);
          inner.bias = detail::round_scalar(inner.bias);
        } else {
          inner.visit([](auto& a) { detail::round_array(a); });
        }
      },
      m.model);
}

struct ClfTrainResult {
  ClfModel model;
  nlohmann::json report;
};

/// Trains the configured family on rows of X (labels 0/1) and rounds the
/// result to storage precision. For the SVM, C comes from grid search.
inline ClfTrainResult train_classifier(const Eigen::MatrixXd& x, std::span<const int> labels01, const ClfConfig& cfg) {
  cfg.validate();
  if (static_cast<std::size_t>(x.rows()) != labels01.size())
    throw DataError(DataErrc::kShape, "classifier: feature rows and labels differ in count");
  ClfTrainResult out;
  out.model.config = cfg;
  out.model.dim = static_cast<int>(x.cols());
  out.report["model"] = to_string(cfg.family);
  switch (cfg.family) {
    case ClfFamily::kLogReg: {
      std::vector<double> curve;
      out.model.model = train_logreg(x, labels01, cfg.positive_class_weight, cfg.logreg, &curve);
      out.report["loss_curve"] = curve;
      break;
    }
    case ClfFamily::kSvm: {
      const auto gs = grid_search_c(x, labels01, cfg.svm.c_grid, cfg.positive_class_weight, cfg.svm, cfg.seed);
      const auto y = to_signed_labels(labels01);
      auto fit = train_svm(x, y, gs.best_c, cfg.positive_class_weight, cfg.svm);
      out.report["best_c"] = gs.best_c;
      nlohmann::json scores = nlohmann::json::array();
      for (auto [c, s] : gs.scores) scores.push_back({{"c", c}, {"cv_f1", s}});
      out.report["grid"] = scores;
      out.report["warnings"] = gs.warnings;
      out.report["converged"] = fit.converged;
      out.report["iterations"] = fit.iterations;
      out.model.model = std::move(fit.model);
      break;
    }
    case ClfFamily::kNn: {
      std::vector<double> curve;
      out.model.model = train_nn(x, labels01, cfg.positive_class_weight, cfg.nn, cfg.seed, &curve);
      out.report["loss_curve"] = curve;
      break;
    }
  }
  round_to_storage(out.model);
  return out;
}

// ---------------------------------------------------------------------------
// Persistence (mirrors the tagger: meta.json + weights.bin)

inline constexpr int kClfFormatVersion = 1;

inline void save(const ClfModel& m, const std::filesystem::path& dir, const nlohmann::json& report = nlohmann::json()) {
  std::filesystem::create_directories(dir);
  io::Writer w;
  nlohmann::json arrays = nlohmann::json::array();
  auto put = [&](const char* name, const auto& a) {
    arrays.push_back({{"name", name}, {"rows", a.rows()}, {"cols", a.cols()}});
    for (Eigen::Index i = 0; i < a.rows(); ++i)
      for (Eigen::Index j = 0; j < a.cols(); ++j) w.f32(static_cast<float>(a(i, j)));
  };
  auto put_scalar = [&](const char* name, double v) {
    arrays.push_back({{"name", name}, {"rows", 1}, {"cols", 1}});
    w.f32(static_cast<float>(v));
  };
  nlohmann::json extra = nlohmann::json::object();
  std::visit(
      [&](const auto& inner) {
        using T = std::decay_t<decltype(inner)>;
        if constexpr (std::is_same_v<T, LogRegModel>) {
          put("w", inner.w);
          put_scalar("b", inner.b);
        } else if constexpr (std::is_same_v<T, SvmModel>) {
          put("support_vectors", inner.support_vectors);
          put("coef", inner.coef);
          put_scalar("bias", inner.bias);
          extra = {{"support_vectors", inner.support_vectors.rows()},
                   {"gamma", inner.gamma},
                   {"c", inner.c},
                   {"positive_weight", inner.positive_weight}};
        } else {
          put("w1", inner.w1);
          put("b1", inner.b1);
          put("w2", inner.w2);
          put("b2", inner.b2);
        }
      },
      m.model);
  const std::string weights = w.take();
  nlohmann::json meta = {{"format", "stacktag-classifier"},
                         {"format_version", kClfFormatVersion},
                         {"task", "clf"},
                         {"config", m.config},
                         {"dim", m.dim},
                         {"family_params", extra},
                         {"provenance", m.provenance},
                         {"arrays", arrays},
                         {"weights", {{"file", "weights.bin"}, {"bytes", weights.size()}, {"crc32", io::crc32(weights)}}},
                         {"prng", Xoshiro256::kName},
                         {"adam", {{"beta1", m.config.nn.beta1}, {"beta2", m.config.nn.beta2}, {"epsilon", m.config.nn.epsilon}}}};
  if (!report.is_null()) meta["report"] = report;
  io::write_file(dir / "weights.bin", weights);
  io::write_file(dir / "meta.json", meta.dump(2) + "\n");
}

inline ClfModel load_classifier(const std::filesystem::path& dir) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(io::read_file(dir / "meta.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrc::kBadFormat, (dir / "meta.json").string() + ": " + e.what());
  }
  try {
    if (meta.at("format").get<std::string>() != "stacktag-classifier")
      throw DataError(DataErrc::kBadFormat, "not a classifier model directory: " + dir.string());
    const int version = meta.at("format_version").get<int>();
    if (version != kClfFormatVersion)
      throw DataError(DataErrc::kVersion, "unsupported classifier format version " + std::to_string(version));
    const std::string weights = io::read_file(dir / meta.at("weights").at("file").get<std::string>());
    if (weights.size() != meta.at("weights").at("bytes").get<std::size_t>() ||
        io::crc32(weights) != meta.at("weights").at("crc32").get<std::uint32_t>())
      throw DataError(DataErrc::kChecksum, (dir / "weights.bin").string() + ": checksum mismatch");

    ClfModel m;
    m.config = meta.at("config").get<ClfConfig>();
    m.dim = meta.at("dim").get<int>();
    m.provenance = meta.value("provenance", nlohmann::json::object());
    const auto& extra = meta.at("family_params");
    const Eigen::Index d = m.dim;
    std::size_t expected = 0;
    switch (m.config.family) {
      case ClfFamily::kLogReg: expected = static_cast<std::size_t>(d + 1); break;
      case ClfFamily::kSvm:
        expected = static_cast<std::size_t>(extra.at("support_vectors").get<Eigen::Index>() * (d + 1) + 1);
        break;
      case ClfFamily::kNn: {
        const Eigen::Index h = m.config.nn.hidden;
        expected = static_cast<std::size_t>(h * d + h + 2 * h + 2);
        break;
      }
    }
    if (expected * 4 != weights.size())
      throw DataError(DataErrc::kShape, "weights.bin holds " + std::to_string(weights.size() / 4) +
                                            " values but the metadata implies " + std::to_string(expected));
    io::Reader r(weights, "weights.bin");
    auto get = [&](auto& a) {
      for (Eigen::Index i = 0; i < a.rows(); ++i)
        for (Eigen::Index j = 0; j < a.cols(); ++j) a(i, j) = r.f32();
    };
    switch (m.config.family) {
      case ClfFamily::kLogReg: {
        LogRegModel lr{Eigen::VectorXd(d), 0.0};
        get(lr.w);
        lr.b = r.f32();
        m.model = std::move(lr);
        break;
      }
      case ClfFamily::kSvm: {
        SvmModel s;
        const auto nsv = extra.at("support_vectors").get<Eigen::Index>();
        s.support_vectors.resize(nsv, d);
        s.coef.resize(nsv);
        get(s.support_vectors);
        get(s.coef);
        s.bias = r.f32();
        s.gamma = extra.at("gamma").get<double>();
        s.c = extra.at("c").get<double>();
        s.positive_weight = extra.at("positive_weight").get<double>();
        m.model = std::move(s);
        break;
      }
      case ClfFamily::kNn: {
        const Eigen::Index h = m.config.nn.hidden;
        NnModel nn{Eigen::MatrixXd(h, d), Eigen::VectorXd(h), Eigen::MatrixXd(2, h), Eigen::VectorXd(2)};
        nn.visit([&](auto& a) { get(a); });
        m.model = std::move(nn);
        break;
      }
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(DataErrc::kBadFormat, (dir / "meta.json").string() + ": " + e.what());
  }
}

}  // namespace stacktag
