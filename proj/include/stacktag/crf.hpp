#pragma once

// Linear-chain CRF over tag indices: path scores, log-partition, Viterbi and
// forward-backward gradients of the negative log-likelihood. All math is
// double precision.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "stacktag/error.hpp"

namespace stacktag::crf {

/// Row t holds the per-tag scores of token t (n x K).
using EmissionMatrix = Eigen::MatrixXd;

struct CrfParams {
  Eigen::MatrixXd transitions;  // [prev][next], K x K
  Eigen::VectorXd start;
  Eigen::VectorXd stop;

  static CrfParams zeros(int k) {
    return {Eigen::MatrixXd::Zero(k, k), Eigen::VectorXd::Zero(k), Eigen::VectorXd::Zero(k)};
  }

  int num_tags() const { return static_cast<int>(start.size()); }
};

struct CrfGradients {
  Eigen::MatrixXd emissions;
  Eigen::MatrixXd transitions;
  Eigen::VectorXd start;
  Eigen::VectorXd stop;
};

namespace detail {

inline void check_shapes(const EmissionMatrix& e, const CrfParams& crf) {
  const auto k = crf.start.size();
  if (e.rows() < 1 || e.cols() != k || crf.stop.size() != k || crf.transitions.rows() != k ||
      crf.transitions.cols() != k)
    throw DataError(DataErrc::kShape, "crf: inconsistent emission/parameter shapes");
}

template <typename Vec>
double log_sum_exp(const Vec& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;
  return m + std::log((v.array() - m).exp().sum());
}

// alpha(t, y) = log-sum over prefixes ending in y at t (emission of t included).
inline Eigen::MatrixXd forward_table(const EmissionMatrix& e, const CrfParams& crf) {
  const auto n = e.rows(), k = e.cols();
  Eigen::MatrixXd alpha(n, k);
  alpha.row(0) = crf.start.transpose() + e.row(0);
  Eigen::VectorXd tmp(k);
  for (Eigen::Index t = 1; t < n; ++t) {
    for (Eigen::Index y = 0; y < k; ++y) {
      tmp = alpha.row(t - 1).transpose() + crf.transitions.col(y);
      alpha(t, y) = log_sum_exp(tmp) + e(t, y);
    }
  }
  return alpha;
}

// beta(t, y) = log-sum over suffixes after t given y at t (stop included).
inline Eigen::MatrixXd backward_table(const EmissionMatrix& e, const CrfParams& crf) {
  const auto n = e.rows(), k = e.cols();
  Eigen::MatrixXd beta(n, k);
  beta.row(n - 1) = crf.stop.transpose();
  Eigen::VectorXd tmp(k);
  for (Eigen::Index t = n - 2; t >= 0; --t) {
    for (Eigen::Index y = 0; y < k; ++y) {
      tmp = crf.transitions.row(y).transpose() + e.row(t + 1).transpose() + beta.row(t + 1).transpose();
      beta(t, y) = log_sum_exp(tmp);
    }
  }
  return beta;
}

}  // namespace detail

inline double score_path(const EmissionMatrix& e, const CrfParams& crf, std::span<const int> y) {
  detail::check_shapes(e, crf);
  if (static_cast<Eigen::Index>(y.size()) != e.rows())
    throw DataError(DataErrc::kShape, "crf: tag sequence length differs from emission rows");
  double s = crf.start(y[0]) + crf.stop(y.back());
  for (std::size_t t = 0; t < y.size(); ++t) {
    s += e(static_cast<Eigen::Index>(t), y[t]);
    if (t > 0) s += crf.transitions(y[t - 1], y[t]);
  }
  return s;
}

inline double forward_logZ(const EmissionMatrix& e, const CrfParams& crf) {
  detail::check_shapes(e, crf);
  const auto alpha = detail::forward_table(e, crf);
  const Eigen::VectorXd last = alpha.row(e.rows() - 1).transpose() + crf.stop;
  return detail::log_sum_exp(last);
}

struct ViterbiResult {
  std::vector<int> path;
  double score = 0.0;
};

/// Max-scoring path. Ties go to the lower tag index, both for each
/// backpointer and for the final tag.
inline ViterbiResult viterbi(const EmissionMatrix& e, const CrfParams& crf) {
  detail::check_shapes(e, crf);
  const auto n = e.rows(), k = e.cols();
  Eigen::MatrixXd delta(n, k);
  Eigen::MatrixXi back(n, k);
  delta.row(0) = crf.start.transpose() + e.row(0);
  for (Eigen::Index t = 1; t < n; ++t) {
    for (Eigen::Index y = 0; y < k; ++y) {
      Eigen::Index best = 0;
      double best_score = delta(t - 1, 0) + crf.transitions(0, y);
      for (Eigen::Index p = 1; p < k; ++p) {
        const double s = delta(t - 1, p) + crf.transitions(p, y);
        if (s > best_score) {
          best_score = s;
          best = p;
        }
      }
      delta(t, y) = best_score + e(t, y);
      back(t, y) = static_cast<int>(best);
    }
  }
  Eigen::Index last = 0;
  double best_score = delta(n - 1, 0) + crf.stop(0);
  for (Eigen::Index y = 1; y < k; ++y) {
    const double s = delta(n - 1, y) + crf.stop(y);
    if (s > best_score) {
      best_score = s;
      last = y;
    }
  }
  ViterbiResult out;
  out.path.resize(static_cast<std::size_t>(n));
  out.path[static_cast<std::size_t>(n - 1)] = static_cast<int>(last);
  for (Eigen::Index t = n - 1; t > 0; --t)
    out.path[static_cast<std::size_t>(t - 1)] = back(t, out.path[static_cast<std::size_t>(t)]);
  // Recomputed along the path so the score equals score_path exactly.
  out.score = score_path(e, crf, out.path);
  return out;
}

struct NllResult {
  double loss = 0.0;
  CrfGradients grad;
};

/// loss = logZ - score(gold); gradients are expected feature counts under the
/// model minus the gold counts.
inline NllResult nll_and_grad(const EmissionMatrix& e, const CrfParams& crf, std::span<const int> gold) {
  detail::check_shapes(e, crf);
  if (static_cast<Eigen::Index>(gold.size()) != e.rows())
    throw DataError(DataErrc::kShape, "crf: gold length differs from emission rows");
  const auto n = e.rows(), k = e.cols();
  const auto alpha = detail::forward_table(e, crf);
  const auto beta = detail::backward_table(e, crf);
  const Eigen::VectorXd last = alpha.row(n - 1).transpose() + crf.stop;
  const double log_z = detail::log_sum_exp(last);

  NllResult out;
  out.loss = log_z - score_path(e, crf, gold);
  auto& g = out.grad;
  g.emissions = ((alpha + beta).array() - log_z).exp().matrix();
  g.start = g.emissions.row(0).transpose();
  g.stop = g.emissions.row(n - 1).transpose();
  g.transitions = Eigen::MatrixXd::Zero(k, k);
  for (Eigen::Index t = 1; t < n; ++t) {
    for (Eigen::Index p = 0; p < k; ++p) {
      for (Eigen::Index y = 0; y < k; ++y) {
        g.transitions(p, y) +=
            std::exp(alpha(t - 1, p) + crf.transitions(p, y) + e(t, y) + beta(t, y) - log_z);
      }
    }
  }
  for (Eigen::Index t = 0; t < n; ++t) g.emissions(t, gold[static_cast<std::size_t>(t)]) -= 1.0;
  g.start(gold.front()) -= 1.0;
  g.stop(gold.back()) -= 1.0;
  for (std::size_t t = 1; t < gold.size(); ++t) g.transitions(gold[t - 1], gold[t]) -= 1.0;
  return out;
}

}  // namespace stacktag::crf
