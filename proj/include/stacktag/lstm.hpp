#pragma once

// Single-layer LSTM with explicit backpropagation through time.
//
// Gate rows are stacked as [input; forget; output; candidate], so W is
// 4H x D, U is 4H x H and b has 4H entries.

#include <Eigen/Dense>

#include "stacktag/rng.hpp"

namespace stacktag::lstm {

struct Weights {
  Eigen::MatrixXd w;  // input weights, 4H x D
  Eigen::MatrixXd u;  // recurrent weights, 4H x H
  Eigen::MatrixXd b;  // bias, 4H x 1

  int hidden() const { return static_cast<int>(u.cols()); }
  int input() const { return static_cast<int>(w.cols()); }

  static Weights zeros(int input, int hidden) {
    return {Eigen::MatrixXd::Zero(4 * hidden, input), Eigen::MatrixXd::Zero(4 * hidden, hidden),
            Eigen::MatrixXd::Zero(4 * hidden, 1)};
  }
};

/// Activations kept from the forward pass. Columns are in processing order
/// (reversed for a right-to-left run).
struct Cache {
  Eigen::MatrixXd x;      // D x n inputs
  Eigen::MatrixXd gates;  // 4H x n post-activation gates
  Eigen::MatrixXd c;      // H x n cell states
  Eigen::MatrixXd h;      // H x n hidden states
  bool reversed = false;
};

namespace detail {

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace detail

/// Runs the recurrence over the columns of `inputs` (left to right, or right
/// to left when `reversed`) from zero initial state. The returned hidden
/// states are aligned with the input columns.
inline Eigen::MatrixXd forward(const Weights& p, const Eigen::MatrixXd& inputs, bool reversed, Cache& cache) {
  const auto n = inputs.cols();
  const auto h = p.hidden();
  cache.reversed = reversed;
  cache.x.resize(inputs.rows(), n);
  for (Eigen::Index s = 0; s < n; ++s) cache.x.col(s) = inputs.col(reversed ? n - 1 - s : s);
  cache.gates.resize(4 * h, n);
  cache.c.resize(h, n);
  cache.h.resize(h, n);

  Eigen::MatrixXd pre = p.w * cache.x;
  pre.colwise() += p.b.col(0);
  Eigen::VectorXd h_prev = Eigen::VectorXd::Zero(h);
  Eigen::VectorXd c_prev = Eigen::VectorXd::Zero(h);
  for (Eigen::Index s = 0; s < n; ++s) {
    Eigen::VectorXd z = pre.col(s) + p.u * h_prev;
    auto g = cache.gates.col(s);
    for (Eigen::Index r = 0; r < 3 * h; ++r) g(r) = detail::sigmoid(z(r));
    for (Eigen::Index r = 3 * h; r < 4 * h; ++r) g(r) = std::tanh(z(r));
    const auto ig = g.segment(0, h).array();
    const auto fg = g.segment(h, h).array();
    const auto og = g.segment(2 * h, h).array();
    const auto cand = g.segment(3 * h, h).array();
    cache.c.col(s) = (fg * c_prev.array() + ig * cand).matrix();
    cache.h.col(s) = (og * cache.c.col(s).array().tanh()).matrix();
    h_prev = cache.h.col(s);
    c_prev = cache.c.col(s);
  }

  Eigen::MatrixXd out(h, n);
  for (Eigen::Index s = 0; s < n; ++s) out.col(reversed ? n - 1 - s : s) = cache.h.col(s);
  return out;
}

/// Backpropagates `d_out` (H x n, aligned like the forward output) and
/// accumulates parameter gradients into `grad`. Returns dLoss/dInputs (D x n).
inline Eigen::MatrixXd backward(const Weights& p, const Cache& cache, const Eigen::MatrixXd& d_out, Weights& grad) {
  const auto n = cache.x.cols();
  const auto h = p.hidden();
  Eigen::MatrixXd dz_all(4 * h, n);
  Eigen::VectorXd dh_next = Eigen::VectorXd::Zero(h);
  Eigen::VectorXd dc_next = Eigen::VectorXd::Zero(h);
  for (Eigen::Index s = n - 1; s >= 0; --s) {
    const Eigen::Index col = cache.reversed ? n - 1 - s : s;
    const Eigen::ArrayXd dh = (d_out.col(col) + dh_next).array();
    const auto g = cache.gates.col(s);
    const Eigen::ArrayXd ig = g.segment(0, h).array();
    const Eigen::ArrayXd fg = g.segment(h, h).array();
    const Eigen::ArrayXd og = g.segment(2 * h, h).array();
    const Eigen::ArrayXd cand = g.segment(3 * h, h).array();
    const Eigen::ArrayXd tc = cache.c.col(s).array().tanh();
    const Eigen::ArrayXd c_prev = s > 0 ? Eigen::ArrayXd(cache.c.col(s - 1).array()) : Eigen::ArrayXd::Zero(h);

    const Eigen::ArrayXd dc = dh * og * (1.0 - tc * tc) + dc_next.array();
    auto dz = dz_all.col(s);
    dz.segment(0, h) = (dc * cand * ig * (1.0 - ig)).matrix();
    dz.segment(h, h) = (dc * c_prev * fg * (1.0 - fg)).matrix();
    dz.segment(2 * h, h) = (dh * tc * og * (1.0 - og)).matrix();
    dz.segment(3 * h, h) = (dc * ig * (1.0 - cand * cand)).matrix();
    dc_next = (dc * fg).matrix();
    dh_next = p.u.transpose() * dz;
    if (s > 0) grad.u.noalias() += dz * cache.h.col(s - 1).transpose();
  }
  grad.w.noalias() += dz_all * cache.x.transpose();
  grad.b.col(0) += dz_all.rowwise().sum();

  const Eigen::MatrixXd dx_proc = p.w.transpose() * dz_all;
  Eigen::MatrixXd dx(dx_proc.rows(), n);
  for (Eigen::Index s = 0; s < n; ++s) dx.col(cache.reversed ? n - 1 - s : s) = dx_proc.col(s);
  return dx;
}

}  // namespace stacktag::lstm
