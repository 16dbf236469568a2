#pragma once

// Finite-difference check of the full tagger gradient on random tiny models.

#include <string>
#include <vector>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "stacktag/tagger.hpp"

namespace gradcheck {

struct Instance {
  stacktag::TaggerModel model;
  stacktag::PreparedSentence input;
};

/// Random sentence of 1-4 tokens over two entity types, with char, ctx and
/// feature inputs all active. Every dimension is at most 8.
inline Instance random_instance(std::uint64_t seed) {
  using namespace stacktag;
  Xoshiro256 rng(seed);
  const TagScheme scheme({"A", "B"});
  Sentence s;
  std::vector<std::string> tags;
  const auto n = 1 + rng.below(4);
  const std::string letters = "aBc1D";
  for (std::uint64_t t = 0; t < n; ++t) {
    std::string w;
    const auto len = 1 + rng.below(3);
    for (std::uint64_t c = 0; c < len; ++c) w += letters[rng.below(letters.size())];
    s.tokens.push_back({w, std::string(rng.below(2) ? "NN" : "VB")});
    tags.push_back(scheme.tag(static_cast<int>(rng.below(scheme.size()))));
  }
  s.gold_tags = tags;

  TaggerSample sample;
  sample.sentence = s;
  sample.ctx_dim = 2;
  for (std::uint64_t i = 0; i < 2 * n; ++i) sample.ctx.push_back(static_cast<float>(rng.uniform(-1, 1)));

  TaggerConfig cfg = fixtures::tiny_tagger_config(seed);
  cfg.hidden = 2 + static_cast<int>(rng.below(3));
  cfg.providers = {ProviderKind::kChar, ProviderKind::kCtx};
  std::vector<TaggerSample> train{sample};
  Instance inst{init_model(cfg, scheme, train, TaggerResources{}), {}};
  inst.input = prepare(inst.model, sample, TaggerResources{});
  return inst;
}

struct Result {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::string worst;
};

/// Compares every analytic partial derivative with a central difference.
inline Result check(Instance& inst, double eps = 1e-5) {
  using namespace stacktag;
  TaggerParams grad = inst.model.params.zeros_like();
  loss_and_grad(inst.model, inst.input, grad);
  auto loss = [&] {
    TaggerParams scratch = inst.model.params.zeros_like();
    return loss_and_grad(inst.model, inst.input, scratch);
  };
  std::vector<std::pair<std::string, Eigen::MatrixXd*>> analytic;
  grad.visit([&](const char* name, Eigen::MatrixXd& m) { analytic.emplace_back(name, &m); });
  Result r;
  std::size_t idx = 0;
  inst.model.params.visit([&](const char* name, Eigen::MatrixXd& m) {
    const Eigen::MatrixXd& g = *analytic[idx++].second;
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        const double fd = oracle::central_diff(&m(i, j), loss, eps);
        const double err = oracle::rel_err(g(i, j), fd);
        ++r.checked;
        if (err > r.max_rel_err) {
          r.max_rel_err = err;
          r.worst = std::string(name) + "(" + std::to_string(i) + "," + std::to_string(j) + ")";
        }
      }
    }
  });
  return r;
}

}  // namespace gradcheck
