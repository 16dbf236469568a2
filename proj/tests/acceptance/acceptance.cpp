// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <sstream>

#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "stacktag/cli.hpp"
#include "stacktag/stacktag.hpp"

using namespace stacktag;
namespace fs = std::filesystem;

namespace {

/// Collects the first failure of a criterion plus a one-line summary.
struct Check {
  std::string failure;
  std::string summary;

  void expect(bool ok, const std::string& what) {
    if (!ok && failure.empty()) failure = what;
  }
  bool ok() const { return failure.empty(); }
};

struct Criterion {
  std::string name;
  double time_limit_s;  // 0 = no limit
  std::function<void(Check&)> body;
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

template <typename M>
void fill(M& m, Xoshiro256& rng, double range) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-range, range);
}

// ---------------------------------------------------------------------------

void crf_oracle(Check& c) {
  Xoshiro256 rng(2024);
  double worst = 0.0;
  for (int draw = 0; draw < 200; ++draw) {
    const int n = 1 + static_cast<int>(rng.below(5));
    const int k = 1 + static_cast<int>(rng.below(4));
    Eigen::MatrixXd e(n, k);
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = rng.uniform(-3, 3);
    auto p = crf::CrfParams::zeros(k);
    fill(p.transitions, rng, 3);
    fill(p.start, rng, 3);
    fill(p.stop, rng, 3);

    const double z = crf::forward_logZ(e, p), zb = oracle::brute_log_z(e, p);
    worst = std::max(worst, std::abs(z - zb));
    c.expect(std::abs(z - zb) <= 1e-9, "logZ mismatch at draw " + std::to_string(draw));

    const auto [best, best_score] = oracle::brute_argmax(e, p);
    c.expect(crf::viterbi(e, p).path == best, "viterbi mismatch at draw " + std::to_string(draw));

    double mass = 0.0;
    oracle::for_each_path(n, k, [&](const std::vector<int>& path) { mass += std::exp(crf::score_path(e, p, path) - z); });
    c.expect(std::abs(mass - 1.0) <= 1e-9, "path probabilities sum to " + fmt(mass) + " at draw " + std::to_string(draw));
  }
  // Integer-valued scores force exact ties, resolved toward the lower index at each backpointer.
  for (int draw = 0; draw < 100; ++draw) {
    const int n = 1 + static_cast<int>(rng.below(5)), k = 2 + static_cast<int>(rng.below(3));
    Eigen::MatrixXd e(n, k);
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = static_cast<double>(rng.below(2));
    auto p = crf::CrfParams::zeros(k);
    for (Eigen::Index i = 0; i < p.transitions.size(); ++i) p.transitions.data()[i] = static_cast<double>(rng.below(2));
    c.expect(crf::viterbi(e, p).path == oracle::brute_argmax(e, p).first, "tie-break differs");
  }
  c.summary = "200 draws + 100 tie draws, max |dlogZ| " + fmt(worst);
}

void gradient_suite(Check& c) {
  Xoshiro256 rng(77);
  double worst = 0.0;
  for (int draw = 0; draw < 20; ++draw) {
    const int n = 1 + static_cast<int>(rng.below(4)), k = 1 + static_cast<int>(rng.below(4));
    Eigen::MatrixXd e(n, k);
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = rng.uniform(-2, 2);
    auto p = crf::CrfParams::zeros(k);
    fill(p.transitions, rng, 2);
    fill(p.start, rng, 2);
    fill(p.stop, rng, 2);
    std::vector<int> gold(static_cast<std::size_t>(n));
    for (auto& g : gold) g = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    const auto r = crf::nll_and_grad(e, p, gold);
    auto loss = [&] { return crf::forward_logZ(e, p) - crf::score_path(e, p, gold); };
    auto cmp = [&](double analytic, double* x) {
      const double err = oracle::rel_err(analytic, oracle::central_diff(x, loss));
      worst = std::max(worst, err);
      c.expect(err < 1e-3, "CRF gradient off at draw " + std::to_string(draw));
    };
    for (Eigen::Index i = 0; i < e.size(); ++i) cmp(r.grad.emissions.data()[i], e.data() + i);
    for (Eigen::Index i = 0; i < p.transitions.size(); ++i) cmp(r.grad.transitions.data()[i], p.transitions.data() + i);
    for (Eigen::Index i = 0; i < k; ++i) {
      cmp(r.grad.start(i), &p.start(i));
      cmp(r.grad.stop(i), &p.stop(i));
    }
  }
  std::size_t checked = 0;
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    auto inst = gradcheck::random_instance(seed);
    const auto r = gradcheck::check(inst);
    checked += r.checked;
    worst = std::max(worst, r.max_rel_err);
    c.expect(r.max_rel_err < 1e-3, "tagger gradient off at seed " + std::to_string(seed) + " (" + r.worst + ")");
  }
  c.summary = "20 CRF + 20 tagger instances, " + std::to_string(checked) + " tagger partials, max rel err " + fmt(worst);
}

void overfit(Check& c) {
  const TagScheme scheme({"DRUG"});
  const auto train = fixtures::as_samples(fixtures::drug_corpus(20, 1));
  const auto dev = fixtures::as_samples(fixtures::drug_corpus(20, 2));
  TaggerConfig cfg;  // defaults: hidden 256, SGD lr 0.1, batch 32, 150 epochs
  const auto r = stacktag::train(cfg, scheme, train, dev, {});
  int first = 0;
  for (const auto& e : r.report.epochs)
    if (e.f1 == 1.0) {
      first = e.epoch;
      break;
    }
  c.expect(r.report.best_f1 == 1.0, "best dev F1 " + fmt(r.report.best_f1));
  std::vector<std::vector<std::string>> gold;
  for (const auto& s : dev) gold.push_back(*s.sentence.gold_tags);
  c.expect(ner_prf_tags(gold, predict(r.model, dev, {})).micro.f1() == 1.0, "saved checkpoint does not reach F1 1.0");
  c.summary = "dev F1 1.0 first at epoch " + std::to_string(first);
}

bool valid_bio(const std::vector<std::string>& tags) {
  std::string prev = "O";
  for (const auto& t : tags) {
    if (t[0] == 'I' && (prev == "O" || prev.substr(2) != t.substr(2))) return false;
    prev = t;
  }
  return true;
}

void bio_span(Check& c) {
  const std::vector<std::string> alphabet{"O", "B-A", "I-A", "B-B", "I-B"};
  std::size_t valid = 0;
  for (std::size_t len = 1; len <= 6; ++len) {
    std::vector<std::size_t> digits(len, 0);
    for (;;) {
      std::vector<std::string> tags;
      for (auto d : digits) tags.push_back(alphabet[d]);
      if (valid_bio(tags)) {
        ++valid;
        c.expect(encode_bio(decode_bio(tags), len) == tags, "round trip failed");
      }
      const auto once = repair_bio(tags);
      c.expect(valid_bio(once) && repair_bio(once) == once, "repair_bio not idempotent");
      std::size_t i = 0;
      while (i < len && ++digits[i] == alphabet.size()) digits[i++] = 0;
      if (i == len) break;
    }
  }
  Xoshiro256 rng(31);
  auto random_tags = [&](std::size_t len) {
    std::vector<std::string> tags;
    for (std::size_t i = 0; i < len; ++i) tags.push_back(alphabet[rng.below(alphabet.size())]);
    return repair_bio(tags);
  };
  for (int corpus = 0; corpus < 100; ++corpus) {
    std::vector<std::vector<EntitySpan>> g, p;
    for (std::uint64_t s = 0, n = 1 + rng.below(5); s < n; ++s) {
      const auto len = 1 + rng.below(7);
      g.push_back(decode_bio(random_tags(len)));
      p.push_back(decode_bio(random_tags(len)));
    }
    const auto r = ner_prf(g, p);
    const auto o = oracle::brute_match(g, p);
    c.expect(r.micro.tp == o.tp && r.micro.fp == o.fp && r.micro.fn == o.fn,
             "ner_prf differs from brute force on corpus " + std::to_string(corpus));
  }
  c.summary = std::to_string(valid) + " valid sequences round-tripped, 100 corpora matched";
}

void ensemble_suite(Check& c) {
  Xoshiro256 rng(8);
  const std::vector<std::string> alphabet{"O", "B-A", "I-A", "B-B", "I-B"};
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<TagPredictions> models(3);
    const std::size_t sents = 1 + rng.below(4);
    for (std::size_t s = 0; s < sents; ++s) {
      const auto len = 1 + rng.below(6);
      for (auto& m : models) m.emplace_back();
      for (std::size_t t = 0; t < len; ++t)
        for (auto& m : models) m.back().push_back(alphabet[rng.below(alphabet.size())]);
    }
    const auto voted = vote_sequences(models);
    for (const auto& seq : voted) {
      c.expect(valid_bio(seq), "voted output is not valid BIO");
      c.expect(encode_bio(decode_bio(seq), seq.size()) == seq, "voted output does not decode cleanly");
    }
    const auto uni = vote_sequences(std::vector<TagPredictions>{voted, voted, voted});
    c.expect(uni == voted, "unanimous vote changed the input");
  }
  for (const auto& a : alphabet)
    for (const auto& b : alphabet)
      for (const auto& d : alphabet)
        if (a != b && a != d && b != d) c.expect(vote_token(a, b, d, a) == a, "all-distinct tie not resolved to fold 0");
  int cases = 0;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b)
      for (int d = 0; d < 2; ++d, ++cases)
        c.expect(vote_label(a, b, d) == (a + b + d >= 2 ? 1 : 0), "label majority wrong");
  c.summary = "200 random vote sets, " + std::to_string(cases) + " label cases";
}

void fold_suite(Check& c) {
  Xoshiro256 rng(99);
  for (int u = 0; u < 100; ++u) {
    std::vector<std::string> tr, dv;
    const auto nt = 2 + rng.below(40), nd = 1 + rng.below(15);
    for (std::uint64_t i = 0; i < nt; ++i) tr.push_back("t" + std::to_string(u) + "_" + std::to_string(i));
    for (std::uint64_t i = 0; i < nd; ++i) dv.push_back("d" + std::to_string(u) + "_" + std::to_string(i));
    const auto plan = make_folds(tr, dv, rng.next());
    try {
      plan.validate();
    } catch (const DataError& e) {
      c.expect(false, std::string("universe ") + std::to_string(u) + ": " + e.what());
    }
    c.expect(plan.folds[0].train == tr && plan.folds[0].dev == dv, "fold 0 differs from the input split");
  }
  c.summary = "100 universes";
}

void blobs(std::size_t n, Xoshiro256& rng, Eigen::MatrixXd& x, std::vector<int>& y) {
  x.resize(static_cast<Eigen::Index>(n), 2);
  y.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = i % 2 == 0 ? 1 : 0;
    const double ctr = y[i] ? 2.0 : -2.0;
    x(static_cast<Eigen::Index>(i), 0) = ctr + rng.uniform(-1, 1);
    x(static_cast<Eigen::Index>(i), 1) = ctr + rng.uniform(-1, 1);
  }
}

void svm_suite(Check& c) {
  Eigen::MatrixXd x2(2, 1);
  x2 << 0, 1;
  SvmConfig two;
  two.gamma = 1.0;
  const auto fit2 = train_svm(x2, std::vector<int>{1, -1}, 1.0, 1.0, two);
  c.expect(std::abs(fit2.alpha[0] - 1.0) <= 1e-6 && std::abs(fit2.alpha[1] - 1.0) <= 1e-6, "2-point dual wrong");

  Xoshiro256 rng(55);
  double worst = 0.0;
  for (int set = 0; set < 20; ++set) {
    Eigen::MatrixXd x;
    std::vector<int> labels;
    blobs(4 + rng.below(37), rng, x, labels);
    const auto y = to_signed_labels(labels);
    const auto fit = train_svm(x, y, 1.0, 1.0, SvmConfig{});
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const auto ui = static_cast<std::size_t>(i);
      const double yf = y[ui] * fit.model.decision(x.row(i).transpose());
      double viol = 0.0;
      if (fit.alpha[ui] <= 0.0) viol = std::max(0.0, 1.0 - yf);
      else if (fit.alpha[ui] >= fit.upper[ui]) viol = std::max(0.0, yf - 1.0);
      else viol = std::abs(yf - 1.0);
      worst = std::max(worst, viol);
      c.expect(viol <= 1e-3, "KKT violated on set " + std::to_string(set));
    }
  }
  for (int t = 0; t < 10; ++t) {
    Eigen::MatrixXd x;
    std::vector<int> labels;
    blobs(8, rng, x, labels);
    const double cc = rng.uniform(0.1, 5.0);
    const auto fit = train_svm(x, to_signed_labels(labels), cc, 10.0, SvmConfig{});
    for (std::size_t i = 0; i < labels.size(); ++i)
      c.expect(fit.upper[i] == (labels[i] ? cc * 10.0 : cc), "positive box is not exactly 10 C");
  }
  c.summary = "alpha (" + fmt(fit2.alpha[0]) + ", " + fmt(fit2.alpha[1]) + "), max KKT violation " + fmt(worst);
}

void classifier_suite(Check& c) {
  Xoshiro256 rng(66);
  Eigen::MatrixXd x;
  std::vector<int> y;
  blobs(40, rng, x, y);
  auto f1 = [&](const ClfModel& m) {
    std::vector<int> pred;
    for (Eigen::Index i = 0; i < x.rows(); ++i) pred.push_back(predict_label(m, x.row(i).transpose()).label);
    return clf_prf(y, pred).micro.f1();
  };
  ClfConfig cfg;
  cfg.seed = 12;
  cfg.nn.learning_rate = 0.01;
  cfg.nn.epochs = 30;
  cfg.nn.hidden = 16;
  for (auto fam : {ClfFamily::kLogReg, ClfFamily::kNn}) {
    cfg.family = fam;
    const auto a = train_classifier(x, y, cfg);
    c.expect(f1(a.model) == 1.0, to_string(fam) + " training F1 " + fmt(f1(a.model)));
  }

  const Eigen::Vector3d xv(0.3, -1.2, 0.7);
  const Eigen::MatrixXd x1 = xv.transpose();
  const std::vector<int> pos{1};
  const LogRegModel lm{Eigen::Vector3d(0.1, 0.2, -0.3), 0.05};
  const auto g1 = logreg_loss_grad(lm, x1, pos, 1.0, 0.0), g10 = logreg_loss_grad(lm, x1, pos, 10.0, 0.0);
  c.expect(g10.w == 10.0 * g1.w && g10.b == 10.0 * g1.b, "logreg weighted gradient is not exactly 10x");
  const auto nm = init_nn(3, 5, 2);
  NnModel n1 = nm.zeros_like(), n10 = nm.zeros_like();
  nn_example_grad(nm, xv, 1, 1.0, n1);
  nn_example_grad(nm, xv, 1, 10.0, n10);
  std::vector<double> a, b;
  n1.visit([&](auto& arr) { a.insert(a.end(), arr.data(), arr.data() + arr.size()); });
  n10.visit([&](auto& arr) { b.insert(b.end(), arr.data(), arr.data() + arr.size()); });
  for (std::size_t i = 0; i < a.size(); ++i) c.expect(b[i] == 10.0 * a[i], "NN weighted gradient is not exactly 10x");

  for (auto fam : {ClfFamily::kLogReg, ClfFamily::kSvm, ClfFamily::kNn}) {
    cfg.family = fam;
    const auto r1 = train_classifier(x, y, cfg), r2 = train_classifier(x, y, cfg);
    const auto d1 = fixtures::temp_dir("acc_clf_a"), d2 = fixtures::temp_dir("acc_clf_b");
    save(r1.model, d1, r1.report);
    save(r2.model, d2, r2.report);
    c.expect(io::read_file(d1 / "weights.bin") == io::read_file(d2 / "weights.bin"),
             to_string(fam) + " trainer is not bitwise deterministic");
  }

  const TagScheme scheme({"DRUG"});
  const auto tr = fixtures::as_samples(fixtures::drug_corpus(6, 1));
  const auto dv = fixtures::as_samples(fixtures::drug_corpus(3, 2));
  const auto t1 = stacktag::train(fixtures::tiny_tagger_config(), scheme, tr, dv, {});
  const auto t2 = stacktag::train(fixtures::tiny_tagger_config(), scheme, tr, dv, {});
  const auto d1 = fixtures::temp_dir("acc_tag_a"), d2 = fixtures::temp_dir("acc_tag_b");
  save(t1.model, d1);
  save(t2.model, d2);
  c.expect(io::read_file(d1 / "weights.bin") == io::read_file(d2 / "weights.bin"), "tagger is not bitwise deterministic");
  c.summary = "logreg/NN training F1 1.0, exact 10x gradients, 4 trainers deterministic";
}

int run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "stacktag");
  std::vector<const char*> argv;
  for (const auto& s : args) argv.push_back(s.c_str());
  std::ostringstream log;
  return cli::run(static_cast<int>(argv.size()), argv.data(), log);
}

void persistence_cli(Check& c) {
  const TagScheme scheme({"DRUG"});
  const auto tr = fixtures::as_samples(fixtures::drug_corpus(6, 1, true));
  const auto dv = fixtures::as_samples(fixtures::drug_corpus(3, 2, true));
  const auto test = fixtures::as_samples(fixtures::drug_corpus(10, 3, true));
  const auto t = stacktag::train(fixtures::tiny_tagger_config(), scheme, tr, dv, {});
  const auto dir = fixtures::temp_dir("acc_persist");
  save(t.model, dir / "tagger");
  const auto back = load(dir / "tagger");
  bool same = predict(t.model, test, {}) == predict(back, test, {});
  for (const auto& s : test) same = same && encode(t.model, prepare(t.model, s, {})) == encode(back, prepare(back, s, {}));
  c.expect(same, "tagger save/load changes predictions");

  Xoshiro256 rng(3);
  Eigen::MatrixXd x;
  std::vector<int> y;
  blobs(20, rng, x, y);
  for (auto fam : {ClfFamily::kLogReg, ClfFamily::kSvm, ClfFamily::kNn}) {
    ClfConfig cfg;
    cfg.family = fam;
    cfg.nn.epochs = 3;
    const auto r = train_classifier(x, y, cfg);
    save(r.model, dir / "clf");
    const auto m = load_classifier(dir / "clf");
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      c.expect(predict_label(r.model, x.row(i).transpose()).score == predict_label(m, x.row(i).transpose()).score,
               to_string(fam) + " save/load changes scores");
  }

  // Two full CLI runs with the same config and seed.
  io::write_file(dir / "train.conll", write_conll(fixtures::drug_corpus(8, 1, true)));
  io::write_file(dir / "dev.conll", write_conll(fixtures::drug_corpus(4, 2, true)));
  io::write_file(dir / "test.conll", write_conll(fixtures::drug_corpus(6, 3, true)));
  const nlohmann::json cfg = {
      {"task", "ner"},
      {"seed", 21},
      {"data", {{"train", "train.conll"}, {"dev", "dev.conll"}, {"test", "test.conll"}, {"has_pos", true}}},
      {"tagger", fixtures::tiny_tagger_config()}};
  io::write_file(dir / "config.json", cfg.dump());
  std::string outputs[2];
  for (int r = 0; r < 2; ++r) {
    const auto run = dir / ("run" + std::to_string(r));
    c.expect(run_cli({"ensemble", "--config", (dir / "config.json").string(), "--model-dir", (run / "m").string(),
                      "--out", (run / "pred.conll").string()}) == 0,
             "CLI ensemble run failed");
    c.expect(run_cli({"predict", "--model-dir", (run / "m" / "fold1").string(), "--input",
                      (dir / "test.conll").string(), "--out", (run / "fold1.conll").string()}) == 0,
             "CLI predict run failed");
    outputs[r] = io::read_file(run / "pred.conll") + io::read_file(run / "fold1.conll") +
                 io::read_file(run / "m" / "fold2" / "weights.bin");
  }
  c.expect(!outputs[0].empty() && outputs[0] == outputs[1], "two CLI runs differ");

  auto names_index = [](const std::function<void()>& f, const std::string& needle) {
    try {
      f();
    } catch (const DataError& e) {
      return e.code() == DataErrc::kMisaligned && std::string(e.what()).find(needle) != std::string::npos;
    }
    return false;
  };
  CtxEmbeddingFile ctx(2);
  ctx.add_block(std::vector<float>{1, 2});
  ctx.add_block(std::vector<float>{1, 2, 3, 4});
  std::vector<Sentence> corpus(2);
  corpus[0].tokens = {{"a", std::nullopt}};
  corpus[1].tokens = {{"b", std::nullopt}, {"c", std::nullopt}, {"d", std::nullopt}};
  const auto ctx_bytes = write_ctx_file(ctx);
  c.expect(names_index([&] { read_ctx_file(ctx_bytes, corpus, "x.ctxe"); }, "sentence 1"),
           "CTXE misalignment does not name sentence 1");
  SentEmbeddingFile sent;
  sent.dim = 2;
  sent.rows = Eigen::MatrixXf::Ones(2, 2);
  const auto sent_bytes = write_sent_file(sent);
  c.expect(names_index([&] { read_sent_file(sent_bytes, 3, "x.sent"); }, "sentence 2"),
           "SENT misalignment does not name sentence 2");
  c.summary = "tagger + 3 classifiers round-trip, CLI runs identical, CTXE/SENT errors name the index";
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {"crf-oracle", 10, crf_oracle},         {"gradient", 60, gradient_suite},
      {"overfit", 300, overfit},              {"bio-span", 0, bio_span},
      {"ensemble", 0, ensemble_suite},        {"folds", 0, fold_suite},
      {"svm", 0, svm_suite},                  {"classifier", 0, classifier_suite},
      {"persistence-cli", 0, persistence_cli}};
  int failed = 0;
  for (const auto& cr : criteria) {
    Check c;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      cr.body(c);
    } catch (const std::exception& e) {
      c.expect(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (cr.time_limit_s > 0) c.expect(secs < cr.time_limit_s, "took " + fmt(secs) + " s, limit " + fmt(cr.time_limit_s) + " s");
    const bool ok = c.ok();
    failed += ok ? 0 : 1;
    std::cout << (ok ? "PASS " : "FAIL ") << cr.name << ": " << (ok ? c.summary : c.failure) << " [" << fmt(secs)
              << " s]" << std::endl;
  }
  std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criteria failed") << std::endl;
  return failed == 0 ? 0 : 1;
}
