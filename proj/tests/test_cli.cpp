#include <gtest/gtest.h>

#include <sstream>

#include "fixtures.hpp"
#include "stacktag/cli.hpp"

using namespace stacktag;
namespace fs = std::filesystem;

namespace {

int run_cli(std::vector<std::string> args, std::string* log_out = nullptr) {
  args.insert(args.begin(), "stacktag");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream log;
  const int rc = cli::run(static_cast<int>(argv.size()), argv.data(), log);
  if (log_out) *log_out = log.str();
  return rc;
}

std::string slurp(const fs::path& p) { return io::read_file(p); }

/// Drug corpus splits plus a tiny tagger config.
fs::path ner_workspace(const std::string& name) {
  const auto dir = fixtures::temp_dir(name);
  io::write_file(dir / "train.conll", write_conll(fixtures::drug_corpus(8, 1, true)));
  io::write_file(dir / "dev.conll", write_conll(fixtures::drug_corpus(4, 2, true)));
  io::write_file(dir / "test.conll", write_conll(fixtures::drug_corpus(5, 3, true)));
  nlohmann::json tagger = fixtures::tiny_tagger_config();
  const nlohmann::json cfg = {
      {"task", "ner"},
      {"seed", 3},
      {"data", {{"train", "train.conll"}, {"dev", "dev.conll"}, {"test", "test.conll"}, {"has_pos", true}}},
      {"tagger", tagger}};
  io::write_file(dir / "config.json", cfg.dump(2));
  return dir;
}

std::string sent_bytes(const std::vector<LabeledText>& recs) {
  SentEmbeddingFile f;
  f.dim = 2;
  f.kind = SentEmbKind::kCtxCls;
  f.rows.resize(static_cast<Eigen::Index>(recs.size()), 2);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const float s = recs[i].positive ? 1.0f : -1.0f;
    f.rows(static_cast<Eigen::Index>(i), 0) = s + 0.1f * static_cast<float>(i % 3);
    f.rows(static_cast<Eigen::Index>(i), 1) = 0.05f * static_cast<float>(i % 5);
  }
  return write_sent_file(f);
}

fs::path clf_workspace(const std::string& name) {
  const auto dir = fixtures::temp_dir(name);
  int id = 0;
  for (const auto& [split, n] : {std::pair{"train", 12}, {"dev", 6}, {"test", 6}}) {
    std::vector<LabeledText> recs;
    std::string tsv;
    for (int i = 0; i < n; ++i, ++id) {
      recs.push_back({"r" + std::to_string(id), i % 2 == 0, "text " + std::to_string(id)});
      tsv += recs.back().id + "\t" + (recs.back().positive ? "1" : "0") + "\t" + recs.back().text + "\n";
    }
    io::write_file(dir / (std::string(split) + ".tsv"), tsv);
    io::write_file(dir / (std::string(split) + ".sent"), sent_bytes(recs));
  }
  const nlohmann::json cfg = {{"task", "clf"},
                              {"seed", 4},
                              {"data",
                               {{"train", "train.tsv"},
                                {"dev", "dev.tsv"},
                                {"test", "test.tsv"},
                                {"train_sent", "train.sent"},
                                {"dev_sent", "dev.sent"},
                                {"test_sent", "test.sent"}}},
                              {"classifier", {{"model", "logreg"}, {"embedding", "ctx-cls"}}}};
  io::write_file(dir / "config.json", cfg.dump(2));
  return dir;
}

}  // namespace

TEST(Cli, SplitFoldsIsDeterministic) {
  const auto dir = ner_workspace("cli_split");
  const auto cfg = (dir / "config.json").string();
  ASSERT_EQ(run_cli({"split-folds", "--config", cfg, "--out", (dir / "a.json").string()}), 0);
  ASSERT_EQ(run_cli({"split-folds", "--config", cfg, "--out", (dir / "b.json").string()}), 0);
  EXPECT_EQ(slurp(dir / "a.json"), slurp(dir / "b.json"));
  const auto plan = nlohmann::json::parse(slurp(dir / "a.json")).get<FoldPlan>();
  EXPECT_NO_THROW(plan.validate());
  EXPECT_EQ(plan.folds[0].train.size(), 8u);
  ASSERT_EQ(run_cli({"split-folds", "--config", cfg, "--seed", "9", "--out", (dir / "c.json").string()}), 0);
  EXPECT_NE(slurp(dir / "a.json"), slurp(dir / "c.json"));
}

TEST(Cli, NerTrainPredictEvaluate) {
  const auto dir = ner_workspace("cli_ner");
  const auto cfg = (dir / "config.json").string();
  const auto model = (dir / "model").string();
  ASSERT_EQ(run_cli({"train-ner", "--config", cfg, "--model-dir", model}), 0);
  EXPECT_TRUE(fs::exists(dir / "model" / "runs.jsonl"));
  EXPECT_TRUE(nlohmann::json::parse(slurp(dir / "model" / "meta.json")).contains("report"));

  const auto test = (dir / "test.conll").string();
  ASSERT_EQ(run_cli({"predict", "--model-dir", model, "--input", test, "--out", (dir / "p1").string()}), 0);
  ASSERT_EQ(run_cli({"predict", "--model-dir", model, "--input", test, "--out", (dir / "p2").string()}), 0);
  EXPECT_EQ(slurp(dir / "p1"), slurp(dir / "p2"));

  ASSERT_EQ(run_cli({"evaluate", "--gold", test, "--pred", test, "--out", (dir / "self.json").string()}), 0);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "self.json"))["micro"]["f1"], 1.0);

  // Three copies of the same model vote to that model's own output.
  ASSERT_EQ(run_cli({"ensemble", "--model-dir", model, "--model-dir", model, "--model-dir", model, "--input", test,
                     "--out", (dir / "ens").string()}),
            0);
  EXPECT_EQ(slurp(dir / "ens"), slurp(dir / "p1"));
  EXPECT_TRUE(fs::exists(dir / "ens.report.json"));
}

TEST(Cli, NerFoldTraining) {
  const auto dir = ner_workspace("cli_fold");
  const auto cfg = (dir / "config.json").string();
  const auto folds = (dir / "folds.json").string();
  ASSERT_EQ(run_cli({"split-folds", "--config", cfg, "--out", folds}), 0);
  ASSERT_EQ(run_cli({"train-ner", "--config", cfg, "--model-dir", (dir / "m").string(), "--folds", folds, "--fold",
                     "2"}),
            0);
  EXPECT_EQ(run_cli({"train-ner", "--config", cfg, "--model-dir", (dir / "m").string(), "--fold", "2"}), 2);
}

TEST(Cli, ClassifierWithSentFiles) {
  const auto dir = clf_workspace("cli_clf");
  const auto cfg = (dir / "config.json").string();
  const auto model = (dir / "model").string();
  ASSERT_EQ(run_cli({"train-clf", "--config", cfg, "--model-dir", model}), 0);
  const auto test = (dir / "test.tsv").string(), sent = (dir / "test.sent").string();
  ASSERT_EQ(run_cli({"predict", "--model-dir", model, "--input", test, "--sent-file", sent, "--out",
                     (dir / "pred.tsv").string()}),
            0);
  ASSERT_EQ(run_cli({"evaluate", "--task", "clf", "--gold", test, "--pred", (dir / "pred.tsv").string(), "--out",
                     (dir / "r.json").string()}),
            0);
  EXPECT_EQ(nlohmann::json::parse(slurp(dir / "r.json"))["micro"]["f1"], 1.0);

  ASSERT_EQ(run_cli({"ensemble", "--config", cfg, "--model-dir", (dir / "ens").string(), "--out",
                     (dir / "ens.tsv").string()}),
            0);
  for (int f = 0; f < 3; ++f) EXPECT_TRUE(fs::exists(dir / "ens" / ("fold" + std::to_string(f)) / "meta.json"));
  EXPECT_EQ(slurp(dir / "ens.tsv"), slurp(dir / "pred.tsv"));
}

TEST(Cli, ExitCodes) {
  const auto dir = clf_workspace("cli_codes");
  std::string log;
  EXPECT_EQ(run_cli({"no-such-command"}), 2);
  EXPECT_EQ(run_cli({"train-clf", "--model-dir", (dir / "m").string()}), 2);
  EXPECT_EQ(run_cli({"train-clf", "--config", (dir / "missing.json").string(), "--model-dir", (dir / "m").string()}),
            2);

  io::write_file(dir / "short.sent", slurp(dir / "test.sent").substr(0, 30));
  const auto cfg = (dir / "config.json").string();
  ASSERT_EQ(run_cli({"train-clf", "--config", cfg, "--model-dir", (dir / "m").string()}), 0);
  EXPECT_EQ(run_cli({"predict", "--model-dir", (dir / "m").string(), "--input", (dir / "test.tsv").string(),
                     "--sent-file", (dir / "short.sent").string()},
                    &log),
            3);
  EXPECT_NE(log.find("data error"), std::string::npos);

  io::write_file(dir / "bad.tsv", "r1\tmaybe\ttext\n");
  EXPECT_EQ(run_cli({"evaluate", "--task", "clf", "--gold", (dir / "bad.tsv").string(), "--pred",
                     (dir / "bad.tsv").string()}),
            3);
}
