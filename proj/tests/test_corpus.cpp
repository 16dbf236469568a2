#include <gtest/gtest.h>

#include <set>

#include "stacktag/corpus.hpp"

using namespace stacktag;

namespace {

const TagScheme kAde({"ADE"});

DataErrc code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const DataError& e) {
    return e.code();
  }
  ADD_FAILURE() << "no DataError thrown";
  return DataErrc::kInvalidArgument;
}

}  // namespace

TEST(TagScheme, LayoutAndInference) {
  EXPECT_EQ(kAde.tags(), (std::vector<std::string>{"O", "B-ADE", "I-ADE"}));
  const std::vector<std::string> tags{"O", "I-X", "B-Y", "O"};
  const auto s = TagScheme::infer(tags);
  EXPECT_EQ(s.entity_types(), (std::vector<std::string>{"X", "Y"}));
  EXPECT_THROW(TagScheme::infer(std::vector<std::string>{"E-X"}), DataError);
  EXPECT_THROW(TagScheme(std::vector<std::string>{"A", "A"}), ConfigError);
}

TEST(Conll, ParsesPosAndTags) {
  const auto s = parse_conll("I NN O\nached VBD B-ADE\n\n", kAde, true);
  ASSERT_EQ(s.size(), 1u);
  ASSERT_EQ(s[0].size(), 2u);
  EXPECT_EQ(*s[0].tokens[1].pos, "VBD");
  EXPECT_EQ(*s[0].gold_tags, (std::vector<std::string>{"O", "B-ADE"}));
}

TEST(Conll, BlankLinesSeparateSentences) {
  const auto s = parse_conll("a O\nb O\n\n\nc B-ADE\r\n", kAde, false);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[1].tokens[0].surface, "c");
  EXPECT_EQ(s[1].id, 1u);
}

TEST(Conll, Errors) {
  EXPECT_EQ(code_of([] { parse_conll("ached B-BAD\n", kAde, false); }), DataErrc::kUnknownTag);
  EXPECT_EQ(code_of([] { parse_conll("a b c d\n", kAde, false); }), DataErrc::kMalformedLine);
  EXPECT_EQ(code_of([] { parse_conll("\n\n", kAde, false); }), DataErrc::kEmptyInput);
  try {
    parse_conll("a O\nb X Y Z\n", kAde, ConllOptions{false, TagColumn::kRequired, "f.conll"});
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("f.conll:2"), std::string::npos);
  }
}

TEST(Conll, OptionalTagColumn) {
  const auto untagged = parse_conll("a\nb\n", kAde, ConllOptions{false, TagColumn::kOptional, "x"});
  EXPECT_FALSE(untagged[0].gold_tags);
  const auto tagged = parse_conll("a O\n", kAde, ConllOptions{false, TagColumn::kOptional, "x"});
  EXPECT_TRUE(tagged[0].gold_tags);
}

TEST(Conll, WriteRoundTrip) {
  const std::string text = "I\tNN\tO\nached\tVBD\tB-ADE\n\nok\tJJ\tO\n\n";
  const auto s = parse_conll(text, kAde, true);
  EXPECT_EQ(write_conll(s), text);
}

TEST(ClfTsv, Records) {
  const auto r = parse_clf_tsv("t1\t1\tthis drug gave me hives\nt2\t0\tlovely day\n");
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0].id, "t1");
  EXPECT_TRUE(r[0].positive);
  EXPECT_EQ(r[0].text, "this drug gave me hives");
  EXPECT_FALSE(r[1].positive);
  EXPECT_EQ(code_of([] { parse_clf_tsv("t3\t2\tx\n"); }), DataErrc::kBadLabel);
  EXPECT_EQ(code_of([] { parse_clf_tsv("t3 1 x\n"); }), DataErrc::kMalformedLine);
}

TEST(ClfTsv, PredictionRoundTrip) {
  const std::vector<std::string> ids{"a", "b"};
  const std::vector<int> labels{1, 0};
  const auto text = write_clf_predictions(ids, labels);
  EXPECT_EQ(text, "a\t1\nb\t0\n");
  const auto back = parse_clf_predictions(text);
  EXPECT_EQ(back[0], (std::pair<std::string, int>{"a", 1}));
  EXPECT_EQ(back[1], (std::pair<std::string, int>{"b", 0}));
}

TEST(Bio, DecodeExamples) {
  using V = std::vector<std::string>;
  EXPECT_EQ(decode_bio(V{"B-ADE", "I-ADE", "O"}), (std::vector<EntitySpan>{{0, 2, "ADE"}}));
  EXPECT_TRUE(decode_bio(V{"O", "O", "O"}).empty());
  EXPECT_EQ(decode_bio(V{"I-ADE", "O", "B-ADE"}), (std::vector<EntitySpan>{{0, 1, "ADE"}, {2, 3, "ADE"}}));
  EXPECT_EQ(decode_bio(V{"B-X", "I-Y"}), (std::vector<EntitySpan>{{0, 1, "X"}, {1, 2, "Y"}}));
}

TEST(Bio, EncodeExamples) {
  EXPECT_EQ(encode_bio(std::vector<EntitySpan>{{0, 2, "ADE"}}, 3), (std::vector<std::string>{"B-ADE", "I-ADE", "O"}));
  EXPECT_EQ(encode_bio(std::vector<EntitySpan>{}, 2), (std::vector<std::string>{"O", "O"}));
  EXPECT_EQ(code_of([] { encode_bio(std::vector<EntitySpan>{{0, 1, "X"}, {0, 2, "X"}}, 2); }), DataErrc::kOverlap);
  EXPECT_EQ(code_of([] { encode_bio(std::vector<EntitySpan>{{1, 3, "X"}}, 2); }), DataErrc::kInvalidArgument);
}

TEST(Folds, SmallUniverse) {
  const std::vector<std::string> tr{"a", "b", "c", "d"}, dv{"e", "f"};
  const auto plan = make_folds(tr, dv, 42);
  plan.validate();
  EXPECT_EQ(plan.folds[0].train, tr);
  EXPECT_EQ(plan.folds[0].dev, dv);
  for (int f = 1; f <= 2; ++f) {
    const auto& fold = plan.folds[static_cast<std::size_t>(f)];
    EXPECT_EQ(fold.dev.size(), 2u);
    for (const auto& id : fold.dev) EXPECT_TRUE(std::set<std::string>(tr.begin(), tr.end()).count(id));
    for (const auto& id : dv) EXPECT_NE(std::find(fold.train.begin(), fold.train.end(), id), fold.train.end());
  }
}

TEST(Folds, TwoTrainingIds) {
  const std::vector<std::string> tr{"a", "b"}, dv{"c"};
  const auto plan = make_folds(tr, dv, 1);
  EXPECT_EQ(plan.folds[1].dev.size(), 1u);
  EXPECT_EQ(plan.folds[2].dev.size(), 1u);
  EXPECT_NE(plan.folds[1].dev, plan.folds[2].dev);
}

TEST(Folds, DeterministicAndSerializable) {
  std::vector<std::string> tr, dv;
  for (int i = 0; i < 30; ++i) tr.push_back("t" + std::to_string(i));
  for (int i = 0; i < 7; ++i) dv.push_back("d" + std::to_string(i));
  const auto a = make_folds(tr, dv, 9), b = make_folds(tr, dv, 9);
  nlohmann::json ja = a, jb = b;
  EXPECT_EQ(ja.dump(), jb.dump());
  const auto back = ja.get<FoldPlan>();
  nlohmann::json jc = back;
  EXPECT_EQ(jc.dump(), ja.dump());
}

TEST(Folds, InvalidInputs) {
  const std::vector<std::string> one{"a"}, dv{"c"}, overlap{"a", "b"};
  EXPECT_THROW(make_folds(one, dv, 1), DataError);
  EXPECT_THROW(make_folds(overlap, one, 1), DataError);
  FoldPlan bad = make_folds(overlap, dv, 1);
  bad.folds[1].dev.push_back("zzz");
  EXPECT_THROW(bad.validate(), DataError);
}
