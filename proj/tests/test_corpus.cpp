#include "moce/bleu.hpp"
#include "moce/corpus.hpp"
#include "moce/tensor.hpp"
#include "moce/tokenizer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>

using namespace moce;

namespace {

std::vector<SyntheticLangSpec> two_langs() { return {{"aa", 20, 1, SyntheticTask::Substitute}, {"cc", 20, 3, SyntheticTask::Substitute}}; }

}  // namespace

TEST(Synthetic, SymbolCodes) {
  EXPECT_EQ(symbol_code(1, 0), "!");
  EXPECT_EQ(symbol_code(2, 0), "\xC4\x80");
  EXPECT_EQ(symbol_code(3, 0), "\xE4\xB8\x80");
  for (int bps = 1; bps <= 3; ++bps)
    for (int s = 0; s < 20; ++s) {
      const auto c = symbol_code(bps, s);
      EXPECT_EQ(c.size(), static_cast<std::size_t>(bps));
      EXPECT_TRUE(is_valid_utf8(c));
    }
  EXPECT_THROW(symbol_code(4, 0), Error);
  EXPECT_THROW(symbol_code(1, 94), Error);
}

TEST(Synthetic, ByteLengthsAlignAcrossLanguages) {
  SyntheticOptions o;
  o.pairs = 300;
  const auto c = make_synthetic_corpus(two_langs(), o);
  ASSERT_EQ(c.size(), 300u);
  int forward = 0;
  for (const auto& r : c.records) {
    EXPECT_TRUE(is_valid_utf8(r.src_text) && is_valid_utf8(r.tgt_text));
    const auto& a = r.src_lang == "aa" ? r.src_text : r.tgt_text;
    const auto& b = r.src_lang == "aa" ? r.tgt_text : r.src_text;
    EXPECT_EQ(b.size(), 3 * a.size());
    EXPECT_GE(a.size(), 4u);
    EXPECT_LE(a.size(), 12u);
    forward += r.src_lang == "cc";
  }
  EXPECT_EQ(forward, 150);
}

TEST(Synthetic, DeterministicAndCipherIndependentOfSeed) {
  SyntheticOptions o;
  o.pairs = 50;
  EXPECT_EQ(make_synthetic_corpus(two_langs(), o).records, make_synthetic_corpus(two_langs(), o).records);
  auto o2 = o;
  o2.seed = 99;
  const auto a = make_synthetic_corpus(two_langs(), o), b = make_synthetic_corpus(two_langs(), o2);
  EXPECT_NE(a.records, b.records);
  // The same pivot symbol maps to the same target code under both seeds.
  std::map<char, std::string> cipher;
  for (const auto* c : {&a, &b})
    for (const auto& r : c->records) {
      const auto& p = r.src_lang == "aa" ? r.src_text : r.tgt_text;
      const auto& q = r.src_lang == "aa" ? r.tgt_text : r.src_text;
      for (std::size_t i = 0; i < p.size(); ++i) {
        const auto code = q.substr(3 * i, 3);
        auto [it, fresh] = cipher.emplace(p[i], code);
        EXPECT_EQ(it->second, code);
      }
    }
}

TEST(Synthetic, CopyLanguagePairsWithItself) {
  SyntheticOptions o;
  o.pairs = 20;
  const auto c = make_synthetic_corpus({{"aa", 20, 1, SyntheticTask::Substitute}, {"bb", 20, 2, SyntheticTask::Copy}}, o);
  for (const auto& r : c.records) {
    EXPECT_EQ(r.src_lang, "bb");
    EXPECT_EQ(r.src_text, r.tgt_text);
  }
}

TEST(Synthetic, MultiParallelView) {
  SyntheticOptions o;
  o.pairs = 40;
  const auto m = to_multi_parallel(two_langs(), o);
  ASSERT_EQ(m.languages, (std::vector<std::string>{"aa", "cc"}));
  ASSERT_EQ(m.sentences[0].size(), m.sentences[1].size());
  for (std::size_t i = 0; i < m.sentences[0].size(); ++i) EXPECT_EQ(m.sentences[1][i].size(), 3 * m.sentences[0][i].size());
}

TEST(CorpusTsv, RoundTripAndErrors) {
  SyntheticOptions o;
  o.pairs = 10;
  auto c = make_synthetic_corpus(two_langs(), o);
  c.records.push_back({"aa", "cc", "x y z", "é ü"});
  std::stringstream ss;
  write_corpus_tsv(c, ss);
  EXPECT_EQ(parse_corpus_tsv(ss).records, c.records);

  std::istringstream three("aa\tcc\tonly three\n");
  EXPECT_THROW(parse_corpus_tsv(three), Error);
  std::istringstream five("aa\tcc\ta\tb\tc\n");
  EXPECT_THROW(parse_corpus_tsv(five), Error);
  EXPECT_THROW(read_corpus_tsv("/nonexistent/file.tsv"), Error);

  const auto v = build_vocab({"aa"});
  EXPECT_THROW(c.validate(v), Error);
  EXPECT_NO_THROW(c.validate(build_vocab({"aa", "cc"})));
  EXPECT_EQ(c.languages(), (std::vector<std::string>{"aa", "cc"}));
}

TEST(MultiParallelTsv, ParsesHeaderAndRejectsRaggedRows) {
  std::istringstream ok("en\tzh\nhello\t你好\nbye\t再见\n");
  const auto m = parse_multi_parallel_tsv(ok);
  EXPECT_EQ(m.languages, (std::vector<std::string>{"en", "zh"}));
  EXPECT_EQ(m.sentences[1][1], "再见");
  std::istringstream bad("en\tzh\nhello\n");
  EXPECT_THROW(parse_multi_parallel_tsv(bad), Error);
}

TEST(Bleu, PerfectAndDisjoint) {
  const std::vector<std::string> ref{"the cat sat on the mat", "a quick brown fox jumps"};
  EXPECT_NEAR(corpus_bleu(ref, ref).score, 100.0, 1e-9);
  EXPECT_EQ(corpus_bleu({"x y z w v", "p q r s t"}, ref).score, 0.0);
}

TEST(Bleu, HandComputedCorpus) {
  // "the cat sat on the mat today" vs "the cat sat on the mat": 6/7, 5/6, 4/5, 3/4.
  // "a dog" vs "a dog runs": 2/2, 1/1, 0/0, 0/0.
  // "the the the" vs "the cat": unigram clipped to 1/3, 0/2, 0/1.
  const auto s = corpus_bleu({"the cat sat on the mat today", "a dog", "the the the"},
                             {"the cat sat on the mat", "a dog runs", "the cat"});
  const double p1 = 9.0 / 12, p2 = 6.0 / 9, p3 = 4.0 / 6, p4 = 3.0 / 4;
  const double want = 100.0 * std::exp((std::log(p1) + std::log(p2) + std::log(p3) + std::log(p4)) / 4);
  EXPECT_NEAR(s.score, want, 1e-9);
  EXPECT_NEAR(s.precisions[0], p1, 1e-12);
  EXPECT_NEAR(s.precisions[3], p4, 1e-12);
  EXPECT_EQ(s.brevity_penalty, 1.0);
  EXPECT_EQ(s.hypothesis_length, 12u);
  EXPECT_EQ(s.reference_length, 11u);
}

TEST(Bleu, BrevityPenaltyOrderInvarianceAndErrors) {
  const auto s = corpus_bleu({"a b c d"}, {"a b c d e f g h"});
  EXPECT_NEAR(s.brevity_penalty, std::exp(1.0 - 2.0), 1e-12);
  const std::vector<std::string> h{"one two three four five", "six seven eight nine", "ten eleven twelve x y"};
  const std::vector<std::string> r{"one two three four six", "six seven eight nine ten", "ten eleven twelve x"};
  const std::vector<std::string> hr{h[2], h[0], h[1]}, rr{r[2], r[0], r[1]};
  EXPECT_DOUBLE_EQ(corpus_bleu(h, r).score, corpus_bleu(hr, rr).score);
  EXPECT_THROW(corpus_bleu({}, {}), Error);
  EXPECT_THROW(corpus_bleu({"a"}, {"a", "b"}), Error);
}
