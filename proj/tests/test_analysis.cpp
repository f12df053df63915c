#include "moce/analysis.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

using namespace moce;

TEST(JsDivergence, HandValueSymmetryAndBounds) {
  const std::vector<double> p{0.5, 0.5}, q{1.0, 0.0};
  EXPECT_NEAR(js_divergence(p, q), 0.75 * std::log(4.0 / 3.0), 1e-12);
  EXPECT_NEAR(js_divergence(q, p), js_divergence(p, q), 1e-15);
  EXPECT_NEAR(js_divergence(p, p), 0.0, 1e-12);
  EXPECT_NEAR(js_divergence({1, 0, 0}, {0, 0.3, 0.7}), std::log(2.0), 1e-12);
  EXPECT_THROW(js_divergence({0.5, 0.4}, {0.5, 0.5}), Error);
  EXPECT_THROW(js_divergence({1.2, -0.2}, {0.5, 0.5}), Error);
  EXPECT_THROW(js_divergence({1.0}, {0.5, 0.5}), Error);
}

TEST(RoutingStats, AvgDeltaRatiosAndMerge) {
  RoutingStats a(2, 4);
  a.record(0, 0, {{3, 2}, {0.6, 0.4}});
  a.record(1, 1, {{3, 2}, {0.7, 0.3}});
  EXPECT_EQ(a.routed_sites(), 2u);
  EXPECT_NEAR(avg_delta(a), 2.5, 1e-12);
  EXPECT_NEAR(avg_delta(a, true), (3 * 1.3 + 2 * 0.7) / 2.0, 1e-12);
  EXPECT_NEAR(avg_delta(a, false, 0), 2.5, 1e-12);
  EXPECT_THROW(avg_delta(a, false, 2), Error);

  RoutingStats b(2, 4);
  b.record(2, 0, {{0, 1}, {0.5, 0.5}});
  auto ab = a, ba = b;
  ab.merge(b);
  ba.merge(a);
  EXPECT_EQ(ab, ba);
  EXPECT_EQ(ab.counts(), (std::vector<std::uint64_t>{1, 1, 2, 2}));
  EXPECT_NEAR(avg_delta(ab), 11.0 / 6.0, 1e-12);
  const auto r = ab.selection_ratios();
  EXPECT_NEAR(r[0] + r[1] + r[2] + r[3], 1.0, 1e-15);
  EXPECT_THROW(ab.merge(RoutingStats(3, 4)), Error);
  EXPECT_THROW(avg_delta(RoutingStats(2, 4)), Error);
}

TEST(RoutingStats, CsvLayout) {
  RoutingStats s(1, 2);
  s.record(0, 0, {{1}, {1.0}});
  std::ostringstream out;
  write_stats_csv(s, out);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "scope,stream,head,delta,count,ratio,weight_mass");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 2 * (1 + 3 + 3));
}

namespace {

ModelConfig analysis_config(int top_k) {
  ModelConfig c;
  c.model_dim = 16;
  c.heads = 2;
  c.ffn_dim = 32;
  c.max_radius = 3;
  c.top_k = top_k;
  c.dropout = 0.0;
  c.seed = 21;
  return c;
}

ParallelCorpus ten_sentences() {
  SyntheticOptions o;
  o.pairs = 20;
  return make_synthetic_corpus({{"aa", 20, 1, SyntheticTask::Substitute}, {"cc", 20, 3, SyntheticTask::Substitute}}, o);
}

}  // namespace

TEST(ExpertRatios, MatchRecountAndFilterDirection) {
  const auto corpus = ten_sentences();
  const auto vocab = build_vocab({"aa", "cc"});
  auto m = build_model<float>(analysis_config(2), vocab);
  const auto stats = record_expert_ratios(m, corpus, "cc", "aa");
  std::vector<std::vector<int>> ids;
  std::uint64_t tokens = 0;
  for (const auto& r : corpus.records)
    if (r.src_lang == "cc") {
      ids.push_back(encode(r.src_text, "cc", vocab).ids);
      tokens += ids.back().size();
    }
  ASSERT_EQ(ids.size(), 10u);
  EXPECT_EQ(stats.routed_sites(), tokens * 3 * 2);
  EXPECT_EQ(stats.counts(), oracle::recount_first_layer(m, ids));
  EXPECT_THROW(record_expert_ratios(m, corpus, "aa", "aa"), Error);
}

TEST(ExpertRatios, AllExpertsSelectedGivesUniformRatios) {
  auto m = build_model<float>(analysis_config(4), build_vocab({"aa", "cc"}));
  const auto stats = record_expert_ratios(m, ten_sentences(), "aa", "cc");
  for (double r : stats.selection_ratios()) EXPECT_NEAR(r, 0.25, 1e-12);
  EXPECT_NEAR(avg_delta(stats), 1.5, 1e-12);
}

TEST(ExpertRatios, OverrideAndPlainModel) {
  const auto vocab = build_vocab({"aa", "cc"});
  auto m = build_model<float>(analysis_config(2), vocab);
  const auto base = record_expert_ratios(m, ten_sentences(), "cc", "aa");
  EXPECT_EQ(record_expert_ratios(m, ten_sentences(), "cc", "aa", override_lid(vocab, "cc")), base);
  auto plain_cfg = analysis_config(2);
  plain_cfg.max_radius = 0;
  auto plain = build_model<float>(plain_cfg, vocab);
  EXPECT_THROW(record_expert_ratios(plain, ten_sentences(), "cc", "aa"), Error);
}

TEST(Conciseness, ThreeByteLanguageAndOrder) {
  SyntheticOptions o;
  o.pairs = 200;
  const std::vector<SyntheticLangSpec> specs{{"aa", 20, 1, SyntheticTask::Substitute}, {"cc", 20, 3, SyntheticTask::Substitute}};
  const auto rep = conciseness_report(to_multi_parallel(specs, o), "aa");
  EXPECT_EQ(rep.languages, (std::vector<std::string>{"aa", "cc"}));
  EXPECT_NEAR(rep.ratio_vs_pivot[0], 1.0, 1e-12);
  EXPECT_NEAR(rep.ratio_vs_pivot[1], 3.0, 1e-12);
  EXPECT_NEAR(rep.avg_bytes[1], 3 * rep.avg_bytes[0], 1e-9);

  MultiParallelCorpus m{{"zh", "en"}, {{"你好", "再见"}, {"hi", "bye"}}};
  const auto r = conciseness_report(m, "en");
  EXPECT_NEAR(r.avg_bytes[0], 6.0, 1e-12);
  EXPECT_NEAR(r.avg_bytes[1], 2.5, 1e-12);
  EXPECT_NEAR(r.ratio_vs_pivot[0], 6.0 / 2.5, 1e-12);
  EXPECT_THROW(conciseness_report(m, "de"), Error);
  MultiParallelCorpus ragged{{"a", "b"}, {{"x", "y"}, {"z"}}};
  EXPECT_THROW(conciseness_report(ragged, "a"), Error);

  std::ostringstream out;
  write_conciseness_csv(r, out);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')), "lang,avg_bytes,ratio_vs_pivot");
}
