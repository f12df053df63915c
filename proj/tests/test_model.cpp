#include "moce/checkpoint.hpp"
#include "moce/model.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace moce;

namespace {

ModelConfig small_config(std::uint64_t seed = 3) {
  ModelConfig c;
  c.model_dim = 16;
  c.heads = 2;
  c.ffn_dim = 32;
  c.max_radius = 3;
  c.dropout = 0.0;
  c.seed = seed;
  return c;
}

const Vocab& vocab() {
  static const Vocab v = build_vocab({"aa", "cc"});
  return v;
}

std::vector<TokenSeq> sources() {
  return {encode("hello", "aa", vocab()), encode("ä€x", "cc", vocab()), encode("zz top", "aa", vocab())};
}

std::vector<TokenSeq> targets() {
  return {encode("salut", "cc", vocab()), encode("ab", "aa", vocab()), encode("q", "cc", vocab())};
}

double loss_of(Model<double>& m, const std::vector<TokenSeq>& s, const std::vector<TokenSeq>& t, const ForwardOptions& o = {}) {
  Tape<double> tape(false);
  return forward_loss(tape, m, std::span<const TokenSeq>(s), std::span<const TokenSeq>(t), 0.0, o).value()(0, 0);
}

void copy_by_name(const Model<double>& from, Model<double>& to) {
  for (auto* dst : to.parameters())
    for (const auto* src : from.parameters())
      if (src->name == dst->name && src->value.rows() == dst->value.rows() && src->value.cols() == dst->value.cols())
        dst->value = src->value;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / ("moce_test_" + name)).string();
}

}  // namespace

TEST(ModelConfig, ValidationErrors) {
  auto c = small_config();
  c.ada_layer = 2;
  EXPECT_THROW(build_model<double>(c, vocab()), Error);
  c = small_config();
  c.heads = 3;
  EXPECT_THROW(c.validate(), Error);
  c = small_config();
  c.top_k = 5;
  EXPECT_THROW(c.validate(), Error);
  c = small_config();
  c.fixed_radii = {1};
  EXPECT_THROW(c.validate(), Error);
  c.fixed_radii = {1, 4};
  EXPECT_THROW(c.validate(), Error);
}

TEST(Model, BuildIsDeterministicPerSeed) {
  auto a = build_model<double>(small_config(), vocab());
  auto b = build_model<double>(small_config(), vocab());
  auto c = build_model<double>(small_config(4), vocab());
  const auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  bool differs = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i]->value, pb[i]->value) << pa[i]->name;
    differs |= pa[i]->value != pc[i]->value;
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(loss_of(a, sources(), targets()), loss_of(b, sources(), targets()));
}

TEST(Model, ZeroRadiusVariantsMatchPlainTransformer) {
  auto plain_cfg = small_config();
  plain_cfg.max_radius = 0;
  auto plain = build_model<double>(plain_cfg, vocab());
  EXPECT_FALSE(plain.pool.has_value());

  auto ada_cfg = plain_cfg;
  ada_cfg.max_radius = 0;
  auto fixed_cfg = small_config();
  fixed_cfg.fixed_radii = {0, 0};
  auto fixed = build_model<double>(fixed_cfg, vocab());
  copy_by_name(plain, fixed);
  EXPECT_NEAR(loss_of(fixed, sources(), targets()), loss_of(plain, sources(), targets()), 1e-12);
}

TEST(Model, BatchOrderAndPackingDoNotMix) {
  auto m = build_model<double>(small_config(), vocab());
  const auto s = sources(), t = targets();
  const double whole = loss_of(m, s, t);
  double weighted = 0;
  double tokens = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const double n = static_cast<double>(t[i].ids.size() - 1);
    weighted += n * loss_of(m, {s[i]}, {t[i]});
    tokens += n;
  }
  EXPECT_NEAR(whole, weighted / tokens, 1e-12);
  EXPECT_NEAR(whole, loss_of(m, {s[2], s[0], s[1]}, {t[2], t[0], t[1]}), 1e-12);
}

TEST(Model, TrailingPadIsIgnored) {
  auto m = build_model<double>(small_config(), vocab());
  auto s = sources(), t = targets();
  const double base = loss_of(m, s, t);
  for (auto& x : s) x.ids.insert(x.ids.end(), 4, kPadId);
  t[1].ids.insert(t[1].ids.end(), 3, kPadId);
  EXPECT_NEAR(loss_of(m, s, t), base, 1e-12);
  s[0].ids.insert(s[0].ids.begin() + 2, kPadId);
  EXPECT_THROW(loss_of(m, s, t), Error);
}

TEST(Model, MissingLanguageTokenThrows) {
  auto m = build_model<double>(small_config(), vocab());
  auto s = sources();
  s[0].ids.erase(s[0].ids.begin());
  EXPECT_THROW(loss_of(m, s, targets()), Error);
}

TEST(Model, EmbeddingSharing) {
  auto shared = build_model<double>(small_config(), vocab());
  auto cfg = small_config();
  cfg.share_embeddings = false;
  auto separate = build_model<double>(cfg, vocab());
  const std::int64_t vd = static_cast<std::int64_t>(vocab().size()) * 16;
  EXPECT_EQ(separate.parameter_count() - shared.parameter_count(), vd);
  for (const auto* p : shared.parameters()) EXPECT_NE(p->name, "output_projection");
}

TEST(Model, DropoutIsSeededAndOffAtEvaluation) {
  auto cfg = small_config();
  cfg.dropout = 0.3;
  auto m = build_model<double>(cfg, vocab());
  ForwardOptions a, b;
  a.training = b.training = true;
  a.dropout_seed = 5;
  b.dropout_seed = 6;
  const double la = loss_of(m, sources(), targets(), a);
  EXPECT_EQ(la, loss_of(m, sources(), targets(), a));
  EXPECT_NE(la, loss_of(m, sources(), targets(), b));
  EXPECT_EQ(loss_of(m, sources(), targets()), loss_of(m, sources(), targets(), ForwardOptions{false, 9, nullptr, {}}));
}

TEST(Model, LidOverride) {
  EXPECT_TRUE(override_lid(vocab(), "none").zero());
  EXPECT_EQ(override_lid(vocab(), "cc").token_id, vocab().language_id("cc"));
  EXPECT_THROW(override_lid(vocab(), "xx"), Error);

  auto m = build_model<double>(small_config(), vocab());
  const auto base = loss_of(m, sources(), targets());
  ForwardOptions same;
  same.lid_override = override_lid(vocab(), "aa");
  const std::vector<TokenSeq> s{sources()[0]}, t{targets()[0]};
  EXPECT_EQ(loss_of(m, s, t), loss_of(m, s, t, same));
  ForwardOptions zero;
  zero.lid_override = override_lid(vocab(), "none");
  EXPECT_NE(base, loss_of(m, sources(), targets(), zero));

  auto cfg = small_config();
  cfg.use_lid = false;
  auto blind = build_model<double>(cfg, vocab());
  EXPECT_EQ(loss_of(blind, sources(), targets()), loss_of(blind, sources(), targets(), zero));
}

TEST(Model, AdaptiveOverheadMatchesParameterCounts) {
  ModelConfig c;
  c.model_dim = 512;
  c.heads = 8;
  c.ffn_dim = 1024;
  c.expert_bias = false;
  c.use_lid = false;
  c.max_radius = 5;
  const auto pool5 = pool_param_count(c.max_radius, c.head_dim(), c.expert_bias);
  const auto o5 = adaptive_overhead(c);
  EXPECT_EQ(pool5, 102400);
  EXPECT_EQ(o5, pool5 + 64 * 6);
  c.max_radius = 6;
  EXPECT_EQ(pool_param_count(c.max_radius, c.head_dim(), c.expert_bias) - pool5, 45056);
  EXPECT_EQ(adaptive_overhead(c) - o5, 45056 + 64);

  for (bool lid : {false, true})
    for (int delta : {1, 3}) {
      auto cfg = small_config();
      cfg.use_lid = lid;
      cfg.max_radius = delta;
      auto plain_cfg = cfg;
      plain_cfg.max_radius = 0;
      const auto diff = build_model<float>(cfg, vocab()).parameter_count() - build_model<float>(plain_cfg, vocab()).parameter_count();
      EXPECT_EQ(diff, adaptive_overhead(cfg)) << lid << delta;
    }
}

TEST(Model, RoutingStatsMatchIndependentRecount) {
  for (GateMode mode : {GateMode::Probabilities, GateMode::Logits}) {
    auto cfg = small_config(9);
    cfg.gate_mode = mode;
    auto m = build_model<double>(cfg, vocab());
    std::vector<std::vector<int>> ids;
    for (const auto& s : sources()) ids.push_back(s.ids);
    RoutingStats stats(cfg.heads, cfg.max_radius + 1);
    ForwardOptions o;
    o.routing = &stats;
    Tape<double> tape(false);
    encode_batch(tape, m, std::span<const std::vector<int>>(ids), o);
    EXPECT_EQ(stats.counts(), oracle::recount_first_layer(m, ids));
  }
}

TEST(Checkpoint, RoundTripAndAverage) {
  auto a = build_model<float>(small_config(1), vocab());
  auto b = a;
  std::mt19937 rng(2);
  std::normal_distribution<float> noise(0.0f, 0.1f);
  for (auto* p : b.parameters()) p->value = p->value.unaryExpr([&](float v) { return v + noise(rng); });
  const auto pa = temp_path("a.bin"), pb = temp_path("b.bin");
  save_checkpoint(a, pa);
  save_checkpoint(b, pb);
  auto la = load_checkpoint(pa);
  EXPECT_EQ(la.config, a.config);
  EXPECT_EQ(la.vocab.languages(), a.vocab.languages());
  const auto x = a.parameters(), y = la.parameters();
  ASSERT_EQ(x.size(), y.size());
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_EQ(x[i]->value, y[i]->value) << x[i]->name;

  auto avg = average_checkpoints({pa, pb});
  const auto pbv = b.parameters(), pavg = avg.parameters();
  for (std::size_t i = 0; i < x.size(); ++i)
    EXPECT_TRUE(pavg[i]->value.isApprox(((x[i]->value + pbv[i]->value) * 0.5f).eval(), 1e-6f));

  auto other = small_config(1);
  other.max_radius = 2;
  EXPECT_THROW(average_models({a, build_model<float>(other, vocab())}), Error);
  EXPECT_THROW(load_checkpoint(temp_path("missing.bin")), Error);
  std::filesystem::remove(pa);
  std::filesystem::remove(pb);
}

TEST(Decoding, BeamOneEqualsGreedyAndIsDeterministic) {
  auto m = build_model<float>(small_config(5), vocab());
  std::mt19937_64 rng(3);
  for (int i = 0; i < 10; ++i) {
    std::string text;
    for (int j = 0; j < 3 + i % 4; ++j) text.push_back(static_cast<char>('a' + rng() % 26));
    const auto src = encode(text, "aa", vocab());
    DecodeOptions o;
    o.beam = 1;
    o.max_len = 12;
    const auto b = beam_search(m, src, "cc", o);
    EXPECT_EQ(b.ids, greedy_decode(m, src, "cc", o).ids);
    EXPECT_EQ(b.ids.front(), vocab().language_id("cc"));
    o.beam = 3;
    EXPECT_EQ(beam_search(m, src, "cc", o).ids, beam_search(m, src, "cc", o).ids);
  }
}
