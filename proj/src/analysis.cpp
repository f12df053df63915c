#include "moce/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace moce {

RoutingStats record_expert_ratios(Model<float>& model, const ParallelCorpus& corpus, const std::string& src_lang,
                                  const std::string& tgt_lang, const std::optional<LidOverride>& lid_override) {
  if (!model.config.has_adaptive_layer()) throw Error("record_expert_ratios: model has no adaptive layer (max_radius = 0)");
  model.vocab.language_id(src_lang);
  model.vocab.language_id(tgt_lang);
  RoutingStats stats(model.config.heads, model.config.max_radius + 1);
  ForwardOptions options;
  options.routing = &stats;
  options.lid_override = lid_override;
  std::size_t used = 0;
  for (const auto& r : corpus.records) {
    if (r.src_lang != src_lang || r.tgt_lang != tgt_lang) continue;
    ++used;
    Tape<float> tape(false);
    std::vector<std::vector<int>> src{strip_padding(encode(r.src_text, r.src_lang, model.vocab))};
    encode_batch(tape, model, std::span<const std::vector<int>>(src), options);
  }
  if (used == 0) throw Error("record_expert_ratios: corpus has no " + src_lang + "->" + tgt_lang + " records");
  return stats;
}

double avg_delta(const RoutingStats& stats, bool weighted, std::optional<int> stream, std::optional<int> head) {
  if (stats.empty()) throw Error("avg_delta: empty routing statistics");
  const auto c = stats.counts(stream, head);
  if (std::all_of(c.begin(), c.end(), [](std::uint64_t n) { return n == 0; }))
    throw Error("avg_delta: no selections for the requested stream/head");
  const auto r = weighted ? stats.weight_ratios(stream, head) : stats.selection_ratios(stream, head);
  double s = 0.0;
  for (std::size_t d = 0; d < r.size(); ++d) s += r[d] * static_cast<double>(d);
  return s;
}

double js_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size() || p.empty()) throw Error("js_divergence: distributions must have the same nonzero length");
  for (const auto* v : {&p, &q}) {
    double s = 0.0;
    for (double x : *v) {
      if (!(x >= 0.0)) throw Error("js_divergence: negative or NaN entry");
      s += x;
    }
    if (std::abs(s - 1.0) > 1e-6) throw Error("js_divergence: entries sum to " + std::to_string(s) + ", not 1");
  }
  auto kl_to_mid = [&](const std::vector<double>& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i] > 0.0) s += a[i] * std::log(2.0 * a[i] / (p[i] + q[i]));
    return s;
  };
  return 0.5 * kl_to_mid(p) + 0.5 * kl_to_mid(q);
}

ConcisenessReport conciseness_report(const MultiParallelCorpus& corpus, const std::string& pivot) {
  if (corpus.languages.size() != corpus.sentences.size()) throw Error("conciseness: language and column counts differ");
  ConcisenessReport r;
  r.pivot = pivot;
  r.languages = corpus.languages;
  std::size_t pivot_index = corpus.languages.size();
  for (std::size_t i = 0; i < corpus.languages.size(); ++i) {
    if (corpus.languages[i] == pivot) pivot_index = i;
    if (corpus.sentences[i].size() != corpus.sentences.front().size())
      throw Error("conciseness: language '" + corpus.languages[i] + "' has " + std::to_string(corpus.sentences[i].size()) +
                  " sentences, expected " + std::to_string(corpus.sentences.front().size()));
  }
  if (pivot_index == corpus.languages.size()) throw Error("conciseness: pivot '" + pivot + "' not in corpus");
  if (corpus.sentences.front().empty()) throw Error("conciseness: empty corpus");
  for (const auto& col : corpus.sentences) {
    double bytes = 0.0;
    for (const auto& s : col) bytes += static_cast<double>(s.size());
    r.avg_bytes.push_back(bytes / static_cast<double>(col.size()));
  }
  if (r.avg_bytes[pivot_index] <= 0.0) throw Error("conciseness: pivot sentences are empty");
  for (double b : r.avg_bytes) r.ratio_vs_pivot.push_back(b / r.avg_bytes[pivot_index]);
  return r;
}

void write_stats_csv(const RoutingStats& stats, std::ostream& out) {
  out << "scope,stream,head,delta,count,ratio,weight_mass\n";
  auto rows = [&](const char* scope, std::optional<int> stream, std::optional<int> head) {
    const auto counts = stats.counts(stream, head);
    const auto ratios = stats.selection_ratios(stream, head);
    const auto mass = stats.masses(stream, head);
    for (int d = 0; d < stats.experts(); ++d) {
      out << scope << ',' << (stream ? stream_name(*stream) : "all") << ',' << (head ? std::to_string(*head) : "all") << ','
          << d << ',' << counts[static_cast<std::size_t>(d)] << ',' << ratios[static_cast<std::size_t>(d)] << ','
          << mass[static_cast<std::size_t>(d)] << '\n';
    }
  };
  rows("all", {}, {});
  for (int s = 0; s < kNumStreams; ++s) rows("stream", s, {});
  for (int s = 0; s < kNumStreams; ++s)
    for (int h = 0; h < stats.heads(); ++h) rows("head", s, h);
}

void write_conciseness_csv(const ConcisenessReport& report, std::ostream& out) {
  out << "lang,avg_bytes,ratio_vs_pivot\n";
  for (std::size_t i = 0; i < report.languages.size(); ++i)
    out << report.languages[i] << ',' << report.avg_bytes[i] << ',' << report.ratio_vs_pivot[i] << '\n';
}

}  // namespace moce
