#pragma once

#include "moce/corpus.hpp"
#include "moce/model.hpp"
#include "moce/routing_stats.hpp"

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace moce {

/// Encoder passes over every record of `corpus` translating src_lang ->
/// tgt_lang, tallying each top-k selection of the adaptive layer (PAD rows are
/// never routed). Throws for a model without an adaptive layer.
RoutingStats record_expert_ratios(Model<float>& model, const ParallelCorpus& corpus, const std::string& src_lang,
                                  const std::string& tgt_lang, const std::optional<LidOverride>& lid_override = {});

/// sum_delta ratio(delta) * delta over selection ratios (or weight ratios).
double avg_delta(const RoutingStats& stats, bool weighted = false, std::optional<int> stream = {},
                 std::optional<int> head = {});

/// Natural-log Jensen-Shannon divergence, bounded by ln 2.
double js_divergence(const std::vector<double>& p, const std::vector<double>& q);

struct ConcisenessReport {
  std::string pivot;
  std::vector<std::string> languages;
  std::vector<double> avg_bytes;
  std::vector<double> ratio_vs_pivot;
};

ConcisenessReport conciseness_report(const MultiParallelCorpus& corpus, const std::string& pivot);

/// CSV `scope,stream,head,delta,count,ratio,weight_mass`: scope "all" for the
/// aggregate, "stream" per stream, "head" per (stream, head).
void write_stats_csv(const RoutingStats& stats, std::ostream& out);
/// CSV `lang,avg_bytes,ratio_vs_pivot`.
void write_conciseness_csv(const ConcisenessReport& report, std::ostream& out);

}  // namespace moce
