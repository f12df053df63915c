#include "moce/routing_stats.hpp"

#include "moce/tensor.hpp"

#include <numeric>
#include <string>

namespace moce {

const char* stream_name(int stream) {
  switch (stream) {
    case 0:
      return "Q";
    case 1:
      return "K";
    case 2:
      return "V";
    default:
      return "?";
  }
}

RoutingStats::RoutingStats(int heads, int experts)
    : heads_(heads),
      experts_(experts),
      counts_(static_cast<std::size_t>(kNumStreams * heads * experts), 0),
      mass_(static_cast<std::size_t>(kNumStreams * heads * experts), 0.0) {
  if (heads < 1 || experts < 1) throw Error("RoutingStats: need at least one head and one expert");
}

std::size_t RoutingStats::index(int stream, int head, int expert) const {
  if (stream < 0 || stream >= kNumStreams || head < 0 || head >= heads_ || expert < 0 || expert >= experts_)
    throw Error("RoutingStats: index out of range");
  return static_cast<std::size_t>((stream * heads_ + head) * experts_ + expert);
}

void RoutingStats::record(int stream, int head, const GateDecision& decision) {
  if (decision.experts.size() != decision.weights.size()) throw Error("RoutingStats: malformed gate decision");
  for (std::size_t i = 0; i < decision.experts.size(); ++i) {
    const auto at = index(stream, head, decision.experts[i]);
    ++counts_[at];
    mass_[at] += decision.weights[i];
  }
  ++sites_;
}

void RoutingStats::merge(const RoutingStats& other) {
  if (other.sites_ == 0 && other.counts_.empty()) return;
  if (counts_.empty()) {
    *this = other;
    return;
  }
  if (other.heads_ != heads_ || other.experts_ != experts_) throw Error("RoutingStats: cannot merge different layouts");
  for (std::size_t i = 0; i < counts_.size(); ++i) {
    counts_[i] += other.counts_[i];
    mass_[i] += other.mass_[i];
  }
  sites_ += other.sites_;
}

std::vector<std::uint64_t> RoutingStats::counts(std::optional<int> stream, std::optional<int> head) const {
  std::vector<std::uint64_t> out(static_cast<std::size_t>(experts_), 0);
  for (int s = 0; s < kNumStreams; ++s) {
    if (stream && *stream != s) continue;
    for (int h = 0; h < heads_; ++h) {
      if (head && *head != h) continue;
      for (int e = 0; e < experts_; ++e) out[static_cast<std::size_t>(e)] += count(s, h, e);
    }
  }
  return out;
}

std::vector<double> RoutingStats::masses(std::optional<int> stream, std::optional<int> head) const {
  std::vector<double> out(static_cast<std::size_t>(experts_), 0.0);
  for (int s = 0; s < kNumStreams; ++s) {
    if (stream && *stream != s) continue;
    for (int h = 0; h < heads_; ++h) {
      if (head && *head != h) continue;
      for (int e = 0; e < experts_; ++e) out[static_cast<std::size_t>(e)] += weight_mass(s, h, e);
    }
  }
  return out;
}

std::vector<double> RoutingStats::selection_ratios(std::optional<int> stream, std::optional<int> head) const {
  const auto c = counts(stream, head);
  const double total = static_cast<double>(std::accumulate(c.begin(), c.end(), std::uint64_t{0}));
  std::vector<double> out(c.size(), 0.0);
  if (total == 0) return out;
  for (std::size_t i = 0; i < c.size(); ++i) out[i] = static_cast<double>(c[i]) / total;
  return out;
}

std::vector<double> RoutingStats::weight_ratios(std::optional<int> stream, std::optional<int> head) const {
  auto m = masses(stream, head);
  const double total = std::accumulate(m.begin(), m.end(), 0.0);
  if (total == 0) return std::vector<double>(m.size(), 0.0);
  for (auto& x : m) x /= total;
  return m;
}

}  // namespace moce
