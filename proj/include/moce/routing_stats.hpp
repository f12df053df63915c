#pragma once

#include <cstdint>
#include <optional>
#include <vector>

namespace moce {

/// Selected experts for one routing site (stream, head, token) and their
/// normalized mixture weights, ordered by descending gate score.
struct GateDecision {
  std::vector<int> experts;
  std::vector<double> weights;
};

enum class Stream : int { Query = 0, Key = 1, Value = 2 };
inline constexpr int kNumStreams = 3;
const char* stream_name(int stream);

/// Expert selection tallies of an adaptive attention layer. Every top-k
/// selection counts once (so top-2 yields two events per routing site);
/// weight mass accumulates the corresponding gate weights.
class RoutingStats {
 public:
  RoutingStats() = default;
  RoutingStats(int heads, int experts);

  int heads() const { return heads_; }
  int experts() const { return experts_; }
  std::uint64_t routed_sites() const { return sites_; }
  bool empty() const { return sites_ == 0; }

  void record(int stream, int head, const GateDecision& decision);
  /// Adds another tally; the result does not depend on merge order.
  void merge(const RoutingStats& other);

  std::uint64_t count(int stream, int head, int expert) const { return counts_[index(stream, head, expert)]; }
  double weight_mass(int stream, int head, int expert) const { return mass_[index(stream, head, expert)]; }

  /// Per-expert totals restricted to a stream and/or head (nullopt = all).
  std::vector<std::uint64_t> counts(std::optional<int> stream = {}, std::optional<int> head = {}) const;
  std::vector<double> masses(std::optional<int> stream = {}, std::optional<int> head = {}) const;
  std::vector<double> selection_ratios(std::optional<int> stream = {}, std::optional<int> head = {}) const;
  std::vector<double> weight_ratios(std::optional<int> stream = {}, std::optional<int> head = {}) const;

  friend bool operator==(const RoutingStats& a, const RoutingStats& b) {
    return a.heads_ == b.heads_ && a.experts_ == b.experts_ && a.sites_ == b.sites_ && a.counts_ == b.counts_;
  }

 private:
  std::size_t index(int stream, int head, int expert) const;

  int heads_ = 0;
  int experts_ = 0;
  std::uint64_t sites_ = 0;
  std::vector<std::uint64_t> counts_;
  std::vector<double> mass_;
};

}  // namespace moce
