#include "moce/beam_search.hpp"

#include "moce/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace moce {

double normalized_score(double log_prob, std::size_t length, double length_penalty) {
  if (length == 0) return log_prob;
  return log_prob / std::pow(static_cast<double>(length), length_penalty);
}

namespace {

struct Candidate {
  std::size_t parent;
  int token;
  double log_prob;
};

}  // namespace

Hypothesis beam_search(const StepScorer& scorer, int start_token, const BeamOptions& options) {
  if (options.beam < 1) throw Error("beam_search: beam must be >= 1");
  if (options.max_len < 1) throw Error("beam_search: max_len must be >= 1");

  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> finished;
  std::vector<int> prefix;

  for (int step = 0; step < options.max_len && !live.empty(); ++step) {
    std::vector<Candidate> cands;
    for (std::size_t h = 0; h < live.size(); ++h) {
      prefix.assign(1, start_token);
      prefix.insert(prefix.end(), live[h].tokens.begin(), live[h].tokens.end());
      const auto lp = scorer(prefix);
      for (std::size_t tok = 0; tok < lp.size(); ++tok) {
        if (!std::isfinite(lp[tok])) continue;
        cands.push_back({h, static_cast<int>(tok), live[h].log_prob + lp[tok]});
      }
    }
    const auto keep = std::min<std::size_t>(static_cast<std::size_t>(options.beam), cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.token < b.token;
                      });
    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      Hypothesis hyp = live[cands[i].parent];
      hyp.tokens.push_back(cands[i].token);
      hyp.log_prob = cands[i].log_prob;
      hyp.score = normalized_score(hyp.log_prob, hyp.tokens.size(), options.length_penalty);
      (cands[i].token == options.eos_id ? finished : next).push_back(std::move(hyp));
    }
    live = std::move(next);
    if (finished.size() >= static_cast<std::size_t>(options.beam)) break;
  }
  if (finished.size() < static_cast<std::size_t>(options.beam))
    for (auto& h : live) finished.push_back(std::move(h));
  if (finished.empty()) return Hypothesis{};

  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i)
    if (finished[i].score > finished[best].score) best = i;
  return finished[best];
}

Hypothesis greedy_search(const StepScorer& scorer, int start_token, int max_len, int eos_id, double length_penalty) {
  Hypothesis hyp;
  std::vector<int> prefix{start_token};
  for (int step = 0; step < max_len; ++step) {
    const auto lp = scorer(prefix);
    int arg = -1;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < lp.size(); ++t)
      if (lp[t] > best) {
        best = lp[t];
        arg = static_cast<int>(t);
      }
    if (arg < 0) break;
    hyp.tokens.push_back(arg);
    hyp.log_prob += best;
    prefix.push_back(arg);
    if (arg == eos_id) break;
  }
  hyp.score = normalized_score(hyp.log_prob, hyp.tokens.size(), length_penalty);
  return hyp;
}

}  // namespace moce
