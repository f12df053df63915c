#pragma once

#include <functional>
#include <span>
#include <vector>

namespace moce {

/// Log-probabilities over the vocabulary for the next token after `prefix`
/// (the prefix always starts with the start token).
using StepScorer = std::function<std::vector<double>(std::span<const int> prefix)>;

struct BeamOptions {
  int beam = 4;
  double length_penalty = 1.5;
  int max_len = 256;  // generated tokens, EOS included
  int eos_id = 257;
};

struct Hypothesis {
  std::vector<int> tokens;  // generated tokens (start token excluded, EOS included when produced)
  double log_prob = 0.0;
  double score = 0.0;  // log_prob / |tokens|^length_penalty
};

double normalized_score(double log_prob, std::size_t length, double length_penalty);

/// Length-normalized beam search. At every step the `beam` best expansions by
/// cumulative log-probability are kept; those ending in EOS are finished. The
/// search stops once `beam` hypotheses finished, no live hypothesis remains,
/// or max_len is reached (live ones are then finished as they stand). The
/// finished hypothesis with the best normalized score wins.
Hypothesis beam_search(const StepScorer& scorer, int start_token, const BeamOptions& options);

/// Arg-max decoding until EOS or max_len.
Hypothesis greedy_search(const StepScorer& scorer, int start_token, int max_len, int eos_id, double length_penalty = 1.0);

}  // namespace moce
