#pragma once

#include <string>
#include <vector>

namespace moce {

struct BleuScore {
  double score = 0.0;  // 0..100
  std::vector<double> precisions;  // modified n-gram precision, n = 1..max_n
  double brevity_penalty = 1.0;
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;
};

/// Corpus BLEU over whitespace-split words: geometric mean of clipped n-gram
/// precisions times the brevity penalty exp(1 - r/c) when c <= r. Any zero
/// precision makes the score 0 (no smoothing).
BleuScore corpus_bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references, int max_n = 4);

}  // namespace moce
