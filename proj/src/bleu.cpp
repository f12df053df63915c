#include "moce/bleu.hpp"

#include "moce/tensor.hpp"

#include <cmath>
#include <map>
#include <sstream>

namespace moce {

namespace {

std::vector<std::string> words(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

std::map<std::vector<std::string>, int> ngrams(const std::vector<std::string>& w, std::size_t n) {
  std::map<std::vector<std::string>, int> out;
  for (std::size_t i = 0; i + n <= w.size(); ++i) ++out[std::vector<std::string>(w.begin() + static_cast<std::ptrdiff_t>(i), w.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return out;
}

}  // namespace

BleuScore corpus_bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references, int max_n) {
  if (hypotheses.empty()) throw Error("corpus_bleu: empty corpus");
  if (hypotheses.size() != references.size())
    throw Error("corpus_bleu: " + std::to_string(hypotheses.size()) + " hypotheses vs " + std::to_string(references.size()) + " references");
  if (max_n < 1) throw Error("corpus_bleu: max_n must be >= 1");

  std::vector<double> matched(static_cast<std::size_t>(max_n)), total(static_cast<std::size_t>(max_n));
  BleuScore b;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    const auto h = words(hypotheses[s]);
    const auto r = words(references[s]);
    b.hypothesis_length += h.size();
    b.reference_length += r.size();
    for (int n = 1; n <= max_n; ++n) {
      const auto hn = ngrams(h, static_cast<std::size_t>(n));
      const auto rn = ngrams(r, static_cast<std::size_t>(n));
      for (const auto& [g, c] : hn) {
        const auto it = rn.find(g);
        matched[static_cast<std::size_t>(n - 1)] += std::min(c, it == rn.end() ? 0 : it->second);
        total[static_cast<std::size_t>(n - 1)] += c;
      }
    }
  }
  double log_sum = 0.0;
  bool zero = false;
  for (int n = 0; n < max_n; ++n) {
    const double p = total[static_cast<std::size_t>(n)] > 0 ? matched[static_cast<std::size_t>(n)] / total[static_cast<std::size_t>(n)] : 0.0;
    b.precisions.push_back(p);
    if (p == 0.0) zero = true;
    else log_sum += std::log(p);
  }
  const double c = static_cast<double>(b.hypothesis_length), r = static_cast<double>(b.reference_length);
  b.brevity_penalty = c == 0.0 ? 0.0 : (c > r ? 1.0 : std::exp(1.0 - r / c));
  b.score = zero ? 0.0 : 100.0 * b.brevity_penalty * std::exp(log_sum / max_n);
  return b;
}

}  // namespace moce
