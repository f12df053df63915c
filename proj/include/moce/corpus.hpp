#pragma once

#include "moce/tokenizer.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace moce {

struct ParallelRecord {
  std::string src_lang;
  std::string tgt_lang;
  std::string src_text;
  std::string tgt_text;

  friend bool operator==(const ParallelRecord&, const ParallelRecord&) = default;
};

struct ParallelCorpus {
  std::vector<ParallelRecord> records;

  std::size_t size() const { return records.size(); }
  /// Throws when a code is missing from `vocab` or a text is empty.
  void validate(const Vocab& vocab) const;
  /// Sorted distinct language codes over both sides.
  std::vector<std::string> languages() const;
};

/// UTF-8 TSV, four columns (src_lang, tgt_lang, src_text, tgt_text), no header.
ParallelCorpus read_corpus_tsv(const std::string& path);
ParallelCorpus parse_corpus_tsv(std::istream& in);
void write_corpus_tsv(const ParallelCorpus& corpus, const std::string& path);
void write_corpus_tsv(const ParallelCorpus& corpus, std::ostream& out);

enum class SyntheticTask { Copy, Substitute };

/// A synthetic language writes symbol s of a shared alphabet with a fixed
/// code of `bytes_per_symbol` UTF-8 bytes. Copy languages pair with themselves;
/// substitution languages pair with the pivot (the first entry) in both
/// directions, sentence by sentence and symbol by symbol.
struct SyntheticLangSpec {
  std::string code;
  int alphabet_size = 20;
  int bytes_per_symbol = 1;
  SyntheticTask task = SyntheticTask::Substitute;
};

struct SyntheticOptions {
  int pairs = 2000;
  int min_symbols = 4;
  int max_symbols = 12;
  std::uint64_t seed = 1;
};

/// UTF-8 code of symbol `s` (before the language's permutation).
std::string symbol_code(int bytes_per_symbol, int symbol);

/// Deterministic corpus; the first entry is the pivot. Non-pivot languages take
/// turns; each sentence is a random symbol string whose length is drawn from
/// [min_symbols, max_symbols]. Non-pivot alphabets are permuted so
/// substitution is not the identity on symbol indices; the permutation depends
/// only on the language code, never on the sampling seed.
ParallelCorpus make_synthetic_corpus(const std::vector<SyntheticLangSpec>& specs, const SyntheticOptions& options);

/// Multi-parallel text: `languages[i]` owns `sentences[i]`; all columns align.
struct MultiParallelCorpus {
  std::vector<std::string> languages;
  std::vector<std::vector<std::string>> sentences;
};

/// TSV with a header row of language codes and one aligned sentence per column.
MultiParallelCorpus read_multi_parallel_tsv(const std::string& path);
MultiParallelCorpus parse_multi_parallel_tsv(std::istream& in);

/// Groups same-meaning sentences of a bidirectional synthetic corpus into a
/// multi-parallel table over the given languages.
MultiParallelCorpus to_multi_parallel(const std::vector<SyntheticLangSpec>& specs, const SyntheticOptions& options);

}  // namespace moce
