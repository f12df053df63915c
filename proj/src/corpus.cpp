#include "moce/corpus.hpp"

#include "moce/tensor.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

namespace moce {

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return out;
}

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

std::ifstream open_input(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read '" + path + "'");
  return in;
}

}  // namespace

void ParallelCorpus::validate(const Vocab& vocab) const {
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    for (const auto* code : {&r.src_lang, &r.tgt_lang})
      if (!vocab.has_language(*code))
        throw Error("corpus record " + std::to_string(i + 1) + ": language '" + *code + "' not in vocabulary");
    if (r.src_text.empty() || r.tgt_text.empty()) throw Error("corpus record " + std::to_string(i + 1) + ": empty text");
  }
}

std::vector<std::string> ParallelCorpus::languages() const {
  std::set<std::string> s;
  for (const auto& r : records) {
    s.insert(r.src_lang);
    s.insert(r.tgt_lang);
  }
  return {s.begin(), s.end()};
}

ParallelCorpus parse_corpus_tsv(std::istream& in) {
  ParallelCorpus c;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    line = strip_cr(line);
    if (line.empty()) continue;
    auto f = split_tabs(line);
    if (f.size() != 4) throw Error("corpus line " + std::to_string(n) + ": expected 4 tab-separated columns, got " + std::to_string(f.size()));
    c.records.push_back({f[0], f[1], f[2], f[3]});
  }
  return c;
}

ParallelCorpus read_corpus_tsv(const std::string& path) {
  auto in = open_input(path);
  return parse_corpus_tsv(in);
}

void write_corpus_tsv(const ParallelCorpus& corpus, std::ostream& out) {
  for (const auto& r : corpus.records) out << r.src_lang << '\t' << r.tgt_lang << '\t' << r.src_text << '\t' << r.tgt_text << '\n';
}

void write_corpus_tsv(const ParallelCorpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  write_corpus_tsv(corpus, out);
}

std::string symbol_code(int bytes_per_symbol, int symbol) {
  if (symbol < 0) throw Error("symbol_code: negative symbol");
  std::string out;
  switch (bytes_per_symbol) {
    case 1:
      if (symbol >= 94) throw Error("symbol_code: 1-byte alphabets hold at most 94 symbols");
      out.push_back(static_cast<char>(0x21 + symbol));
      break;
    case 2:
      if (symbol >= 0x700) throw Error("symbol_code: 2-byte alphabets hold at most 1792 symbols");
      append_utf8(out, 0x100 + static_cast<std::uint32_t>(symbol));
      break;
    case 3:
      if (symbol >= 216) throw Error("symbol_code: 3-byte alphabets hold at most 216 symbols");
      append_utf8(out, 0x4E00 + 97u * static_cast<std::uint32_t>(symbol));
      break;
    default:
      throw Error("symbol_code: bytes per symbol must be 1, 2 or 3");
  }
  return out;
}

namespace {

struct SyntheticLanguage {
  SyntheticLangSpec spec;
  std::vector<std::string> codes;  // by symbol index, permutation applied
};

// FNV-1a of the code, so a language keeps its mapping across corpora.
std::uint64_t mapping_seed(const std::string& code) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : code) h = (h ^ c) * 1099511628211ull;
  return h;
}

std::vector<SyntheticLanguage> realize(const std::vector<SyntheticLangSpec>& specs) {
  if (specs.size() < 2) throw Error("synthetic corpus: need a pivot and at least one other language");
  std::set<std::string> seen;
  const int alphabet = specs.front().alphabet_size;
  std::vector<SyntheticLanguage> out;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    if (s.code.empty() || !seen.insert(s.code).second) throw Error("synthetic corpus: empty or duplicate code '" + s.code + "'");
    if (s.alphabet_size < 1) throw Error("synthetic corpus: alphabet size must be positive");
    if (s.alphabet_size != alphabet) throw Error("synthetic corpus: all languages must share the alphabet size");
    std::vector<int> perm(static_cast<std::size_t>(alphabet));
    std::iota(perm.begin(), perm.end(), 0);
    if (i > 0) {
      std::mt19937_64 rng(mapping_seed(s.code));
      std::shuffle(perm.begin(), perm.end(), rng);
    }
    SyntheticLanguage lang{s, {}};
    for (int p : perm) {
      lang.codes.push_back(symbol_code(s.bytes_per_symbol, p));
      if (!is_valid_utf8(lang.codes.back())) throw Error("synthetic corpus: invalid byte code");
    }
    std::set<std::string> distinct(lang.codes.begin(), lang.codes.end());
    if (distinct.size() != lang.codes.size()) throw Error("synthetic corpus: symbol mapping is not injective");
    out.push_back(std::move(lang));
  }
  return out;
}

std::string spell(const SyntheticLanguage& lang, const std::vector<int>& symbols) {
  std::string s;
  for (int x : symbols) s += lang.codes[static_cast<std::size_t>(x)];
  return s;
}

template <typename Fn>
void generate(const std::vector<SyntheticLangSpec>& specs, const SyntheticOptions& options, Fn&& emit) {
  if (options.pairs < 1) throw Error("synthetic corpus: pairs must be positive");
  if (options.min_symbols < 1 || options.max_symbols < options.min_symbols)
    throw Error("synthetic corpus: need 1 <= min_symbols <= max_symbols");
  const auto langs = realize(specs);
  std::mt19937_64 rng(options.seed);
  std::uniform_int_distribution<int> length(options.min_symbols, options.max_symbols);
  std::uniform_int_distribution<int> symbol(0, specs.front().alphabet_size - 1);
  for (int i = 0; i < options.pairs; ++i) {
    std::vector<int> sym(static_cast<std::size_t>(length(rng)));
    for (auto& x : sym) x = symbol(rng);
    emit(i, langs, sym);
  }
}

}  // namespace

ParallelCorpus make_synthetic_corpus(const std::vector<SyntheticLangSpec>& specs, const SyntheticOptions& options) {
  ParallelCorpus c;
  generate(specs, options, [&](int i, const std::vector<SyntheticLanguage>& langs, const std::vector<int>& sym) {
    const std::size_t others = langs.size() - 1;
    const auto& x = langs[1 + static_cast<std::size_t>(i) % others];
    const auto& pivot = langs.front();
    if (x.spec.task == SyntheticTask::Copy) {
      const auto text = spell(x, sym);
      c.records.push_back({x.spec.code, x.spec.code, text, text});
    } else if ((static_cast<std::size_t>(i) / others) % 2 == 0) {
      c.records.push_back({x.spec.code, pivot.spec.code, spell(x, sym), spell(pivot, sym)});
    } else {
      c.records.push_back({pivot.spec.code, x.spec.code, spell(pivot, sym), spell(x, sym)});
    }
  });
  return c;
}

MultiParallelCorpus to_multi_parallel(const std::vector<SyntheticLangSpec>& specs, const SyntheticOptions& options) {
  MultiParallelCorpus m;
  for (const auto& s : specs) m.languages.push_back(s.code);
  m.sentences.resize(specs.size());
  generate(specs, options, [&](int, const std::vector<SyntheticLanguage>& langs, const std::vector<int>& sym) {
    for (std::size_t l = 0; l < langs.size(); ++l) m.sentences[l].push_back(spell(langs[l], sym));
  });
  return m;
}

MultiParallelCorpus parse_multi_parallel_tsv(std::istream& in) {
  MultiParallelCorpus m;
  std::string line;
  if (!std::getline(in, line)) throw Error("multi-parallel corpus: missing header row");
  m.languages = split_tabs(strip_cr(line));
  for (const auto& l : m.languages)
    if (l.empty()) throw Error("multi-parallel corpus: empty language code in header");
  m.sentences.resize(m.languages.size());
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    line = strip_cr(line);
    if (line.empty()) continue;
    auto f = split_tabs(line);
    if (f.size() != m.languages.size())
      throw Error("multi-parallel corpus line " + std::to_string(n) + ": expected " + std::to_string(m.languages.size()) +
                  " columns, got " + std::to_string(f.size()));
    for (std::size_t i = 0; i < f.size(); ++i) m.sentences[i].push_back(std::move(f[i]));
  }
  return m;
}

MultiParallelCorpus read_multi_parallel_tsv(const std::string& path) {
  auto in = open_input(path);
  return parse_multi_parallel_tsv(in);
}

}  // namespace moce
