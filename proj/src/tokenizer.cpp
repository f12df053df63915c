#include "moce/tokenizer.hpp"

#include "moce/tensor.hpp"

#include <algorithm>
#include <cstdint>

namespace moce {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

constexpr std::string_view kReplacement = "\xEF\xBF\xBD";

// Number of bytes of the well-formed sequence starting at `s[i]`, or the
// length of the maximal ill-formed prefix negated (always >= 1 byte).
int utf8_step(std::string_view s, std::size_t i) {
  const auto b0 = static_cast<std::uint8_t>(s[i]);
  if (b0 < 0x80) return 1;
  int need = 0;
  std::uint8_t lo = 0x80, hi = 0xBF;
  if (b0 >= 0xC2 && b0 <= 0xDF) {
    need = 1;
  } else if (b0 >= 0xE0 && b0 <= 0xEF) {
    need = 2;
    if (b0 == 0xE0) lo = 0xA0;
    if (b0 == 0xED) hi = 0x9F;
  } else if (b0 >= 0xF0 && b0 <= 0xF4) {
    need = 3;
    if (b0 == 0xF0) lo = 0x90;
    if (b0 == 0xF4) hi = 0x8F;
  } else {
    return -1;
  }
  for (int k = 1; k <= need; ++k) {
    if (i + static_cast<std::size_t>(k) >= s.size()) return -k;
    const auto b = static_cast<std::uint8_t>(s[i + static_cast<std::size_t>(k)]);
    const std::uint8_t l = k == 1 ? lo : 0x80, h = k == 1 ? hi : 0xBF;
    if (b < l || b > h) return -k;
  }
  return need + 1;
}

}  // namespace

int Vocab::language_id(std::string_view code) const {
  auto it = ids_.find(std::string(code));
  if (it == ids_.end()) throw Error("unknown language code '" + std::string(code) + "'");
  return it->second;
}

const std::string& Vocab::language_code(int id) const {
  if (!is_language_id(id)) throw Error("id " + std::to_string(id) + " is not a language token");
  return languages_[static_cast<std::size_t>(id - kFirstLanguageId)];
}

Vocab build_vocab(std::span<const std::string> codes) {
  if (codes.empty()) throw Error("empty language set");
  std::vector<std::string> sorted;
  for (const auto& c : codes) {
    auto t = trim(c);
    if (t.empty()) throw Error("empty language code");
    sorted.push_back(std::move(t));
  }
  std::sort(sorted.begin(), sorted.end());
  if (auto dup = std::adjacent_find(sorted.begin(), sorted.end()); dup != sorted.end())
    throw Error("duplicate language code '" + *dup + "'");
  Vocab v;
  v.languages_ = std::move(sorted);
  for (std::size_t i = 0; i < v.languages_.size(); ++i)
    v.ids_.emplace(v.languages_[i], kFirstLanguageId + static_cast<int>(i));
  return v;
}

Vocab build_vocab(std::initializer_list<std::string> codes) {
  return build_vocab(std::span<const std::string>(codes.begin(), codes.size()));
}

TokenSeq encode(std::string_view text, std::string_view lang, const Vocab& vocab) {
  TokenSeq seq;
  seq.lang = std::string(lang);
  seq.ids.reserve(text.size() + 2);
  seq.ids.push_back(vocab.language_id(lang));
  for (char c : text) seq.ids.push_back(static_cast<std::uint8_t>(c));
  seq.ids.push_back(kEosId);
  return seq;
}

std::string sanitize_utf8(std::string_view bytes) {
  std::string out;
  out.reserve(bytes.size());
  std::size_t i = 0;
  while (i < bytes.size()) {
    const int step = utf8_step(bytes, i);
    if (step > 0) {
      out.append(bytes.substr(i, static_cast<std::size_t>(step)));
      i += static_cast<std::size_t>(step);
    } else {
      out.append(kReplacement);
      i += static_cast<std::size_t>(-step);
    }
  }
  return out;
}

bool is_valid_utf8(std::string_view bytes) {
  std::size_t i = 0;
  while (i < bytes.size()) {
    const int step = utf8_step(bytes, i);
    if (step < 0) return false;
    i += static_cast<std::size_t>(step);
  }
  return true;
}

std::string decode(std::span<const int> ids, const Vocab&) {
  std::string bytes;
  bytes.reserve(ids.size());
  for (int id : ids)
    if (Vocab::is_byte(id)) bytes.push_back(static_cast<char>(id));
  return sanitize_utf8(bytes);
}

}  // namespace moce
