#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace moce {

inline constexpr int kPadId = 256;
inline constexpr int kEosId = 257;
inline constexpr int kFirstLanguageId = 258;

/// Byte vocabulary: ids 0..255 are raw byte values, followed by PAD, EOS and
/// one token per language code in sorted code order.
class Vocab {
 public:
  Vocab() = default;

  int size() const { return kFirstLanguageId + static_cast<int>(languages_.size()); }
  int language_id(std::string_view code) const;
  bool has_language(std::string_view code) const { return ids_.contains(std::string(code)); }
  bool is_language_id(int id) const { return id >= kFirstLanguageId && id < size(); }
  const std::string& language_code(int id) const;
  const std::vector<std::string>& languages() const { return languages_; }

  static bool is_byte(int id) { return id >= 0 && id < 256; }

  friend Vocab build_vocab(std::span<const std::string> codes);
  friend bool operator==(const Vocab& a, const Vocab& b) { return a.languages_ == b.languages_; }

 private:
  std::vector<std::string> languages_;
  std::unordered_map<std::string, int> ids_;
};

/// Encoded sentence: [<lang>] ++ utf8 bytes ++ [EOS].
struct TokenSeq {
  std::vector<int> ids;
  std::string lang;
};

/// Codes are trimmed; the result is independent of input order. Throws on an
/// empty set, an empty code, or a duplicate.
Vocab build_vocab(std::span<const std::string> codes);
Vocab build_vocab(std::initializer_list<std::string> codes);

TokenSeq encode(std::string_view text, std::string_view lang, const Vocab& vocab);

/// Total: drops language, PAD, EOS and out-of-range ids, then decodes the
/// remaining bytes as UTF-8 with U+FFFD for each maximal ill-formed subpart.
std::string decode(std::span<const int> ids, const Vocab& vocab);
inline std::string decode(const TokenSeq& seq, const Vocab& vocab) { return decode(seq.ids, vocab); }

/// Replaces ill-formed UTF-8 subsequences with U+FFFD.
std::string sanitize_utf8(std::string_view bytes);
bool is_valid_utf8(std::string_view bytes);

}  // namespace moce
