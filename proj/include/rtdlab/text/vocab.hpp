// Word-piece vocabulary: construction, greedy longest-match encoding,
// decoding and the one-piece-per-line vocab file.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace rtdlab::text {

using TokenId = std::int32_t;

// Special pieces occupy the first five indices, in this order.
inline constexpr TokenId kPad = 0;
inline constexpr TokenId kUnk = 1;
inline constexpr TokenId kCls = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kMask = 4;
inline constexpr TokenId kNumSpecial = 5;

inline constexpr std::string_view kContinuation = "##";

class Vocab {
 public:
  Vocab() = default;
  // `pieces` must start with the five specials in index order.
  explicit Vocab(std::vector<std::string> pieces);

  std::size_t size() const { return pieces_.size(); }
  const std::string& piece(TokenId id) const { return pieces_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& pieces() const { return pieces_; }
  // kUnk when absent.
  TokenId id(std::string_view piece) const;
  bool contains(std::string_view piece) const;
  static bool is_special(TokenId id) { return id >= 0 && id < kNumSpecial; }

  std::vector<TokenId> encode(std::string_view text) const;
  std::vector<std::string> tokenize(std::string_view text) const;
  std::string decode(const std::vector<TokenId>& ids) const;

  void save(const std::filesystem::path& path) const;
  static Vocab load(const std::filesystem::path& path);

  static const std::vector<std::string>& special_pieces();

 private:
  std::vector<std::string> pieces_;
  std::unordered_map<std::string, TokenId> index_;
};

// Lowercases ASCII, collapses whitespace and splits ASCII punctuation into
// standalone words. decode(encode(t)) == join(normalize_words(t), " ") when
// no word maps to UNK.
std::vector<std::string> normalize_words(std::string_view text);

// Greedy frequency-based construction. The result holds at most
// `target_size` entries in total, specials included. Single characters (word
// initial and "##" continuation forms) are taken first, most frequent first;
// the remaining budget goes to whole words, "##" suffixes of 2-4 characters
// and word prefixes of 3+ characters, ranked by frequency times length.
// Ties break lexicographically.
Vocab build_vocab(const std::vector<std::string>& corpus_lines, std::size_t target_size);

// Fraction of words in `lines` that encode to at least one UNK piece.
double unk_rate(const Vocab& vocab, const std::vector<std::string>& lines);

}  // namespace rtdlab::text
