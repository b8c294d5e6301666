#include "rtdlab/text/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <tuple>

namespace rtdlab::text {

namespace {

constexpr std::size_t kMaxCharsPerWord = 100;

bool is_punct(char c) { return std::ispunct(static_cast<unsigned char>(c)) != 0; }
bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

}  // namespace

const std::vector<std::string>& Vocab::special_pieces() {
  static const std::vector<std::string> specials = {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};
  return specials;
}

Vocab::Vocab(std::vector<std::string> pieces) : pieces_(std::move(pieces)) {
  const auto& specials = special_pieces();
  if (pieces_.size() < specials.size() ||
      !std::equal(specials.begin(), specials.end(), pieces_.begin())) {
    throw std::invalid_argument("vocab must begin with [PAD] [UNK] [CLS] [SEP] [MASK]");
  }
  for (std::size_t i = 0; i < pieces_.size(); ++i) {
    if (pieces_[i].empty()) throw std::invalid_argument("vocab: empty piece at index " + std::to_string(i));
    if (!index_.emplace(pieces_[i], static_cast<TokenId>(i)).second) {
      throw std::invalid_argument("vocab: duplicate piece '" + pieces_[i] + "'");
    }
  }
}

TokenId Vocab::id(std::string_view piece) const {
  auto it = index_.find(std::string(piece));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view piece) const { return index_.count(std::string(piece)) > 0; }

std::vector<std::string> normalize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) words.push_back(std::move(current));
    current.clear();
  };
  for (char c : text) {
    if (is_space(c)) {
      flush();
    } else if (is_punct(c)) {
      flush();
      words.emplace_back(1, c);
    } else {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  flush();
  return words;
}

std::vector<std::string> Vocab::tokenize(std::string_view text) const {
  std::vector<std::string> out;
  for (const auto& word : normalize_words(text)) {
    if (word.size() > kMaxCharsPerWord) {
      out.push_back(special_pieces()[kUnk]);
      continue;
    }
    std::vector<std::string> sub;
    bool bad = false;
    std::size_t start = 0;
    while (start < word.size()) {
      std::size_t end = word.size();
      std::string match;
      while (start < end) {
        std::string candidate = word.substr(start, end - start);
        if (start > 0) candidate = std::string(kContinuation) + candidate;
        if (contains(candidate)) {
          match = std::move(candidate);
          break;
        }
        --end;
      }
      if (match.empty()) {
        bad = true;
        break;
      }
      sub.push_back(std::move(match));
      start = end;
    }
    if (bad) {
      out.push_back(special_pieces()[kUnk]);
    } else {
      out.insert(out.end(), sub.begin(), sub.end());
    }
  }
  return out;
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& p : tokenize(text)) ids.push_back(id(p));
  return ids;
}

std::string Vocab::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (auto tid : ids) {
    const std::string& p = piece(tid);
    if (p.rfind(kContinuation, 0) == 0 && !out.empty()) {
      out += p.substr(kContinuation.size());
    } else {
      if (!out.empty()) out.push_back(' ');
      out += p;
    }
  }
  return out;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::ios_base::failure("cannot write vocab file " + path.string());
  for (const auto& p : pieces_) os << p << '\n';
  if (!os) throw std::ios_base::failure("failed writing vocab file " + path.string());
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::ios_base::failure("cannot read vocab file " + path.string());
  std::vector<std::string> pieces;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    pieces.push_back(line);
  }
  return Vocab(std::move(pieces));
}

Vocab build_vocab(const std::vector<std::string>& corpus_lines, std::size_t target_size) {
  std::map<std::string, std::size_t> word_freq;
  for (const auto& line : corpus_lines) {
    for (auto& w : normalize_words(line)) {
      if (w.size() <= kMaxCharsPerWord) ++word_freq[w];
    }
  }
  if (word_freq.empty()) throw std::invalid_argument("build_vocab: corpus is empty");

  const auto& specials = Vocab::special_pieces();
  std::vector<std::string> pieces(specials.begin(), specials.end());
  if (target_size <= pieces.size()) return Vocab(std::move(pieces));
  std::size_t budget = target_size - pieces.size();
  std::set<std::string> taken(pieces.begin(), pieces.end());

  using Ranked = std::tuple<std::size_t, std::string>;  // (score, piece)
  auto take_ranked = [&](std::map<std::string, std::size_t> scores) {
    std::vector<Ranked> ranked;
    for (auto& [p, s] : scores) {
      if (!taken.count(p)) ranked.emplace_back(s, p);
    }
    std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
      if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
      return std::get<1>(a) < std::get<1>(b);
    });
    for (auto& [s, p] : ranked) {
      if (budget == 0) break;
      pieces.push_back(p);
      taken.insert(p);
      --budget;
    }
  };

  std::map<std::string, std::size_t> chars;
  for (const auto& [w, f] : word_freq) {
    chars[w.substr(0, 1)] += f;
    for (std::size_t i = 1; i < w.size(); ++i) chars[std::string(kContinuation) + w[i]] += f;
  }
  take_ranked(std::move(chars));

  std::map<std::string, std::size_t> candidates;
  for (const auto& [w, f] : word_freq) {
    if (w.size() >= 2) candidates[w] += f * w.size();
    for (std::size_t len = 2; len <= 4 && len < w.size(); ++len) {
      candidates[std::string(kContinuation) + w.substr(w.size() - len)] += f * len;
    }
    for (std::size_t len = 3; len < w.size(); ++len) candidates[w.substr(0, len)] += f * len;
  }
  take_ranked(std::move(candidates));
  return Vocab(std::move(pieces));
}

double unk_rate(const Vocab& vocab, const std::vector<std::string>& lines) {
  std::size_t words = 0, unknown = 0;
  for (const auto& line : lines) {
    for (const auto& w : normalize_words(line)) {
      ++words;
      const auto ids = vocab.encode(w);
      if (std::find(ids.begin(), ids.end(), kUnk) != ids.end()) ++unknown;
    }
  }
  return words ? static_cast<double>(unknown) / static_cast<double>(words) : 0.0;
}

}  // namespace rtdlab::text
