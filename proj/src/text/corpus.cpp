#include "rtdlab/text/corpus.hpp"

#include <array>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>

#include "rtdlab/text/vocab.hpp"
#include "rtdlab/util/rng.hpp"

namespace rtdlab::text {

namespace {

struct Lexicon {
  std::vector<std::string> nouns;
  std::vector<std::string> verbs;
  std::vector<std::string> adjectives;
};

struct Grammar {
  GrammarInfo info;
  std::vector<Lexicon> topics;
  Lexicon shared;
};

struct LexiconSizes {
  std::size_t nouns, verbs, adjectives;
};

constexpr std::array kOnsets = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t",
                                "v", "z", "br", "cl", "dr", "gr", "pl", "st", "tr", "sk"};
constexpr std::array kVowels = {"a", "e", "i", "o", "u", "ai", "ou", "ee"};
constexpr std::array kCodas = {"", "", "n", "r", "l", "k", "m", "nd", "rt", "p"};

const std::set<std::string>& reserved_words() {
  static const std::set<std::string> words = {
      "the", "a", "this", "that", "every", "each", "one", "these", "those", "some", "many",
      "few", "all", "in", "on", "near", "with", "under", "over", "by", "for", "and", "but",
      "while", "because", "when", "is", "are", "was", "were", "it", "they", "we", "she", "he"};
  return words;
}

std::string make_stem(Rng& rng) {
  const std::size_t syllables = uniform01(rng) < 0.75 ? 2 : 3;
  std::string w;
  for (std::size_t s = 0; s < syllables; ++s) {
    w += kOnsets[uniform_below(rng, kOnsets.size())];
    w += kVowels[uniform_below(rng, kVowels.size())];
    if (s + 1 == syllables) w += kCodas[uniform_below(rng, kCodas.size())];
  }
  return w;
}

Lexicon make_lexicon(Rng& rng, std::set<std::string>& used, LexiconSizes sizes) {
  auto draw = [&](std::size_t n) {
    std::vector<std::string> out;
    while (out.size() < n) {
      auto w = make_stem(rng);
      // keep inflections unambiguous
      if (w.back() == 's' || w.back() == 'e') continue;
      if (used.count(w) || reserved_words().count(w)) continue;
      used.insert(w);
      out.push_back(std::move(w));
    }
    return out;
  };
  Lexicon lex;
  lex.nouns = draw(sizes.nouns);
  lex.verbs = draw(sizes.verbs);
  lex.adjectives = draw(sizes.adjectives);
  return lex;
}

Grammar make_grammar(std::string id, std::vector<std::string> topic_names, LexiconSizes topic_sizes,
                     LexiconSizes shared_sizes, std::uint64_t lexicon_seed) {
  Grammar g;
  g.info.id = std::move(id);
  g.info.n_topics = topic_names.size();
  g.info.topic_names = std::move(topic_names);
  Rng rng(lexicon_seed);
  std::set<std::string> used;
  g.shared = make_lexicon(rng, used, shared_sizes);
  for (std::size_t t = 0; t < g.info.n_topics; ++t) g.topics.push_back(make_lexicon(rng, used, topic_sizes));
  return g;
}

const Grammar& lookup(std::string_view grammar_id) {
  static const Grammar default_grammar =
      make_grammar("default", {"harbor", "orchard", "foundry", "observatory"}, {40, 24, 16},
                   {30, 20, 12}, 0x5eed0001ULL);
  static const Grammar tiny_grammar =
      make_grammar("tiny", {"harbor", "orchard"}, {8, 5, 4}, {6, 4, 3}, 0x5eed0002ULL);
  if (grammar_id == "default") return default_grammar;
  if (grammar_id == "tiny") return tiny_grammar;
  throw std::invalid_argument("unknown grammar_id '" + std::string(grammar_id) + "'");
}

// Zipf-like rank weights: the r-th entry has weight 1 / (r + 1).
const std::string& pick_zipf(Rng& rng, const std::vector<std::string>& list) {
  double total = 0.0;
  for (std::size_t r = 0; r < list.size(); ++r) total += 1.0 / static_cast<double>(r + 1);
  double u = uniform01(rng) * total;
  for (std::size_t r = 0; r < list.size(); ++r) {
    u -= 1.0 / static_cast<double>(r + 1);
    if (u < 0.0) return list[r];
  }
  return list.back();
}

template <std::size_t N>
const char* pick(Rng& rng, const std::array<const char*, N>& options) {
  return options[uniform_below(rng, N)];
}

class SentenceWriter {
 public:
  SentenceWriter(const Grammar& g, int topic, double topical_rate, Rng& rng)
      : g_(g), topic_(topic), topical_rate_(topical_rate), rng_(rng) {}

  std::vector<std::string> sentence() {
    words_.clear();
    switch (uniform_below(rng_, 6)) {
      case 0: {  // NP VP PREP NP .
        const bool plural = coin();
        noun_phrase(plural);
        verb(plural ? "" : "s");
        emit(pick(rng_, kPreps));
        noun_phrase(coin());
        break;
      }
      case 1:  // NP VERB-ed NP .
        noun_phrase(coin());
        verb("ed");
        noun_phrase(coin());
        break;
      case 2: {  // NP is/are ADJ .
        const bool plural = coin();
        noun_phrase(plural);
        emit(plural ? (coin() ? "are" : "were") : (coin() ? "is" : "was"));
        adjective();
        break;
      }
      case 3: {  // NP is/are VERB-ing NP .
        const bool plural = coin();
        noun_phrase(plural);
        emit(plural ? "are" : "is");
        verb("ing");
        noun_phrase(coin());
        break;
      }
      case 4:  // CONJ NP VERB-ed , NP VERB-ed NP .
        emit(pick(rng_, kConjunctions));
        noun_phrase(coin());
        verb("ed");
        emit(",");
        noun_phrase(coin());
        verb("ed");
        noun_phrase(coin());
        break;
      default:  // PRON VERB-ed NP and NP .
        emit(pick(rng_, kPronouns));
        verb("ed");
        noun_phrase(coin());
        emit("and");
        noun_phrase(coin());
        break;
    }
    emit(".");
    return words_;
  }

 private:
  static constexpr std::array<const char*, 7> kSingularDets = {"the", "a", "this", "that", "every", "each", "one"};
  static constexpr std::array<const char*, 7> kPluralDets = {"the", "these", "those", "some", "many", "few", "all"};
  static constexpr std::array<const char*, 8> kPreps = {"in", "on", "near", "with", "under", "over", "by", "for"};
  static constexpr std::array<const char*, 4> kConjunctions = {"while", "because", "when", "but"};
  static constexpr std::array<const char*, 5> kPronouns = {"it", "they", "we", "she", "he"};

  bool coin() { return uniform01(rng_) < 0.5; }
  void emit(std::string w) { words_.push_back(std::move(w)); }

  const Lexicon& lexicon() {
    return uniform01(rng_) < topical_rate_ ? g_.topics[static_cast<std::size_t>(topic_)] : g_.shared;
  }

  void noun_phrase(bool plural) {
    emit(plural ? pick(rng_, kPluralDets) : pick(rng_, kSingularDets));
    if (uniform01(rng_) < 0.4) adjective();
    std::string n = pick_zipf(rng_, lexicon().nouns);
    if (plural) n += "s";
    emit(std::move(n));
  }

  void verb(const char* suffix) { emit(pick_zipf(rng_, lexicon().verbs) + suffix); }
  void adjective() { emit(pick_zipf(rng_, lexicon().adjectives)); }

  const Grammar& g_;
  int topic_;
  double topical_rate_;
  Rng& rng_;
  std::vector<std::string> words_;
};

std::string join(const std::vector<std::string>& words) {
  std::string out;
  for (const auto& w : words) {
    if (!out.empty()) out.push_back(' ');
    out += w;
  }
  return out;
}

// Next topic from shuffled blocks of all topics.
class TopicCycle {
 public:
  TopicCycle(std::size_t n, Rng& rng) : n_(n), rng_(rng) {}
  int next() {
    if (pos_ == block_.size()) {
      block_.resize(n_);
      std::iota(block_.begin(), block_.end(), 0);
      for (std::size_t i = n_; i > 1; --i) std::swap(block_[i - 1], block_[uniform_below(rng_, i)]);
      pos_ = 0;
    }
    return block_[pos_++];
  }

 private:
  std::size_t n_;
  Rng& rng_;
  std::vector<int> block_;
  std::size_t pos_ = 0;
};

}  // namespace

const GrammarInfo& grammar_info(std::string_view grammar_id) { return lookup(grammar_id).info; }

std::vector<Document> corpus_synth(std::uint64_t seed, std::size_t n_tokens, std::string_view grammar_id) {
  if (n_tokens == 0) throw std::invalid_argument("corpus_synth: n_tokens must be positive");
  const Grammar& g = lookup(grammar_id);
  Rng rng = make_stream(seed, "corpus");
  TopicCycle topics(g.info.n_topics, rng);
  std::vector<Document> docs;
  std::size_t produced = 0;
  while (produced < n_tokens) {
    Document doc;
    doc.topic = topics.next();
    SentenceWriter writer(g, doc.topic, 0.75, rng);
    const std::size_t sentences = 2 + uniform_below(rng, 3);
    std::vector<std::string> words;
    for (std::size_t s = 0; s < sentences; ++s) {
      auto sw = writer.sentence();
      words.insert(words.end(), sw.begin(), sw.end());
    }
    produced += words.size();
    doc.text = join(words);
    docs.push_back(std::move(doc));
  }
  return docs;
}

std::vector<Document> synth_labeled(std::uint64_t seed, std::size_t n_docs, std::string_view grammar_id,
                                    double topical_rate, std::size_t sentences_per_doc) {
  const Grammar& g = lookup(grammar_id);
  Rng rng = make_stream(seed, "labeled");
  TopicCycle topics(g.info.n_topics, rng);
  std::vector<Document> docs;
  docs.reserve(n_docs);
  for (std::size_t d = 0; d < n_docs; ++d) {
    Document doc;
    doc.topic = topics.next();
    SentenceWriter writer(g, doc.topic, topical_rate, rng);
    std::vector<std::string> words;
    for (std::size_t s = 0; s < sentences_per_doc; ++s) {
      auto sw = writer.sentence();
      words.insert(words.end(), sw.begin(), sw.end());
    }
    doc.text = join(words);
    docs.push_back(std::move(doc));
  }
  return docs;
}

std::vector<std::string> document_lines(const std::vector<Document>& docs) {
  std::vector<std::string> lines;
  lines.reserve(docs.size());
  for (const auto& d : docs) lines.push_back(d.text);
  return lines;
}

void write_corpus(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::ios_base::failure("cannot write corpus file " + path.string());
  for (const auto& l : lines) os << l << '\n';
  if (!os) throw std::ios_base::failure("failed writing corpus file " + path.string());
}

std::vector<std::string> read_corpus(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::ios_base::failure("cannot read corpus file " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(std::move(line));
  }
  return lines;
}

}  // namespace rtdlab::text
