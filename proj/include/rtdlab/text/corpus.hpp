// Synthetic templated-grammar corpora with topic-conditioned vocabularies.
// See docs/grammar.md for the grammar itself.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace rtdlab::text {

struct Document {
  std::string text;
  int topic = 0;
};

struct GrammarInfo {
  std::string id;
  std::size_t n_topics = 0;
  std::vector<std::string> topic_names;
};

// Known ids: "default" (4 topics) and "tiny" (2 topics, small lexicon).
// Throws std::invalid_argument for anything else.
const GrammarInfo& grammar_info(std::string_view grammar_id);

// Generates whole documents (2-4 sentences, one topic each) until at least
// `n_tokens` normalized words have been produced. Topics cycle through
// shuffled blocks, so per-topic document counts differ by at most one.
std::vector<Document> corpus_synth(std::uint64_t seed, std::size_t n_tokens,
                                   std::string_view grammar_id);

// Short labeled documents for classification. `topical_rate` is the chance
// that an open-class word comes from the topic lexicon rather than the
// shared one; lower values make the task harder.
std::vector<Document> synth_labeled(std::uint64_t seed, std::size_t n_docs, std::string_view grammar_id,
                                    double topical_rate, std::size_t sentences_per_doc);

std::vector<std::string> document_lines(const std::vector<Document>& docs);

// UTF-8, one document per line.
void write_corpus(const std::filesystem::path& path, const std::vector<std::string>& lines);
std::vector<std::string> read_corpus(const std::filesystem::path& path);

}  // namespace rtdlab::text
