// Small models and corpora shared by the trainer-level test suites.

#pragma once

#include <cstring>
#include <span>
#include <vector>

#include "rtdlab/rtd/config.hpp"
#include "rtdlab/text/batching.hpp"
#include "rtdlab/text/corpus.hpp"
#include "rtdlab/text/vocab.hpp"

namespace rtdlab::fixtures {

inline rtd::TrainConfig tiny_config(rtd::SharingMode mode, std::uint64_t seed = 1) {
  rtd::TrainConfig c;
  c.mode = mode;
  c.seed = seed;
  c.batch_size = 4;
  c.max_steps = 10;
  c.warmup_steps = 2;
  for (auto* e : {&c.generator, &c.discriminator}) {
    e->hidden = 16;
    e->n_heads = 2;
    e->ffn_inner = 32;
    e->max_rel_distance = 4;
    e->max_seq_len = 16;
  }
  c.generator.n_layers = 1;
  c.discriminator.n_layers = 2;
  return c;
}

struct TinyCorpus {
  text::Vocab vocab;
  std::vector<std::string> lines;
  std::vector<text::TokenSequence> sequences;
};

inline const TinyCorpus& tiny_corpus() {
  static const TinyCorpus corpus = [] {
    TinyCorpus c;
    c.lines = text::document_lines(text::corpus_synth(1, 3000, "tiny"));
    c.vocab = text::build_vocab(c.lines, 120);
    c.sequences = text::pretraining_sequences(c.vocab, c.lines, 16);
    return c;
  }();
  return corpus;
}

inline text::TokenBatch first_batch(std::size_t n, std::size_t offset = 0) {
  const auto& seqs = tiny_corpus().sequences;
  return text::make_batch(std::vector<text::TokenSequence>(seqs.begin() + static_cast<std::ptrdiff_t>(offset),
                                                           seqs.begin() + static_cast<std::ptrdiff_t>(offset + n)));
}

template <typename T>
bool same_bits(std::span<const T> a, std::span<const T> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

}  // namespace rtdlab::fixtures
