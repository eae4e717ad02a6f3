#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "tvae/batch.hpp"
#include "tvae/rng.hpp"

namespace tvae::data {

using Sequence = std::vector<std::int32_t>;

enum class Tokenization { word, character };

std::string to_string(Tokenization t);
Tokenization parse_tokenization(const std::string& s);

/// Splits on runs of ASCII whitespace; character mode yields UTF-8 code
/// points with each whitespace run collapsed to the token "<sp>".
std::vector<std::string> tokenize(const std::string& line, Tokenization mode);

/// Token <-> id bijection. Ids 0..3 are pad, start, end and unk.
class Vocab {
 public:
  static constexpr const char* kHeader = "#vocab v1";
  static constexpr const char* kSpace = "<sp>";

  Vocab();

  /// Most frequent tokens first, ties broken lexicographically. max_size
  /// counts the reserved ids (0 = unlimited); tokens seen fewer than
  /// min_freq times are left out and later map to unk.
  static Vocab build(const std::vector<std::string>& lines, std::size_t max_size,
                     std::size_t min_freq = 1, Tokenization mode = Tokenization::word);

  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  Tokenization mode() const { return mode_; }
  bool contains(const std::string& token) const { return ids_.count(token) != 0; }
  std::int32_t id(const std::string& token) const;
  const std::string& token(std::int32_t id) const;

  Sequence encode(const std::string& line) const;
  /// Reserved ids render as <pad>, <s>, </s>, <unk>.
  std::string decode(const Sequence& ids) const;

  bool operator==(const Vocab& other) const {
    return mode_ == other.mode_ && tokens_ == other.tokens_;
  }

 private:
  void add(const std::string& token);

  Tokenization mode_ = Tokenization::word;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> ids_;
};

/// Non-blank lines of a UTF-8 text file, trailing CR/whitespace stripped.
std::vector<std::string> load_lines(const std::filesystem::path& path);
void save_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);

std::vector<Sequence> encode_corpus(const std::vector<std::string>& lines, const Vocab& vocab);

/// Deletes each token independently with probability p, keeping order. If
/// every token would go, one uniformly chosen token survives.
Sequence delete_noise(const Sequence& ids, double p, Rng& rng);

struct BatchOptions {
  std::size_t batch_size = 32;
  std::size_t max_len = 32;  // framed length; sentences are cut to max_len - 2
  double noise = 0.0;        // deletion probability on the source side
  bool shuffle = true;
};

/// Source: noised tokens + end. Target in: start + clean tokens. Target out:
/// clean tokens + end. The rng drives the shuffle, then the noise in batch
/// order.
std::vector<Batch> batchify(const std::vector<Sequence>& sequences, const BatchOptions& options,
                            Rng& rng);

std::size_t batch_count(std::size_t examples, std::size_t batch_size);

/// Templated-grammar corpus: each line draws one of eight topics, a sentence
/// template and topic words. About 200 distinct words.
std::vector<std::string> synthetic_corpus(std::size_t lines, std::uint64_t seed);

}  // namespace tvae::data
