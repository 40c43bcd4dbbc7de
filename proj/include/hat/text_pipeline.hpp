#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

namespace hat {

inline constexpr int kPadId = 0;
inline constexpr int kBosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReserved = 4;

/// Word-level vocabulary. Ids 0..3 are PAD, BOS, EOS, UNK; corpus tokens
/// start at 4 in frequency order.
class Vocabulary {
 public:
  Vocabulary();

  /// Ranks tokens by descending count, then lexicographically. Keeps at
  /// most `max_size` corpus tokens with count >= `min_freq`. `specials` are
  /// inserted right after the reserved ids, ahead of corpus tokens.
  static Vocabulary build(std::span<const std::string> corpus, std::size_t max_size,
                          std::size_t min_freq = 1, std::span<const std::string> specials = {});

  int id(std::string_view token) const;  // kUnkId when absent
  const std::string& token(int id) const;
  bool contains(std::string_view token) const;
  std::size_t size() const { return tokens_.size(); }

  std::vector<int> encode(std::span<const std::string> tokens) const;
  /// Joins tokens with single spaces; reserved ids are skipped when
  /// `skip_special` is set.
  std::string decode(std::span<const int> ids, bool skip_special = true) const;

  /// One corpus token per line; line number (0-based) = id - 4.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  int append(const std::string& token);

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

std::vector<std::string> tokenize(std::string_view text, bool lowercase = false);

/// Model-ready example. `segment_ids` has one entry per source token.
struct EncodedExample {
  std::vector<int> source_ids;
  std::vector<int> bos_positions;
  std::vector<int> segment_ids;
  std::vector<int> target_ids;  // ends in EOS when non-empty
  int doc_index = -1;            // set for chunked documents
  int chunk_index = -1;
};

/// Checks the structural invariants; throws std::invalid_argument naming the
/// first violation.
void validate(const EncodedExample& ex, std::size_t max_source_len, std::size_t max_target_len);

/// Splits at '.', '!' or '?' followed by whitespace or end of text. Pieces
/// are trimmed and empty pieces dropped.
std::vector<std::string> segment_sentences(std::string_view text);

/// BOS s1 BOS s2 ... truncated to `max_source_len`. A trailing BOS with no
/// following token is dropped by truncation.
EncodedExample encode_document(std::span<const std::string> sentences, const Vocabulary& vocab,
                               std::size_t max_source_len, bool lowercase = false);

struct Turn {
  std::string role;
  std::string text;
};

/// Each turn becomes BOS + role tokens + utterance tokens; all tokens of a
/// turn carry the segment id of its role (first-appearance order).
EncodedExample encode_conversation(std::span<const Turn> turns, const Vocabulary& vocab,
                                   std::size_t max_segments, std::size_t max_source_len,
                                   bool lowercase = false);

/// Tokens + EOS, truncated so that EOS stays the final token.
std::vector<int> encode_target(std::string_view text, const Vocabulary& vocab,
                               std::size_t max_target_len, bool lowercase = false);

/// Greedy packing of consecutive segments: a chunk takes segments while its
/// summed length stays <= max_tokens. Returns segment indices per chunk.
std::vector<std::vector<std::size_t>> chunk_document(std::span<const std::size_t> source_lengths,
                                                     std::size_t max_tokens = 512);

struct AlignedSegment {
  std::string source;
  std::string target;
};

struct ChunkPair {
  std::vector<std::size_t> segments;
  std::vector<std::string> source_sentences;
  std::string target;
};

/// Chunks an aligned document. Source lengths count one BOS per segment so
/// that the encoded chunk fits `max_tokens`.
std::vector<ChunkPair> chunk_aligned_document(std::span<const AlignedSegment> segments,
                                              std::size_t max_tokens = 512, bool lowercase = false);

/// Dense row-major matrix used for padded batches.
template <typename T>
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}
  T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

struct Batch {
  Matrix<int> source;
  Matrix<int> target;
  Matrix<std::uint8_t> source_mask;
  Matrix<std::uint8_t> target_mask;
  Matrix<std::uint8_t> bos_mask;
  Matrix<int> segments;

  std::size_t size() const { return source.rows; }
  /// Recovers the unpadded example in row `r`.
  EncodedExample row(std::size_t r) const;
};

Batch collate(std::span<const EncodedExample> examples, int pad_id = kPadId);

// ---- dataset ingestion ----------------------------------------------------

struct DocumentRecord {
  std::string source;
  std::string target;
};
struct ConversationRecord {
  std::vector<Turn> turns;
  std::string target;
};
struct TranslationRecord {
  std::vector<AlignedSegment> segments;
};
using RawRecord = std::variant<DocumentRecord, ConversationRecord, TranslationRecord>;

enum class PreprocessMode { document, conversation, mt };
PreprocessMode parse_mode(std::string_view name);

/// Parses one JSON Lines record; the record kind is inferred from its keys.
RawRecord parse_record(std::string_view json_line);
std::vector<RawRecord> read_records(const std::filesystem::path& path);

/// All strings a vocabulary should be induced from.
std::vector<std::string> corpus_texts(std::span<const RawRecord> records);

using TokenFilter = std::function<std::vector<std::string>(std::vector<std::string>)>;

struct PipelineOptions {
  std::size_t max_source_len = 1024;
  std::size_t max_target_len = 256;
  std::size_t max_segments = 8;
  std::size_t chunk_tokens = 512;
  bool lowercase = false;
  TokenFilter filter;  // applied to utterance tokens; pass-through when empty
};

std::vector<EncodedExample> encode_record(const RawRecord& record, int doc_index, PreprocessMode mode,
                                          const Vocabulary& vocab, const PipelineOptions& options);

void write_encoded(const std::filesystem::path& path, std::span<const EncodedExample> examples);
std::vector<EncodedExample> read_encoded(const std::filesystem::path& path);

}  // namespace hat
