#include "hat/text_pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <stdexcept>

#include "json.hpp"

namespace hat {
namespace {

const std::vector<std::string> kReservedTokens = {"<pad>", "<s>", "</s>", "<unk>"};

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

// Drops a trailing BOS left without content by truncation.
void truncate_source(EncodedExample& ex, std::size_t max_len) {
  if (ex.source_ids.size() > max_len) {
    ex.source_ids.resize(max_len);
    ex.segment_ids.resize(max_len);
  }
  while (!ex.source_ids.empty() && ex.source_ids.back() == kBosId) {
    ex.source_ids.pop_back();
    ex.segment_ids.pop_back();
  }
  std::erase_if(ex.bos_positions,
                [&](int p) { return static_cast<std::size_t>(p) >= ex.source_ids.size(); });
}

}  // namespace

Vocabulary::Vocabulary() {
  for (const auto& t : kReservedTokens) append(t);
}

int Vocabulary::append(const std::string& token) {
  const auto [it, inserted] = ids_.emplace(token, static_cast<int>(tokens_.size()));
  if (!inserted) throw std::invalid_argument("duplicate vocabulary token '" + token + "'");
  tokens_.push_back(token);
  return it->second;
}

Vocabulary Vocabulary::build(std::span<const std::string> corpus, std::size_t max_size,
                             std::size_t min_freq, std::span<const std::string> specials) {
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& text : corpus)
    for (auto& tok : tokenize(text)) ++counts[tok];
  Vocabulary vocab;
  for (const auto& s : specials) vocab.append(s);
  std::vector<std::pair<std::string, std::size_t>> ranked;
  for (auto& [tok, c] : counts)
    if (c >= min_freq && !vocab.contains(tok)) ranked.emplace_back(tok, c);
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  if (ranked.size() > max_size) ranked.resize(max_size);
  for (const auto& [tok, c] : ranked) vocab.append(tok);
  return vocab;
}

int Vocabulary::id(std::string_view token) const {
  const auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(tokens_.size()));
  return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const { return ids_.contains(std::string(token)); }

std::vector<int> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id(t));
  return out;
}

std::string Vocabulary::decode(std::span<const int> ids, bool skip_special) const {
  std::string out;
  for (int id : ids) {
    if (skip_special && id < kNumReserved && id != kUnkId) continue;
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (std::size_t i = kNumReserved; i < tokens_.size(); ++i) os << tokens_[i] << '\n';
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read vocabulary " + path.string());
  Vocabulary vocab;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty())
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": empty token");
    vocab.append(line);
  }
  return vocab;
}

std::vector<std::string> tokenize(std::string_view text, bool lowercase) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    std::size_t j = i;
    while (j < text.size() && !is_space(text[j])) ++j;
    if (j > i) {
      std::string tok(text.substr(i, j - i));
      if (lowercase)
        std::transform(tok.begin(), tok.end(), tok.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
      out.push_back(std::move(tok));
    }
    i = j;
  }
  return out;
}

void validate(const EncodedExample& ex, std::size_t max_source_len, std::size_t max_target_len) {
  const auto fail = [](const std::string& what) { throw std::invalid_argument("invalid example: " + what); };
  if (ex.segment_ids.size() != ex.source_ids.size()) fail("segment_ids length differs from source");
  if (ex.source_ids.size() > max_source_len) fail("source longer than max_source_len");
  if (ex.target_ids.size() > max_target_len) fail("target longer than max_target_len");
  if (!ex.source_ids.empty() && ex.bos_positions.empty()) fail("no BOS positions");
  if (!std::is_sorted(ex.bos_positions.begin(), ex.bos_positions.end())) fail("bos_positions unsorted");
  std::size_t bos_count = 0;
  for (int id : ex.source_ids) bos_count += id == kBosId;
  if (bos_count != ex.bos_positions.size()) fail("BOS count differs from bos_positions");
  for (int p : ex.bos_positions)
    if (p < 0 || static_cast<std::size_t>(p) >= ex.source_ids.size() ||
        ex.source_ids[static_cast<std::size_t>(p)] != kBosId)
      fail("bos position " + std::to_string(p) + " does not address a BOS");
}

std::vector<std::string> segment_sentences(std::string_view text) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if ((c == '.' || c == '!' || c == '?') && (i + 1 == text.size() || is_space(text[i + 1]))) {
      auto s = trim(text.substr(start, i + 1 - start));
      if (!s.empty()) out.push_back(std::move(s));
      start = i + 1;
    }
  }
  auto rest = trim(text.substr(std::min(start, text.size())));
  if (!rest.empty()) out.push_back(std::move(rest));
  return out;
}

EncodedExample encode_document(std::span<const std::string> sentences, const Vocabulary& vocab,
                               std::size_t max_source_len, bool lowercase) {
  if (sentences.empty()) throw std::invalid_argument("encode_document: empty sentence list");
  EncodedExample ex;
  for (const auto& s : sentences) {
    const auto toks = tokenize(s, lowercase);
    if (toks.empty()) continue;
    ex.bos_positions.push_back(static_cast<int>(ex.source_ids.size()));
    ex.source_ids.push_back(kBosId);
    for (int id : vocab.encode(toks)) ex.source_ids.push_back(id);
  }
  ex.segment_ids.assign(ex.source_ids.size(), 0);
  truncate_source(ex, max_source_len);
  if (ex.source_ids.empty()) throw std::invalid_argument("encode_document: no tokens to encode");
  return ex;
}

EncodedExample encode_conversation(std::span<const Turn> turns, const Vocabulary& vocab,
                                   std::size_t max_segments, std::size_t max_source_len,
                                   bool lowercase) {
  if (turns.empty()) throw std::invalid_argument("encode_conversation: no turns");
  std::vector<std::string> roles;
  EncodedExample ex;
  for (const auto& turn : turns) {
    if (trim(turn.role).empty()) throw std::invalid_argument("encode_conversation: empty role");
    auto it = std::find(roles.begin(), roles.end(), turn.role);
    if (it == roles.end()) {
      if (roles.size() == max_segments)
        throw std::invalid_argument("encode_conversation: more than " + std::to_string(max_segments) +
                                    " distinct roles");
      roles.push_back(turn.role);
      it = roles.end() - 1;
    }
    const int segment = static_cast<int>(it - roles.begin());
    ex.bos_positions.push_back(static_cast<int>(ex.source_ids.size()));
    ex.source_ids.push_back(kBosId);
    for (const auto* part : {&turn.role, &turn.text})
      for (int id : vocab.encode(tokenize(*part, lowercase))) ex.source_ids.push_back(id);
    ex.segment_ids.resize(ex.source_ids.size(), segment);
  }
  truncate_source(ex, max_source_len);
  if (ex.source_ids.empty()) throw std::invalid_argument("encode_conversation: no tokens to encode");
  return ex;
}

std::vector<int> encode_target(std::string_view text, const Vocabulary& vocab,
                               std::size_t max_target_len, bool lowercase) {
  if (max_target_len == 0) throw std::invalid_argument("max_target_len must be positive");
  auto ids = vocab.encode(tokenize(text, lowercase));
  if (ids.size() + 1 > max_target_len) ids.resize(max_target_len - 1);
  ids.push_back(kEosId);
  return ids;
}

std::vector<std::vector<std::size_t>> chunk_document(std::span<const std::size_t> source_lengths,
                                                     std::size_t max_tokens) {
  std::vector<std::vector<std::size_t>> chunks;
  std::size_t used = 0;
  for (std::size_t i = 0; i < source_lengths.size(); ++i) {
    const std::size_t len = source_lengths[i];
    if (len > max_tokens)
      throw std::invalid_argument("chunk_document: segment " + std::to_string(i) + " has " +
                                  std::to_string(len) + " tokens, more than " + std::to_string(max_tokens));
    if (chunks.empty() || used + len > max_tokens) {
      chunks.emplace_back();
      used = 0;
    }
    chunks.back().push_back(i);
    used += len;
  }
  return chunks;
}

std::vector<ChunkPair> chunk_aligned_document(std::span<const AlignedSegment> segments,
                                              std::size_t max_tokens, bool lowercase) {
  std::vector<std::size_t> lengths;
  for (const auto& seg : segments) lengths.push_back(tokenize(seg.source, lowercase).size() + 1);
  std::vector<ChunkPair> out;
  for (auto& idx : chunk_document(lengths, max_tokens)) {
    ChunkPair pair;
    for (std::size_t i : idx) {
      pair.source_sentences.push_back(segments[i].source);
      const auto tgt = trim(segments[i].target);
      if (!tgt.empty()) {
        if (!pair.target.empty()) pair.target += ' ';
        pair.target += tgt;
      }
    }
    pair.segments = std::move(idx);
    out.push_back(std::move(pair));
  }
  return out;
}

EncodedExample Batch::row(std::size_t r) const {
  if (r >= size()) throw std::out_of_range("batch row out of range");
  EncodedExample ex;
  for (std::size_t c = 0; c < source.cols && source_mask(r, c); ++c) {
    ex.source_ids.push_back(source(r, c));
    ex.segment_ids.push_back(segments(r, c));
    if (bos_mask(r, c)) ex.bos_positions.push_back(static_cast<int>(c));
  }
  for (std::size_t c = 0; c < target.cols && target_mask(r, c); ++c) ex.target_ids.push_back(target(r, c));
  return ex;
}

Batch collate(std::span<const EncodedExample> examples, int pad_id) {
  if (examples.empty()) throw std::invalid_argument("collate: empty batch");
  std::size_t smax = 0, tmax = 0;
  for (const auto& ex : examples) {
    smax = std::max(smax, ex.source_ids.size());
    tmax = std::max(tmax, ex.target_ids.size());
  }
  const std::size_t b = examples.size();
  Batch batch{Matrix<int>(b, smax, pad_id),        Matrix<int>(b, tmax, pad_id),
              Matrix<std::uint8_t>(b, smax, 0),    Matrix<std::uint8_t>(b, tmax, 0),
              Matrix<std::uint8_t>(b, smax, 0),    Matrix<int>(b, smax, 0)};
  for (std::size_t r = 0; r < b; ++r) {
    const auto& ex = examples[r];
    if (ex.segment_ids.size() != ex.source_ids.size())
      throw std::invalid_argument("collate: segment_ids length differs from source in row " + std::to_string(r));
    for (std::size_t c = 0; c < ex.source_ids.size(); ++c) {
      batch.source(r, c) = ex.source_ids[c];
      batch.source_mask(r, c) = 1;
      batch.segments(r, c) = ex.segment_ids[c];
    }
    for (int p : ex.bos_positions) batch.bos_mask(r, static_cast<std::size_t>(p)) = 1;
    for (std::size_t c = 0; c < ex.target_ids.size(); ++c) {
      batch.target(r, c) = ex.target_ids[c];
      batch.target_mask(r, c) = 1;
    }
  }
  return batch;
}

PreprocessMode parse_mode(std::string_view name) {
  if (name == "document") return PreprocessMode::document;
  if (name == "conversation") return PreprocessMode::conversation;
  if (name == "mt") return PreprocessMode::mt;
  throw std::invalid_argument("unknown preprocessing mode '" + std::string(name) + "'");
}

RawRecord parse_record(std::string_view json_line) {
  const auto j = nlohmann::json::parse(json_line);
  if (j.contains("segments")) {
    TranslationRecord rec;
    for (const auto& s : j.at("segments"))
      rec.segments.push_back({s.at("src").get<std::string>(), s.at("tgt").get<std::string>()});
    return rec;
  }
  if (j.contains("turns")) {
    ConversationRecord rec;
    for (const auto& t : j.at("turns")) rec.turns.push_back({t.at("role").get<std::string>(), t.at("text").get<std::string>()});
    rec.target = j.at("target").get<std::string>();
    return rec;
  }
  if (j.contains("source")) return DocumentRecord{j.at("source").get<std::string>(), j.at("target").get<std::string>()};
  throw std::invalid_argument("record has none of 'source', 'turns', 'segments'");
}

std::vector<RawRecord> read_records(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<RawRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(parse_record(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<std::string> corpus_texts(std::span<const RawRecord> records) {
  std::vector<std::string> out;
  for (const auto& rec : records) {
    if (const auto* d = std::get_if<DocumentRecord>(&rec)) {
      out.push_back(d->source);
      out.push_back(d->target);
    } else if (const auto* c = std::get_if<ConversationRecord>(&rec)) {
      for (const auto& t : c->turns) {
        out.push_back(t.role);
        out.push_back(t.text);
      }
      out.push_back(c->target);
    } else {
      for (const auto& s : std::get<TranslationRecord>(rec).segments) {
        out.push_back(s.source);
        out.push_back(s.target);
      }
    }
  }
  return out;
}

std::vector<EncodedExample> encode_record(const RawRecord& record, int doc_index, PreprocessMode mode,
                                          const Vocabulary& vocab, const PipelineOptions& options) {
  const auto filtered = [&](const std::string& text) {
    auto toks = tokenize(text, options.lowercase);
    if (options.filter) toks = options.filter(std::move(toks));
    std::string joined;
    for (const auto& t : toks) {
      if (!joined.empty()) joined += ' ';
      joined += t;
    }
    return joined;
  };
  std::vector<EncodedExample> out;
  switch (mode) {
    case PreprocessMode::document: {
      const auto* rec = std::get_if<DocumentRecord>(&record);
      if (!rec) throw std::invalid_argument("document mode expects {source, target} records");
      auto ex = encode_document(segment_sentences(rec->source), vocab, options.max_source_len, options.lowercase);
      ex.target_ids = encode_target(rec->target, vocab, options.max_target_len, options.lowercase);
      ex.doc_index = doc_index;
      out.push_back(std::move(ex));
      break;
    }
    case PreprocessMode::conversation: {
      const auto* rec = std::get_if<ConversationRecord>(&record);
      if (!rec) throw std::invalid_argument("conversation mode expects {turns, target} records");
      std::vector<Turn> turns;
      for (const auto& t : rec->turns) turns.push_back({t.role, filtered(t.text)});
      auto ex = encode_conversation(turns, vocab, options.max_segments, options.max_source_len, options.lowercase);
      ex.target_ids = encode_target(rec->target, vocab, options.max_target_len, options.lowercase);
      ex.doc_index = doc_index;
      out.push_back(std::move(ex));
      break;
    }
    case PreprocessMode::mt: {
      const auto* rec = std::get_if<TranslationRecord>(&record);
      if (!rec) throw std::invalid_argument("mt mode expects {segments} records");
      int chunk = 0;
      for (auto& pair : chunk_aligned_document(rec->segments, options.chunk_tokens, options.lowercase)) {
        auto ex = encode_document(pair.source_sentences, vocab, options.max_source_len, options.lowercase);
        ex.target_ids = encode_target(pair.target, vocab, options.max_target_len, options.lowercase);
        ex.doc_index = doc_index;
        ex.chunk_index = chunk++;
        out.push_back(std::move(ex));
      }
      break;
    }
  }
  return out;
}

void write_encoded(const std::filesystem::path& path, std::span<const EncodedExample> examples) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const auto& ex : examples) {
    nlohmann::json j;
    j["source_ids"] = ex.source_ids;
    j["bos_positions"] = ex.bos_positions;
    j["segment_ids"] = ex.segment_ids;
    j["target_ids"] = ex.target_ids;
    if (ex.doc_index >= 0) j["doc"] = ex.doc_index;
    if (ex.chunk_index >= 0) j["chunk"] = ex.chunk_index;
    os << j.dump() << '\n';
  }
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

std::vector<EncodedExample> read_encoded(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::vector<EncodedExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      EncodedExample ex;
      ex.source_ids = j.at("source_ids").get<std::vector<int>>();
      ex.bos_positions = j.at("bos_positions").get<std::vector<int>>();
      ex.segment_ids = j.at("segment_ids").get<std::vector<int>>();
      ex.target_ids = j.value("target_ids", std::vector<int>{});
      ex.doc_index = j.value("doc", -1);
      ex.chunk_index = j.value("chunk", -1);
      out.push_back(std::move(ex));
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace hat
