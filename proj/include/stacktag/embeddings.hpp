#pragma once

// Per-token vector providers (static tables, byte-pair subwords, precomputed
// contextual vectors) and the stacking spec that concatenates them.

#include <charconv>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stacktag/binio.hpp"
#include "stacktag/corpus.hpp"
#include "stacktag/error.hpp"
#include "stacktag/lingfeat.hpp"
#include "stacktag/utf8.hpp"

namespace stacktag {

namespace detail {

inline float parse_float(std::string_view s, const std::string& where) {
  float v = 0.0f;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw DataError(DataErrc::kBadFormat, where + ": not a number: '" + std::string(s) + "'");
  return v;
}

inline std::size_t parse_count(std::string_view s, const std::string& where) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw DataError(DataErrc::kBadFormat, where + ": not a count: '" + std::string(s) + "'");
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Static word vectors

class StaticVecTable {
 public:
  StaticVecTable() = default;
  explicit StaticVecTable(int dim, bool lowercase_fallback = true)
      : dim_(dim), lowercase_fallback_(lowercase_fallback) {}

  void insert(const std::string& token, std::span<const float> vec) {
    if (static_cast<int>(vec.size()) != dim_)
      throw DataError(DataErrc::kDimensionMismatch, "vector for '" + token + "' has wrong length");
    if (!index_.emplace(token, index_.size()).second)
      throw DataError(DataErrc::kDuplicateEntry, "duplicate token '" + token + "'");
    values_.insert(values_.end(), vec.begin(), vec.end());
  }

  /// Stored vector for an exact match, if any.
  std::optional<std::span<const float>> find(const std::string& token) const {
    auto it = index_.find(token);
    if (it == index_.end()) return std::nullopt;
    return std::span<const float>(values_).subspan(it->second * static_cast<std::size_t>(dim_),
                                                   static_cast<std::size_t>(dim_));
  }

  int dim() const { return dim_; }
  std::size_t size() const { return index_.size(); }
  bool lowercase_fallback() const { return lowercase_fallback_; }
  void set_lowercase_fallback(bool on) { lowercase_fallback_ = on; }

 private:
  int dim_ = 0;
  bool lowercase_fallback_ = true;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<float> values_;
};

/// Text format: header "<count> <dim>", then `count` rows "token v1 ... vdim".
inline StaticVecTable load_static_vecs(std::string_view text, const std::string& source = "<vectors>") {
  const auto lines = detail::split_lines(text);
  std::size_t ln = 0;
  while (ln < lines.size() && detail::split_ws(lines[ln]).empty()) ++ln;
  if (ln == lines.size()) throw DataError(DataErrc::kEmptyInput, source + ": empty vector file");
  const auto header = detail::split_ws(lines[ln]);
  if (header.size() != 2) throw DataError(DataErrc::kBadFormat, detail::where(source, ln + 1) + ": expected '<count> <dim>'");
  const std::size_t count = detail::parse_count(header[0], detail::where(source, ln + 1));
  const std::size_t dim = detail::parse_count(header[1], detail::where(source, ln + 1));
  if (dim == 0) throw DataError(DataErrc::kBadFormat, source + ": dimension must be positive");

  StaticVecTable table(static_cast<int>(dim));
  std::vector<float> row(dim);
  for (++ln; ln < lines.size(); ++ln) {
    const auto cols = detail::split_ws(lines[ln]);
    if (cols.empty()) continue;
    const auto where = detail::where(source, ln + 1);
    if (cols.size() != dim + 1)
      throw DataError(DataErrc::kDimensionMismatch, where + ": expected " + std::to_string(dim) + " values, got " +
                                                        std::to_string(cols.size() - 1));
    for (std::size_t k = 0; k < dim; ++k) row[k] = detail::parse_float(cols[k + 1], where);
    const std::string token(cols[0]);
    if (table.find(token)) throw DataError(DataErrc::kDuplicateEntry, where + ": duplicate token '" + token + "'");
    table.insert(token, row);
  }
  if (table.size() != count)
    throw DataError(DataErrc::kBadFormat, source + ": header declares " + std::to_string(count) + " rows, found " +
                                              std::to_string(table.size()));
  return table;
}

/// Exact match, then lowercase match (if enabled), else zeros.
inline std::vector<float> lookup_static(const StaticVecTable& table, const std::string& surface) {
  if (auto v = table.find(surface)) return {v->begin(), v->end()};
  if (table.lowercase_fallback()) {
    if (auto v = table.find(utf8::to_lower(surface))) return {v->begin(), v->end()};
  }
  return std::vector<float>(static_cast<std::size_t>(table.dim()), 0.0f);
}

// ---------------------------------------------------------------------------
// Byte-pair subwords

inline constexpr std::string_view kEndOfWord = "</w>";

class BpeModel {
 public:
  BpeModel() = default;
  BpeModel(std::vector<std::pair<std::string, std::string>> merges, StaticVecTable vectors)
      : merges_(std::move(merges)), vectors_(std::move(vectors)) {
    for (std::size_t r = 0; r < merges_.size(); ++r) ranks_.emplace(merges_[r].first + '\x1f' + merges_[r].second, r);
    if (auto unk = vectors_.find("<unk>")) unk_.assign(unk->begin(), unk->end());
    else unk_.assign(static_cast<std::size_t>(vectors_.dim()), 0.0f);
  }

  std::optional<std::size_t> rank(const std::string& a, const std::string& b) const {
    auto it = ranks_.find(a + '\x1f' + b);
    if (it == ranks_.end()) return std::nullopt;
    return it->second;
  }

  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
  const StaticVecTable& vectors() const { return vectors_; }
  const std::vector<float>& unk() const { return unk_; }
  int dim() const { return vectors_.dim(); }

 private:
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<std::string, std::size_t> ranks_;
  StaticVecTable vectors_;
  std::vector<float> unk_;
};

/// One "left right" pair per line, highest priority first. A leading
/// "#version" line (subword-nmt output) is skipped.
inline std::vector<std::pair<std::string, std::string>> parse_bpe_merges(std::string_view text,
                                                                         const std::string& source = "<merges>") {
  std::vector<std::pair<std::string, std::string>> merges;
  const auto lines = detail::split_lines(text);
  for (std::size_t ln = 0; ln < lines.size(); ++ln) {
    if (lines[ln].starts_with("#version")) continue;
    const auto cols = detail::split_ws(lines[ln]);
    if (cols.empty()) continue;
    if (cols.size() != 2)
      throw DataError(DataErrc::kMalformedLine, detail::where(source, ln + 1) + ": expected a symbol pair");
    merges.emplace_back(std::string(cols[0]), std::string(cols[1]));
  }
  return merges;
}

/// Standard BPE: start from code points plus an end-of-word symbol and
/// repeatedly merge the adjacent pair with the best (lowest) rank, all its
/// occurrences left to right. A bare end-of-word symbol is dropped from the result.
inline std::vector<std::string> bpe_segment(const BpeModel& model, std::string_view surface) {
  std::vector<std::string> sym;
  for (char32_t c : utf8::decode(surface)) sym.push_back(utf8::encode(c));
  if (sym.empty()) return sym;
  sym.emplace_back(kEndOfWord);

  for (;;) {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i + 1 < sym.size(); ++i) {
      auto r = model.rank(sym[i], sym[i + 1]);
      if (r && (!best || *r < *best)) best = r;
    }
    if (!best) break;
    const auto& [left, right] = model.merges()[*best];
    std::vector<std::string> next;
    next.reserve(sym.size());
    for (std::size_t i = 0; i < sym.size();) {
      if (i + 1 < sym.size() && sym[i] == left && sym[i + 1] == right) {
        next.push_back(left + right);
        i += 2;
      } else {
        next.push_back(std::move(sym[i]));
        ++i;
      }
    }
    sym = std::move(next);
  }
  if (sym.back() == kEndOfWord) sym.pop_back();
  return sym;
}

/// Mean of the subword vectors; subwords missing from the table contribute
/// the unk vector.
inline std::vector<float> bpe_embed(const BpeModel& model, std::string_view surface) {
  const auto pieces = bpe_segment(model, surface);
  if (pieces.empty()) return model.unk();
  std::vector<double> acc(static_cast<std::size_t>(model.dim()), 0.0);
  for (const auto& p : pieces) {
    auto v = model.vectors().find(p);
    std::span<const float> src = v ? *v : std::span<const float>(model.unk());
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += src[k];
  }
  std::vector<float> out(acc.size());
  for (std::size_t k = 0; k < acc.size(); ++k) out[k] = static_cast<float>(acc[k] / static_cast<double>(pieces.size()));
  return out;
}

// ---------------------------------------------------------------------------
// Contextual per-token vectors (CTXE files)

inline constexpr std::string_view kCtxMagic = "CTXE";
inline constexpr std::uint32_t kCtxVersion = 1;

class CtxEmbeddingFile {
 public:
  CtxEmbeddingFile() = default;
  explicit CtxEmbeddingFile(int dim) : dim_(dim) { offsets_.push_back(0); }

  void add_block(std::span<const float> values) {
    if (dim_ <= 0 || values.size() % static_cast<std::size_t>(dim_) != 0)
      throw DataError(DataErrc::kDimensionMismatch, "contextual block is not a multiple of dim");
    values_.insert(values_.end(), values.begin(), values.end());
    offsets_.push_back(offsets_.back() + values.size() / static_cast<std::size_t>(dim_));
  }

  int dim() const { return dim_; }
  std::size_t sentence_count() const { return offsets_.empty() ? 0 : offsets_.size() - 1; }
  std::size_t token_count(std::size_t i) const { return offsets_.at(i + 1) - offsets_.at(i); }

  /// Row-major token_count(i) x dim block for sentence i.
  std::span<const float> block(std::size_t i) const {
    const auto d = static_cast<std::size_t>(dim_);
    return std::span<const float>(values_).subspan(offsets_.at(i) * d, token_count(i) * d);
  }

  std::span<const float> token(std::size_t sentence, std::size_t t) const {
    return block(sentence).subspan(t * static_cast<std::size_t>(dim_), static_cast<std::size_t>(dim_));
  }

 private:
  int dim_ = 0;
  std::vector<std::size_t> offsets_;
  std::vector<float> values_;
};

inline std::string write_ctx_file(const CtxEmbeddingFile& file) {
  io::Writer w;
  w.raw(kCtxMagic);
  w.u32(kCtxVersion);
  w.u32(static_cast<std::uint32_t>(file.dim()));
  w.u32(static_cast<std::uint32_t>(file.sentence_count()));
  for (std::size_t i = 0; i < file.sentence_count(); ++i) {
    w.u32(static_cast<std::uint32_t>(file.token_count(i)));
    for (float v : file.block(i)) w.f32(v);
  }
  return w.take();
}

/// Decodes a CTXE file and checks it against the sentence lengths of the
/// corpus it claims to describe.
inline CtxEmbeddingFile read_ctx_file(std::string_view bytes, std::span<const std::size_t> lengths,
                                      const std::string& source = "<ctx>") {
  io::Reader r(bytes, source);
  if (bytes.size() < 4 || r.raw(4) != kCtxMagic)
    throw DataError(DataErrc::kBadFormat, source + ": not a CTXE file (bad magic)");
  const auto version = r.u32();
  if (version != kCtxVersion)
    throw DataError(DataErrc::kVersion, source + ": unsupported CTXE version " + std::to_string(version));
  const auto dim = r.u32();
  const auto count = r.u32();
  if (dim == 0) throw DataError(DataErrc::kBadFormat, source + ": zero dimension");
  if (count != lengths.size())
    throw DataError(DataErrc::kMisaligned, source + ": file has " + std::to_string(count) +
                                               " sentences, corpus has " + std::to_string(lengths.size()) +
                                               " (first unmatched sentence " +
                                               std::to_string(std::min<std::size_t>(count, lengths.size())) + ")");
  CtxEmbeddingFile file(static_cast<int>(dim));
  std::vector<float> buf;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto n = r.u32();
    if (n != lengths[i])
      throw DataError(DataErrc::kMisaligned, source + ": sentence " + std::to_string(i) + " has " +
                                                 std::to_string(n) + " vectors but " + std::to_string(lengths[i]) +
                                                 " tokens");
    buf.resize(static_cast<std::size_t>(n) * dim);
    for (auto& v : buf) v = r.f32();
    file.add_block(buf);
  }
  if (r.remaining() != 0) throw DataError(DataErrc::kBadFormat, source + ": trailing bytes after last sentence");
  return file;
}

inline CtxEmbeddingFile read_ctx_file(std::string_view bytes, std::span<const Sentence> corpus,
                                      const std::string& source = "<ctx>") {
  std::vector<std::size_t> lengths;
  lengths.reserve(corpus.size());
  for (const auto& s : corpus) lengths.push_back(s.size());
  return read_ctx_file(bytes, lengths, source);
}

// ---------------------------------------------------------------------------
// Stacking

enum class ProviderKind { kStatic, kBpe, kChar, kCtx };

inline std::string to_string(ProviderKind k) {
  switch (k) {
    case ProviderKind::kStatic: return "static";
    case ProviderKind::kBpe: return "bpe";
    case ProviderKind::kChar: return "char";
    case ProviderKind::kCtx: return "ctx";
  }
  return "?";
}

inline ProviderKind provider_from_string(std::string_view s) {
  if (s == "static") return ProviderKind::kStatic;
  if (s == "bpe") return ProviderKind::kBpe;
  if (s == "char") return ProviderKind::kChar;
  if (s == "ctx") return ProviderKind::kCtx;
  throw ConfigError("unknown embedding provider '" + std::string(s) + "' (expected static, bpe, char or ctx)");
}

struct StackSegment {
  std::string name;
  int dim = 0;
};

/// Ordered providers plus optional feature embeddings; a token's input vector
/// is the concatenation of all segments in order.
struct EmbeddingStackSpec {
  std::vector<std::pair<ProviderKind, int>> providers;
  bool features = false;
  FeatureDims feature_dims;

  std::vector<StackSegment> segments() const {
    std::vector<StackSegment> out;
    for (auto [kind, dim] : providers) out.push_back({to_string(kind), dim});
    if (features) {
      out.push_back({"pos", feature_dims.pos_dim});
      out.push_back({"ortho", feature_dims.ortho_dim});
      out.push_back({"cap", feature_dims.cap_dim});
    }
    return out;
  }

  int total_dim() const {
    int d = 0;
    for (const auto& s : segments()) d += s.dim;
    return d;
  }

  bool has(ProviderKind k) const {
    for (auto [kind, dim] : providers)
      if (kind == k) return true;
    return false;
  }

  void validate() const {
    if (providers.empty()) throw ConfigError("embedding stack needs at least one provider");
    for (std::size_t i = 0; i < providers.size(); ++i) {
      if (providers[i].second <= 0) throw ConfigError("provider '" + to_string(providers[i].first) + "' has no dimension");
      for (std::size_t j = 0; j < i; ++j)
        if (providers[j].first == providers[i].first)
          throw ConfigError("provider '" + to_string(providers[i].first) + "' listed twice");
    }
    if (features && (feature_dims.pos_dim <= 0 || feature_dims.ortho_dim <= 0 || feature_dims.cap_dim <= 0))
      throw ConfigError("feature dimensions must be positive");
  }
};

/// Concatenates one vector per segment, in spec order.
inline std::vector<float> stack(const EmbeddingStackSpec& spec, std::span<const std::vector<float>> parts) {
  const auto segs = spec.segments();
  if (parts.size() != segs.size())
    throw DataError(DataErrc::kDimensionMismatch, "stack expects " + std::to_string(segs.size()) + " vectors, got " +
                                                      std::to_string(parts.size()));
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(spec.total_dim()));
  for (std::size_t i = 0; i < segs.size(); ++i) {
    if (static_cast<int>(parts[i].size()) != segs[i].dim)
      throw DataError(DataErrc::kDimensionMismatch, "segment '" + segs[i].name + "' expects dim " +
                                                        std::to_string(segs[i].dim) + ", got " +
                                                        std::to_string(parts[i].size()));
    out.insert(out.end(), parts[i].begin(), parts[i].end());
  }
  return out;
}

}  // namespace stacktag
