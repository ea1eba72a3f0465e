#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "ice/tokenizer.hpp"
#include "ice/types.hpp"

namespace ice {

class ColumnEngine;
class ExportedScorer;

// Column names every feature builds on.
inline constexpr const char* kTextColumn = "text";      // title + " " + body_text
inline constexpr const char* kTokensColumn = "tokens";  // tokenize(text)

// Registers the text and tokens lambda columns if they are not defined yet.
void define_text_columns(ColumnEngine& engine);
std::string item_text(std::string_view title, std::string_view body_text);

enum class StatMode { kTotal, kDistinct, kPresence };
const char* to_string(StatMode mode);
StatMode parse_stat_mode(std::string_view text);

struct DictionaryStats {
  std::uint64_t total = 0;
  std::uint64_t distinct = 0;
  std::uint64_t presence = 0;

  double get(StatMode mode) const;
  friend bool operator==(const DictionaryStats&, const DictionaryStats&) = default;
};

struct DictionaryFeature {
  std::string name;
  std::set<std::string> entries;  // single tokens, already normalized
  std::vector<StatMode> modes{StatMode::kTotal, StatMode::kDistinct, StatMode::kPresence};

  // Each raw entry must tokenize to exactly one token.
  static DictionaryFeature make(std::string name, const std::vector<std::string>& raw_entries,
                                std::vector<StatMode> modes = {StatMode::kTotal,
                                                               StatMode::kDistinct,
                                                               StatMode::kPresence});
  // Exchange format: {"name": ..., "entries": [...], "modes": [...]}.
  static DictionaryFeature from_text(std::string_view text);
  std::string to_text() const;
  nlohmann::json to_json() const;
  static DictionaryFeature from_json(const nlohmann::json& j);

  friend bool operator==(const DictionaryFeature&, const DictionaryFeature&) = default;
};

DictionaryStats dictionary_stats(std::span<const std::string> tokens,
                                 const DictionaryFeature& dict);

// Unigrams then bigrams ("a b") in document order.
std::vector<std::string> ngrams(std::span<const std::string> tokens);

struct BowTerm {
  std::string ngram;
  std::uint64_t df = 0;

  friend bool operator==(const BowTerm&, const BowTerm&) = default;
};

class BowVocabulary {
 public:
  BowVocabulary() = default;
  // Keeps the top `cap` n-grams by document frequency, ties lexicographic.
  static BowVocabulary from_counts(const std::unordered_map<std::string, std::uint64_t>& df,
                                   std::uint64_t documents, std::size_t cap);
  static BowVocabulary from_documents(std::span<const std::string> texts, std::size_t cap);
  static BowVocabulary from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;

  const std::vector<BowTerm>& terms() const { return terms_; }
  std::size_t size() const { return terms_.size(); }
  std::uint64_t documents() const { return documents_; }
  std::size_t cap() const { return cap_; }
  std::optional<std::size_t> find(std::string_view ngram) const;
  double idf(std::size_t term) const;

  friend bool operator==(const BowVocabulary& a, const BowVocabulary& b) {
    return a.terms_ == b.terms_ && a.documents_ == b.documents_ && a.cap_ == b.cap_;
  }

 private:
  void index();

  std::vector<BowTerm> terms_;
  std::uint64_t documents_ = 0;
  std::size_t cap_ = 0;
  std::unordered_map<std::string, std::size_t> lookup_;
};

// Document frequencies over an engine text column, counted per shard and
// merged. Dead shards are skipped.
std::unordered_map<std::string, std::uint64_t> count_document_frequencies(
    ColumnEngine& engine, std::string_view tokens_column, std::uint64_t* documents);
BowVocabulary build_bow_vocabulary(ColumnEngine& engine, std::size_t cap);

// tf * ln(N / df) for vocabulary terms present, L2-normalized. Indices are
// vocabulary positions.
SparseVector tfidf_vector(std::span<const std::string> tokens, const BowVocabulary& vocab);

// Named built-in text functions (the only code features we accept).
using BuiltinFn = double (*)(std::span<const std::string> tokens);
BuiltinFn find_builtin(std::string_view name);
std::vector<std::string> builtin_names();

enum class FeatureKind { kDictionary, kBow, kModel, kBuiltin };
const char* to_string(FeatureKind kind);

// One immutable version of a feature.
struct FeatureDefinition {
  std::string id;
  std::uint32_t version = 1;
  FeatureKind kind = FeatureKind::kDictionary;
  DictionaryFeature dictionary;
  std::shared_ptr<const BowVocabulary> vocabulary;
  std::shared_ptr<const ExportedScorer> model;
  std::string builtin;

  std::string key() const;          // <id>@<version>
  std::string column_name() const;  // feature:<id>@<version>
  // Stable names of this feature's coordinates, in coordinate order.
  std::vector<std::string> coordinate_names() const;

  nlohmann::json to_json() const;
  static FeatureDefinition from_json(const nlohmann::json& j);
};

// Evaluates a feature on one document. Coordinate i of the feature lands at
// coords[i]; the result is sorted by index without zeros.
SparseVector evaluate_feature(const FeatureDefinition& def, std::span<const std::string> tokens,
                              std::span<const FeatureIndex> coords);

// Append-only map from coordinate name to FeatureIndex, shared engine-wide
// so indices never change once handed out.
class FeatureSpace {
 public:
  // Interns the names in order; existing names keep their index.
  std::vector<FeatureIndex> intern(const std::vector<std::string>& names);
  std::optional<FeatureIndex> find(std::string_view name) const;
  std::string name(FeatureIndex index) const;
  std::size_t size() const;

 private:
  mutable std::shared_mutex mutex_;
  std::vector<std::string> names_;
  std::unordered_map<std::string, FeatureIndex> index_;
};

// Feature definitions realized as lambda columns on one engine.
class FeatureRegistry {
 public:
  explicit FeatureRegistry(ColumnEngine& engine);

  ColumnEngine& engine() const { return engine_; }
  FeatureSpace& space() { return space_; }
  const FeatureSpace& space() const { return space_; }

  // Idempotent for an identical definition; a different definition under an
  // existing key is a Conflict.
  const FeatureDefinition& add(FeatureDefinition def);
  bool contains(std::string_view key) const;
  const FeatureDefinition& get(std::string_view key) const;
  std::span<const FeatureIndex> coordinates(std::string_view key) const;
  std::uint32_t latest_version(std::string_view id) const;  // 0 if unknown

  // Marks a key deleted; assembling it afterwards is an error.
  void remove(std::string_view key);
  bool removed(std::string_view key) const;

  // Concatenation of the named features' vectors for one row.
  SparseVector assemble(RowId row, const std::vector<std::string>& keys) const;
  // Same, over one shard's resident columns, for a range of rows.
  void assemble_range(std::uint32_t shard, RowId begin, RowId end,
                      const std::vector<std::string>& keys, std::vector<SparseVector>& out) const;

 private:
  struct Entry {
    FeatureDefinition def;
    std::vector<FeatureIndex> coords;
    bool removed = false;
  };
  const Entry& entry(std::string_view key) const;

  ColumnEngine& engine_;
  FeatureSpace space_;
  mutable std::shared_mutex mutex_;
  std::map<std::string, std::unique_ptr<Entry>, std::less<>> entries_;
};

SparseVector merge_sparse(const std::vector<const SparseVector*>& parts);

}  // namespace ice
