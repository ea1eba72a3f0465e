#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ice/types.hpp"

namespace ice {

class ColumnEngine;

struct Posting {
  RowId row = 0;
  std::uint32_t tf = 0;

  friend bool operator==(const Posting&, const Posting&) = default;
};

struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;
};

struct ScoredRow {
  RowId row = 0;
  double score = 0.0;

  friend bool operator==(const ScoredRow&, const ScoredRow&) = default;
};

// Descending score, then ascending row.
inline bool ranks_before(const ScoredRow& a, const ScoredRow& b) {
  return a.score > b.score || (a.score == b.score && a.row < b.row);
}

// Inverted index over one shard's rows. All statistics (row count, document
// frequency, average length) are local to the shard.
class IndexShard {
 public:
  IndexShard() = default;
  IndexShard(std::uint32_t shard_id, RowId begin) : shard_id_(shard_id), begin_(begin) {}

  // Documents are added in row order starting at begin().
  void add_document(std::string_view text);

  std::uint32_t shard_id() const { return shard_id_; }
  RowId begin() const { return begin_; }
  RowId end() const { return begin_ + doc_len_.size(); }
  RowId row_count() const { return doc_len_.size(); }
  std::uint64_t total_tokens() const { return total_tokens_; }
  double average_length() const;
  std::uint32_t doc_length(RowId row) const;

  const std::vector<Posting>* postings(std::string_view term) const;
  std::uint64_t document_frequency(std::string_view term) const;
  std::uint32_t term_frequency(std::string_view term, RowId row) const;
  double idf(std::string_view term) const;

  // Sum over distinct query terms; absent terms contribute 0.
  double bm25(std::span<const std::string> terms, RowId row, const Bm25Params& params = {}) const;
  // All rows containing at least one term, best first, at most k.
  std::vector<ScoredRow> search(std::span<const std::string> terms, std::size_t k,
                                const Bm25Params& params = {}) const;

  std::size_t term_count() const { return postings_.size(); }
  friend bool operator==(const IndexShard&, const IndexShard&) = default;

 private:
  std::uint32_t shard_id_ = 0;
  RowId begin_ = 0;
  std::unordered_map<std::string, std::vector<Posting>> postings_;
  std::vector<std::uint32_t> doc_len_;
  std::uint64_t total_tokens_ = 0;
};

std::vector<ScoredRow> merge_top_k(const std::vector<std::vector<ScoredRow>>& per_shard,
                                   std::size_t k);

// Distinct query terms in sorted order.
std::vector<std::string> query_terms(std::string_view query);

// One IndexShard per engine shard, built over a text column.
class TextIndex {
 public:
  TextIndex() = default;
  static TextIndex build(ColumnEngine& engine, std::string_view text_column,
                         const Bm25Params& params = {});

  // Per-shard top-k lists merged by descending score; dead shards are
  // skipped. Empty query gives an empty result.
  std::vector<ScoredRow> search(std::string_view query, std::size_t k) const;
  double bm25_score(std::string_view query, RowId row) const;

  std::size_t shard_count() const { return shards_.size(); }
  const IndexShard& shard(std::size_t i) const { return shards_.at(i); }
  const Bm25Params& params() const { return params_; }

 private:
  const ColumnEngine* engine_ = nullptr;
  std::vector<IndexShard> shards_;
  Bm25Params params_;
};

}  // namespace ice
