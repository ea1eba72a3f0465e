#include "ice/text_index.hpp"

#include <algorithm>
#include <cmath>
#include <thread>

#include "ice/column_engine.hpp"
#include "ice/tokenizer.hpp"

namespace ice {

void IndexShard::add_document(std::string_view text) {
  const RowId row = end();
  std::uint32_t length = 0;
  for_each_token(text, [&](std::string_view token) {
    ++length;
    auto& list = postings_[std::string(token)];
    if (!list.empty() && list.back().row == row) {
      ++list.back().tf;
    } else {
      list.push_back({row, 1});
    }
  });
  doc_len_.push_back(length);
  total_tokens_ += length;
}

double IndexShard::average_length() const {
  return doc_len_.empty() ? 0.0
                          : static_cast<double>(total_tokens_) / static_cast<double>(doc_len_.size());
}

std::uint32_t IndexShard::doc_length(RowId row) const {
  if (row < begin_ || row >= end()) throw OutOfRange("row not in index shard");
  return doc_len_[row - begin_];
}

const std::vector<Posting>* IndexShard::postings(std::string_view term) const {
  auto it = postings_.find(std::string(term));
  return it == postings_.end() ? nullptr : &it->second;
}

std::uint64_t IndexShard::document_frequency(std::string_view term) const {
  const auto* list = postings(term);
  return list ? list->size() : 0;
}

std::uint32_t IndexShard::term_frequency(std::string_view term, RowId row) const {
  const auto* list = postings(term);
  if (!list) return 0;
  auto it = std::lower_bound(list->begin(), list->end(), row,
                             [](const Posting& p, RowId r) { return p.row < r; });
  return (it != list->end() && it->row == row) ? it->tf : 0;
}

double IndexShard::idf(std::string_view term) const {
  const double n = static_cast<double>(row_count());
  const double df = static_cast<double>(document_frequency(term));
  return std::log(1.0 + (n - df + 0.5) / (df + 0.5));
}

namespace {

double term_weight(double idf, double tf, double dl, double avgdl, const Bm25Params& p) {
  const double norm = avgdl > 0 ? dl / avgdl : 0.0;
  return idf * (tf * (p.k1 + 1.0)) / (tf + p.k1 * (1.0 - p.b + p.b * norm));
}

}  // namespace

double IndexShard::bm25(std::span<const std::string> terms, RowId row,
                        const Bm25Params& params) const {
  const double dl = doc_length(row);
  const double avgdl = average_length();
  std::vector<std::string> distinct(terms.begin(), terms.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  double score = 0.0;
  for (const auto& t : distinct) {
    const std::uint32_t tf = term_frequency(t, row);
    if (tf == 0) continue;
    score += term_weight(idf(t), tf, dl, avgdl, params);
  }
  return score;
}

std::vector<ScoredRow> IndexShard::search(std::span<const std::string> terms, std::size_t k,
                                          const Bm25Params& params) const {
  std::vector<std::string> distinct(terms.begin(), terms.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  std::unordered_map<RowId, double> acc;
  const double avgdl = average_length();
  for (const auto& t : distinct) {
    const auto* list = postings(t);
    if (!list) continue;
    const double w = idf(t);
    for (const Posting& p : *list) {
      acc[p.row] += term_weight(w, p.tf, doc_len_[p.row - begin_], avgdl, params);
    }
  }
  std::vector<ScoredRow> rows;
  rows.reserve(acc.size());
  for (const auto& [row, score] : acc) rows.push_back({row, score});
  const std::size_t keep = std::min(k, rows.size());
  std::partial_sort(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(keep), rows.end(),
                    ranks_before);
  rows.resize(keep);
  return rows;
}

std::vector<ScoredRow> merge_top_k(const std::vector<std::vector<ScoredRow>>& per_shard,
                                   std::size_t k) {
  std::vector<ScoredRow> all;
  for (const auto& list : per_shard) all.insert(all.end(), list.begin(), list.end());
  std::sort(all.begin(), all.end(), ranks_before);
  if (all.size() > k) all.resize(k);
  return all;
}

std::vector<std::string> query_terms(std::string_view query) {
  TokenList terms = tokenize(query);
  std::sort(terms.begin(), terms.end());
  terms.erase(std::unique(terms.begin(), terms.end()), terms.end());
  return terms;
}

TextIndex TextIndex::build(ColumnEngine& engine, std::string_view text_column,
                           const Bm25Params& params) {
  TextIndex index;
  index.engine_ = &engine;
  index.params_ = params;
  const std::uint32_t n = engine.shard_count();
  index.shards_.resize(n);
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(n);
  for (std::uint32_t s = 0; s < n; ++s) {
    const ShardInfo info = engine.shard_info(s);
    index.shards_[s] = IndexShard(s, info.begin);
    if (!info.alive || info.rows() == 0) continue;
    workers.emplace_back([&, s] {
      try {
        auto values = engine.shard_values(s, text_column);
        for (const Value& v : *values) index.shards_[s].add_document(std::get<std::string>(v));
      } catch (...) {
        errors[s] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return index;
}

std::vector<ScoredRow> TextIndex::search(std::string_view query, std::size_t k) const {
  const auto terms = query_terms(query);
  if (terms.empty() || k == 0) return {};
  std::vector<std::vector<ScoredRow>> per_shard(shards_.size());
  std::vector<std::thread> workers;
  for (std::size_t s = 0; s < shards_.size(); ++s) {
    if (engine_ && !engine_->shard_alive(static_cast<std::uint32_t>(s))) continue;
    if (shards_[s].row_count() == 0) continue;
    workers.emplace_back(
        [&, s] { per_shard[s] = shards_[s].search(terms, k, params_); });
  }
  for (auto& w : workers) w.join();
  return merge_top_k(per_shard, k);
}

double TextIndex::bm25_score(std::string_view query, RowId row) const {
  const auto terms = query_terms(query);
  for (const auto& shard : shards_) {
    if (row >= shard.begin() && row < shard.end()) return shard.bm25(terms, row, params_);
  }
  throw OutOfRange("row " + std::to_string(row) + " not indexed");
}

}  // namespace ice
