#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "ice/column_engine.hpp"
#include "ice/raw_store.hpp"

namespace ice::testing {

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("ice-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline RawRecord record(std::size_t i, std::string body, std::string title = {}) {
  RawRecord r;
  r.external_id = "x" + std::to_string(i);
  r.url = "http://example.test/" + std::to_string(i);
  r.title = std::move(title);
  r.body_text = std::move(body);
  return r;
}

inline std::vector<RawRecord> records(const std::vector<std::string>& bodies) {
  std::vector<RawRecord> out;
  for (std::size_t i = 0; i < bodies.size(); ++i) out.push_back(record(i, bodies[i]));
  return out;
}

// Imports the bodies (empty titles) and loads an engine over them.
struct Fixture {
  TempDir dir;
  std::shared_ptr<RawStore> raw;
  std::unique_ptr<ColumnEngine> engine;

  Fixture(const std::vector<RawRecord>& recs, std::uint32_t shards, std::uint32_t bucket_capacity) {
    import_items(dir.path(), "ds", records_from(recs), bucket_capacity);
    raw = RawStore::open(dir.path(), "ds");
    EngineOptions options;
    options.shard_count = shards;
    engine = ColumnEngine::load_dataset(raw, options);
  }
};

// Bodies of random words drawn from w0..w{vocab-1}.
inline std::vector<std::string> random_bodies(std::size_t docs, std::size_t vocab,
                                              std::size_t min_len, std::size_t max_len,
                                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> word(0, vocab - 1);
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::vector<std::string> out;
  for (std::size_t d = 0; d < docs; ++d) {
    std::string body;
    for (std::size_t n = len(rng), i = 0; i < n; ++i) {
      if (!body.empty()) body += ' ';
      body += "w" + std::to_string(word(rng));
    }
    out.push_back(std::move(body));
  }
  return out;
}

}  // namespace ice::testing
