#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <istream>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ice/types.hpp"

namespace ice {

inline constexpr std::uint32_t kDefaultBucketCapacity = 10'000;

struct RawRecord {
  std::string external_id;
  std::string url;
  std::string title;
  std::string body_text;

  friend bool operator==(const RawRecord&, const RawRecord&) = default;
};

// Raw payloads are one JSON object per record. Throws InvalidArgument when
// the bytes are not an object carrying the four string fields.
RawRecord parse_raw_record(std::string_view bytes);
std::string serialize_raw_record(const RawRecord& record);

class CorruptionError : public Error {
 public:
  using Error::Error;
};

class ImmutabilityViolation : public Error {
 public:
  using Error::Error;
};

struct BucketInfo {
  std::uint32_t bucket_id = 0;
  RowId start_row_id = 0;
  std::uint32_t row_count = 0;
  std::string file;  // relative to the dataset directory
  std::uint64_t digest = 0;

  RowId end_row_id() const { return start_row_id + row_count; }
  friend bool operator==(const BucketInfo&, const BucketInfo&) = default;
};

struct DatasetManifest {
  std::string dataset_id;
  std::vector<std::string> schema{"external_id", "url", "title", "body_text"};
  std::vector<BucketInfo> buckets;

  RowId row_count() const;
  // Index of the bucket owning `row`; binary search over start rows.
  std::size_t bucket_for(RowId row) const;
  // Throws CorruptionError when buckets overlap, leave gaps or are misnumbered.
  void validate() const;

  std::string to_text() const;
  static DatasetManifest from_text(std::string_view text);

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

struct ImportReport {
  std::uint64_t imported = 0;
  std::uint64_t skipped = 0;
  std::vector<std::string> skip_reasons;  // first few, for diagnostics
};

struct ImportResult {
  DatasetManifest manifest;
  ImportReport report;
};

// Pulls raw record bytes one at a time; std::nullopt marks the end.
using RecordSource = std::function<std::optional<std::string>()>;

RecordSource lines_from(std::istream& in);
RecordSource records_from(std::vector<RawRecord> records);

std::filesystem::path dataset_dir(const std::filesystem::path& root,
                                  std::string_view dataset_id);

// Writes every bucket, then publishes `<root>/<id>/manifest`. If any write
// fails the manifest is not published and the error propagates.
ImportResult import_items(const std::filesystem::path& root, const std::string& dataset_id,
                          const RecordSource& source,
                          std::uint32_t bucket_capacity = kDefaultBucketCapacity);

// New rows start at manifest.row_count(); existing buckets are never touched.
ImportResult append_items(const std::filesystem::path& root, const DatasetManifest& manifest,
                          const RecordSource& source,
                          std::uint32_t bucket_capacity = kDefaultBucketCapacity);

DatasetManifest read_manifest(const std::filesystem::path& root, std::string_view dataset_id);

std::uint64_t digest_file(const std::filesystem::path& path);

// Read side of the raw data service. Buckets are loaded and digest-checked on
// first use, then shared by all readers.
class RawStore {
 public:
  RawStore(std::filesystem::path root, DatasetManifest manifest);
  static std::shared_ptr<RawStore> open(const std::filesystem::path& root,
                                        std::string_view dataset_id);

  const DatasetManifest& manifest() const { return manifest_; }
  RowId size() const { return row_count_; }

  std::string fetch_raw(RowId row) const;
  RawRecord fetch_record(RowId row) const { return parse_raw_record(fetch_raw(row)); }

  // Calls fn(row, bytes) for every row in the bucket, in order.
  void for_each_in_bucket(std::size_t bucket_index,
                          const std::function<void(RowId, std::string_view)>& fn) const;

  std::uint64_t bucket_file_size(std::size_t bucket_index) const;

  // Simulates an unreachable raw service for fault-injection tests.
  void set_reachable(bool reachable);

 private:
  struct LoadedBucket {
    std::string blob;  // whole bucket file
    std::vector<std::string_view> records;  // views into blob
  };

  std::shared_ptr<const LoadedBucket> load(std::size_t bucket_index) const;

  std::filesystem::path dir_;
  DatasetManifest manifest_;
  RowId row_count_ = 0;
  mutable std::mutex mutex_;
  mutable std::vector<std::shared_ptr<const LoadedBucket>> cache_;
  std::atomic<bool> reachable_{true};
};

}  // namespace ice
