#include "ice/raw_store.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ice/hash.hpp"

namespace ice {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr char kBucketMagic[8] = {'I', 'C', 'E', 'B', 'K', 'T', '0', '1'};
constexpr std::size_t kBucketHeaderSize = 8 + 8 + 4;
constexpr std::size_t kMaxSkipReasons = 16;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(std::string_view bytes, std::size_t pos, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  }
  return v;
}

std::string bucket_file_name(std::uint32_t bucket_id) {
  std::ostringstream name;
  name << "bucket-";
  name.width(6);
  name.fill('0');
  name << bucket_id << ".bin";
  return name.str();
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Unavailable("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomically(const fs::path& path, std::string_view bytes) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw Error("short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw Error("cannot publish " + path.string());
  }
}

// Validates a record and returns the bytes to store, or a skip reason.
std::optional<std::string> check_record(const std::string& bytes, std::string& reason) {
  std::string_view view = bytes;
  while (!view.empty() && (view.back() == '\r' || view.back() == '\n')) view.remove_suffix(1);
  if (view.find_first_not_of(" \t") == std::string_view::npos) {
    reason = "blank line";
    return std::nullopt;
  }
  try {
    parse_raw_record(view);
  } catch (const InvalidArgument& e) {
    reason = e.what();
    return std::nullopt;
  }
  return std::string(view);
}

// Drains `source` into new buckets numbered after the manifest's last one.
// Nothing is published here; the caller writes the manifest.
ImportResult write_buckets(const fs::path& dir, DatasetManifest manifest,
                           const RecordSource& source, std::uint32_t capacity) {
  if (capacity == 0) throw InvalidArgument("bucket capacity must be at least 1");
  ImportResult result;
  RowId next_row = manifest.row_count();
  auto next_bucket_id = static_cast<std::uint32_t>(manifest.buckets.size());

  std::vector<std::string> pending;
  std::vector<fs::path> written;
  auto flush = [&] {
    if (pending.empty()) return;
    BucketInfo info;
    info.bucket_id = next_bucket_id++;
    info.start_row_id = next_row;
    info.row_count = static_cast<std::uint32_t>(pending.size());
    info.file = bucket_file_name(info.bucket_id);
    const fs::path path = dir / info.file;
    if (fs::exists(path)) {
      throw ImmutabilityViolation("bucket " + std::to_string(info.bucket_id) +
                                  " already exists; buckets are immutable");
    }
    std::string bytes(kBucketMagic, sizeof(kBucketMagic));
    put_u64(bytes, info.start_row_id);
    put_u32(bytes, info.row_count);
    for (const auto& rec : pending) {
      put_u32(bytes, static_cast<std::uint32_t>(rec.size()));
      bytes += rec;
    }
    write_file_atomically(path, bytes);
    written.push_back(path);
    info.digest = fnv1a64(bytes);
    next_row += info.row_count;
    manifest.buckets.push_back(std::move(info));
    pending.clear();
  };

  try {
    while (auto raw = source()) {
      std::string reason;
      if (auto stored = check_record(*raw, reason)) {
        pending.push_back(std::move(*stored));
        ++result.report.imported;
        if (pending.size() == capacity) flush();
      } else {
        ++result.report.skipped;
        if (result.report.skip_reasons.size() < kMaxSkipReasons) {
          result.report.skip_reasons.push_back(reason);
        }
      }
    }
    flush();
  } catch (...) {
    // Unpublished buckets from an aborted write are not part of the dataset.
    std::error_code ec;
    for (const auto& path : written) fs::remove(path, ec);
    throw;
  }
  result.manifest = std::move(manifest);
  return result;
}

void publish_manifest(const fs::path& dir, const DatasetManifest& manifest) {
  write_file_atomically(dir / "manifest", manifest.to_text());
}

}  // namespace

Label parse_label(const std::string& text) {
  if (text == "positive" || text == "+1" || text == "1") return Label::kPositive;
  if (text == "negative" || text == "-1" || text == "0") return Label::kNegative;
  throw InvalidArgument("unknown label '" + text + "'");
}

std::string to_hex(std::uint64_t value) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = kDigits[value & 0xf];
    value >>= 4;
  }
  return out;
}

std::uint64_t from_hex(std::string_view text) {
  if (text.empty() || text.size() > 16) throw InvalidArgument("bad hex digest");
  std::uint64_t v = 0;
  for (char c : text) {
    v <<= 4;
    if (c >= '0' && c <= '9') v |= static_cast<std::uint64_t>(c - '0');
    else if (c >= 'a' && c <= 'f') v |= static_cast<std::uint64_t>(c - 'a' + 10);
    else throw InvalidArgument("bad hex digest");
  }
  return v;
}

RawRecord parse_raw_record(std::string_view bytes) {
  json j = json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw InvalidArgument("record is not a JSON object");
  RawRecord r;
  auto field = [&](const char* name, std::string& out) {
    auto it = j.find(name);
    if (it == j.end() || !it->is_string()) {
      throw InvalidArgument(std::string("record missing string field '") + name + "'");
    }
    out = it->get<std::string>();
  };
  field("external_id", r.external_id);
  field("url", r.url);
  field("title", r.title);
  field("body_text", r.body_text);
  return r;
}

std::string serialize_raw_record(const RawRecord& record) {
  json j = json::object();
  j["external_id"] = record.external_id;
  j["url"] = record.url;
  j["title"] = record.title;
  j["body_text"] = record.body_text;
  return j.dump();
}

RowId DatasetManifest::row_count() const {
  return buckets.empty() ? 0 : buckets.back().end_row_id();
}

std::size_t DatasetManifest::bucket_for(RowId row) const {
  if (row >= row_count()) {
    throw OutOfRange("row " + std::to_string(row) + " out of range [0, " +
                     std::to_string(row_count()) + ")");
  }
  auto it = std::upper_bound(buckets.begin(), buckets.end(), row,
                             [](RowId r, const BucketInfo& b) { return r < b.start_row_id; });
  return static_cast<std::size_t>(std::distance(buckets.begin(), it)) - 1;
}

void DatasetManifest::validate() const {
  RowId expected = 0;
  for (std::size_t i = 0; i < buckets.size(); ++i) {
    const auto& b = buckets[i];
    if (b.bucket_id != i) throw CorruptionError("bucket ids are not dense");
    if (b.start_row_id != expected) throw CorruptionError("bucket row ranges are not contiguous");
    if (b.row_count == 0) throw CorruptionError("empty bucket in manifest");
    expected = b.end_row_id();
  }
}

std::string DatasetManifest::to_text() const {
  json j;
  j["dataset_id"] = dataset_id;
  j["row_count"] = row_count();
  j["schema"] = schema;
  j["buckets"] = json::array();
  for (const auto& b : buckets) {
    j["buckets"].push_back({{"bucket_id", b.bucket_id},
                            {"start_row_id", b.start_row_id},
                            {"row_count", b.row_count},
                            {"file", b.file},
                            {"digest", to_hex(b.digest)}});
  }
  return j.dump(2) + "\n";
}

DatasetManifest DatasetManifest::from_text(std::string_view text) {
  json j = json::parse(text.begin(), text.end(), nullptr, false);
  if (j.is_discarded()) throw CorruptionError("manifest is not valid JSON");
  DatasetManifest m;
  try {
    m.dataset_id = j.at("dataset_id").get<std::string>();
    m.schema = j.at("schema").get<std::vector<std::string>>();
    for (const auto& b : j.at("buckets")) {
      BucketInfo info;
      info.bucket_id = b.at("bucket_id").get<std::uint32_t>();
      info.start_row_id = b.at("start_row_id").get<RowId>();
      info.row_count = b.at("row_count").get<std::uint32_t>();
      info.file = b.at("file").get<std::string>();
      info.digest = from_hex(b.at("digest").get<std::string>());
      m.buckets.push_back(std::move(info));
    }
    if (j.at("row_count").get<RowId>() != m.row_count()) {
      throw CorruptionError("manifest row_count disagrees with buckets");
    }
  } catch (const json::exception& e) {
    throw CorruptionError(std::string("malformed manifest: ") + e.what());
  }
  m.validate();
  return m;
}

RecordSource lines_from(std::istream& in) {
  return [&in]() -> std::optional<std::string> {
    std::string line;
    if (!std::getline(in, line)) return std::nullopt;
    return line;
  };
}

RecordSource records_from(std::vector<RawRecord> records) {
  auto shared = std::make_shared<std::vector<RawRecord>>(std::move(records));
  auto next = std::make_shared<std::size_t>(0);
  return [shared, next]() -> std::optional<std::string> {
    if (*next >= shared->size()) return std::nullopt;
    return serialize_raw_record((*shared)[(*next)++]);
  };
}

fs::path dataset_dir(const fs::path& root, std::string_view dataset_id) {
  if (dataset_id.empty() || dataset_id.find('/') != std::string_view::npos ||
      dataset_id == "." || dataset_id == "..") {
    throw InvalidArgument("invalid dataset id '" + std::string(dataset_id) + "'");
  }
  return root / std::string(dataset_id);
}

ImportResult import_items(const fs::path& root, const std::string& dataset_id,
                          const RecordSource& source, std::uint32_t bucket_capacity) {
  const fs::path dir = dataset_dir(root, dataset_id);
  if (fs::exists(dir / "manifest")) {
    throw ImmutabilityViolation("dataset '" + dataset_id + "' already exists; use append");
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create " + dir.string() + ": " + ec.message());
  DatasetManifest manifest;
  manifest.dataset_id = dataset_id;
  ImportResult result = write_buckets(dir, std::move(manifest), source, bucket_capacity);
  publish_manifest(dir, result.manifest);
  return result;
}

ImportResult append_items(const fs::path& root, const DatasetManifest& manifest,
                          const RecordSource& source, std::uint32_t bucket_capacity) {
  manifest.validate();
  const fs::path dir = dataset_dir(root, manifest.dataset_id);
  if (!fs::exists(dir / "manifest")) {
    // Appending to a dataset that was never imported behaves as an import.
    if (!manifest.buckets.empty()) throw NotFound("dataset directory missing for append");
    return import_items(root, manifest.dataset_id, source, bucket_capacity);
  }
  const DatasetManifest on_disk = read_manifest(root, manifest.dataset_id);
  if (!(on_disk == manifest)) {
    throw ImmutabilityViolation("manifest is stale; published buckets cannot be rewritten");
  }
  ImportResult result = write_buckets(dir, manifest, source, bucket_capacity);
  if (result.report.imported == 0) throw InvalidArgument("append requires at least one record");
  for (std::size_t i = 0; i < manifest.buckets.size(); ++i) {
    if (!(result.manifest.buckets[i] == manifest.buckets[i])) {
      throw ImmutabilityViolation("existing bucket changed during append");
    }
  }
  publish_manifest(dir, result.manifest);
  return result;
}

DatasetManifest read_manifest(const fs::path& root, std::string_view dataset_id) {
  const fs::path path = dataset_dir(root, dataset_id) / "manifest";
  if (!fs::exists(path)) throw NotFound("no manifest at " + path.string());
  return DatasetManifest::from_text(read_file(path));
}

std::uint64_t digest_file(const fs::path& path) { return fnv1a64(read_file(path)); }

RawStore::RawStore(fs::path root, DatasetManifest manifest)
    : dir_(dataset_dir(root, manifest.dataset_id)),
      manifest_(std::move(manifest)),
      row_count_(manifest_.row_count()),
      cache_(manifest_.buckets.size()) {
  manifest_.validate();
}

std::shared_ptr<RawStore> RawStore::open(const fs::path& root, std::string_view dataset_id) {
  return std::make_shared<RawStore>(root, read_manifest(root, dataset_id));
}

std::uint64_t RawStore::bucket_file_size(std::size_t bucket_index) const {
  std::error_code ec;
  const auto size = fs::file_size(dir_ / manifest_.buckets.at(bucket_index).file, ec);
  return ec ? 0 : size;
}

void RawStore::set_reachable(bool reachable) { reachable_ = reachable; }

std::shared_ptr<const RawStore::LoadedBucket> RawStore::load(std::size_t bucket_index) const {
  if (!reachable_) throw Unavailable("raw data service unreachable");
  {
    std::lock_guard lock(mutex_);
    if (cache_[bucket_index]) return cache_[bucket_index];
  }
  const BucketInfo& info = manifest_.buckets[bucket_index];
  auto loaded = std::make_shared<LoadedBucket>();
  loaded->blob = read_file(dir_ / info.file);
  const std::string_view blob = loaded->blob;
  if (fnv1a64(blob) != info.digest) {
    throw CorruptionError("digest mismatch for bucket " + std::to_string(info.bucket_id));
  }
  if (blob.size() < kBucketHeaderSize ||
      std::memcmp(blob.data(), kBucketMagic, sizeof(kBucketMagic)) != 0 ||
      get_le(blob, 8, 8) != info.start_row_id || get_le(blob, 16, 4) != info.row_count) {
    throw CorruptionError("bad header in bucket " + std::to_string(info.bucket_id));
  }
  std::size_t pos = kBucketHeaderSize;
  loaded->records.reserve(info.row_count);
  for (std::uint32_t i = 0; i < info.row_count; ++i) {
    if (pos + 4 > blob.size()) throw CorruptionError("truncated bucket");
    const auto len = static_cast<std::size_t>(get_le(blob, pos, 4));
    pos += 4;
    if (pos + len > blob.size()) throw CorruptionError("truncated bucket");
    loaded->records.push_back(blob.substr(pos, len));
    pos += len;
  }
  std::lock_guard lock(mutex_);
  if (!cache_[bucket_index]) cache_[bucket_index] = std::move(loaded);
  return cache_[bucket_index];
}

std::string RawStore::fetch_raw(RowId row) const {
  const std::size_t b = manifest_.bucket_for(row);
  auto bucket = load(b);
  return std::string(bucket->records[row - manifest_.buckets[b].start_row_id]);
}

void RawStore::for_each_in_bucket(std::size_t bucket_index,
                                  const std::function<void(RowId, std::string_view)>& fn) const {
  auto bucket = load(bucket_index);
  RowId row = manifest_.buckets[bucket_index].start_row_id;
  for (std::string_view rec : bucket->records) fn(row++, rec);
}

}  // namespace ice
