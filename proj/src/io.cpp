#include "thermorom/io.hpp"

#include <cstring>

namespace trom {

namespace {
constexpr char kCheckpointMagic[8] = {'T', 'R', 'O', 'M', 'C', 'K', 'P', 'T'};
}

BinaryWriter::BinaryWriter(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary) {
  if (!out_) throw FormatError("cannot open " + path.string() + " for writing");
}

void BinaryWriter::bytes(const void* data, std::size_t n) {
  out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
  if (!out_) throw FormatError("write failed: " + path_.string());
}

void BinaryWriter::str(const std::string& s) {
  u64(s.size());
  bytes(s.data(), s.size());
}

void BinaryWriter::close() {
  out_.close();
  if (!out_) throw FormatError("write failed: " + path_.string());
}

BinaryReader::BinaryReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
  if (!in_) throw FormatError("cannot open " + path.string());
  size_ = std::filesystem::file_size(path);
}

void BinaryReader::bytes(void* data, std::size_t n) {
  in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError("truncated file: " + path_.string());
}

std::string BinaryReader::str() {
  const std::uint64_t n = u64();
  expect_remaining(n);
  std::string s(n, '\0');
  bytes(s.data(), n);
  return s;
}

void BinaryReader::expect_remaining(std::uint64_t n) {
  const auto pos = static_cast<std::uint64_t>(in_.tellg());
  if (pos > size_ || n > size_ - pos) throw FormatError("malformed header: " + path_.string());
}

bool BinaryReader::at_end() { return static_cast<std::uint64_t>(in_.tellg()) == size_; }

// ---------------------------------------------------------------------------

void Checkpoint::put(const std::string& name, std::vector<double> values) { f64_[name] = std::move(values); }

void Checkpoint::put(const std::string& name, const Vector& values) {
  f64_[name] = std::vector<double>(values.data(), values.data() + values.size());
}

void Checkpoint::put_ints(const std::string& name, std::vector<std::int64_t> values) {
  i64_[name] = std::move(values);
}

void Checkpoint::put_strings(const std::string& name, std::vector<std::string> values) {
  str_[name] = std::move(values);
}

bool Checkpoint::has(const std::string& name) const {
  return f64_.count(name) || i64_.count(name) || str_.count(name);
}

namespace {
template <class Map>
const auto& lookup(const Map& m, const std::string& name) {
  const auto it = m.find(name);
  if (it == m.end()) throw FormatError("checkpoint is missing record '" + name + "'");
  return it->second;
}
}  // namespace

const std::vector<double>& Checkpoint::f64(const std::string& name) const { return lookup(f64_, name); }

Vector Checkpoint::vector(const std::string& name) const {
  const auto& v = f64(name);
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

const std::vector<std::int64_t>& Checkpoint::ints(const std::string& name) const { return lookup(i64_, name); }

const std::vector<std::string>& Checkpoint::strings(const std::string& name) const { return lookup(str_, name); }

std::string Checkpoint::string(const std::string& name) const {
  const auto& v = strings(name);
  if (v.size() != 1) throw FormatError("checkpoint record '" + name + "' is not a single string");
  return v.front();
}

void Checkpoint::write(const std::filesystem::path& path) const {
  BinaryWriter w(path);
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(version);
  w.u64(f64_.size() + i64_.size() + str_.size());
  for (const auto& [name, v] : f64_) {
    w.str(name);
    w.pod<std::uint8_t>(0);
    w.u64(v.size());
    w.f64s(v.data(), v.size());
  }
  for (const auto& [name, v] : i64_) {
    w.str(name);
    w.pod<std::uint8_t>(1);
    w.u64(v.size());
    w.bytes(v.data(), v.size() * sizeof(std::int64_t));
  }
  for (const auto& [name, v] : str_) {
    w.str(name);
    w.pod<std::uint8_t>(2);
    w.u64(v.size());
    for (const auto& s : v) w.str(s);
  }
  w.close();
}

Checkpoint Checkpoint::read(const std::filesystem::path& path) {
  BinaryReader r(path);
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw FormatError("not a checkpoint: " + path.string());
  if (r.u32() != version) throw FormatError("unsupported checkpoint version: " + path.string());
  Checkpoint c;
  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const auto type = r.pod<std::uint8_t>();
    const std::uint64_t n = r.u64();
    switch (type) {
      case 0: {
        r.expect_remaining(n * sizeof(double));
        std::vector<double> v(n);
        r.f64s(v.data(), n);
        c.f64_[name] = std::move(v);
        break;
      }
      case 1: {
        r.expect_remaining(n * sizeof(std::int64_t));
        std::vector<std::int64_t> v(n);
        r.bytes(v.data(), n * sizeof(std::int64_t));
        c.i64_[name] = std::move(v);
        break;
      }
      case 2: {
        r.expect_remaining(n * sizeof(std::uint64_t));
        std::vector<std::string> v;
        v.reserve(n);
        for (std::uint64_t k = 0; k < n; ++k) v.push_back(r.str());
        c.str_[name] = std::move(v);
        break;
      }
      default: throw FormatError("unknown record type in " + path.string());
    }
  }
  if (!r.at_end()) throw FormatError("trailing bytes in " + path.string());
  return c;
}

}  // namespace trom
