// Little-endian binary containers shared by datasets and checkpoints.
#pragma once

#include "thermorom/autodiff.hpp"

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace trom {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

/// Raised for unreadable or malformed files.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path);
  void bytes(const void* data, std::size_t n);
  template <class T>
  void pod(const T& v) {
    bytes(&v, sizeof(T));
  }
  void u32(std::uint32_t v) { pod(v); }
  void u64(std::uint64_t v) { pod(v); }
  void f64(double v) { pod(v); }
  void str(const std::string& s);
  void f64s(const double* data, std::size_t n) { bytes(data, n * sizeof(double)); }
  void close();

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path);
  void bytes(void* data, std::size_t n);
  template <class T>
  T pod() {
    T v;
    bytes(&v, sizeof(T));
    return v;
  }
  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::uint64_t u64() { return pod<std::uint64_t>(); }
  double f64() { return pod<double>(); }
  std::string str();
  void f64s(double* data, std::size_t n) { bytes(data, n * sizeof(double)); }
  /// Guards allocations driven by header counts.
  void expect_remaining(std::uint64_t n);
  bool at_end();

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::uint64_t size_ = 0;
};

/// Named records: f64 arrays, i64 arrays and string lists.
/// Layout: "TROMCKPT", u32 version, u64 record count, then per record a
/// length-prefixed name, u8 type (0 f64, 1 i64, 2 strings), u64 count, payload.
/// Strings are u64 length + bytes.
class Checkpoint {
 public:
  static constexpr std::uint32_t version = 1;

  void put(const std::string& name, std::vector<double> values);
  void put(const std::string& name, const Vector& values);
  void put_ints(const std::string& name, std::vector<std::int64_t> values);
  void put_strings(const std::string& name, std::vector<std::string> values);

  [[nodiscard]] bool has(const std::string& name) const;
  [[nodiscard]] const std::vector<double>& f64(const std::string& name) const;
  [[nodiscard]] Vector vector(const std::string& name) const;
  [[nodiscard]] const std::vector<std::int64_t>& ints(const std::string& name) const;
  [[nodiscard]] const std::vector<std::string>& strings(const std::string& name) const;
  [[nodiscard]] std::string string(const std::string& name) const;

  void write(const std::filesystem::path& path) const;
  static Checkpoint read(const std::filesystem::path& path);

 private:
  std::map<std::string, std::vector<double>> f64_;
  std::map<std::string, std::vector<std::int64_t>> i64_;
  std::map<std::string, std::vector<std::string>> str_;
};

}  // namespace trom
