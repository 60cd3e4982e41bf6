#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

namespace neurofuse {

// Little-endian primitive writers/readers shared by the checkpoint and graph
// cache formats. Byte order is explicit, independent of the host.
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path);
  void bytes(const void* data, std::size_t n);
  void u8(std::uint8_t v) { bytes(&v, 1); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void string(const std::string& s);
  /// Flushes and reports any stream failure.
  void finish();

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path);
  void bytes(void* data, std::size_t n);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::string string();
  void expect_end();

 private:
  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace neurofuse
