#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "lics/error.hpp"

namespace lics {

namespace fs = std::filesystem;

inline std::vector<char> read_file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  in.seekg(0, std::ios::end);
  auto n = in.tellg();
  in.seekg(0);
  std::vector<char> buf(static_cast<std::size_t>(n));
  in.read(buf.data(), n);
  if (!in) throw IoError("short read from " + p.string());
  return buf;
}

inline std::string read_file_text(const fs::path& p) {
  auto b = read_file_bytes(p);
  return std::string(b.begin(), b.end());
}

// Write via a temp file in the same directory, then rename. Readers never see
// a partially written file under the final name.
inline void atomic_write(const fs::path& p, const void* data,
                         std::size_t size) {
  fs::path dir = p.parent_path();
  if (!dir.empty()) fs::create_directories(dir);
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(static_cast<const char*>(data),
              static_cast<std::streamsize>(size));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, p);
}

inline void atomic_write(const fs::path& p, const std::string& text) {
  atomic_write(p, text.data(), text.size());
}

}  // namespace lics
