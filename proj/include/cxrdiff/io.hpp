#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cxrdiff/errors.hpp"

namespace cxrdiff {

namespace fs = std::filesystem;
using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "float32 payload codec assumes a little-endian host");

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("FileNotFound", path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline std::vector<char> read_binary_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error("FileNotFound", path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline json read_json_file(const fs::path& path) {
  auto text = read_text_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw data_error("FormatError", path.string() + ": " + e.what());
  }
}

// Appends doubles as little-endian float32.
inline void append_f32(std::string& out, const double* values, std::size_t n) {
  const std::size_t base = out.size();
  out.resize(base + 4 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const float f = static_cast<float>(values[i]);
    std::memcpy(out.data() + base + 4 * i, &f, 4);
  }
}

inline std::vector<double> decode_f32(const char* bytes, std::size_t n) {
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    float f;
    std::memcpy(&f, bytes + 4 * i, 4);
    out[i] = f;
  }
  return out;
}

// Writes via temp file + rename so readers never observe a partial file.
inline void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error("WriteError", tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw data_error("WriteError", tmp.string());
  }
  fs::rename(tmp, path);
}

// Collects artifacts in memory and publishes them together. Nothing reaches
// the declared paths unless commit() is called.
class ArtifactSet {
 public:
  void add(fs::path path, std::string bytes) {
    entries_.push_back({std::move(path), std::move(bytes)});
  }
  void add_json(fs::path path, const json& j) { add(std::move(path), j.dump(2) + "\n"); }

  void commit() const {
    for (const auto& e : entries_) write_file_atomic(e.path, e.bytes);
  }

  std::vector<fs::path> paths() const {
    std::vector<fs::path> out;
    for (const auto& e : entries_) out.push_back(e.path);
    return out;
  }
  bool empty() const { return entries_.empty(); }

 private:
  struct Entry {
    fs::path path;
    std::string bytes;
  };
  std::vector<Entry> entries_;
};

// Fixed-format number rendering keeps CSV output byte-stable.
inline std::string fmt_fixed(double v, int digits) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(digits) << v;
  return ss.str();
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::string csv_row(const std::vector<std::string>& cells) {
  std::string line;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) line += ',';
    line += csv_escape(cells[i]);
  }
  return line + "\n";
}

// JSON-lines logging on stderr.
inline void log_event(const std::string& level, const std::string& msg, json fields = json::object()) {
  fields["level"] = level;
  fields["msg"] = msg;
  std::cerr << fields.dump() << "\n";
}

}  // namespace cxrdiff
