#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace fastmoco {

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory " + dir + ": " + ec.message());
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Write-to-temp-then-rename so concurrent readers never see partial files.
inline void write_text_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for write: " + tmp);
    out << content;
    if (!out) throw std::runtime_error("write error: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

/// Appends one CSV row, creating the file (with header) on first use.
/// Rewrites atomically; existing rows are never dropped or overwritten.
inline void append_csv_row(const std::string& path, const std::string& header,
                           const std::string& row) {
  std::string content;
  if (std::filesystem::exists(path)) {
    content = read_text_file(path);
    if (!content.empty() && content.back() != '\n') content += "\n";
  } else {
    content = header + "\n";
  }
  content += row + "\n";
  write_text_atomic(path, content);
}

}  // namespace fastmoco
