#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace convprobe {

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temp file and renames it over path.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

// printf-style "%.{digits}g" formatting.
std::string format_g(double v, int digits = 9);

// Splits text into lines (LF or CRLF), dropping a trailing empty line.
std::vector<std::string> split_lines(const std::string& text);
// Comma-separated fields; no quoting.
std::vector<std::string> split_fields(const std::string& line, char sep = ',');

}  // namespace convprobe
