#pragma once

#include <string>
#include <vector>

#include "cpreach/common.hpp"

namespace cpreach {

// Shortest decimal representation that round-trips the exact double.
std::string format_double(double v);

// Parse one CSV line into fields (no quoting; our files never contain commas
// inside fields).
std::vector<std::string> split_csv_line(const std::string& line);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

} // namespace cpreach
