#pragma once

// Exact text encoding helpers shared by the CSV writers and readers.

#include <charconv>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "timeguard/core/error.hpp"

namespace tg::io {

/// Shortest decimal form that parses back to the identical double.
inline void append_double(std::string& out, double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    out.append(buf, res.ptr);
}

inline std::string format_double(double v) {
    std::string s;
    append_double(s, v);
    return s;
}

inline double parse_double(std::string_view s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw ValidationError("malformed number '" + std::string(s) + "'");
    return v;
}

inline std::int64_t parse_int(std::string_view s) {
    std::int64_t v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
        throw ValidationError("malformed integer '" + std::string(s) + "'");
    return v;
}

/// Splits on commas; no quoting (none of our schemas needs it). Trailing CR is dropped.
inline void split_csv(std::string_view line, std::vector<std::string_view>& cells) {
    cells.clear();
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            cells.push_back(line.substr(start));
            return;
        }
        cells.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
}

}  // namespace tg::io
