#pragma once

#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace synclr::text {

inline bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

/// Trims and collapses internal whitespace runs to one space.
inline std::string normalize_whitespace(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (char c : s) {
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(c);
  }
  return out;
}

/// ASCII lowercase; bytes >= 0x80 (UTF-8 continuation or lead bytes) pass through.
inline std::string to_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out)
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  return out;
}

inline bool is_ascii_punct(char c) {
  const auto u = static_cast<unsigned char>(c);
  return u < 0x80 && std::ispunct(u);
}

/// Lowercase, ASCII punctuation removed, whitespace collapsed.
inline std::string dedup_key(std::string_view s) {
  std::string stripped;
  stripped.reserve(s.size());
  for (char c : s)
    if (!is_ascii_punct(c)) stripped.push_back(c);
  return normalize_whitespace(to_lower(stripped));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.emplace_back(s.substr(start));
      return parts;
    }
    parts.emplace_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

/// Lowercase identifier suitable for a file stem: runs of non-alphanumerics become '_'.
inline std::string slug(std::string_view s) {
  std::string out;
  bool underscore = false;
  for (char c : to_lower(s)) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u) || u >= 0x80) {
      if (underscore && !out.empty()) out.push_back('_');
      underscore = false;
      out.push_back(c);
    } else {
      underscore = true;
    }
  }
  return out;
}

inline bool contains(std::string_view haystack, std::string_view needle) {
  return haystack.find(needle) != std::string_view::npos;
}

}  // namespace synclr::text
