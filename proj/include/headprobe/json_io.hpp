#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

#include "headprobe/error.hpp"

namespace headprobe {

using Json = nlohmann::json;

namespace detail {

inline void append_double(std::string& out, double v) {
  if (!std::isfinite(v)) {
    out += "null";
    return;
  }
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  out += buf;
  // keep floats visibly floats so "1.0" does not re-read as an integer field
  std::string_view s(buf);
  if (s.find_first_of(".eEn") == std::string_view::npos) out += ".0";
}

inline void append_canonical(std::string& out, const Json& j) {
  switch (j.type()) {
    case Json::value_t::object: {
      out += '{';
      bool first = true;
      for (const auto& [key, value] : j.items()) {  // nlohmann objects are key-sorted
        if (!first) out += ',';
        first = false;
        out += Json(key).dump();
        out += ':';
        append_canonical(out, value);
      }
      out += '}';
      break;
    }
    case Json::value_t::array: {
      out += '[';
      for (std::size_t i = 0; i < j.size(); ++i) {
        if (i) out += ',';
        append_canonical(out, j[i]);
      }
      out += ']';
      break;
    }
    case Json::value_t::number_float:
      append_double(out, j.get<double>());
      break;
    default:
      out += j.dump();
  }
}

}  // namespace detail

/// Compact JSON with sorted keys and every float printed with 17 significant
/// digits, so equal documents serialize to identical bytes and parse back to
/// the same doubles.
inline std::string dump_canonical(const Json& j) {
  std::string out;
  detail::append_canonical(out, j);
  out += '\n';
  return out;
}

inline std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
  if (!out) throw Error(ErrorCode::IoError, "write failed for " + path.string());
}

inline Json parse_json_text(std::string_view text) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw Error(ErrorCode::MalformedDocument, e.what());
  }
}

}  // namespace headprobe
