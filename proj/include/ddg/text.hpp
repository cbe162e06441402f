#pragma once

// key=value text helpers shared by configs, manifests and run records.
// Numbers are written in shortest round-trip form so text echoes are lossless.

#include <charconv>
#include <cstdint>
#include <sstream>
#include <string>
#include <system_error>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "ddg/error.hpp"

namespace ddg {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

inline std::string format_double(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline double parse_double(const std::string& key, const std::string& s) {
    double v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw ConfigError("'" + key + "': expected a number, got '" + s + "'");
    return v;
}

template <typename I>
I parse_integer(const std::string& key, const std::string& s) {
    I v = 0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw ConfigError("'" + key + "': expected an integer, got '" + s + "'");
    return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("'" + key + "': expected true or false, got '" + s + "'");
}

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur.push_back(c);
        }
    }
    if (!cur.empty() || !out.empty()) out.push_back(cur);
    return out;
}

template <typename Seq>
std::string join_list(const Seq& xs) {
    std::string s;
    for (const auto& x : xs) {
        if (!s.empty()) s += ',';
        if constexpr (std::is_floating_point_v<std::decay_t<decltype(x)>>)
            s += format_double(x);
        else
            s += std::to_string(x);
    }
    return s;
}

inline void write_kv(std::ostream& os, const KeyValues& kv) {
    for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
}

inline boost::property_tree::ptree parse_ini(const std::string& text, const std::string& origin) {
    boost::property_tree::ptree tree;
    std::istringstream in(text);
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError(origin + ": line " + std::to_string(e.line()) + ": " + e.message());
    }
    return tree;
}

} // namespace ddg
