#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include "arrest/errors.hpp"

namespace arrest {

// Flat key=value text with '#' comments. Keys are dotted (train.lambda=50).
// std::map keeps serialization order deterministic.
using KvMap = std::map<std::string, std::string>;

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace detail

inline KvMap parse_kv_text(const std::string& text, const std::string& origin) {
    KvMap out;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw config_error(origin + ":" + std::to_string(lineno) + ": expected key=value");
        const std::string key = detail::trim(t.substr(0, eq));
        const std::string value = detail::trim(t.substr(eq + 1));
        if (key.empty())
            throw config_error(origin + ":" + std::to_string(lineno) + ": empty key");
        if (out.count(key))
            throw config_error(origin + ":" + std::to_string(lineno) + ": duplicate key '" +
                               key + "'");
        out[key] = value;
    }
    return out;
}

inline KvMap load_kv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw io_error("cannot open '" + path.string() + "'");
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_kv_text(buf.str(), path.string());
}

inline std::string format_kv(const KvMap& kv) {
    std::ostringstream os;
    for (const auto& [k, v] : kv) os << k << '=' << v << '\n';
    return os.str();
}

// Write via a temp file and rename, so readers never observe partial output.
inline void write_kv_atomic(const KvMap& kv, const std::filesystem::path& path) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::trunc);
        if (!os) throw io_error("cannot write '" + tmp.string() + "'");
        os << format_kv(kv);
        if (!os) throw io_error("failed writing '" + tmp.string() + "'");
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace arrest
