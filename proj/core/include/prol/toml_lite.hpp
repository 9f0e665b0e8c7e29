#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace prol {

// Minimal TOML reader for the experiment config's flat key set: `key = value`
// lines with strings, integers, floats, booleans, homogeneous arrays, and #
// comments. Tables/sections are rejected; the config format is flat on purpose.
struct TomlValue {
    enum class Kind { boolean, integer, floating, string, array };
    Kind kind = Kind::string;
    bool b = false;
    std::int64_t i = 0;
    double f = 0.0;
    std::string s;
    std::vector<TomlValue> array;

    double as_number() const;  // integer or floating
};

using TomlTable = std::map<std::string, TomlValue>;

TomlTable parse_toml(const std::string& text);
TomlTable parse_toml_file(const std::filesystem::path& path);

std::string toml_escape(const std::string& s);

}  // namespace prol
