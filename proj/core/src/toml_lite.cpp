#include "prol/toml_lite.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "prol/errors.hpp"

namespace prol {

double TomlValue::as_number() const {
    if (kind == Kind::integer) return static_cast<double>(i);
    if (kind == Kind::floating) return f;
    throw io_error("config value is not a number");
}

namespace {

struct Cursor {
    const std::string& text;
    std::size_t pos = 0;
    int line = 1;

    bool done() const { return pos >= text.size(); }
    char peek() const { return text[pos]; }
    char take() {
        char c = text[pos++];
        if (c == '\n') ++line;
        return c;
    }
    void skip_ws() {
        while (!done() && (peek() == ' ' || peek() == '\t')) ++pos;
    }
    [[noreturn]] void fail(const std::string& msg) const {
        throw io_error("config parse error at line " + std::to_string(line) + ": " + msg);
    }
};

std::string parse_string(Cursor& c) {
    c.take();  // opening quote
    std::string out;
    while (true) {
        if (c.done()) c.fail("unterminated string");
        char ch = c.take();
        if (ch == '"') return out;
        if (ch == '\n') c.fail("newline inside string");
        if (ch == '\\') {
            if (c.done()) c.fail("dangling escape");
            char e = c.take();
            switch (e) {
                case 'n': out.push_back('\n'); break;
                case 't': out.push_back('\t'); break;
                case '"': out.push_back('"'); break;
                case '\\': out.push_back('\\'); break;
                default: c.fail(std::string("unsupported escape \\") + e);
            }
        } else {
            out.push_back(ch);
        }
    }
}

TomlValue parse_scalar(Cursor& c);

TomlValue parse_array(Cursor& c) {
    c.take();  // '['
    TomlValue v;
    v.kind = TomlValue::Kind::array;
    while (true) {
        c.skip_ws();
        while (!c.done() && (c.peek() == '\n' || c.peek() == '\r')) {
            c.take();
            c.skip_ws();
        }
        if (c.done()) c.fail("unterminated array");
        if (c.peek() == ']') {
            c.take();
            return v;
        }
        v.array.push_back(parse_scalar(c));
        c.skip_ws();
        if (!c.done() && c.peek() == ',') c.take();
    }
}

TomlValue parse_scalar(Cursor& c) {
    c.skip_ws();
    if (c.done()) c.fail("missing value");
    char ch = c.peek();
    if (ch == '"') {
        TomlValue v;
        v.kind = TomlValue::Kind::string;
        v.s = parse_string(c);
        return v;
    }
    if (ch == '[') return parse_array(c);

    std::string token;
    while (!c.done() && c.peek() != '\n' && c.peek() != '\r' && c.peek() != '#' && c.peek() != ',' &&
           c.peek() != ']') {
        token.push_back(c.take());
    }
    while (!token.empty() && (token.back() == ' ' || token.back() == '\t')) token.pop_back();
    if (token.empty()) c.fail("missing value");

    TomlValue v;
    if (token == "true" || token == "false") {
        v.kind = TomlValue::Kind::boolean;
        v.b = token == "true";
        return v;
    }
    bool looks_float = token.find_first_of(".eE") != std::string::npos;
    if (!looks_float) {
        std::int64_t iv = 0;
        auto [p, ec] = std::from_chars(token.data(), token.data() + token.size(), iv);
        if (ec == std::errc() && p == token.data() + token.size()) {
            v.kind = TomlValue::Kind::integer;
            v.i = iv;
            return v;
        }
    }
    try {
        std::size_t used = 0;
        double fv = std::stod(token, &used);
        if (used == token.size()) {
            v.kind = TomlValue::Kind::floating;
            v.f = fv;
            return v;
        }
    } catch (...) {
    }
    c.fail("cannot parse value '" + token + "'");
}

}  // namespace

TomlTable parse_toml(const std::string& text) {
    Cursor c{text};
    TomlTable table;
    while (!c.done()) {
        c.skip_ws();
        if (c.done()) break;
        char ch = c.peek();
        if (ch == '\n' || ch == '\r') {
            c.take();
            continue;
        }
        if (ch == '#') {
            while (!c.done() && c.peek() != '\n') c.take();
            continue;
        }
        if (ch == '[') c.fail("sections are not supported; the config key set is flat");

        std::string key;
        while (!c.done() && (std::isalnum(static_cast<unsigned char>(c.peek())) || c.peek() == '_' ||
                             c.peek() == '-' || c.peek() == '.')) {
            key.push_back(c.take());
        }
        if (key.empty()) c.fail("expected a key");
        c.skip_ws();
        if (c.done() || c.peek() != '=') c.fail("expected '=' after key '" + key + "'");
        c.take();
        TomlValue value = parse_scalar(c);
        c.skip_ws();
        if (!c.done() && c.peek() == '#')
            while (!c.done() && c.peek() != '\n') c.take();
        if (!c.done() && c.peek() != '\n' && c.peek() != '\r')
            c.fail("trailing characters after value for key '" + key + "'");
        if (table.count(key)) c.fail("duplicate key '" + key + "'");
        table[key] = std::move(value);
    }
    return table;
}

TomlTable parse_toml_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw io_error("cannot open config file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_toml(ss.str());
}

std::string toml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '"' || c == '\\') out.push_back('\\');
        out.push_back(c);
    }
    return out;
}

}  // namespace prol
