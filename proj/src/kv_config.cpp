#include "kvo/kv_config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "kvo/error.hpp"

namespace kvo {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

}  // namespace

double parse_double(std::string_view text, std::string_view what) {
    text = trim(text);
    double value = 0.0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
        throw FormatError("invalid number for " + std::string(what) + ": '" + std::string(text) + "'");
    }
    return value;
}

std::uint64_t parse_uint(std::string_view text, std::string_view what) {
    text = trim(text);
    std::uint64_t value = 0;
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
        throw FormatError("invalid unsigned integer for " + std::string(what) + ": '" + std::string(text) + "'");
    }
    return value;
}

std::string format_double(double value) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), value);
    (void)ec;
    return std::string(buf, ptr);
}

KeyValueConfig KeyValueConfig::parse(std::string_view text) {
    KeyValueConfig cfg;
    std::size_t line_no = 0;
    while (!text.empty()) {
        ++line_no;
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw FormatError("line " + std::to_string(line_no) + ": expected 'key = value'");
        }
        const auto key = trim(line.substr(0, eq));
        if (key.empty()) throw FormatError("line " + std::to_string(line_no) + ": empty key");
        cfg.add(std::string(key), std::string(trim(line.substr(eq + 1))));
    }
    return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

void KeyValueConfig::add(std::string key, std::string value) { entries_.emplace_back(std::move(key), std::move(value)); }

void KeyValueConfig::set(std::string key, std::string value) {
    std::erase_if(entries_, [&](const auto& e) { return e.first == key; });
    add(std::move(key), std::move(value));
}

bool KeyValueConfig::contains(std::string_view key) const { return get(key).has_value(); }

std::optional<std::string> KeyValueConfig::get(std::string_view key) const {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
        if (it->first == key) return it->second;
    return std::nullopt;
}

std::vector<std::string> KeyValueConfig::get_all(std::string_view key) const {
    std::vector<std::string> out;
    for (const auto& [k, v] : entries_)
        if (k == key) out.push_back(v);
    return out;
}

std::string KeyValueConfig::require(std::string_view key) const {
    auto v = get(key);
    if (!v) throw FormatError("missing required key '" + std::string(key) + "'");
    return *v;
}

double KeyValueConfig::get_double(std::string_view key, double fallback) const {
    auto v = get(key);
    return v ? parse_double(*v, key) : fallback;
}

std::uint64_t KeyValueConfig::get_uint(std::string_view key, std::uint64_t fallback) const {
    auto v = get(key);
    return v ? parse_uint(*v, key) : fallback;
}

double KeyValueConfig::require_double(std::string_view key) const { return parse_double(require(key), key); }

std::uint64_t KeyValueConfig::require_uint(std::string_view key) const { return parse_uint(require(key), key); }

std::string KeyValueConfig::to_string() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
    return out;
}

void KeyValueConfig::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw StorageError("cannot write config file " + path.string());
    out << to_string();
}

}  // namespace kvo
