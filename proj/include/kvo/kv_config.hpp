#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace kvo {

// Line-oriented `key = value` text format used for disk presets and workload
// specs. `#` starts a comment; keys may repeat (e.g. one `point` line per
// calibration point) and keep their file order.
class KeyValueConfig {
public:
    static KeyValueConfig parse(std::string_view text);
    static KeyValueConfig load(const std::filesystem::path& path);

    void add(std::string key, std::string value);
    void set(std::string key, std::string value);

    bool contains(std::string_view key) const;
    std::optional<std::string> get(std::string_view key) const;  // last occurrence
    std::vector<std::string> get_all(std::string_view key) const;

    std::string require(std::string_view key) const;
    double get_double(std::string_view key, double fallback) const;
    std::uint64_t get_uint(std::string_view key, std::uint64_t fallback) const;
    double require_double(std::string_view key) const;
    std::uint64_t require_uint(std::string_view key) const;

    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

    std::string to_string() const;
    void save(const std::filesystem::path& path) const;

private:
    std::vector<std::pair<std::string, std::string>> entries_;
};

// Strict numeric parsing shared by config readers; throws FormatError.
double parse_double(std::string_view text, std::string_view what);
std::uint64_t parse_uint(std::string_view text, std::string_view what);

// Shortest round-trippable decimal form of a double.
std::string format_double(double value);

}  // namespace kvo
