#pragma once

// Flat key=value run configuration with typed defaults.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace dcl::config {

namespace fs = std::filesystem;

enum class Kind { text, real, count, integer, flag, count_list };

struct KeyInfo {
    std::string_view key;
    Kind kind;
    std::string_view default_value;
    std::string_view help;
};

/// Every recognised key in echo order.
const std::vector<KeyInfo>& keys();

/// Values "auto" are replaced by resolve().
class RunConfig {
public:
    RunConfig();

    /// Lines of `key = value`; `#` starts a comment. `origin` prefixes error messages.
    void merge_text(std::string_view text, std::string_view origin);
    void merge_file(const fs::path& path);
    void set(std::string_view key, std::string_view value);
    /// "key=value".
    void assign(std::string_view assignment);

    const std::string& get(std::string_view key) const;
    bool is_auto(std::string_view key) const { return get(key) == "auto"; }

    std::string text(std::string_view key) const { return get(key); }
    double real(std::string_view key) const;
    std::size_t count(std::string_view key) const;
    std::uint64_t integer(std::string_view key) const;
    bool flag(std::string_view key) const;
    std::vector<std::size_t> count_list(std::string_view key) const;

    /// Fills dataset-dependent "auto" values and type-checks every key.
    RunConfig resolved() const;
    void validate() const;

    /// `key = value` lines in key order; parses back to the same config.
    std::string echo() const;
    const std::vector<std::pair<std::string, std::string>>& items() const noexcept { return items_; }

private:
    std::vector<std::pair<std::string, std::string>> items_;
};

/// Defaults, then the file (if any), then the assignments in order.
RunConfig load(const fs::path* file, const std::vector<std::string>& assignments);

enum class Phase : std::uint64_t { synth = 1, gan = 2, extract_clean = 3, extract_dropout = 4, cluster = 5, evaluate = 6 };

std::uint64_t phase_seed(std::uint64_t master, Phase phase);

bool is_image_dataset(std::string_view dataset);

} // namespace dcl::config
