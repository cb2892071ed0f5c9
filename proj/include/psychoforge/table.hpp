#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace psychoforge {

/// Comma-delimited table with a header row. Fields containing commas,
/// quotes or newlines are quoted on write and unquoted on read.
struct Table {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::optional<std::size_t> column(std::string_view name) const;
};

Table parse_table(std::string_view text);
Table read_table(const std::filesystem::path& path);

void write_table(std::ostream& out, const Table& table);
void write_table(const std::filesystem::path& path, const Table& table);

/// Fixed, locale-independent formatting used for every numeric cell so
/// outputs are byte-stable across runs.
std::string format_real(double value, int decimals = 6);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view text);

}  // namespace psychoforge
