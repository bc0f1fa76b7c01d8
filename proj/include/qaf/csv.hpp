#pragma once

// Minimal CSV: header row, comma separated, no quoting (fields never
// contain commas). Doubles use the shortest round-trip form.

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace qaf {

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    /// Column index by name; throws FormatError when absent.
    std::size_t column(const std::string& name) const;
    const std::string& at(std::size_t row, const std::string& name) const;
    double number(std::size_t row, const std::string& name) const;
};

CsvTable read_csv(std::istream& is);
void write_csv(std::ostream& os, const CsvTable& t);

/// Shortest text that parses back to the same double.
std::string format_double(double x);
double parse_double(const std::string& s);

}  // namespace qaf
