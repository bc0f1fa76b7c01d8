#include "qaf/csv.hpp"

#include <charconv>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "qaf/error.hpp"

namespace qaf {

std::size_t CsvTable::column(const std::string& name) const {
    for (std::size_t k = 0; k < header.size(); ++k)
        if (header[k] == name) return k;
    throw FormatError("csv: missing column '" + name + "'");
}

const std::string& CsvTable::at(std::size_t row, const std::string& name) const { return rows.at(row).at(column(name)); }

double CsvTable::number(std::size_t row, const std::string& name) const { return parse_double(at(row, name)); }

namespace {

std::vector<std::string> split(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

CsvTable read_csv(std::istream& is) {
    CsvTable t;
    std::string line;
    if (!std::getline(is, line)) throw FormatError("csv: empty input");
    t.header = split(line);
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto row = split(line);
        if (row.size() != t.header.size())
            throw FormatError("csv: row " + std::to_string(t.rows.size() + 1) + " has " + std::to_string(row.size()) +
                              " fields, expected " + std::to_string(t.header.size()));
        t.rows.push_back(std::move(row));
    }
    return t;
}

void write_csv(std::ostream& os, const CsvTable& t) {
    auto line = [&](const std::vector<std::string>& v) {
        for (std::size_t k = 0; k < v.size(); ++k) os << (k ? "," : "") << v[k];
        os << '\n';
    };
    line(t.header);
    for (const auto& r : t.rows) line(r);
}

std::string format_double(double x) {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
    if (s == "inf") return INFINITY;
    if (s == "-inf") return -INFINITY;
    if (s == "nan") return NAN;
    double x = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), x);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) throw FormatError("csv: bad number '" + s + "'");
    return x;
}

}  // namespace qaf
