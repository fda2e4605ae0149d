// csv.hpp -- deterministic CSV emission: comma separators, LF line endings,
// one header row, doubles at 17 significant digits.
#pragma once

#include "smoe/core.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace smoe {

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header) : header_(std::move(header)) {}

    CsvWriter& cell(const std::string& v) {
        row_.push_back(v);
        return *this;
    }
    CsvWriter& cell(const char* v) { return cell(std::string(v)); }
    CsvWriter& cell(double v) { return cell(format_double(v)); }
    CsvWriter& cell(Index v) { return cell(std::to_string(v)); }
    CsvWriter& cell(std::int64_t v) { return cell(std::to_string(v)); }
    CsvWriter& cell(std::uint64_t v) { return cell(std::to_string(v)); }

    void end_row() {
        if (row_.size() != header_.size())
            throw InvalidInput("CsvWriter: row width does not match header");
        rows_.push_back(row_);
        row_.clear();
    }

    std::string str() const {
        std::ostringstream os;
        write_line(os, header_);
        for (const auto& r : rows_) write_line(os, r);
        return os.str();
    }

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);  // binary: keep LF endings
        if (!os) throw InvalidInput("CsvWriter: cannot open " + path);
        os << str();
        if (!os) throw NumericalFailure("CsvWriter: write failed for " + path);
    }

private:
    static void write_line(std::ostringstream& os, const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) os << ',';
            os << cells[i];
        }
        os << '\n';
    }

    std::vector<std::string> header_;
    std::vector<std::string> row_;
    std::vector<std::vector<std::string>> rows_;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

inline CsvTable read_csv(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidInput("read_csv: cannot open " + path);
    CsvTable table;
    std::string line;
    bool first = true;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::vector<std::string> cells;
        std::string cell;
        std::istringstream ls(line);
        while (std::getline(ls, cell, ',')) cells.push_back(cell);
        if (!line.empty() && line.back() == ',') cells.push_back("");
        if (first) {
            table.header = cells;
            first = false;
        } else {
            table.rows.push_back(cells);
        }
    }
    return table;
}

// Header-and-width validation used by the CLI schema-check mode.
inline bool csv_matches_schema(const CsvTable& table, const std::vector<std::string>& expected_prefix,
                               std::string* error = nullptr) {
    if (table.header.size() < expected_prefix.size()) {
        if (error) *error = "header has fewer columns than the schema requires";
        return false;
    }
    for (std::size_t i = 0; i < expected_prefix.size(); ++i) {
        if (table.header[i] != expected_prefix[i]) {
            if (error)
                *error = "column " + std::to_string(i) + " is '" + table.header[i] +
                         "', expected '" + expected_prefix[i] + "'";
            return false;
        }
    }
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        if (table.rows[r].size() != table.header.size()) {
            if (error) *error = "row " + std::to_string(r + 1) + " width mismatch";
            return false;
        }
    }
    return true;
}

}  // namespace smoe
