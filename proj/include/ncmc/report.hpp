#pragma once

#include <cstdint>
#include <cstdio>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace ncmc {

/// Round-trippable decimal text for a double.
inline std::string format_number(double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

/// Comma-separated table with a fixed header.
class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> columns) : columns_(std::move(columns)) {}

    class Row {
    public:
        Row& operator<<(double x) { return push(format_number(x)); }
        Row& operator<<(const std::string& s) { return push(s); }
        Row& operator<<(const char* s) { return push(s); }
        Row& operator<<(bool b) { return push(b ? "1" : "0"); }
        template <class T>
            requires std::is_integral_v<T>
        Row& operator<<(T n) {
            return push(std::to_string(n));
        }

    private:
        friend class CsvTable;
        Row& push(std::string cell) {
            cells_.push_back(std::move(cell));
            return *this;
        }
        std::vector<std::string> cells_;
    };

    Row& row() {
        rows_.emplace_back();
        return rows_.back();
    }

    const std::vector<std::string>& columns() const { return columns_; }

    void write(std::ostream& out) const {
        write_line(out, columns_);
        for (const auto& r : rows_) {
            if (r.cells_.size() != columns_.size()) throw std::logic_error("csv row width mismatch");
            write_line(out, r.cells_);
        }
    }

private:
    static void write_line(std::ostream& out, const std::vector<std::string>& cells) {
        for (std::size_t k = 0; k < cells.size(); ++k) out << (k ? "," : "") << cells[k];
        out << '\n';
    }

    std::vector<std::string> columns_;
    std::vector<Row> rows_;
};

} // namespace ncmc
