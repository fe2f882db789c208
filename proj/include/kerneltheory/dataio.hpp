#pragma once

#include "kerneltheory/common.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string_view>

namespace kt {

struct LabelledData {
    Matrix X;  // rows: samples
    Vector y;  // +1 / -1
    std::vector<std::string> feature_names;
    std::string positive_label;
};

namespace detail {

inline std::vector<std::string> split_row(const std::string& line, char delim) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, delim)) {
        const auto b = cell.find_first_not_of(" \t\r");
        const auto e = cell.find_last_not_of(" \t\r");
        cells.push_back(b == std::string::npos ? std::string{} : cell.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == delim) cells.emplace_back();
    return cells;
}

}  // namespace detail

// Delimited numeric table with a one-line header. `label_column` becomes +1 where it
// equals `positive_label`, -1 elsewhere; "auto" takes the larger of exactly two
// distinct labels as positive. Every other column is a feature.
inline LabelledData parse_labelled_csv(std::istream& in, const std::string& label_column,
                                       const std::string& positive_label = "auto", char delim = ',') {
    std::string line;
    if (!std::getline(in, line)) throw InvalidArgument("data file is empty");
    const auto header = detail::split_row(line, delim);
    const auto it = std::find(header.begin(), header.end(), label_column);
    if (it == header.end()) throw InvalidArgument("label column '" + label_column + "' not in header");
    const auto label_idx = static_cast<std::size_t>(it - header.begin());
    LabelledData out;
    for (std::size_t c = 0; c < header.size(); ++c)
        if (c != label_idx) out.feature_names.push_back(header[c]);
    require(!out.feature_names.empty(), "data file has no feature columns");

    std::vector<std::vector<double>> rows;
    std::vector<std::string> labels;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto cells = detail::split_row(line, delim);
        if (cells.size() != header.size())
            throw InvalidArgument("data line " + std::to_string(lineno) + ": expected " + std::to_string(header.size()) +
                                  " fields, found " + std::to_string(cells.size()));
        std::vector<double> row;
        row.reserve(header.size() - 1);
        for (std::size_t c = 0; c < cells.size(); ++c) {
            if (c == label_idx) {
                labels.push_back(cells[c]);
                continue;
            }
            double v = 0;
            const auto& s = cells[c];
            const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
            if (ec != std::errc{} || p != s.data() + s.size() || !std::isfinite(v))
                throw InvalidArgument("data line " + std::to_string(lineno) + ": non-numeric field '" + s + "'");
            row.push_back(v);
        }
        rows.push_back(std::move(row));
    }
    require(!rows.empty(), "data file has no rows");

    std::string positive = positive_label;
    if (positive == "auto") {
        std::map<double, std::string> distinct;
        for (const auto& l : labels) {
            double v = 0;
            const auto [p, ec] = std::from_chars(l.data(), l.data() + l.size(), v);
            if (ec != std::errc{} || p != l.data() + l.size())
                throw InvalidArgument("labels are not numeric; set the positive label explicitly");
            distinct.emplace(v, l);
        }
        if (distinct.size() != 2) throw InvalidArgument("automatic labelling needs exactly two distinct labels");
        positive = distinct.rbegin()->second;
    }
    out.positive_label = positive;
    const auto n = static_cast<Eigen::Index>(rows.size());
    const auto d = static_cast<Eigen::Index>(out.feature_names.size());
    out.X.resize(n, d);
    out.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) out.X(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        out.y(i) = labels[static_cast<std::size_t>(i)] == positive ? 1.0 : -1.0;
    }
    return out;
}

inline LabelledData load_labelled_csv(const std::filesystem::path& path, const std::string& label_column,
                                      const std::string& positive_label = "auto", char delim = ',') {
    std::ifstream in(path);
    if (!in) throw InvalidArgument("cannot read data file " + path.string());
    return parse_labelled_csv(in, label_column, positive_label, delim);
}

}  // namespace kt
