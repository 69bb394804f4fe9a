#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

namespace r2m {

using CsvCell = std::variant<std::string, double, long, std::nullopt_t>;

/// Writes a CSV with a header row. Doubles use round-trip precision, so the
/// same inputs give byte-identical files; nullopt becomes an empty cell.
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<CsvCell>>& rows);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);

struct LineSeries {
  std::string name;
  std::vector<double> x;
  std::vector<std::optional<double>> y;  // gaps break the polyline
};

/// 800 x 500 SVG line chart with labelled axes, one polyline per series and a
/// legend.
std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<LineSeries>& series);
void write_svg(const std::filesystem::path& path, const std::string& svg);

}  // namespace r2m
