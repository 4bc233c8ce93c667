#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace hybspec {

using CsvRow = std::vector<std::string>;

/// RFC-4180 field: quoted when it contains a comma, quote, CR or LF.
std::string csv_field(std::string_view value);
/// Header plus rows, CRLF line endings.
std::string render_csv(const CsvRow& header, const std::vector<CsvRow>& rows);
/// Parses RFC-4180 text (quoted fields, doubled quotes, CRLF or LF).
std::vector<CsvRow> parse_csv(std::string_view text);

/// Shortest decimal that round-trips to the same double; "nan"/"inf" for
/// non-finite values.
std::string format_number(double v);
std::string format_fixed(double v, int decimals);

struct ChartSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<bool> marked;  // drawn with a collapse marker
};

struct ChartSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  double y_min = 0.0;
  double y_max = 100.0;
  std::string marker_label = "COLLAPSED";
};

/// Standalone SVG 1.1 line chart, one polyline per series.
std::string render_line_chart(const ChartSpec& spec, const std::vector<ChartSeries>& series);

std::string xml_escape(std::string_view text);

/// Writes the whole string, creating parent directories. Throws on failure.
void write_text(const std::filesystem::path& path, std::string_view content);
std::string read_text(const std::filesystem::path& path);

/// Plain-text table with padded columns for console output.
std::string render_table(const CsvRow& header, const std::vector<CsvRow>& rows);

}  // namespace hybspec
