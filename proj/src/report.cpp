#include "hybspec/report.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace hybspec {

namespace {

std::size_t display_width(std::string_view s) {
  std::size_t w = 0;
  for (unsigned char c : s)
    if ((c & 0xC0) != 0x80) ++w;
  return w;
}

}  // namespace

std::string csv_field(std::string_view value) {
  if (value.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(value);
  std::string out = "\"";
  for (char c : value) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string render_csv(const CsvRow& header, const std::vector<CsvRow>& rows) {
  std::string out;
  auto emit = [&](const CsvRow& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ',';
      out += csv_field(row[i]);
    }
    out += "\r\n";
  };
  emit(header);
  for (const auto& r : rows) emit(r);
  return out;
}

std::vector<CsvRow> parse_csv(std::string_view text) {
  std::vector<CsvRow> rows;
  CsvRow row;
  std::string field;
  bool quoted = false;
  bool row_open = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    switch (c) {
      case '"':
        quoted = true;
        row_open = true;
        break;
      case ',':
        row.push_back(std::move(field));
        field.clear();
        row_open = true;
        break;
      case '\r':
        break;
      case '\n':
        row.push_back(std::move(field));
        field.clear();
        rows.push_back(std::move(row));
        row.clear();
        row_open = false;
        break;
      default:
        field += c;
        row_open = true;
    }
  }
  if (quoted) throw std::runtime_error("parse_csv: unterminated quoted field");
  if (row_open || !row.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string format_fixed(double v, int decimals) {
  if (!std::isfinite(v)) return format_number(v);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
  return buf;
}

std::string xml_escape(std::string_view text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string render_line_chart(const ChartSpec& spec, const std::vector<ChartSeries>& series) {
  static const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};
  constexpr double width = 720, height = 440;
  constexpr double left = 70, right = 170, top = 50, bottom = 60;
  const double plot_w = width - left - right, plot_h = height - top - bottom;

  double x_min = 0, x_max = 1;
  bool any = false;
  for (const auto& s : series) {
    for (double x : s.x) {
      x_min = any ? std::min(x_min, x) : x;
      x_max = any ? std::max(x_max, x) : x;
      any = true;
    }
  }
  if (x_max <= x_min) x_max = x_min + 1;
  const double y_span = spec.y_max > spec.y_min ? spec.y_max - spec.y_min : 1.0;
  auto px = [&](double x) { return left + (x - x_min) / (x_max - x_min) * plot_w; };
  auto py = [&](double y) {
    const double c = std::clamp(y, spec.y_min, spec.y_max);
    return top + (1.0 - (c - spec.y_min) / y_span) * plot_h;
  };
  auto num = [](double v) { return format_fixed(v, 2); };

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n"
      << "<text x=\"" << num(left + plot_w / 2) << "\" y=\"28\" text-anchor=\"middle\" font-family=\"sans-serif\" "
      << "font-size=\"16\">" << xml_escape(spec.title) << "</text>\n";

  // Axes, ticks and grid.
  svg << "<g stroke=\"black\" stroke-width=\"1\">\n"
      << "<line x1=\"" << num(left) << "\" y1=\"" << num(top + plot_h) << "\" x2=\"" << num(left + plot_w)
      << "\" y2=\"" << num(top + plot_h) << "\"/>\n"
      << "<line x1=\"" << num(left) << "\" y1=\"" << num(top) << "\" x2=\"" << num(left) << "\" y2=\""
      << num(top + plot_h) << "\"/>\n</g>\n";
  svg << "<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int i = 0; i <= 5; ++i) {
    const double y = spec.y_min + y_span * i / 5.0;
    svg << "<line x1=\"" << num(left) << "\" y1=\"" << num(py(y)) << "\" x2=\"" << num(left + plot_w) << "\" y2=\""
        << num(py(y)) << "\" stroke=\"#dddddd\"/>\n"
        << "<text x=\"" << num(left - 6) << "\" y=\"" << num(py(y) + 4) << "\" text-anchor=\"end\">" << num(y)
        << "</text>\n";
  }
  std::vector<double> ticks;
  for (const auto& s : series) ticks.insert(ticks.end(), s.x.begin(), s.x.end());
  std::sort(ticks.begin(), ticks.end());
  ticks.erase(std::unique(ticks.begin(), ticks.end()), ticks.end());
  for (double x : ticks) {
    svg << "<text x=\"" << num(px(x)) << "\" y=\"" << num(top + plot_h + 16) << "\" text-anchor=\"middle\">"
        << format_number(x) << "</text>\n";
  }
  svg << "<text x=\"" << num(left + plot_w / 2) << "\" y=\"" << num(height - 18) << "\" text-anchor=\"middle\">"
      << xml_escape(spec.x_label) << "</text>\n"
      << "<text x=\"18\" y=\"" << num(top + plot_h / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
      << num(top + plot_h / 2) << ")\">" << xml_escape(spec.y_label) << "</text>\n</g>\n";

  bool has_marker = false;
  for (std::size_t si = 0; si < series.size(); ++si) {
    const auto& s = series[si];
    const char* color = palette[si % std::size(palette)];
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (i) svg << ' ';
      svg << num(px(s.x[i])) << ',' << num(py(s.y[i]));
    }
    svg << "\"/>\n";
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      const double cx = px(s.x[i]), cy = py(s.y[i]);
      if (i < s.marked.size() && s.marked[i]) {
        has_marker = true;
        svg << "<path d=\"M" << num(cx - 5) << ',' << num(cy - 5) << " L" << num(cx + 5) << ',' << num(cy + 5)
            << " M" << num(cx - 5) << ',' << num(cy + 5) << " L" << num(cx + 5) << ',' << num(cy - 5)
            << "\" stroke=\"#d62728\" stroke-width=\"2.5\"/>\n";
      } else {
        svg << "<circle cx=\"" << num(cx) << "\" cy=\"" << num(cy) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
      }
    }
  }

  // Legend.
  svg << "<g font-family=\"sans-serif\" font-size=\"12\">\n";
  double ly = top + 10;
  const double lx = left + plot_w + 20;
  for (std::size_t si = 0; si < series.size(); ++si, ly += 20) {
    svg << "<line x1=\"" << num(lx) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(lx + 24) << "\" y2=\"" << num(ly)
        << "\" stroke=\"" << palette[si % std::size(palette)] << "\" stroke-width=\"2\"/>\n"
        << "<text x=\"" << num(lx + 30) << "\" y=\"" << num(ly + 4) << "\">" << xml_escape(series[si].name)
        << "</text>\n";
  }
  if (has_marker) {
    svg << "<path d=\"M" << num(lx + 7) << ',' << num(ly - 5) << " L" << num(lx + 17) << ',' << num(ly + 5) << " M"
        << num(lx + 7) << ',' << num(ly + 5) << " L" << num(lx + 17) << ',' << num(ly - 5)
        << "\" stroke=\"#d62728\" stroke-width=\"2.5\"/>\n"
        << "<text x=\"" << num(lx + 30) << "\" y=\"" << num(ly + 4) << "\">" << xml_escape(spec.marker_label)
        << "</text>\n";
  }
  svg << "</g>\n</svg>\n";
  return svg.str();
}

void write_text(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string render_table(const CsvRow& header, const std::vector<CsvRow>& rows) {
  std::vector<std::size_t> widths(header.size(), 0);
  auto measure = [&](const CsvRow& r) {
    for (std::size_t i = 0; i < r.size() && i < widths.size(); ++i)
      widths[i] = std::max(widths[i], display_width(r[i]));
  };
  measure(header);
  for (const auto& r : rows) measure(r);
  std::string out;
  auto emit = [&](const CsvRow& r) {
    for (std::size_t i = 0; i < r.size() && i < widths.size(); ++i) {
      if (i) out += "  ";
      out += r[i];
      if (i + 1 < r.size()) out.append(widths[i] - display_width(r[i]), ' ');
    }
    out += '\n';
  };
  emit(header);
  std::size_t total = 0;
  for (auto w : widths) total += w;
  out.append(total + 2 * (widths.empty() ? 0 : widths.size() - 1), '-');
  out += '\n';
  for (const auto& r : rows) emit(r);
  return out;
}

}  // namespace hybspec
