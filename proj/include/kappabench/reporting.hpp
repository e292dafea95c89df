#pragma once

// Tables, heatmap and throughput projections from per-cell metrics.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "gateway.hpp"
#include "metrics.hpp"

namespace kappabench {

/// Two-decimal rounding, half away from zero, applied to the shortest decimal
/// form that round-trips the double (the form written to metrics files).
/// 0.125 -> "0.13", -0.125 -> "-0.13", 2.675 -> "2.68".
inline std::string format_fixed(double value, int places = 2) {
    if (!std::isfinite(value)) return "—";
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, value, std::chars_format::fixed);
    std::string s(buf, res.ptr);
    bool negative = !s.empty() && s[0] == '-';
    if (negative) s.erase(0, 1);
    auto dot = s.find('.');
    std::string int_part = dot == std::string::npos ? s : s.substr(0, dot);
    std::string frac = dot == std::string::npos ? std::string{} : s.substr(dot + 1);
    const auto p = static_cast<std::size_t>(places);
    bool round_up = frac.size() > p && frac[p] >= '5';
    frac.resize(p, '0');
    std::string digits = int_part + frac;
    if (round_up) {
        int i = static_cast<int>(digits.size()) - 1;
        while (i >= 0) {
            if (digits[static_cast<std::size_t>(i)] == '9') {
                digits[static_cast<std::size_t>(i)] = '0';
                --i;
            } else {
                ++digits[static_cast<std::size_t>(i)];
                break;
            }
        }
        if (i < 0) digits.insert(digits.begin(), '1');
    }
    std::string out = digits.substr(0, digits.size() - p);
    if (p > 0) out += "." + digits.substr(digits.size() - p);
    const bool all_zero = std::all_of(digits.begin(), digits.end(), [](char c) { return c == '0'; });
    if (negative && !all_zero) out.insert(out.begin(), '-');
    return out;
}

inline std::string format_optional(const std::optional<double>& v, int places = 2) {
    return v ? format_fixed(*v, places) : "—";
}

struct ConfigRow {
    std::string config_id;
    std::string model_id;
    ProcessingMode mode = ProcessingMode::standard;
    std::optional<double> size_billions;
};

struct ReportOptions {
    int decimals = 2;
    double emphasis_threshold = 0.80;
};

/// Configs x benchmarks. Cells may be missing.
struct ReportBundle {
    std::vector<ConfigRow> configs;
    std::vector<std::string> benchmarks;
    std::map<std::pair<std::string, std::string>, MetricsSummary> cells;
    ReportOptions options;

    const MetricsSummary* cell(const std::string& config, const std::string& bench) const {
        auto it = cells.find({config, bench});
        return it == cells.end() ? nullptr : &it->second;
    }
};

/// Explicit size_billions, else the first "<number>B" in the model id.
inline std::optional<double> model_size(const ConfigRow& c) {
    if (c.size_billions) return c.size_billions;
    static const std::regex size_re(R"((\d+(?:\.\d+)?)\s*[bB](?![a-zA-Z]))");
    std::smatch m;
    if (std::regex_search(c.model_id, m, size_re)) return std::stod(m[1].str());
    if (std::regex_search(c.config_id, m, size_re)) return std::stod(m[1].str());
    return std::nullopt;
}

inline std::string mode_tag(ProcessingMode m) {
    switch (m) {
    case ProcessingMode::standard: return "S";
    case ProcessingMode::reasoning: return "R";
    case ProcessingMode::effort_low: return "low";
    case ProcessingMode::effort_medium: return "medium";
    case ProcessingMode::effort_high: return "high";
    }
    return "";
}

/// Rows by model size (unknown sizes last), then mode S < R < low < medium <
/// high; ties keep plan order.
inline std::vector<ConfigRow> heatmap_row_order(std::vector<ConfigRow> rows) {
    std::stable_sort(rows.begin(), rows.end(), [](const ConfigRow& a, const ConfigRow& b) {
        const auto sa = model_size(a);
        const auto sb = model_size(b);
        if (sa.has_value() != sb.has_value()) return sa.has_value();
        if (sa && sb && *sa != *sb) return *sa < *sb;
        return static_cast<int>(a.mode) < static_cast<int>(b.mode);
    });
    return rows;
}

// ---------------------------------------------------------------------------
// Tables

inline bool emphasized(const MetricsSummary& s, const ReportOptions& opt) {
    return s.kappa && *s.kappa >= opt.emphasis_threshold;
}

/// The cells of one table row: kappa, sensitivity, specificity, mean time (SD).
inline std::vector<std::string> table_cells(const MetricsSummary& s, const ReportOptions& opt = {}) {
    std::string time = format_optional(s.time_mean_s, opt.decimals);
    time += " (" + format_optional(s.time_sd_s, opt.decimals) + ")";
    return {format_optional(s.kappa, opt.decimals), format_optional(s.sensitivity, opt.decimals),
            format_optional(s.specificity, opt.decimals), time};
}

/// Markdown table for one benchmark. Rows with kappa at or above the
/// emphasis threshold are bold.
inline std::string render_table(const std::string& benchmark, const std::vector<MetricsSummary>& summaries,
                                const ReportOptions& opt = {}) {
    std::ostringstream os;
    os << "### " << benchmark << "\n\n";
    os << "| Configuration | κ | Sensitivity | Specificity | Mean Time (SD) |\n";
    os << "|---|---|---|---|---|\n";
    bool any_undefined = false;
    bool any_flag = false;
    for (const auto& s : summaries) {
        auto cells = table_cells(s, opt);
        const bool bold = emphasized(s, opt);
        std::string label = s.config_id;
        if (s.status != SummaryStatus::ok) {
            label += std::string(" †");
            any_flag = true;
        }
        os << "| " << label;
        for (auto& c : cells) {
            if (c.find("—") != std::string::npos) any_undefined = true;
            os << " | " << (bold ? "**" + c + "**" : c);
        }
        os << " |\n";
    }
    os << "\nκ = Cohen's kappa. Bold rows: κ ≥ " << format_fixed(opt.emphasis_threshold, 2)
       << " (almost perfect agreement). Mean time in seconds, SD in parentheses.";
    if (any_undefined) os << " — = undefined (zero denominator or no data).";
    if (any_flag) os << " † = degraded (> 2% failed cases) or no valid results; see failure tallies.";
    os << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Heatmap

struct Heatmap {
    std::string matrix_csv;
    std::string svg;
    std::size_t rows = 0;
    std::size_t cols = 0;
};

/// Grey level for a kappa value: 245 at kappa <= 0 down to 40 at kappa = 1.
inline int heat_shade(double kappa) {
    const double k = std::clamp(kappa, 0.0, 1.0);
    return static_cast<int>(std::lround(245.0 - 205.0 * k));
}

namespace detail {
inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out.push_back(c);
        }
    }
    return out;
}
inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    return out + "\"";
}
}  // namespace detail

inline Heatmap render_heatmap(const ReportBundle& bundle) {
    const auto rows = heatmap_row_order(bundle.configs);
    Heatmap h;
    h.rows = rows.size();
    h.cols = bundle.benchmarks.size();

    std::ostringstream csv;
    csv << "configuration";
    for (const auto& b : bundle.benchmarks) csv << ',' << detail::csv_escape(b);
    csv << '\n';
    for (const auto& r : rows) {
        csv << detail::csv_escape(r.config_id);
        for (const auto& b : bundle.benchmarks) {
            csv << ',';
            if (const auto* s = bundle.cell(r.config_id, b); s && s->kappa) csv << format_fixed(*s->kappa, bundle.options.decimals);
        }
        csv << '\n';
    }
    h.matrix_csv = csv.str();

    constexpr int cell_w = 90, cell_h = 28, label_w = 220, header_h = 40, legend_h = 60;
    const int width = label_w + cell_w * static_cast<int>(std::max<std::size_t>(h.cols, 1)) + 20;
    const int height = header_h + cell_h * static_cast<int>(h.rows) + legend_h;
    std::ostringstream svg;
    svg << R"(<svg xmlns="http://www.w3.org/2000/svg" width=")" << width << R"(" height=")" << height
        << R"(" font-family="Helvetica, Arial, sans-serif" font-size="12">)" << '\n';
    svg << R"(<rect width="100%" height="100%" fill="white"/>)" << '\n';
    for (std::size_t c = 0; c < h.cols; ++c) {
        svg << "<text x=\"" << label_w + cell_w * static_cast<int>(c) + cell_w / 2 << "\" y=\"" << header_h - 12
            << "\" text-anchor=\"middle\" font-weight=\"bold\">" << detail::xml_escape(bundle.benchmarks[c]) << "</text>\n";
    }
    bool missing = false;
    for (std::size_t r = 0; r < h.rows; ++r) {
        const int y = header_h + cell_h * static_cast<int>(r);
        const auto& row = rows[r];
        svg << "<text x=\"" << label_w - 8 << "\" y=\"" << y + cell_h / 2 + 4 << "\" text-anchor=\"end\">"
            << detail::xml_escape(row.config_id) << "</text>\n";
        for (std::size_t c = 0; c < h.cols; ++c) {
            const int x = label_w + cell_w * static_cast<int>(c);
            const auto* s = bundle.cell(row.config_id, bundle.benchmarks[c]);
            if (!s || !s->kappa) {
                missing = true;
                svg << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell_w << "\" height=\"" << cell_h
                    << "\" fill=\"white\" stroke=\"#cccccc\" data-kappa=\"\"/>\n";
                continue;
            }
            const int g = heat_shade(*s->kappa);
            svg << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell_w << "\" height=\"" << cell_h
                << "\" fill=\"rgb(" << g << ',' << g << ',' << g << ")\" stroke=\"white\" data-kappa=\""
                << format_fixed(*s->kappa, 4) << "\"/>\n";
            svg << "<text x=\"" << x + cell_w / 2 << "\" y=\"" << y + cell_h / 2 + 4
                << "\" text-anchor=\"middle\" fill=\"" << (g < 128 ? "white" : "black") << "\">"
                << format_fixed(*s->kappa, bundle.options.decimals) << "</text>\n";
        }
    }
    const int ly = header_h + cell_h * static_cast<int>(h.rows) + 20;
    svg << "<text x=\"10\" y=\"" << ly << "\">Darker shading = higher Cohen's kappa (0 to 1).</text>\n";
    if (missing)
        svg << "<text x=\"10\" y=\"" << ly + 18 << "\">Blank cells: kappa undefined or not yet measured.</text>\n";
    svg << "</svg>\n";
    h.svg = svg.str();
    return h;
}

// ---------------------------------------------------------------------------
// Throughput

struct EfficiencyRow {
    std::string config_id;
    std::optional<ThroughputProjection> projection;
};

/// Case-weighted mean latency of a config across all its measured cells.
inline std::optional<std::pair<double, std::string>> pooled_latency(const ReportBundle& bundle,
                                                                     const std::string& config_id) {
    double sum = 0.0;
    std::size_t n = 0;
    std::string sources;
    for (const auto& b : bundle.benchmarks) {
        const auto* s = bundle.cell(config_id, b);
        if (!s || !s->time_mean_s) continue;
        const auto count = s->n_valid + s->n_failed;
        sum += *s->time_mean_s * static_cast<double>(count);
        n += count;
        if (!sources.empty()) sources += ", ";
        sources += config_id + "/" + b;
    }
    if (n == 0 || !(sum > 0.0)) return std::nullopt;
    return std::make_pair(sum / static_cast<double>(n), "mean over " + sources);
}

inline std::vector<EfficiencyRow> efficiency_rows(const ReportBundle& bundle, std::uint64_t n_records) {
    std::vector<EfficiencyRow> rows;
    for (const auto& c : bundle.configs) {
        EfficiencyRow r{c.config_id, std::nullopt};
        if (auto lat = pooled_latency(bundle, c.config_id)) r.projection = project_throughput(lat->first, n_records, lat->second);
        rows.push_back(std::move(r));
    }
    return rows;
}

inline std::string render_efficiency(const ReportBundle& bundle, std::uint64_t n_records) {
    const auto rows = efficiency_rows(bundle, n_records);
    std::ostringstream os;
    os << "### Throughput projection (" << n_records << " records)\n\n";
    os << "| Configuration | Mean latency (s) | Projected hours | Latency source |\n";
    os << "|---|---|---|---|\n";
    for (const auto& r : rows) {
        if (r.projection)
            os << "| " << r.config_id << " | " << format_fixed(r.projection->mean_latency_s, 2) << " | "
               << format_fixed(r.projection->hours, 1) << " | " << r.projection->latency_source << " |\n";
        else
            os << "| " << r.config_id << " | — | — | no timing data |\n";
    }
    std::vector<const EfficiencyRow*> timed;
    for (const auto& r : rows)
        if (r.projection) timed.push_back(&r);
    if (timed.size() >= 2) {
        os << "\nPairwise differences (column minus row, hours):\n\n";
        for (std::size_t i = 0; i < timed.size(); ++i)
            for (std::size_t j = i + 1; j < timed.size(); ++j) {
                const double delta = timed[j]->projection->hours - timed[i]->projection->hours;
                os << "- " << timed[j]->config_id << " vs " << timed[i]->config_id << ": "
                   << (delta >= 0 ? "+" : "") << format_fixed(delta, 1) << " h\n";
            }
    }
    return os.str();
}

/// Full markdown report: one table per benchmark, heatmap matrix, projections.
inline std::string render_report(const ReportBundle& bundle, std::uint64_t n_records, const std::string& title = "Run report") {
    std::ostringstream os;
    os << "# " << title << "\n\n";
    for (const auto& b : bundle.benchmarks) {
        std::vector<MetricsSummary> rows;
        for (const auto& c : bundle.configs)
            if (const auto* s = bundle.cell(c.config_id, b)) rows.push_back(*s);
        if (rows.empty()) continue;
        os << render_table(b, rows, bundle.options) << "\n";
        bool any_fail = false;
        for (const auto& s : rows) any_fail = any_fail || s.n_failed > 0;
        if (any_fail) {
            os << "Failures:\n\n";
            for (const auto& s : rows) {
                if (s.n_failed == 0) continue;
                os << "- " << s.config_id << ": " << s.n_failed << " of " << (s.n_valid + s.n_failed) << " ("
                   << format_fixed(100.0 * s.failure_rate(), 1) << "%)";
                for (const auto& [k, v] : s.failures) os << "; " << to_string(k) << " " << v;
                os << "\n";
            }
            os << "\n";
        }
        for (const auto& s : rows) {
            if (s.concurrent_timing) {
                os << "Timing for " << s.config_id << " was measured with concurrent requests - not comparable to "
                      "sequential per-case timing.\n\n";
            }
            if (s.kappa_ci)
                os << "Bootstrap 95% CI for κ (" << s.config_id << ", extension): [" << format_fixed(s.kappa_ci->lower)
                   << ", " << format_fixed(s.kappa_ci->upper) << "]\n\n";
        }
    }
    os << "### κ heatmap matrix\n\n```\n" << render_heatmap(bundle).matrix_csv << "```\n\n";
    os << render_efficiency(bundle, n_records);
    return os.str();
}

}  // namespace kappabench
