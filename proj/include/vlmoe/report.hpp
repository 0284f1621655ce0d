#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmoe/errors.hpp"
#include "vlmoe/objectives.hpp"

namespace vlmoe {

inline const char* modality_name(Modality m) { return m == Modality::TEXT ? "text" : "image"; }

inline const char* token_kind_name(TokenKind k) {
    switch (k) {
        case TokenKind::T_CLS: return "t_cls";
        case TokenKind::T_SEP: return "t_sep";
        case TokenKind::I_CLS: return "i_cls";
        case TokenKind::WORD: return "word";
        case TokenKind::PATCH: return "patch";
    }
    return "?";
}

inline json drop_to_json(const LayerDropRate& d) {
    return json{{"layer", d.layer},
                {"modality", modality_name(d.modality)},
                {"total", d.total},
                {"dropped", d.dropped},
                {"rate", d.rate}};
}

inline json step_report_to_json(const StepReport& r) {
    json drops = json::array();
    for (const auto& d : r.drops) drops.push_back(drop_to_json(d));
    json j{{"step", r.step},          {"loss_total", r.loss_total}, {"loss_mlm", r.loss_mlm},
           {"loss_mim", r.loss_mim},  {"loss_vlm", r.loss_vlm},     {"loss_aux", r.loss_aux},
           {"aux_weight", r.aux_weight}, {"drops", drops},          {"wall_ms", r.wall_ms}};
    if (r.empty_mask_warning) j["empty_mask_warning"] = true;
    return j;
}

inline json eval_report_to_json(int step, const EvalReport& r) {
    return json{{"step", step}, {"val_mlm", r.mlm}, {"val_mim", r.mim},
                {"val_vlm", r.vlm}, {"val_total", r.total}};
}

inline json routing_row_to_json(int step, const RoutingLogRow& r) {
    return json{{"step", step},
                {"objective", r.objective},
                {"layer", r.layer},
                {"modality", modality_name(r.modality)},
                {"expert_id", r.expert},
                {"token_id", r.token},
                {"kind", token_kind_name(r.kind)},
                {"gate", r.gate},
                {"kept", r.kept}};
}

// One JSON object per line; flushed per row so partial runs stay inspectable.
class JsonlWriter {
public:
    explicit JsonlWriter(const std::string& path) : out_(path) {
        if (!out_) throw ContractError("cannot open for writing: " + path);
    }

    void write(const json& j) {
        out_ << j.dump() << '\n';
        out_.flush();
    }

private:
    std::ofstream out_;
};

inline std::vector<json> read_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ContractError("cannot open log file: " + path);
    std::vector<json> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            rows.push_back(json::parse(line));
        } catch (const json::exception& e) {
            throw ContractError(path + ":" + std::to_string(rows.size() + 1) + ": " + e.what());
        }
    }
    return rows;
}

// Minimal self-contained SVG plotting; enough for loss curves and drop-rate
// bars without an external toolchain.
namespace svg {

struct Series {
    std::string name;
    std::vector<double> x, y;
};

inline const char* palette(int i) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                   "#9467bd", "#8c564b", "#17becf", "#7f7f7f"};
    return colors[i % 8];
}

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(5) << v;
    return os.str();
}

struct Bounds {
    double lo = 0.0, hi = 1.0;

    void fit(double v) {
        if (!std::isfinite(v)) return;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
};

inline void write_line_chart(const std::string& path, const std::string& title,
                             const std::string& x_label, const std::string& y_label,
                             const std::vector<Series>& series) {
    const double width = 720, height = 420;
    const double ml = 64, mr = 150, mt = 40, mb = 48;
    const double pw = width - ml - mr, ph = height - mt - mb;

    double x_lo = 1e300, x_hi = -1e300, y_lo = 1e300, y_hi = -1e300;
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i])) continue;
            x_lo = std::min(x_lo, s.x[i]);
            x_hi = std::max(x_hi, s.x[i]);
            y_lo = std::min(y_lo, s.y[i]);
            y_hi = std::max(y_hi, s.y[i]);
        }
    if (x_lo > x_hi) { x_lo = 0; x_hi = 1; }
    if (y_lo > y_hi) { y_lo = 0; y_hi = 1; }
    if (x_hi == x_lo) x_hi = x_lo + 1;
    if (y_hi == y_lo) y_hi = y_lo + (y_lo == 0.0 ? 1.0 : std::abs(y_lo) * 0.1);
    double pad = (y_hi - y_lo) * 0.05;
    y_lo -= pad;
    y_hi += pad;

    auto px = [&](double x) { return ml + (x - x_lo) / (x_hi - x_lo) * pw; };
    auto py = [&](double y) { return mt + ph - (y - y_lo) / (y_hi - y_lo) * ph; };

    std::ofstream out(path);
    if (!out) throw ContractError("cannot open for writing: " + path);
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
        << "' font-family='sans-serif' font-size='12'>\n";
    out << "<rect width='100%' height='100%' fill='white'/>\n";
    out << "<text x='" << width / 2 << "' y='22' text-anchor='middle' font-size='15'>" << title
        << "</text>\n";

    for (int i = 0; i <= 5; ++i) {
        double gy = mt + ph * i / 5.0;
        double val = y_hi - (y_hi - y_lo) * i / 5.0;
        out << "<line x1='" << ml << "' y1='" << gy << "' x2='" << ml + pw << "' y2='" << gy
            << "' stroke='#ddd'/>\n";
        out << "<text x='" << ml - 6 << "' y='" << gy + 4 << "' text-anchor='end'>" << fmt(val)
            << "</text>\n";
        double gx = ml + pw * i / 5.0;
        double xv = x_lo + (x_hi - x_lo) * i / 5.0;
        out << "<text x='" << gx << "' y='" << mt + ph + 18 << "' text-anchor='middle'>" << fmt(xv)
            << "</text>\n";
    }
    out << "<rect x='" << ml << "' y='" << mt << "' width='" << pw << "' height='" << ph
        << "' fill='none' stroke='#333'/>\n";
    out << "<text x='" << ml + pw / 2 << "' y='" << height - 10 << "' text-anchor='middle'>"
        << x_label << "</text>\n";
    out << "<text x='16' y='" << mt + ph / 2 << "' text-anchor='middle' transform='rotate(-90 16 "
        << mt + ph / 2 << ")'>" << y_label << "</text>\n";

    int si = 0;
    for (const auto& s : series) {
        std::ostringstream pts;
        for (size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i])) continue;
            pts << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
        }
        out << "<polyline points='" << pts.str() << "' fill='none' stroke='" << palette(si)
            << "' stroke-width='1.5'/>\n";
        double ly = mt + 14 + 16 * si;
        out << "<line x1='" << ml + pw + 8 << "' y1='" << ly << "' x2='" << ml + pw + 26
            << "' y2='" << ly << "' stroke='" << palette(si) << "' stroke-width='2'/>\n";
        out << "<text x='" << ml + pw + 30 << "' y='" << ly + 4 << "'>" << s.name << "</text>\n";
        ++si;
    }
    out << "</svg>\n";
}

inline void write_bar_chart(const std::string& path, const std::string& title,
                            const std::string& y_label, const std::vector<std::string>& labels,
                            const std::vector<double>& values) {
    if (labels.size() != values.size())
        throw ShapeError("bar chart: " + std::to_string(labels.size()) + " labels vs " +
                         std::to_string(values.size()) + " values");
    const double width = 720, height = 420;
    const double ml = 64, mr = 24, mt = 40, mb = 64;
    const double pw = width - ml - mr, ph = height - mt - mb;

    double y_hi = 0.0;
    for (double v : values)
        if (std::isfinite(v)) y_hi = std::max(y_hi, v);
    if (y_hi == 0.0) y_hi = 1.0;
    y_hi *= 1.05;

    std::ofstream out(path);
    if (!out) throw ContractError("cannot open for writing: " + path);
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << width << "' height='" << height
        << "' font-family='sans-serif' font-size='12'>\n";
    out << "<rect width='100%' height='100%' fill='white'/>\n";
    out << "<text x='" << width / 2 << "' y='22' text-anchor='middle' font-size='15'>" << title
        << "</text>\n";
    for (int i = 0; i <= 5; ++i) {
        double gy = mt + ph * i / 5.0;
        double val = y_hi - y_hi * i / 5.0;
        out << "<line x1='" << ml << "' y1='" << gy << "' x2='" << ml + pw << "' y2='" << gy
            << "' stroke='#ddd'/>\n";
        out << "<text x='" << ml - 6 << "' y='" << gy + 4 << "' text-anchor='end'>" << fmt(val)
            << "</text>\n";
    }
    size_t n = values.size();
    double slot = pw / std::max<size_t>(n, 1);
    double bar = slot * 0.7;
    for (size_t i = 0; i < n; ++i) {
        double v = std::isfinite(values[i]) ? values[i] : 0.0;
        double h = v / y_hi * ph;
        double x = ml + slot * i + (slot - bar) / 2;
        out << "<rect x='" << x << "' y='" << mt + ph - h << "' width='" << bar << "' height='"
            << h << "' fill='" << palette(static_cast<int>(i)) << "'/>\n";
        double cx = ml + slot * i + slot / 2;
        out << "<text x='" << cx << "' y='" << mt + ph + 16 << "' text-anchor='middle'>"
            << labels[i] << "</text>\n";
        out << "<text x='" << cx << "' y='" << mt + ph - h - 4 << "' text-anchor='middle'>"
            << fmt(values[i]) << "</text>\n";
    }
    out << "<rect x='" << ml << "' y='" << mt << "' width='" << pw << "' height='" << ph
        << "' fill='none' stroke='#333'/>\n";
    out << "<text x='16' y='" << mt + ph / 2 << "' text-anchor='middle' transform='rotate(-90 16 "
        << mt + ph / 2 << ")'>" << y_label << "</text>\n";
    out << "</svg>\n";
}

}  // namespace svg

inline std::string markdown_table(const std::vector<std::string>& headers,
                                  const std::vector<std::vector<std::string>>& rows) {
    std::ostringstream os;
    os << '|';
    for (const auto& h : headers) os << ' ' << h << " |";
    os << "\n|";
    for (size_t i = 0; i < headers.size(); ++i) os << "---|";
    os << '\n';
    for (const auto& row : rows) {
        if (row.size() != headers.size())
            throw ShapeError("table row has " + std::to_string(row.size()) + " cells, header has " +
                             std::to_string(headers.size()));
        os << '|';
        for (const auto& c : row) os << ' ' << c << " |";
        os << '\n';
    }
    return os.str();
}

}  // namespace vlmoe
