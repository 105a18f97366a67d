#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>

#include "icl/harness.hpp"

namespace icl {

namespace {

constexpr double kW = 640.0, kH = 400.0, kMargin = 50.0;
constexpr std::array<const char*, 6> kColors = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"};

std::string fmt_number(double v, bool integral) {
    if (integral) return std::to_string(static_cast<long long>(std::llround(v)));
    std::array<char, 64> buf{};
    auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    if (ec != std::errc()) throw RunError("number formatting failed");
    return std::string(buf.data(), p);
}

std::string fixed2(double v) {
    std::array<char, 48> buf{};
    std::snprintf(buf.data(), buf.size(), "%.2f", v);
    return buf.data();
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) {
        if (ch == '"') out += '"';
        out += ch;
    }
    return out + "\"";
}

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char ch : s) {
        switch (ch) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += ch;
        }
    }
    return out;
}

std::string svg_open(double w, double h, const std::string& title) {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fixed2(w) + "\" height=\"" + fixed2(h) +
           "\" viewBox=\"0 0 " + fixed2(w) + " " + fixed2(h) + "\" font-family=\"sans-serif\" font-size=\"12\">\n" +
           "<text x=\"" + fixed2(w / 2) + "\" y=\"20.00\" text-anchor=\"middle\">" + xml_escape(title) + "</text>\n";
}

}  // namespace

void ResultTable::add_row(std::vector<double> r) {
    if (r.size() != columns.size())
        throw RunError("table " + schema + ": row has " + std::to_string(r.size()) + " fields, expected " +
                       std::to_string(columns.size()));
    rows.push_back(std::move(r));
}

std::size_t ResultTable::col(const std::string& name) const {
    const auto it = std::find(columns.begin(), columns.end(), name);
    if (it == columns.end()) throw RunError("table " + schema + " has no column '" + name + "'");
    return static_cast<std::size_t>(it - columns.begin());
}

std::vector<double> ResultTable::column(const std::string& name) const {
    const std::size_t c = col(name);
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(r[c]);
    return out;
}

std::string to_csv(const ResultTable& t) {
    std::string out = "schema";
    for (const auto& c : t.columns) out += "," + csv_field(c);
    out += "\r\n";
    for (const auto& r : t.rows) {
        out += csv_field(t.schema);
        for (std::size_t i = 0; i < r.size(); ++i)
            out += "," + fmt_number(r[i], i < t.integral.size() && t.integral[i]);
        out += "\r\n";
    }
    return out;
}

std::string line_svg(const ResultTable& t, const PlotSpec& spec) {
    if (t.rows.empty()) throw RunError("cannot plot an empty table");
    if (spec.ys.empty()) throw RunError("plot needs at least one y column");
    const auto xs = t.column(spec.x);
    std::vector<std::vector<double>> ys;
    for (const auto& y : spec.ys) ys.push_back(t.column(y));

    auto [xlo, xhi] = std::minmax_element(xs.begin(), xs.end());
    double x0 = *xlo, x1 = *xhi;
    double y0 = ys[0][0], y1 = ys[0][0];
    for (const auto& col : ys)
        for (double v : col) {
            y0 = std::min(y0, v);
            y1 = std::max(y1, v);
        }
    if (x1 - x0 <= 0.0) x1 = x0 + 1.0;
    if (y1 - y0 <= 0.0) y1 = y0 + 1.0;
    const auto px = [&](double v) { return kMargin + (v - x0) / (x1 - x0) * (kW - 2 * kMargin); };
    const auto py = [&](double v) { return kH - kMargin - (v - y0) / (y1 - y0) * (kH - 2 * kMargin); };

    std::string s = svg_open(kW, kH, spec.title);
    s += "<line x1=\"" + fixed2(kMargin) + "\" y1=\"" + fixed2(kH - kMargin) + "\" x2=\"" + fixed2(kW - kMargin) +
         "\" y2=\"" + fixed2(kH - kMargin) + "\" stroke=\"black\"/>\n";
    s += "<line x1=\"" + fixed2(kMargin) + "\" y1=\"" + fixed2(kMargin) + "\" x2=\"" + fixed2(kMargin) + "\" y2=\"" +
         fixed2(kH - kMargin) + "\" stroke=\"black\"/>\n";
    s += "<text x=\"" + fixed2(kW / 2) + "\" y=\"" + fixed2(kH - 10) + "\" text-anchor=\"middle\">" +
         xml_escape(spec.x) + " [" + fmt_number(x0, false) + ", " + fmt_number(x1, false) + "]</text>\n";
    s += "<text x=\"10.00\" y=\"" + fixed2(kMargin - 10) + "\">y [" + fmt_number(y0, false) + ", " +
         fmt_number(y1, false) + "]</text>\n";
    for (std::size_t k = 0; k < ys.size(); ++k) {
        s += "<polyline fill=\"none\" stroke=\"" + std::string(kColors[k % kColors.size()]) + "\" points=\"";
        for (std::size_t i = 0; i < xs.size(); ++i) {
            if (i) s += " ";
            s += fixed2(px(xs[i])) + "," + fixed2(py(ys[k][i]));
        }
        s += "\"/>\n";
        s += "<text x=\"" + fixed2(kW - kMargin) + "\" y=\"" + fixed2(kMargin + 14.0 * static_cast<double>(k)) +
             "\" text-anchor=\"end\" fill=\"" + kColors[k % kColors.size()] + "\">" + xml_escape(spec.ys[k]) +
             "</text>\n";
    }
    return s + "</svg>\n";
}

std::string heatmap_svg(const Matrix& M, const std::string& title) {
    if (M.size() == 0) throw RunError("cannot plot an empty matrix");
    const double cell = std::max(2.0, std::min(24.0, 560.0 / static_cast<double>(std::max(M.rows(), M.cols()))));
    const double w = 2 * kMargin + cell * static_cast<double>(M.cols());
    const double h = 2 * kMargin + cell * static_cast<double>(M.rows());
    const double top = std::max(1.0, M.cwiseAbs().maxCoeff());
    std::string s = svg_open(w, h, title);
    for (Eigen::Index i = 0; i < M.rows(); ++i)
        for (Eigen::Index j = 0; j < M.cols(); ++j) {
            const double v = std::clamp(std::abs(M(i, j)) / top, 0.0, 1.0);
            const int shade = static_cast<int>(std::lround(255.0 * (1.0 - v)));
            s += "<rect x=\"" + fixed2(kMargin + cell * static_cast<double>(j)) + "\" y=\"" +
                 fixed2(kMargin + cell * static_cast<double>(i)) + "\" width=\"" + fixed2(cell) + "\" height=\"" +
                 fixed2(cell) + "\" fill=\"rgb(" + std::to_string(shade) + "," + std::to_string(shade) + ",255)\"/>\n";
        }
    return s + "</svg>\n";
}

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

namespace {

std::vector<std::vector<std::string>> parse_records(const std::string& text) {
    std::vector<std::vector<std::string>> recs;
    std::vector<std::string> rec;
    std::string field;
    bool quoted = false, any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char ch = text[i];
        if (quoted) {
            if (ch != '"') {
                field += ch;
            } else if (i + 1 < text.size() && text[i + 1] == '"') {
                field += '"';
                ++i;
            } else {
                quoted = false;
            }
            continue;
        }
        if (ch == '"') {
            quoted = any = true;
        } else if (ch == ',') {
            rec.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (ch == '\n' || ch == '\r') {
            if (ch == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            rec.push_back(std::move(field));
            field.clear();
            recs.push_back(std::move(rec));
            rec.clear();
            any = false;
        } else {
            field += ch;
            any = true;
        }
    }
    if (quoted) throw RunError("csv: unterminated quoted field");
    if (any) {
        rec.push_back(std::move(field));
        recs.push_back(std::move(rec));
    }
    return recs;
}

}  // namespace

ResultTable from_csv(const std::string& text) {
    const auto recs = parse_records(text);
    if (recs.empty() || recs[0].empty() || recs[0][0] != "schema") throw RunError("csv: missing schema header");
    ResultTable t;
    t.columns.assign(recs[0].begin() + 1, recs[0].end());
    t.integral.assign(t.columns.size(), true);
    for (std::size_t r = 1; r < recs.size(); ++r) {
        const auto& rec = recs[r];
        if (rec.size() != t.columns.size() + 1)
            throw RunError("csv: record " + std::to_string(r) + " has " + std::to_string(rec.size()) + " fields");
        if (r == 1) t.schema = rec[0];
        else if (rec[0] != t.schema) throw RunError("csv: schema changes at record " + std::to_string(r));
        std::vector<double> row;
        for (std::size_t i = 1; i < rec.size(); ++i) {
            const std::string& f = rec[i];
            double v = 0.0;
            auto [p, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
            if (ec != std::errc() || p != f.data() + f.size() || f.empty())
                throw RunError("csv: non-numeric field '" + f + "' in record " + std::to_string(r));
            if (f.find_first_of(".eEni") != std::string::npos) t.integral[i - 1] = false;
            row.push_back(v);
        }
        t.rows.push_back(std::move(row));
    }
    return t;
}

ResultTable batch_table(const ExampleBatch& b) {
    ResultTable t;
    t.schema = "sparse-batch/1";
    t.columns = {"example_idx", "coord_idx", "value"};
    t.integral = {true, true, false};
    for (std::size_t i = 0; i < b.n(); ++i) {
        for (std::size_t j = 0; j < b.x[i].size(); ++j)
            t.add_row({static_cast<double>(i), static_cast<double>(j), b.x[i][j]});
        t.add_row({static_cast<double>(i), -1.0, b.y[i]});
    }
    return t;
}

ExampleBatch batch_from_table(const ResultTable& t) {
    const std::size_t ci = t.col("example_idx"), cj = t.col("coord_idx"), cv = t.col("value");
    ExampleBatch b;
    std::vector<double> x;
    for (const auto& r : t.rows) {
        const double j = r[cj];
        if (r[ci] != static_cast<double>(b.n())) throw RunError("batch: examples out of order");
        if (j < 0.0) {
            if (b.n() == 0) b.m = x.size();
            if (x.size() != b.m || b.m == 0) throw RunError("batch: example " + std::to_string(b.n()) + " has wrong width");
            b.x.push_back(std::move(x));
            b.y.push_back(r[cv]);
            x.clear();
        } else {
            if (j != static_cast<double>(x.size())) throw RunError("batch: coordinates out of order");
            x.push_back(r[cv]);
        }
    }
    if (!x.empty()) throw RunError("batch: trailing example without a label row");
    return b;
}

}  // namespace icl
