#include "ehrseq/svg.hpp"

#include <cmath>
#include <cstdio>

namespace ehrseq {

std::string fmt2(double v) {
    if (std::abs(v) < 0.005) v = 0.0;  // no "-0.00"
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string xml_escape(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

std::string_view palette(int i) {
    static constexpr std::string_view colors[] = {"#4477aa", "#ee6677", "#228833", "#ccbb44",
                                                  "#66ccee", "#aa3377", "#bbbbbb"};
    return colors[static_cast<std::size_t>(i) % std::size(colors)];
}

SvgWriter::SvgWriter(double width, double height) : width_(width), height_(height) {}

void SvgWriter::rect(double x, double y, double w, double h, std::string_view fill, std::string_view stroke) {
    body_ += "<rect x=\"" + fmt2(x) + "\" y=\"" + fmt2(y) + "\" width=\"" + fmt2(w) + "\" height=\"" + fmt2(h) +
             "\" fill=\"" + std::string(fill) + "\" stroke=\"" + std::string(stroke) + "\"/>\n";
}

void SvgWriter::line(double x1, double y1, double x2, double y2, std::string_view stroke, double width) {
    body_ += "<line x1=\"" + fmt2(x1) + "\" y1=\"" + fmt2(y1) + "\" x2=\"" + fmt2(x2) + "\" y2=\"" + fmt2(y2) +
             "\" stroke=\"" + std::string(stroke) + "\" stroke-width=\"" + fmt2(width) + "\"/>\n";
}

void SvgWriter::text(double x, double y, std::string_view s, double size, std::string_view anchor,
                     double rotate) {
    body_ += "<text x=\"" + fmt2(x) + "\" y=\"" + fmt2(y) + "\" font-size=\"" + fmt2(size) +
             "\" text-anchor=\"" + std::string(anchor) + "\"";
    if (rotate != 0.0) body_ += " transform=\"rotate(" + fmt2(rotate) + " " + fmt2(x) + " " + fmt2(y) + ")\"";
    body_ += ">" + xml_escape(s) + "</text>\n";
}

std::string SvgWriter::str() const {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt2(width_) + "\" height=\"" + fmt2(height_) +
           "\" viewBox=\"0 0 " + fmt2(width_) + " " + fmt2(height_) + "\" font-family=\"sans-serif\">\n" +
           "<rect x=\"0\" y=\"0\" width=\"" + fmt2(width_) + "\" height=\"" + fmt2(height_) +
           "\" fill=\"#ffffff\"/>\n" + body_ + "</svg>\n";
}

}  // namespace ehrseq
