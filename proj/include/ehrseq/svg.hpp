#pragma once

#include <string>
#include <string_view>

namespace ehrseq {

/// Minimal SVG builder. Coordinates are printed with two decimals so the
/// output bytes depend only on the inputs.
class SvgWriter {
public:
    SvgWriter(double width, double height);

    void rect(double x, double y, double w, double h, std::string_view fill, std::string_view stroke = "none");
    void line(double x1, double y1, double x2, double y2, std::string_view stroke, double width = 1.0);
    /// `anchor` is start, middle or end.
    void text(double x, double y, std::string_view s, double size = 11.0, std::string_view anchor = "start",
              double rotate = 0.0);

    std::string str() const;

private:
    double width_, height_;
    std::string body_;
};

std::string xml_escape(std::string_view s);
/// Fixed two-decimal rendering.
std::string fmt2(double v);

/// Qualitative palette entry `i` (cycles).
std::string_view palette(int i);

}  // namespace ehrseq
