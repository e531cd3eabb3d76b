#ifndef ICFLOW_PLOT_HPP
#define ICFLOW_PLOT_HPP

#include "icflow/core.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

namespace icflow {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

namespace detail {

inline std::string fmt_g(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace detail

// Self-contained SVG line chart; output is a pure function of its inputs.
inline std::string svg_line_chart(const std::vector<Series>& series,
                                  const std::string& title,
                                  const std::string& xlabel,
                                  const std::string& ylabel, int width = 640,
                                  int height = 420) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c",
                                   "#9467bd", "#ff7f0e", "#8c564b"};
    constexpr int kColors = 6;
    const double ml = 64, mr = 16, mt = 40, mb = 48;
    const double pw = width - ml - mr, ph = height - mt - mb;

    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
    double ymin = xmin, ymax = -xmin;
    for (const auto& s : series)
        for (size_t i = 0; i < s.x.size(); ++i) {
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymin = std::min(ymin, s.y[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    if (!(xmin < xmax)) {
        xmin -= 0.5;
        xmax += 0.5;
    }
    if (!(ymin < ymax)) {
        ymin -= 0.5;
        ymax += 0.5;
    }
    const double ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;

    auto sx = [&](double v) { return ml + (v - xmin) / (xmax - xmin) * pw; };
    auto sy = [&](double v) {
        return mt + ph - (v - ymin) / (ymax - ymin) * ph;
    };

    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
           std::to_string(width) + "\" height=\"" + std::to_string(height) +
           "\" viewBox=\"0 0 " + std::to_string(width) + " " +
           std::to_string(height) + "\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg += "<text x=\"" + detail::fmt_g(width / 2.0) +
           "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"14\">" +
           title + "</text>\n";

    // axes and ticks
    svg += "<g stroke=\"#444\" stroke-width=\"1\" font-family=\"sans-serif\" "
           "font-size=\"11\">\n";
    svg += "<line x1=\"" + detail::fmt_g(ml) + "\" y1=\"" +
           detail::fmt_g(mt + ph) + "\" x2=\"" + detail::fmt_g(ml + pw) +
           "\" y2=\"" + detail::fmt_g(mt + ph) + "\"/>\n";
    svg += "<line x1=\"" + detail::fmt_g(ml) + "\" y1=\"" + detail::fmt_g(mt) +
           "\" x2=\"" + detail::fmt_g(ml) + "\" y2=\"" +
           detail::fmt_g(mt + ph) + "\"/>\n";
    const int ticks = 5;
    for (int i = 0; i <= ticks; ++i) {
        double fx = xmin + (xmax - xmin) * i / ticks;
        double fy = ymin + (ymax - ymin) * i / ticks;
        svg += "<line x1=\"" + detail::fmt_g(sx(fx)) + "\" y1=\"" +
               detail::fmt_g(mt + ph) + "\" x2=\"" + detail::fmt_g(sx(fx)) +
               "\" y2=\"" + detail::fmt_g(mt + ph + 4) + "\"/>\n";
        svg += "<text x=\"" + detail::fmt_g(sx(fx)) + "\" y=\"" +
               detail::fmt_g(mt + ph + 16) +
               "\" text-anchor=\"middle\" stroke=\"none\" fill=\"#222\">" +
               detail::fmt_g(fx) + "</text>\n";
        svg += "<line x1=\"" + detail::fmt_g(ml - 4) + "\" y1=\"" +
               detail::fmt_g(sy(fy)) + "\" x2=\"" + detail::fmt_g(ml) +
               "\" y2=\"" + detail::fmt_g(sy(fy)) + "\"/>\n";
        svg += "<text x=\"" + detail::fmt_g(ml - 8) + "\" y=\"" +
               detail::fmt_g(sy(fy) + 4) +
               "\" text-anchor=\"end\" stroke=\"none\" fill=\"#222\">" +
               detail::fmt_g(fy) + "</text>\n";
    }
    svg += "</g>\n";
    svg += "<text x=\"" + detail::fmt_g(ml + pw / 2) + "\" y=\"" +
           detail::fmt_g(height - 8.0) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"12\">" +
           xlabel + "</text>\n";
    svg += "<text x=\"14\" y=\"" + detail::fmt_g(mt + ph / 2) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"12\" transform=\"rotate(-90 14 " +
           detail::fmt_g(mt + ph / 2) + ")\">" + ylabel + "</text>\n";

    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        if (s.x.empty())
            continue;
        std::string pts;
        for (size_t i = 0; i < s.x.size(); ++i) {
            if (i)
                pts += ' ';
            pts += detail::fmt_g(sx(s.x[i])) + "," + detail::fmt_g(sy(s.y[i]));
        }
        const char* color = colors[si % kColors];
        svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
               "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
        svg += "<text x=\"" + detail::fmt_g(ml + pw - 6) + "\" y=\"" +
               detail::fmt_g(mt + 14.0 + 14.0 * static_cast<double>(si)) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" "
               "font-size=\"11\" fill=\"" +
               color + "\">" + s.name + "</text>\n";
    }
    svg += "</svg>\n";
    return svg;
}

inline void write_text_file(const std::string& path,
                            const std::string& content) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        throw Error("write_text_file: cannot open " + path);
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!os)
        throw Error("write_text_file: write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw Error("read_text_file: cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(is)),
                       std::istreambuf_iterator<char>());
}

}  // namespace icflow

#endif  // ICFLOW_PLOT_HPP
