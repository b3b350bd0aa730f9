// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "dualrate/common.hpp"
#include "dualrate/matrix.hpp"

namespace dualrate {

// Minimal deterministic SVG writer: fixed canvas, fixed margins, coordinates
// formatted with "%.3f" so identical inputs yield identical bytes.
class SvgPlot {
  public:
    SvgPlot(double width, double height, const std::string& title)
        : width_(width), height_(height), title_(title) {}

    void add_scatter(const std::vector<std::pair<double, double>>& pts, const std::string& color,
                     double radius = 2.0) {
        Layer l;
        l.kind = Layer::Scatter;
        l.points = pts;
        l.color = color;
        l.radius = radius;
        layers_.push_back(std::move(l));
        extend_range(pts);
    }

    void add_line(const std::vector<std::pair<double, double>>& pts, const std::string& color,
                  double stroke_width = 1.5) {
        Layer l;
        l.kind = Layer::Line;
        l.points = pts;
        l.color = color;
        l.radius = stroke_width;
        layers_.push_back(std::move(l));
        extend_range(pts);
    }

    void set_axis_labels(const std::string& x, const std::string& y) {
        x_label_ = x;
        y_label_ = y;
    }

    // Forces log10 display of y values (applied at write time).
    void use_log_y() { log_y_ = true; }

    void write(const std::string& path) const {
        double xmin = xmin_, xmax = xmax_, ymin = ymin_, ymax = ymax_;
        if (!have_range_) {
            xmin = 0, xmax = 1, ymin = 0, ymax = 1;
        }
        if (log_y_) {
            ymin = std::log10(std::max(ymin, 1e-300));
            ymax = std::log10(std::max(ymax, 1e-300));
        }
        if (xmax - xmin < 1e-12) {
            xmin -= 0.5;
            xmax += 0.5;
        }
        if (ymax - ymin < 1e-12) {
            ymin -= 0.5;
            ymax += 0.5;
        }
        // 5% padding inside the plot box.
        double xpad = 0.05 * (xmax - xmin), ypad = 0.05 * (ymax - ymin);
        xmin -= xpad, xmax += xpad, ymin -= ypad, ymax += ypad;

        const double ml = 58, mr = 16, mt = 30, mb = 44;
        double pw = width_ - ml - mr, ph = height_ - mt - mb;
        auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
        auto sy = [&](double y) {
            double v = log_y_ ? std::log10(std::max(y, 1e-300)) : y;
            return mt + ph - (v - ymin) / (ymax - ymin) * ph;
        };

        std::string out;
        out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(width_) + "\" height=\"" +
               fmt(height_) + "\" viewBox=\"0 0 " + fmt(width_) + " " + fmt(height_) + "\">\n";
        out += "<rect x=\"0\" y=\"0\" width=\"" + fmt(width_) + "\" height=\"" + fmt(height_) +
               "\" fill=\"white\"/>\n";
        out += "<rect x=\"" + fmt(ml) + "\" y=\"" + fmt(mt) + "\" width=\"" + fmt(pw) + "\" height=\"" +
               fmt(ph) + "\" fill=\"none\" stroke=\"#444\" stroke-width=\"1\"/>\n";
        out += "<text x=\"" + fmt(width_ / 2) + "\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\" "
               "text-anchor=\"middle\">" + escape(title_) + "</text>\n";

        // Four ticks per axis with numeric labels.
        for (int i = 0; i <= 4; ++i) {
            double fx = xmin + (xmax - xmin) * i / 4.0;
            double fy = ymin + (ymax - ymin) * i / 4.0;
            double px = sx(fx);
            double py = mt + ph - (fy - ymin) / (ymax - ymin) * ph;
            out += "<line x1=\"" + fmt(px) + "\" y1=\"" + fmt(mt + ph) + "\" x2=\"" + fmt(px) + "\" y2=\"" +
                   fmt(mt + ph + 4) + "\" stroke=\"#444\"/>\n";
            out += "<text x=\"" + fmt(px) + "\" y=\"" + fmt(mt + ph + 16) +
                   "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">" + fmt_tick(fx) +
                   "</text>\n";
            out += "<line x1=\"" + fmt(ml - 4) + "\" y1=\"" + fmt(py) + "\" x2=\"" + fmt(ml) + "\" y2=\"" +
                   fmt(py) + "\" stroke=\"#444\"/>\n";
            std::string ylab = log_y_ ? ("1e" + fmt_tick(fy)) : fmt_tick(fy);
            out += "<text x=\"" + fmt(ml - 7) + "\" y=\"" + fmt(py + 3) +
                   "\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">" + ylab +
                   "</text>\n";
        }
        if (!x_label_.empty())
            out += "<text x=\"" + fmt(ml + pw / 2) + "\" y=\"" + fmt(height_ - 8) +
                   "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">" +
                   escape(x_label_) + "</text>\n";
        if (!y_label_.empty())
            out += "<text x=\"14\" y=\"" + fmt(mt + ph / 2) +
                   "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\" transform=\"rotate(-90 "
                   "14 " + fmt(mt + ph / 2) + ")\">" + escape(y_label_) + "</text>\n";

        for (const Layer& l : layers_) {
            if (l.kind == Layer::Scatter) {
                for (auto [x, y] : l.points)
                    out += "<circle cx=\"" + fmt(sx(x)) + "\" cy=\"" + fmt(sy(y)) + "\" r=\"" + fmt(l.radius) +
                           "\" fill=\"" + l.color + "\" fill-opacity=\"0.6\"/>\n";
            } else {
                if (l.points.empty()) continue;
                out += "<polyline fill=\"none\" stroke=\"" + l.color + "\" stroke-width=\"" + fmt(l.radius) +
                       "\" points=\"";
                for (size_t i = 0; i < l.points.size(); ++i) {
                    if (i) out += " ";
                    out += fmt(sx(l.points[i].first)) + "," + fmt(sy(l.points[i].second));
                }
                out += "\"/>\n";
            }
        }
        out += "</svg>\n";

        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("svg: cannot open '" + path + "' for writing");
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw IoError("svg: write to '" + path + "' failed");
    }

  private:
    struct Layer {
        enum Kind { Scatter, Line } kind = Scatter;
        std::vector<std::pair<double, double>> points;
        std::string color;
        double radius = 2.0;
    };

    static std::string fmt(double v) {
        char buf[48];
        std::snprintf(buf, sizeof(buf), "%.3f", v);
        return buf;
    }

    static std::string fmt_tick(double v) {
        char buf[48];
        std::snprintf(buf, sizeof(buf), "%.3g", v);
        return buf;
    }

    static std::string escape(const std::string& s) {
        std::string out;
        for (char c : s) {
            if (c == '&')
                out += "&amp;";
            else if (c == '<')
                out += "&lt;";
            else if (c == '>')
                out += "&gt;";
            else
                out.push_back(c);
        }
        return out;
    }

    void extend_range(const std::vector<std::pair<double, double>>& pts) {
        for (auto [x, y] : pts) {
            if (!std::isfinite(x) || !std::isfinite(y)) continue;
            if (!have_range_) {
                xmin_ = xmax_ = x;
                ymin_ = ymax_ = y;
                have_range_ = true;
            } else {
                xmin_ = std::min(xmin_, x);
                xmax_ = std::max(xmax_, x);
                ymin_ = std::min(ymin_, y);
                ymax_ = std::max(ymax_, y);
            }
        }
    }

    double width_, height_;
    std::string title_, x_label_, y_label_;
    bool log_y_ = false;
    std::vector<Layer> layers_;
    bool have_range_ = false;
    double xmin_ = 0, xmax_ = 1, ymin_ = 0, ymax_ = 1;
};

// Scatter of the first two matrix columns (most datasets here are 2-D).
inline std::vector<std::pair<double, double>> xy_points(const Matrix& m) {
    std::vector<std::pair<double, double>> pts;
    pts.reserve(m.rows);
    for (int i = 0; i < m.rows; ++i)
        pts.emplace_back(m.at(i, 0), m.cols > 1 ? m.at(i, 1) : 0.0);
    return pts;
}

}  // namespace dualrate
