#ifndef IDPATCH_PLOT_HPP
#define IDPATCH_PLOT_HPP

#include <string>
#include <utility>
#include <vector>

#include "idpatch/image.hpp"

namespace idpatch::plot {

struct Series {
    std::string label;
    std::vector<std::pair<double, double>> points;  // (x, y), drawn in order
};

// Minimal deterministic line chart with axes, ticks and a legend.
ImageU8 render_line_plot(const std::string& title, const std::string& x_label,
                         const std::string& y_label, const std::vector<Series>& series,
                         int width = 480, int height = 360);

// 5x7 bitmap text, used by the chart renderer.
void draw_text(ImageU8& img, int x, int y, const std::string& text,
               const std::array<uint8_t, 3>& color);

}  // namespace idpatch::plot

#endif  // IDPATCH_PLOT_HPP
