#include "idpatch/plot.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <map>

namespace idpatch::plot {

namespace {

// 5x7 glyphs, column-major, bit 0 = top row
const std::map<char, std::array<uint8_t, 5>> kFont = {
    {' ', {0x00, 0x00, 0x00, 0x00, 0x00}}, {'.', {0x00, 0x60, 0x60, 0x00, 0x00}},
    {'-', {0x08, 0x08, 0x08, 0x08, 0x08}}, {':', {0x00, 0x36, 0x36, 0x00, 0x00}},
    {'_', {0x40, 0x40, 0x40, 0x40, 0x40}}, {'/', {0x20, 0x10, 0x08, 0x04, 0x02}},
    {'+', {0x08, 0x08, 0x3e, 0x08, 0x08}}, {'(', {0x00, 0x1c, 0x22, 0x41, 0x00}},
    {')', {0x00, 0x41, 0x22, 0x1c, 0x00}},
    {'0', {0x3e, 0x51, 0x49, 0x45, 0x3e}}, {'1', {0x00, 0x42, 0x7f, 0x40, 0x00}},
    {'2', {0x42, 0x61, 0x51, 0x49, 0x46}}, {'3', {0x21, 0x41, 0x45, 0x4b, 0x31}},
    {'4', {0x18, 0x14, 0x12, 0x7f, 0x10}}, {'5', {0x27, 0x45, 0x45, 0x45, 0x39}},
    {'6', {0x3c, 0x4a, 0x49, 0x49, 0x30}}, {'7', {0x01, 0x71, 0x09, 0x05, 0x03}},
    {'8', {0x36, 0x49, 0x49, 0x49, 0x36}}, {'9', {0x06, 0x49, 0x49, 0x29, 0x1e}},
    {'A', {0x7e, 0x11, 0x11, 0x11, 0x7e}}, {'B', {0x7f, 0x49, 0x49, 0x49, 0x36}},
    {'C', {0x3e, 0x41, 0x41, 0x41, 0x22}}, {'D', {0x7f, 0x41, 0x41, 0x22, 0x1c}},
    {'E', {0x7f, 0x49, 0x49, 0x49, 0x41}}, {'F', {0x7f, 0x09, 0x09, 0x09, 0x01}},
    {'G', {0x3e, 0x41, 0x49, 0x49, 0x7a}}, {'H', {0x7f, 0x08, 0x08, 0x08, 0x7f}},
    {'I', {0x00, 0x41, 0x7f, 0x41, 0x00}}, {'J', {0x20, 0x40, 0x41, 0x3f, 0x01}},
    {'K', {0x7f, 0x08, 0x14, 0x22, 0x41}}, {'L', {0x7f, 0x40, 0x40, 0x40, 0x40}},
    {'M', {0x7f, 0x02, 0x0c, 0x02, 0x7f}}, {'N', {0x7f, 0x04, 0x08, 0x10, 0x7f}},
    {'O', {0x3e, 0x41, 0x41, 0x41, 0x3e}}, {'P', {0x7f, 0x09, 0x09, 0x09, 0x06}},
    {'Q', {0x3e, 0x41, 0x51, 0x21, 0x5e}}, {'R', {0x7f, 0x09, 0x19, 0x29, 0x46}},
    {'S', {0x46, 0x49, 0x49, 0x49, 0x31}}, {'T', {0x01, 0x01, 0x7f, 0x01, 0x01}},
    {'U', {0x3f, 0x40, 0x40, 0x40, 0x3f}}, {'V', {0x1f, 0x20, 0x40, 0x20, 0x1f}},
    {'W', {0x3f, 0x40, 0x38, 0x40, 0x3f}}, {'X', {0x63, 0x14, 0x08, 0x14, 0x63}},
    {'Y', {0x07, 0x08, 0x70, 0x08, 0x07}}, {'Z', {0x61, 0x51, 0x49, 0x45, 0x43}},
};

void put_px(ImageU8& img, int x, int y, const std::array<uint8_t, 3>& c) {
    if (x < 0 || x >= img.width || y < 0 || y >= img.height) return;
    for (int i = 0; i < 3; i++) img.at(y, x, i) = c[i];
}

void line_px(ImageU8& img, int x0, int y0, int x1, int y1, const std::array<uint8_t, 3>& c) {
    int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy, x = x0, y = y0;
    while (true) {
        put_px(img, x, y, c);
        if (x == x1 && y == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) { err += dy; x += sx; }
        if (e2 <= dx) { err += dx; y += sy; }
    }
}

std::string format_tick(double v) {
    char buf[32];
    if (std::abs(v) >= 100.0 || v == std::floor(v))
        std::snprintf(buf, sizeof(buf), "%.0f", v);
    else
        std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

const std::array<std::array<uint8_t, 3>, 6> kSeriesColors = {{
    {40, 90, 200}, {200, 80, 40}, {40, 160, 80}, {160, 40, 160}, {200, 160, 20}, {20, 160, 180},
}};

}  // namespace

void draw_text(ImageU8& img, int x, int y, const std::string& text,
               const std::array<uint8_t, 3>& color) {
    int cx = x;
    for (char raw : text) {
        const char ch = static_cast<char>(std::toupper(static_cast<unsigned char>(raw)));
        auto it       = kFont.find(ch);
        if (it != kFont.end()) {
            for (int col = 0; col < 5; col++)
                for (int row = 0; row < 7; row++)
                    if (it->second[col] >> row & 1) put_px(img, cx + col, y + row, color);
        }
        cx += 6;
    }
}

ImageU8 render_line_plot(const std::string& title, const std::string& x_label,
                         const std::string& y_label, const std::vector<Series>& series,
                         int width, int height) {
    ImageU8 img(height, width);
    std::fill(img.rgb.begin(), img.rgb.end(), static_cast<uint8_t>(255));
    const std::array<uint8_t, 3> black = {0, 0, 0};
    const std::array<uint8_t, 3> gray  = {190, 190, 190};

    const int ml = 56, mr = 16, mt = 28, mb = 40;
    const int px0 = ml, px1 = width - mr, py0 = mt, py1 = height - mb;

    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (auto& [x, y] : s.points) {
            xmin = std::min(xmin, x); xmax = std::max(xmax, x);
            ymin = std::min(ymin, y); ymax = std::max(ymax, y);
        }
    if (xmin > xmax) { xmin = 0; xmax = 1; ymin = 0; ymax = 1; }
    if (xmax - xmin < 1e-12) { xmin -= 0.5; xmax += 0.5; }
    if (ymax - ymin < 1e-12) { ymin -= 0.5; ymax += 0.5; }
    const double ypad = 0.06 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;

    auto to_px = [&](double x, double y) {
        const int sx = px0 + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (px1 - px0)));
        const int sy = py1 - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * (py1 - py0)));
        return std::make_pair(sx, sy);
    };

    for (int i = 0; i <= 4; i++) {
        const double yv = ymin + (ymax - ymin) * i / 4.0;
        auto [sx, sy]   = to_px(xmin, yv);
        line_px(img, px0, sy, px1, sy, gray);
        draw_text(img, 4, sy - 3, format_tick(yv), black);
        (void)sx;
    }
    for (int i = 0; i <= 4; i++) {
        const double xv = xmin + (xmax - xmin) * i / 4.0;
        auto [sx, sy]   = to_px(xv, ymin);
        line_px(img, sx, py1, sx, py1 + 3, black);
        draw_text(img, sx - 8, py1 + 8, format_tick(xv), black);
        (void)sy;
    }
    line_px(img, px0, py0, px0, py1, black);
    line_px(img, px0, py1, px1, py1, black);
    draw_text(img, ml, 8, title, black);
    draw_text(img, (px0 + px1) / 2 - 3 * static_cast<int>(x_label.size()), height - 14, x_label,
              black);
    draw_text(img, 4, 8, y_label, black);

    for (size_t si = 0; si < series.size(); si++) {
        const auto& color = kSeriesColors[si % kSeriesColors.size()];
        const auto& pts   = series[si].points;
        for (size_t i = 0; i + 1 < pts.size(); i++) {
            auto [x0, y0] = to_px(pts[i].first, pts[i].second);
            auto [x1, y1] = to_px(pts[i + 1].first, pts[i + 1].second);
            line_px(img, x0, y0, x1, y1, color);
        }
        for (auto& [x, y] : pts) {
            auto [sx, sy] = to_px(x, y);
            for (int dy = -1; dy <= 1; dy++)
                for (int dx = -1; dx <= 1; dx++) put_px(img, sx + dx, sy + dy, color);
        }
        // legend
        const int ly = py0 + 4 + 10 * static_cast<int>(si);
        line_px(img, px1 - 70, ly + 3, px1 - 56, ly + 3, color);
        draw_text(img, px1 - 52, ly, series[si].label, black);
    }
    return img;
}

}  // namespace idpatch::plot
