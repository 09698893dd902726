#include "idpatch/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "idpatch/errors.hpp"

namespace idpatch {

void write_ppm(const std::string& path, const ImageU8& img) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw RuntimeFailure("cannot open for writing: " + path);
    f << "P6\n" << img.width << " " << img.height << "\n255\n";
    f.write(reinterpret_cast<const char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
    if (!f) throw RuntimeFailure("write failed: " + path);
}

ImageU8 read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw RuntimeFailure("cannot open for reading: " + path);
    std::string magic;
    f >> magic;
    if (magic != "P6") throw RuntimeFailure("not a P6 ppm: " + path);
    auto next_int = [&f, &path]() {
        // skip whitespace and '#' comments
        int c = f.get();
        while (c == '#' || std::isspace(c)) {
            if (c == '#')
                while (c != '\n' && c != EOF) c = f.get();
            c = f.get();
        }
        int v = 0;
        bool any = false;
        while (c >= '0' && c <= '9') {
            v   = v * 10 + (c - '0');
            any = true;
            c   = f.get();
        }
        if (!any) throw RuntimeFailure("bad ppm header: " + path);
        return v;
    };
    const int w = next_int();
    const int h = next_int();
    const int maxval = next_int();
    if (maxval != 255) throw RuntimeFailure("unsupported ppm maxval: " + path);
    ImageU8 img(h, w);
    f.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (f.gcount() != static_cast<std::streamsize>(img.rgb.size()))
        throw RuntimeFailure("truncated ppm: " + path);
    return img;
}

Tensor to_unit_tensor(const ImageU8& img) {
    Tensor t({3, img.height, img.width});
    for (int y = 0; y < img.height; y++)
        for (int x = 0; x < img.width; x++)
            for (int c = 0; c < 3; c++) t.at3(c, y, x) = img.at(y, x, c) / 255.0f;
    return t;
}

ImageU8 from_unit_tensor(const Tensor& t) {
    if (t.rank() != 3 || t.dim(0) != 3) throw ShapeError("from_unit_tensor: want [3,H,W]");
    ImageU8 img(t.dim(1), t.dim(2));
    for (int y = 0; y < img.height; y++)
        for (int x = 0; x < img.width; x++)
            for (int c = 0; c < 3; c++) {
                const float v = std::clamp(t.at3(c, y, x), 0.0f, 1.0f);
                img.at(y, x, c) = static_cast<uint8_t>(std::lround(v * 255.0f));
            }
    return img;
}

Tensor to_signed_tensor(const ImageU8& img) {
    Tensor t = to_unit_tensor(img);
    for (size_t i = 0; i < t.numel(); i++) t[i] = t[i] * 2.0f - 1.0f;
    return t;
}

ImageU8 from_signed_tensor(const Tensor& t) {
    if (t.rank() != 3 || t.dim(0) != 3) throw ShapeError("from_signed_tensor: want [3,H,W]");
    Tensor u({3, t.dim(1), t.dim(2)});
    for (size_t i = 0; i < t.numel(); i++) u[i] = (t[i] + 1.0f) * 0.5f;
    return from_unit_tensor(u);
}

static void stamp(Tensor& canvas, int cx, int cy, const std::array<float, 3>& color, int radius) {
    const int h = canvas.dim(1), w = canvas.dim(2);
    for (int dy = -radius; dy <= radius; dy++)
        for (int dx = -radius; dx <= radius; dx++) {
            const int y = cy + dy, x = cx + dx;
            if (y < 0 || y >= h || x < 0 || x >= w) continue;
            for (int c = 0; c < 3; c++) canvas.at3(c, y, x) = color[c];
        }
}

bool draw_line(Tensor& canvas, int x0, int y0, int x1, int y1,
               const std::array<float, 3>& color, int radius) {
    const int h = canvas.dim(1), w = canvas.dim(2);
    const bool clipped = x0 < 0 || x0 >= w || y0 < 0 || y0 >= h || x1 < 0 || x1 >= w || y1 < 0 ||
                         y1 >= h;
    // classic integer Bresenham over all octants
    int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
    int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
    int err = dx + dy;
    int x = x0, y = y0;
    while (true) {
        stamp(canvas, x, y, color, radius);
        if (x == x1 && y == y1) break;
        const int e2 = 2 * err;
        if (e2 >= dy) {
            err += dy;
            x += sx;
        }
        if (e2 <= dx) {
            err += dx;
            y += sy;
        }
    }
    return clipped;
}

void fill_rect(Tensor& canvas, int x0, int y0, int x1, int y1,
               const std::array<float, 3>& color) {
    const int h = canvas.dim(1), w = canvas.dim(2);
    for (int y = std::max(0, y0); y < std::min(h, y1); y++)
        for (int x = std::max(0, x0); x < std::min(w, x1); x++)
            for (int c = 0; c < 3; c++) canvas.at3(c, y, x) = color[c];
}

}  // namespace idpatch
