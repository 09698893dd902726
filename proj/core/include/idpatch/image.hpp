#ifndef IDPATCH_IMAGE_HPP
#define IDPATCH_IMAGE_HPP

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "idpatch/tensor.hpp"

namespace idpatch {

// 8-bit RGB image, row-major, 3 bytes per pixel.
struct ImageU8 {
    int height = 0;
    int width  = 0;
    std::vector<uint8_t> rgb;

    ImageU8() = default;
    ImageU8(int h, int w) : height(h), width(w), rgb(static_cast<size_t>(h) * w * 3, 0) {}

    uint8_t& at(int y, int x, int c) { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }
    uint8_t at(int y, int x, int c) const {
        return rgb[(static_cast<size_t>(y) * width + x) * 3 + c];
    }
};

// Lossless binary PPM (P6), 8-bit per channel.
void write_ppm(const std::string& path, const ImageU8& img);
ImageU8 read_ppm(const std::string& path);

// [3,H,W] float in [0,1] <-> 8-bit
Tensor to_unit_tensor(const ImageU8& img);
ImageU8 from_unit_tensor(const Tensor& t);

// [3,H,W] float in [-1,1] <-> 8-bit (affine map -1..1 -> 0..255)
Tensor to_signed_tensor(const ImageU8& img);
ImageU8 from_signed_tensor(const Tensor& t);

// Bresenham line with a square stamp of the given radius (thickness 2r+1).
// Coordinates are (x, y); out-of-bounds pixels are clipped. Returns true if
// any endpoint had to be clipped.
bool draw_line(Tensor& canvas, int x0, int y0, int x1, int y1,
               const std::array<float, 3>& color, int radius);

void fill_rect(Tensor& canvas, int x0, int y0, int x1, int y1,
               const std::array<float, 3>& color);

}  // namespace idpatch

#endif  // IDPATCH_IMAGE_HPP
