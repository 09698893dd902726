#include "idpatch/condimage.hpp"

#include <fstream>

#include <json.hpp>

#include "idpatch/errors.hpp"
#include "idpatch/image.hpp"

namespace idpatch::condimage {

std::vector<Placement> compute_placements(const std::vector<Tensor>& patches,
                                          const std::vector<std::pair<int, int>>& locations,
                                          int h, int w) {
    if (patches.size() != locations.size())
        throw PreconditionError("compose: patches/locations length mismatch");
    if (h <= 0 || w <= 0) throw PreconditionError("compose: empty canvas dims");
    std::vector<Placement> out;
    out.reserve(patches.size());
    for (size_t i = 0; i < patches.size(); i++) {
        const Tensor& p = patches[i];
        if (p.rank() != 3 || p.dim(0) != 3 || p.dim(1) != p.dim(2))
            throw ShapeError("compose: patch " + std::to_string(i) + " must be [3,P,P]");
        const int size = p.dim(1);
        if (size > h || size > w)
            throw PreconditionError("compose: patch " + std::to_string(i) +
                                    " larger than canvas");
        Placement pl;
        pl.identity_index = static_cast<int>(i);
        pl.anchor         = locations[i];
        pl.size           = size;
        pl.x0             = clamp_box_start(locations[i].first, size, w);
        pl.y0             = clamp_box_start(locations[i].second, size, h);
        out.push_back(pl);
    }
    return out;
}

std::vector<int> owner_map(const std::vector<Placement>& placements, int h, int w) {
    std::vector<int> owners(static_cast<size_t>(h) * w, -1);
    for (const auto& pl : placements)
        for (int y = pl.y0; y < pl.y0 + pl.size; y++)
            for (int x = pl.x0; x < pl.x0 + pl.size; x++)
                owners[static_cast<size_t>(y) * w + x] = pl.identity_index;
    return owners;
}

ConditioningImage compose_canvas(const std::vector<Tensor>& patches,
                                 const std::vector<std::pair<int, int>>& locations, int h, int w,
                                 const PoseImage* base) {
    ConditioningImage ci;
    ci.placements = compute_placements(patches, locations, h, w);
    if (base) {
        check_shape(base->pixels, {3, h, w}, "compose: base");
        ci.pixels = base->pixels;
    } else {
        ci.pixels = Tensor({3, h, w});
        ci.pixels.fill(-1.f);
    }
    for (size_t i = 0; i < patches.size(); i++) {
        const auto& pl = ci.placements[i];
        for (int c = 0; c < 3; c++)
            for (int y = 0; y < pl.size; y++)
                for (int x = 0; x < pl.size; x++)
                    ci.pixels.at3(c, pl.y0 + y, pl.x0 + x) = patches[i].at3(c, y, x);
    }
    return ci;
}

namespace {
// per-limb stroke colours in [-1,1]; chain index cycles spine, left, right
const std::array<std::array<float, 3>, 3> kPoseColors = {{
    {1.0f, 0.8f, -0.8f},
    {-0.8f, 0.8f, 1.0f},
    {1.0f, -0.6f, 0.8f},
}};
constexpr int kStrokeRadius = 1;
}  // namespace

PoseImage rasterize_pose(const std::vector<synthid::KeypointChain>& skeletons, int h, int w) {
    if (h <= 0 || w <= 0) throw PreconditionError("rasterize_pose: empty canvas dims");
    PoseImage pi;
    pi.pixels = Tensor({3, h, w});
    pi.pixels.fill(-1.f);
    pi.skeletons = skeletons;
    for (size_t ci = 0; ci < skeletons.size(); ci++) {
        const auto& chain = skeletons[ci];
        const auto& color = kPoseColors[ci % 3];
        for (size_t k = 0; k + 1 < chain.size(); k++) {
            const bool clipped = draw_line(pi.pixels, chain[k].first, chain[k].second,
                                           chain[k + 1].first, chain[k + 1].second, color,
                                           kStrokeRadius);
            pi.clipped = pi.clipped || clipped;
        }
    }
    return pi;
}

ConditioningImage overlay_alternate_condition(const Tensor& base,
                                              const std::vector<Tensor>& patches,
                                              const std::vector<std::pair<int, int>>& locations) {
    if (base.rank() != 3 || base.dim(0) != 3)
        throw ShapeError("overlay_alternate_condition: base must be [3,H,W]");
    PoseImage wrapper;
    wrapper.pixels = base;
    return compose_canvas(patches, locations, base.dim(1), base.dim(2), &wrapper);
}

void export_conditioning(const ConditioningImage& ci, const std::string& image_path,
                         const std::string& placements_path) {
    write_ppm(image_path, from_signed_tensor(ci.pixels));
    nlohmann::json j = nlohmann::json::array();
    for (const auto& pl : ci.placements) {
        nlohmann::json p;
        p["identity_index"] = pl.identity_index;
        p["anchor"]         = {pl.anchor.first, pl.anchor.second};
        p["box"]            = {pl.x0, pl.y0, pl.size};
        j.push_back(p);
    }
    std::ofstream f(placements_path, std::ios::binary);
    if (!f) throw RuntimeFailure("cannot write placements: " + placements_path);
    f << j.dump(2) << "\n";
}

}  // namespace idpatch::condimage
