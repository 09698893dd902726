#ifndef IDPATCH_CONDIMAGE_HPP
#define IDPATCH_CONDIMAGE_HPP

#include <utility>
#include <vector>

#include "idpatch/graph.hpp"
#include "idpatch/synthid.hpp"
#include "idpatch/tensor.hpp"

namespace idpatch::condimage {

// Shared inward-clamp rule for patch placement and face cropping.
inline int clamp_box_start(int anchor, int size, int limit) {
    const int lo = anchor - size / 2;
    return lo < 0 ? 0 : (lo > limit - size ? limit - size : lo);
}

struct Placement {
    int identity_index = 0;
    std::pair<int, int> anchor;
    int x0 = 0, y0 = 0, size = 0;
};

// Control-branch input: [-1,1] pixels, black = -1.
struct ConditioningImage {
    Tensor pixels;  // [3,H,W]
    std::vector<Placement> placements;
};

struct PoseImage {
    Tensor pixels;  // [3,H,W] in [-1,1], background -1
    std::vector<synthid::KeypointChain> skeletons;
    bool clipped = false;  // set when out-of-bounds keypoints were clipped
};

// Patches are copied (overwrite, not blend) centred on their anchor, clamped
// inward so the full patch stays on canvas; later indices win on overlap.
ConditioningImage compose_canvas(const std::vector<Tensor>& patches,
                                 const std::vector<std::pair<int, int>>& locations, int h, int w,
                                 const PoseImage* base = nullptr);

PoseImage rasterize_pose(const std::vector<synthid::KeypointChain>& skeletons, int h, int w);

// compose_canvas with a mandatory base grid (e.g. an edge map).
ConditioningImage overlay_alternate_condition(const Tensor& base,
                                              const std::vector<Tensor>& patches,
                                              const std::vector<std::pair<int, int>>& locations);

// owner[y*w+x] = index of the topmost patch covering the pixel, -1 for base
std::vector<int> owner_map(const std::vector<Placement>& placements, int h, int w);

std::vector<Placement> compute_placements(const std::vector<Tensor>& patches,
                                          const std::vector<std::pair<int, int>>& locations,
                                          int h, int w);

// Differentiable placement with the same semantics as compose_canvas; the
// backward pass routes each pixel's gradient to the patch that owns it.
template <typename T>
NodeRef<T> place_patches(GraphT<T>& g, const TensorT<T>& base,
                         const std::vector<NodeRef<T>>& patches,
                         const std::vector<std::pair<int, int>>& locations) {
    const int h = base.dim(1), w = base.dim(2);
    std::vector<Tensor> shapes;  // only dims are used by compute_placements
    shapes.reserve(patches.size());
    for (auto& p : patches) shapes.emplace_back(std::vector<int>{3, p->val().dim(1),
                                                                 p->val().dim(2)});
    auto placements = compute_placements(shapes, locations, h, w);
    auto owners     = owner_map(placements, h, w);

    TensorT<T> out = base;
    for (size_t i = 0; i < patches.size(); i++) {
        const auto& pl = placements[i];
        const auto& px = patches[i]->val();
        for (int c = 0; c < 3; c++)
            for (int y = 0; y < pl.size; y++)
                for (int x = 0; x < pl.size; x++)
                    out.at3(c, pl.y0 + y, pl.x0 + x) = px.at3(c, y, x);
    }
    return g.make(std::move(out), patches,
                  [placements, owners, h, w](NodeT<T>& self) {
        (void)h;
        for (size_t i = 0; i < self.parents.size(); i++) {
            auto& p = self.parents[i];
            if (!p->requires_grad) continue;
            auto& dp       = p->ensure_grad();
            const auto& pl = placements[i];
            for (int c = 0; c < 3; c++)
                for (int y = 0; y < pl.size; y++)
                    for (int x = 0; x < pl.size; x++) {
                        const int gy = pl.y0 + y, gx = pl.x0 + x;
                        if (owners[static_cast<size_t>(gy) * w + gx] == static_cast<int>(i))
                            dp.at3(c, y, x) += self.grad.at3(c, gy, gx);
                    }
        }
    });
}

// 8-bit export of a conditioning image plus its placement records.
void export_conditioning(const ConditioningImage& ci, const std::string& image_path,
                         const std::string& placements_path);

}  // namespace idpatch::condimage

#endif  // IDPATCH_CONDIMAGE_HPP
