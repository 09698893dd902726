#ifndef IDPATCH_DIFFUSION_HPP
#define IDPATCH_DIFFUSION_HPP

#include <vector>

#include "idpatch/graph.hpp"
#include "idpatch/tensor.hpp"

namespace idpatch::diffusion {

// Linear beta schedule; cumulative products kept in double.
struct NoiseSchedule {
    int timesteps = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;
};

NoiseSchedule make_schedule(int timesteps, double beta_min = 1e-3, double beta_max = 0.03);

// x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps
Tensor add_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s);

// Token sequence [c_t, w_0, ..., w_{N-1}] with a per-token segment map:
// 0 marks text tokens, 1+i marks identity i.
struct ExtendedEmbedding {
    Tensor tokens;
    std::vector<int> segments;

    Tensor id_block(int identity_index, int m_tokens) const;
};

ExtendedEmbedding extend_embeddings(const Tensor& text, const std::vector<Tensor>& blocks);

// Differentiable version used during training; returns the segment map too.
template <typename T>
std::pair<NodeRef<T>, std::vector<int>> extend_embeddings_g(GraphT<T>& g, NodeRef<T> text,
                                                            const std::vector<NodeRef<T>>& blocks) {
    std::vector<int> segments(static_cast<size_t>(text->val().dim(0)), 0);
    if (blocks.empty()) {
        // concat of one block keeps grad routing uniform
        return {ops::concat_rows(g, {text}), segments};
    }
    std::vector<NodeRef<T>> parts{text};
    for (size_t i = 0; i < blocks.size(); i++) {
        if (blocks[i]->val().dim(1) != text->val().dim(1))
            throw ShapeError("extend_embeddings: token width mismatch");
        parts.push_back(blocks[i]);
        for (int k = 0; k < blocks[i]->val().dim(0); k++)
            segments.push_back(1 + static_cast<int>(i));
    }
    return {ops::concat_rows(g, parts), segments};
}

// classic transformer sinusoid for an integer timestep
template <typename T>
TensorT<T> sinusoidal_embedding(int t, int dim) {
    TensorT<T> out({1, dim});
    const int half = dim / 2;
    for (int i = 0; i < half; i++) {
        const double freq = std::exp(-std::log(10000.0) * i / (half > 1 ? half - 1 : 1));
        out[i]        = static_cast<T>(std::sin(t * freq));
        out[half + i] = static_cast<T>(std::cos(t * freq));
    }
    return out;
}

}  // namespace idpatch::diffusion

#endif  // IDPATCH_DIFFUSION_HPP
