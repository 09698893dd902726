#include "idpatch/diffusion.hpp"

#include <cmath>

#include "idpatch/errors.hpp"

namespace idpatch::diffusion {

NoiseSchedule make_schedule(int timesteps, double beta_min, double beta_max) {
    if (timesteps < 2) throw ConfigError("schedule: timesteps must be >= 2");
    if (!(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0))
        throw ConfigError("schedule: need 0 < beta_min < beta_max < 1");
    NoiseSchedule s;
    s.timesteps = timesteps;
    s.betas.resize(timesteps);
    s.alphas.resize(timesteps);
    s.alpha_bars.resize(timesteps);
    double prod = 1.0;
    for (int t = 0; t < timesteps; t++) {
        s.betas[t]  = beta_min + (beta_max - beta_min) * t / (timesteps - 1);
        s.alphas[t] = 1.0 - s.betas[t];
        prod *= s.alphas[t];
        s.alpha_bars[t] = prod;
    }
    return s;
}

Tensor add_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& s) {
    if (t < 0 || t >= s.timesteps) throw PreconditionError("add_noise: t out of range");
    if (!x0.same_shape(eps)) throw ShapeError("add_noise: x0/eps shape mismatch");
    const double a = std::sqrt(s.alpha_bars[t]);
    const double b = std::sqrt(1.0 - s.alpha_bars[t]);
    Tensor out(x0.shape());
    for (size_t i = 0; i < out.numel(); i++)
        out[i] = static_cast<float>(a * x0[i] + b * eps[i]);
    return out;
}

ExtendedEmbedding extend_embeddings(const Tensor& text, const std::vector<Tensor>& blocks) {
    if (text.rank() != 2) throw ShapeError("extend_embeddings: text must be [L,d]");
    const int d = text.dim(1);
    int rows    = text.dim(0);
    for (const auto& b : blocks) {
        if (b.rank() != 2 || b.dim(1) != d)
            throw ShapeError("extend_embeddings: token width mismatch");
        rows += b.dim(0);
    }
    ExtendedEmbedding out;
    out.tokens = Tensor({rows, d});
    out.segments.reserve(rows);
    size_t off = 0;
    std::copy(text.data(), text.data() + text.numel(), out.tokens.data());
    off += text.numel();
    for (int i = 0; i < text.dim(0); i++) out.segments.push_back(0);
    for (size_t bi = 0; bi < blocks.size(); bi++) {
        std::copy(blocks[bi].data(), blocks[bi].data() + blocks[bi].numel(),
                  out.tokens.data() + off);
        off += blocks[bi].numel();
        for (int i = 0; i < blocks[bi].dim(0); i++)
            out.segments.push_back(1 + static_cast<int>(bi));
    }
    return out;
}

Tensor ExtendedEmbedding::id_block(int identity_index, int m_tokens) const {
    const int d = tokens.dim(1);
    Tensor out({m_tokens, d});
    int row = 0;
    for (int r = 0; r < tokens.dim(0); r++) {
        if (segments[r] != 1 + identity_index) continue;
        if (row >= m_tokens) throw ShapeError("id_block: more tokens than expected");
        std::copy(tokens.data() + static_cast<size_t>(r) * d,
                  tokens.data() + static_cast<size_t>(r + 1) * d,
                  out.data() + static_cast<size_t>(row) * d);
        row++;
    }
    if (row != m_tokens) throw ShapeError("id_block: identity block not found");
    return out;
}

}  // namespace idpatch::diffusion
