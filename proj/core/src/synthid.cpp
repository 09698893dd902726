#include "idpatch/synthid.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include <json.hpp>

#include "idpatch/parallel.hpp"

#include "idpatch/errors.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace idpatch::synthid {

double IdentityFeature::norm() const {
    double s = 0.0;
    for (float v : values) s += static_cast<double>(v) * v;
    return std::sqrt(s);
}

double cosine_similarity(const IdentityFeature& a, const IdentityFeature& b) {
    if (a.values.size() != b.values.size())
        throw ShapeError("cosine_similarity: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.values.size(); i++) {
        dot += static_cast<double>(a.values[i]) * b.values[i];
        na += static_cast<double>(a.values[i]) * a.values[i];
        nb += static_cast<double>(b.values[i]) * b.values[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace {
constexpr uint64_t kSampleTag  = 0x5a4d504c49440001ULL;
constexpr uint64_t kCodecTag   = 0x434f444543000001ULL;
constexpr uint64_t kPoolTag    = 0x504f4f4c00000001ULL;
constexpr uint64_t kHoldTag    = 0x484f4c4400000001ULL;
constexpr uint64_t kRecordTag  = 0x5245430000000001ULL;
constexpr uint64_t kSceneTag   = 0x5343454e00000001ULL;

void normalize(std::vector<float>& v) {
    double s = 0.0;
    for (float x : v) s += static_cast<double>(x) * x;
    s = std::sqrt(s);
    if (s < 1e-12) {
        std::fill(v.begin(), v.end(), 0.f);
        if (!v.empty()) v[0] = 1.f;
        return;
    }
    for (float& x : v) x = static_cast<float>(x / s);
}
}  // namespace

IdentityFeature sample_identity(uint64_t rng_seed, int feature_dim) {
    if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
    Rng rng(mix_seed({kSampleTag, rng_seed, static_cast<uint64_t>(feature_dim)}));
    IdentityFeature f;
    f.values.resize(feature_dim);
    for (int i = 0; i < feature_dim; i++) f.values[i] = static_cast<float>(rng.normal());
    normalize(f.values);
    f.id_label = static_cast<int>(rng_seed);
    return f;
}

SpriteCodec::SpriteCodec(int feature_dim, int sprite_size) : d_(feature_dim), s_(sprite_size) {
    const int pix = s_ * s_ * 3;
    if (pix < d_)
        throw ConfigError("sprite size " + std::to_string(s_) + " cannot encode " +
                          std::to_string(d_) + " feature parameters");
    Rng rng(mix_seed({kCodecTag, static_cast<uint64_t>(d_), static_cast<uint64_t>(s_)}));
    std::vector<double> basis(static_cast<size_t>(d_) * pix);
    for (auto& v : basis) v = rng.normal();
    // two rounds of classical Gram-Schmidt
    for (int round = 0; round < 2; round++) {
        for (int r = 0; r < d_; r++) {
            double* row = basis.data() + static_cast<size_t>(r) * pix;
            for (int q = 0; q < r; q++) {
                const double* prev = basis.data() + static_cast<size_t>(q) * pix;
                double dot = 0.0;
                for (int p = 0; p < pix; p++) dot += row[p] * prev[p];
                for (int p = 0; p < pix; p++) row[p] -= dot * prev[p];
            }
            double nrm = 0.0;
            for (int p = 0; p < pix; p++) nrm += row[p] * row[p];
            nrm = std::sqrt(nrm);
            if (nrm < 1e-9) throw ConfigError("degenerate sprite basis");
            for (int p = 0; p < pix; p++) row[p] /= nrm;
        }
    }
    // gain from the tightest per-pixel bound: |sum_d f_d B_dp| <= ||B_:,p||
    double max_col = 0.0;
    for (int p = 0; p < pix; p++) {
        double col = 0.0;
        for (int r = 0; r < d_; r++) {
            const double v = basis[static_cast<size_t>(r) * pix + p];
            col += v * v;
        }
        max_col = std::max(max_col, std::sqrt(col));
    }
    gain_ = static_cast<float>(0.45 / max_col);

    basis_.resize(basis.size());
    for (size_t i = 0; i < basis.size(); i++) basis_[i] = static_cast<float>(basis[i]);

    // decorative face pattern, projected into the orthogonal complement of the
    // basis so the linear decode is untouched by it
    std::vector<double> face(pix, 0.0);
    const double cx = (s_ - 1) / 2.0, cy = (s_ - 1) / 2.0;
    const double head_r = s_ * 0.42;
    for (int y = 0; y < s_; y++)
        for (int x = 0; x < s_; x++) {
            const double r = std::hypot(x - cx, y - cy);
            double v = 0.0;
            if (std::abs(r - head_r) <= 0.8) v = 1.0;                       // head outline
            if (std::hypot(x - cx + s_ * 0.15, y - cy + s_ * 0.12) < s_ * 0.05) v = -1.0;  // eye
            if (std::hypot(x - cx - s_ * 0.15, y - cy + s_ * 0.12) < s_ * 0.05) v = -1.0;  // eye
            if (std::abs(y - cy - s_ * 0.2) < 0.8 && std::abs(x - cx) < s_ * 0.16) v = -0.7;  // mouth
            for (int c = 0; c < 3; c++) face[(static_cast<size_t>(c) * s_ + y) * s_ + x] = v;
        }
    for (int r = 0; r < d_; r++) {
        const double* row = basis.data() + static_cast<size_t>(r) * pix;
        double dot = 0.0;
        for (int p = 0; p < pix; p++) dot += face[p] * row[p];
        for (int p = 0; p < pix; p++) face[p] -= dot * row[p];
    }
    double max_abs = 0.0;
    for (double v : face) max_abs = std::max(max_abs, std::abs(v));
    overlay_.resize(pix, 0.f);
    if (max_abs > 1e-9)
        for (int p = 0; p < pix; p++)
            overlay_[p] = static_cast<float>(face[p] / max_abs * 0.05);
}

const SpriteCodec& SpriteCodec::get(int feature_dim, int sprite_size) {
    static std::mutex mu;
    static std::map<std::pair<int, int>, std::unique_ptr<SpriteCodec>> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto key = std::make_pair(feature_dim, sprite_size);
    auto it  = cache.find(key);
    if (it == cache.end())
        it = cache.emplace(key, std::unique_ptr<SpriteCodec>(new SpriteCodec(feature_dim,
                                                                             sprite_size)))
                 .first;
    return *it->second;
}

Tensor SpriteCodec::render(const IdentityFeature& f) const {
    if (f.dim() != d_) throw ShapeError("render: feature dim mismatch");
    const int pix = s_ * s_ * 3;
    Tensor out({3, s_, s_});
    for (int p = 0; p < pix; p++) {
        double acc = 0.0;
        for (int r = 0; r < d_; r++)
            acc += static_cast<double>(f.values[r]) * basis_[static_cast<size_t>(r) * pix + p];
        out[p] = static_cast<float>(0.5 + gain_ * acc + overlay_[p]);
    }
    return out;
}

IdentityFeature SpriteCodec::extract(const Tensor& crop) const {
    if (crop.rank() != 3 || crop.dim(0) != 3 || crop.dim(1) != s_ || crop.dim(2) != s_)
        throw ShapeError("extract: crop shape " + crop.shape_str() + " does not match sprite " +
                         std::to_string(s_));
    const int pix = s_ * s_ * 3;
    IdentityFeature f;
    f.values.resize(d_);
    for (int r = 0; r < d_; r++) {
        const float* row = basis_.data() + static_cast<size_t>(r) * pix;
        double acc = 0.0;
        for (int p = 0; p < pix; p++) acc += row[p] * (static_cast<double>(crop[p]) - 0.5);
        f.values[r] = static_cast<float>(acc / gain_);
    }
    normalize(f.values);
    return f;
}

Tensor render_face(const IdentityFeature& f, int size) {
    if (size < 8) throw PreconditionError("render_face: size must be >= 8");
    return SpriteCodec::get(f.dim(), size).render(f);
}

IdentityFeature extract_feature(const Tensor& crop, int feature_dim) {
    if (crop.rank() != 3 || crop.dim(0) != 3 || crop.dim(1) != crop.dim(2))
        throw ShapeError("extract_feature: want square [3,S,S] crop, got " + crop.shape_str());
    return SpriteCodec::get(feature_dim, crop.dim(1)).extract(crop);
}

std::pair<std::array<float, 3>, std::array<float, 3>> caption_palette(int label, int n_labels) {
    if (label < 0 || label >= n_labels) throw PreconditionError("caption label out of range");
    auto hsv = [](double h, double sat, double val) {
        const double c = val * sat;
        const double hp = h / 60.0;
        const double xx = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
        double r = 0, g = 0, b = 0;
        if (hp < 1)      { r = c; g = xx; }
        else if (hp < 2) { r = xx; g = c; }
        else if (hp < 3) { g = c; b = xx; }
        else if (hp < 4) { g = xx; b = c; }
        else if (hp < 5) { r = xx; b = c; }
        else             { r = c; b = xx; }
        const double m = val - c;
        return std::array<float, 3>{static_cast<float>(r + m), static_cast<float>(g + m),
                                    static_cast<float>(b + m)};
    };
    const double hue = 360.0 * label / n_labels;
    return {hsv(hue, 0.55, 0.85), hsv(hue, 0.70, 0.45)};
}

void paint_background(Tensor& canvas, int caption_label, int n_labels) {
    const int h = canvas.dim(1), w = canvas.dim(2);
    auto [top, bot] = caption_palette(caption_label, n_labels);
    for (int y = 0; y < h; y++) {
        const float t = h > 1 ? static_cast<float>(y) / (h - 1) : 0.f;
        for (int c = 0; c < 3; c++) {
            const float v = top[c] * (1.f - t) + bot[c] * t;
            for (int x = 0; x < w; x++) canvas.at3(c, y, x) = v;
        }
    }
}

std::vector<KeypointChain> make_skeleton(int x, int y, int sprite_size, int h, int w, Rng& rng) {
    const int s  = sprite_size;
    auto clampxy = [h, w](int px, int py) {
        return std::make_pair(std::clamp(px, 0, w - 1), std::clamp(py, 0, h - 1));
    };
    const int jitter = static_cast<int>(rng.below(5)) - 2;
    const auto neck  = clampxy(x + jitter, y + s / 2 + 3);
    const auto sh_l  = clampxy(neck.first - s / 3 - static_cast<int>(rng.below(4)), neck.second + 2);
    const auto sh_r  = clampxy(neck.first + s / 3 + static_cast<int>(rng.below(4)), neck.second + 2);
    const auto hd_l  = clampxy(sh_l.first - static_cast<int>(rng.below(6)),
                               sh_l.second + s / 3 + static_cast<int>(rng.below(6)));
    const auto hd_r  = clampxy(sh_r.first + static_cast<int>(rng.below(6)),
                               sh_r.second + s / 3 + static_cast<int>(rng.below(6)));
    return {
        {{x, y}, neck},
        {neck, sh_l, hd_l},
        {neck, sh_r, hd_r},
    };
}

namespace {

// per-limb colours for bodies drawn in scene images ([0,1] space)
const std::array<std::array<float, 3>, 3> kBodyColors = {{
    {0.36f, 0.28f, 0.22f},
    {0.30f, 0.36f, 0.26f},
    {0.26f, 0.27f, 0.40f},
}};

// patch/crop placement rule shared with condimage and evalkit
int clamp_box_start(int anchor, int size, int limit) {
    return std::clamp(anchor - size / 2, 0, limit - size);
}

}  // namespace

std::pair<Tensor, SceneAnnotation> generate_scene(const std::vector<IdentityFeature>& identities,
                                                  const std::vector<std::pair<int, int>>& locations,
                                                  int caption_label, const SceneParams& params,
                                                  bool with_pose, uint64_t rng_seed) {
    const int h = params.height, w = params.width, s = params.sprite_size;
    if (identities.size() != locations.size())
        throw PreconditionError("generate_scene: identities/locations length mismatch");
    for (size_t i = 0; i < locations.size(); i++) {
        auto [x, y] = locations[i];
        if (x < 0 || x >= w || y < 0 || y >= h)
            throw PreconditionError("generate_scene: location " + std::to_string(i) +
                                    " out of bounds");
    }
    for (size_t i = 0; i < locations.size(); i++)
        for (size_t j = i + 1; j < locations.size(); j++) {
            const int dx = std::abs(locations[i].first - locations[j].first);
            const int dy = std::abs(locations[i].second - locations[j].second);
            if (std::max(dx, dy) < s)
                throw PreconditionError("generate_scene: locations " + std::to_string(i) +
                                        " and " + std::to_string(j) +
                                        " are closer than the sprite size");
        }

    Tensor img({3, h, w});
    paint_background(img, caption_label, params.n_caption_labels);

    SceneAnnotation ann;
    ann.locations     = locations;
    ann.identities    = identities;
    ann.caption_label = caption_label;

    Rng rng(mix_seed({kSceneTag, rng_seed}));
    if (with_pose) {
        for (auto& [x, y] : locations) {
            auto chains = make_skeleton(x, y, s, h, w, rng);
            for (size_t ci = 0; ci < chains.size(); ci++) {
                for (size_t k = 0; k + 1 < chains[ci].size(); k++)
                    draw_line(img, chains[ci][k].first, chains[ci][k].second,
                              chains[ci][k + 1].first, chains[ci][k + 1].second,
                              kBodyColors[ci % 3], 1);
                ann.pose_skeletons.push_back(std::move(chains[ci]));
            }
        }
    }
    for (size_t i = 0; i < identities.size(); i++) {
        const Tensor sprite = render_face(identities[i], s);
        const int x0 = clamp_box_start(locations[i].first, s, w);
        const int y0 = clamp_box_start(locations[i].second, s, h);
        for (int c = 0; c < 3; c++)
            for (int yy = 0; yy < s; yy++)
                for (int xx = 0; xx < s; xx++)
                    img.at3(c, y0 + yy, x0 + xx) = sprite.at3(c, yy, xx);
    }
    return {std::move(img), std::move(ann)};
}

uint64_t dataset_config_hash(const DatasetConfig& cfg) {
    std::ostringstream os;
    os << cfg.count << "|" << cfg.image_size << "|" << cfg.sprite_size << "|" << cfg.feature_dim
       << "|" << cfg.n_identities << "|" << cfg.n_caption_labels << "|" << cfg.n_max << "|"
       << cfg.with_pose_fraction << "|" << cfg.holdout_combos_per_n << "|" << cfg.seed << "|"
       << cfg.split;
    const std::string s = os.str();
    return fnv1a(s.data(), s.size());
}

namespace {

void validate_dataset_config(const DatasetConfig& cfg) {
    if (cfg.count < 0) throw ConfigError("dataset.count must be >= 0");
    if (cfg.sprite_size < 8) throw ConfigError("dataset.sprite_size must be >= 8");
    if (cfg.image_size < cfg.sprite_size)
        throw ConfigError("dataset.image_size must be >= sprite_size");
    if (cfg.feature_dim < 1) throw ConfigError("dataset.feature_dim must be >= 1");
    if (cfg.sprite_size * cfg.sprite_size * 3 < cfg.feature_dim)
        throw ConfigError("sprite_size too small to encode feature_dim parameters");
    if (cfg.n_identities < 1) throw ConfigError("dataset.n_identities must be >= 1");
    if (cfg.n_max < 0 || cfg.n_max > cfg.n_identities)
        throw ConfigError("dataset.n_max must be in [0, n_identities]");
    if (cfg.n_caption_labels < 1) throw ConfigError("dataset.n_caption_labels must be >= 1");
    if (cfg.with_pose_fraction < 0.0 || cfg.with_pose_fraction > 1.0)
        throw ConfigError("dataset.with_pose_fraction must be in [0,1]");
    if (cfg.holdout_combos_per_n < 0) throw ConfigError("dataset.holdout_combos_per_n >= 0");
    if (cfg.out_dir.empty()) throw ConfigError("dataset.out_dir must be set");
    // layout feasibility: a grid of sprite-sized cells must fit n_max anchors
    const int cells = (cfg.image_size / cfg.sprite_size) * (cfg.image_size / cfg.sprite_size);
    if (cfg.n_max > cells)
        throw ConfigError("dataset.n_max does not fit the canvas at this sprite size");
}

double n_choose_k(int n, int k) {
    double r = 1.0;
    for (int i = 0; i < k; i++) r = r * (n - i) / (i + 1);
    return r;
}

std::vector<std::pair<int, int>> sample_layout(int n, int h, int w, int s, Rng& rng) {
    const int margin = s / 2;
    for (int attempt = 0; attempt < 500; attempt++) {
        std::vector<std::pair<int, int>> pts;
        bool ok = true;
        for (int i = 0; i < n && ok; i++) {
            bool placed = false;
            for (int tries = 0; tries < 200; tries++) {
                const int x = margin + static_cast<int>(rng.below(w - 2 * margin + 1));
                const int y = margin + static_cast<int>(rng.below(h - 2 * margin + 1));
                bool clash = false;
                for (auto& [px, py] : pts)
                    if (std::max(std::abs(px - x), std::abs(py - y)) < s) {
                        clash = true;
                        break;
                    }
                if (!clash) {
                    pts.emplace_back(x, y);
                    placed = true;
                    break;
                }
            }
            ok = placed;
        }
        if (ok) return pts;
    }
    throw RuntimeFailure("sample_layout: could not place " + std::to_string(n) + " anchors");
}

json feature_to_json(const IdentityFeature& f) {
    json arr = json::array();
    for (float v : f.values) arr.push_back(static_cast<double>(v));
    return arr;
}

std::vector<float> feature_from_json(const json& arr) {
    std::vector<float> v;
    v.reserve(arr.size());
    for (const auto& x : arr) v.push_back(static_cast<float>(x.get<double>()));
    return v;
}

json annotation_to_json(const DatasetRecord& rec) {
    json j;
    j["type"]      = "record";
    j["image_path"] = rec.image_path;
    json locs      = json::array();
    for (auto& [x, y] : rec.annotation.locations) locs.push_back({x, y});
    j["locations"] = locs;
    json labels = json::array(), vecs = json::array();
    for (auto& f : rec.annotation.identities) {
        labels.push_back(f.id_label);
        vecs.push_back(feature_to_json(f));
    }
    j["identity_labels"]  = labels;
    j["identity_vectors"] = vecs;
    j["caption_label"]    = rec.annotation.caption_label;
    if (rec.annotation.pose_skeletons.empty()) {
        j["pose"] = nullptr;
    } else {
        json chains = json::array();
        for (auto& chain : rec.annotation.pose_skeletons) {
            json pts = json::array();
            for (auto& [x, y] : chain) pts.push_back({x, y});
            chains.push_back(pts);
        }
        j["pose"] = chains;
    }
    return j;
}

DatasetRecord annotation_from_json(const json& j) {
    DatasetRecord rec;
    rec.image_path = j.at("image_path").get<std::string>();
    for (const auto& p : j.at("locations"))
        rec.annotation.locations.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
    const auto& labels = j.at("identity_labels");
    const auto& vecs   = j.at("identity_vectors");
    if (labels.size() != vecs.size() || labels.size() != rec.annotation.locations.size())
        throw RuntimeFailure("manifest record: inconsistent lengths");
    for (size_t i = 0; i < labels.size(); i++) {
        IdentityFeature f;
        f.id_label = labels[i].get<int>();
        f.values   = feature_from_json(vecs[i]);
        rec.annotation.identities.push_back(std::move(f));
    }
    rec.annotation.caption_label = j.at("caption_label").get<int>();
    if (!j.at("pose").is_null()) {
        for (const auto& chain : j.at("pose")) {
            KeypointChain kc;
            for (const auto& p : chain) kc.emplace_back(p.at(0).get<int>(), p.at(1).get<int>());
            rec.annotation.pose_skeletons.push_back(std::move(kc));
        }
    }
    return rec;
}

json config_to_json(const DatasetConfig& cfg) {
    json j;
    j["count"]                = cfg.count;
    j["image_size"]           = cfg.image_size;
    j["sprite_size"]          = cfg.sprite_size;
    j["feature_dim"]          = cfg.feature_dim;
    j["n_identities"]         = cfg.n_identities;
    j["n_caption_labels"]     = cfg.n_caption_labels;
    j["n_max"]                = cfg.n_max;
    j["with_pose_fraction"]   = cfg.with_pose_fraction;
    j["holdout_combos_per_n"] = cfg.holdout_combos_per_n;
    j["seed"]                 = cfg.seed;
    j["split"]                = cfg.split;
    return j;
}

DatasetConfig config_from_json(const json& j) {
    DatasetConfig cfg;
    cfg.count                = j.at("count").get<int>();
    cfg.image_size           = j.at("image_size").get<int>();
    cfg.sprite_size          = j.at("sprite_size").get<int>();
    cfg.feature_dim          = j.at("feature_dim").get<int>();
    cfg.n_identities         = j.at("n_identities").get<int>();
    cfg.n_caption_labels     = j.at("n_caption_labels").get<int>();
    cfg.n_max                = j.at("n_max").get<int>();
    cfg.with_pose_fraction   = j.at("with_pose_fraction").get<double>();
    cfg.holdout_combos_per_n = j.at("holdout_combos_per_n").get<int>();
    cfg.seed                 = j.at("seed").get<uint64_t>();
    cfg.split                = j.at("split").get<std::string>();
    return cfg;
}

// header check without reading pixel data
std::pair<int, int> ppm_dims(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw RuntimeFailure("missing dataset image: " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if (magic != "P6" || maxval != 255) throw RuntimeFailure("bad dataset image: " + path);
    return {h, w};
}

}  // namespace

DatasetManifest build_dataset(const DatasetConfig& cfg) {
    validate_dataset_config(cfg);
    DatasetManifest m;
    m.config      = cfg;
    m.config_hash = dataset_config_hash(cfg);
    m.split       = cfg.split;
    m.root_dir    = cfg.out_dir;

    for (int i = 0; i < cfg.n_identities; i++) {
        IdentityFeature f =
            sample_identity(mix_seed({kPoolTag, cfg.seed, static_cast<uint64_t>(i)}),
                            cfg.feature_dim);
        f.id_label = i;
        m.identity_pool.push_back(std::move(f));
    }

    // hold out at most a quarter of the combos at each N so training always
    // retains coverage
    m.holdout_combos.resize(cfg.n_max);
    for (int n = 1; n <= cfg.n_max; n++) {
        const int cap = static_cast<int>(n_choose_k(cfg.n_identities, n) / 4.0);
        const int want = std::min(cfg.holdout_combos_per_n, std::max(0, cap));
        Rng rng(mix_seed({kHoldTag, cfg.seed, static_cast<uint64_t>(n)}));
        std::set<std::vector<int>> seen;
        int guard = 0;
        while (static_cast<int>(seen.size()) < want && guard++ < 100000) {
            std::vector<int> combo;
            while (static_cast<int>(combo.size()) < n) {
                const int lab = static_cast<int>(rng.below(cfg.n_identities));
                if (std::find(combo.begin(), combo.end(), lab) == combo.end())
                    combo.push_back(lab);
            }
            std::sort(combo.begin(), combo.end());
            seen.insert(combo);
        }
        m.holdout_combos[n - 1].assign(seen.begin(), seen.end());
    }

    fs::create_directories(fs::path(cfg.out_dir) / "images");

    SceneParams params;
    params.height           = cfg.image_size;
    params.width            = cfg.image_size;
    params.sprite_size      = cfg.sprite_size;
    params.n_caption_labels = cfg.n_caption_labels;

    // records are independent: every per-record stream derives from
    // (seed, record index), so sharding across workers changes nothing
    m.records.resize(cfg.count);
    parallel_for(cfg.count, 2, [&](int i) {
        Rng rng(mix_seed({kRecordTag, cfg.seed, static_cast<uint64_t>(i)}));
        const int n = cfg.n_max > 0 ? 1 + static_cast<int>(rng.below(cfg.n_max)) : 0;
        std::vector<int> combo = sample_train_combo(m, n, rng);
        // shuffled identity order: token order must carry no position signal
        for (int k = static_cast<int>(combo.size()) - 1; k > 0; k--)
            std::swap(combo[k], combo[rng.below(static_cast<uint64_t>(k + 1))]);
        std::vector<IdentityFeature> feats;
        for (int lab : combo) feats.push_back(m.identity_pool[lab]);
        auto locations       = sample_layout(n, cfg.image_size, cfg.image_size, cfg.sprite_size,
                                             rng);
        const int caption    = static_cast<int>(rng.below(cfg.n_caption_labels));
        const bool with_pose = rng.uniform() < cfg.with_pose_fraction;
        auto [img, ann]      = generate_scene(feats, locations, caption, params, with_pose,
                                              mix_seed({kSceneTag, cfg.seed,
                                                        static_cast<uint64_t>(i)}));
        char name[32];
        std::snprintf(name, sizeof(name), "images/%05d.ppm", i);
        write_ppm((fs::path(cfg.out_dir) / name).string(), from_unit_tensor(img));
        m.records[i] = {name, std::move(ann)};
    });

    save_manifest(m, (fs::path(cfg.out_dir) / "manifest.jsonl").string());
    return m;
}

std::vector<int> sample_train_combo(const DatasetManifest& m, int n, Rng& rng) {
    if (n == 0) return {};
    const auto& held = m.holdout_combos[static_cast<size_t>(n - 1)];
    for (int tries = 0; tries < 10000; tries++) {
        std::vector<int> combo;
        while (static_cast<int>(combo.size()) < n) {
            const int lab = static_cast<int>(rng.below(m.identity_pool.size()));
            if (std::find(combo.begin(), combo.end(), lab) == combo.end()) combo.push_back(lab);
        }
        std::vector<int> sorted = combo;
        std::sort(sorted.begin(), sorted.end());
        if (std::find(held.begin(), held.end(), sorted) == held.end()) return combo;
    }
    throw RuntimeFailure("sample_train_combo: holdout set too dense");
}

void save_manifest(const DatasetManifest& m, const std::string& manifest_path) {
    std::ofstream f(manifest_path, std::ios::binary);
    if (!f) throw RuntimeFailure("cannot write manifest: " + manifest_path);
    json header;
    header["type"]           = "header";
    header["schema_version"] = 1;
    header["config"]         = config_to_json(m.config);
    char hex[24];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(m.config_hash));
    header["config_hash"] = hex;
    header["split"]       = m.split;
    json pool             = json::array();
    for (auto& idf : m.identity_pool) {
        json p;
        p["label"]  = idf.id_label;
        p["values"] = feature_to_json(idf);
        pool.push_back(p);
    }
    header["identity_pool"]  = pool;
    header["holdout_combos"] = m.holdout_combos;
    f << header.dump() << "\n";
    for (auto& rec : m.records) f << annotation_to_json(rec).dump() << "\n";
    if (!f) throw RuntimeFailure("manifest write failed: " + manifest_path);
}

DatasetManifest load_manifest(const std::string& manifest_path, bool validate_images) {
    std::ifstream f(manifest_path, std::ios::binary);
    if (!f) throw PreconditionError("manifest not found: " + manifest_path);
    DatasetManifest m;
    m.root_dir = fs::path(manifest_path).parent_path().string();
    std::string line;
    if (!std::getline(f, line)) throw RuntimeFailure("empty manifest: " + manifest_path);
    json header = json::parse(line);
    if (header.at("type") != "header") throw RuntimeFailure("manifest missing header line");
    m.config      = config_from_json(header.at("config"));
    m.config_hash = std::stoull(header.at("config_hash").get<std::string>(), nullptr, 16);
    m.split       = header.at("split").get<std::string>();
    for (const auto& p : header.at("identity_pool")) {
        IdentityFeature idf;
        idf.id_label = p.at("label").get<int>();
        idf.values   = feature_from_json(p.at("values"));
        m.identity_pool.push_back(std::move(idf));
    }
    m.holdout_combos =
        header.at("holdout_combos").get<std::vector<std::vector<std::vector<int>>>>();
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        m.records.push_back(annotation_from_json(json::parse(line)));
    }
    if (validate_images) {
        for (auto& rec : m.records) {
            const auto [h, w] = ppm_dims((fs::path(m.root_dir) / rec.image_path).string());
            if (h != m.config.image_size || w != m.config.image_size)
                throw RuntimeFailure("dataset image size mismatch: " + rec.image_path);
        }
    }
    return m;
}

}  // namespace idpatch::synthid
