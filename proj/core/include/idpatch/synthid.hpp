#ifndef IDPATCH_SYNTHID_HPP
#define IDPATCH_SYNTHID_HPP

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "idpatch/image.hpp"
#include "idpatch/rng.hpp"
#include "idpatch/tensor.hpp"

namespace idpatch::synthid {

// Unit-norm identity feature vector.
struct IdentityFeature {
    std::vector<float> values;
    int id_label = -1;

    int dim() const { return static_cast<int>(values.size()); }
    double norm() const;
};

double cosine_similarity(const IdentityFeature& a, const IdentityFeature& b);

IdentityFeature sample_identity(uint64_t rng_seed, int feature_dim = 64);

// Linear sprite codec: a fixed orthonormal basis of spatial colour patterns
// encodes the feature around mid-gray, plus a decorative face pattern kept in
// the orthogonal complement so decoding stays exact. One codec per
// (feature_dim, sprite_size); instances are cached and immutable.
class SpriteCodec {
public:
    static const SpriteCodec& get(int feature_dim, int sprite_size);

    Tensor render(const IdentityFeature& f) const;        // [3,S,S] in [0,1]
    IdentityFeature extract(const Tensor& crop) const;    // renormalized linear decode

    int feature_dim() const { return d_; }
    int sprite_size() const { return s_; }
    float gain() const { return gain_; }

private:
    SpriteCodec(int feature_dim, int sprite_size);

    int d_ = 0, s_ = 0;
    float gain_ = 0.f;
    std::vector<float> basis_;    // [D, S*S*3], orthonormal rows
    std::vector<float> overlay_;  // fixed pattern, orthogonal to every basis row
};

Tensor render_face(const IdentityFeature& f, int size);
IdentityFeature extract_feature(const Tensor& crop, int feature_dim = 64);

// chains of (x, y) keypoints; three chains per person (spine, two arms)
using KeypointChain = std::vector<std::pair<int, int>>;

struct SceneAnnotation {
    std::vector<std::pair<int, int>> locations;  // nose-tip anchors (x, y)
    std::vector<IdentityFeature> identities;
    int caption_label = 0;
    std::vector<KeypointChain> pose_skeletons;  // empty when the scene has no pose

    size_t size() const { return locations.size(); }
};

// Background gradient colours for a caption label (top, bottom), stable for
// any vocabulary size.
std::pair<std::array<float, 3>, std::array<float, 3>> caption_palette(int label, int n_labels);

void paint_background(Tensor& canvas, int caption_label, int n_labels);

// Deterministic toy skeleton below a nose anchor.
std::vector<KeypointChain> make_skeleton(int x, int y, int sprite_size, int h, int w, Rng& rng);

struct SceneParams {
    int height           = 128;
    int width            = 128;
    int sprite_size      = 32;
    int n_caption_labels = 6;
};

// Renders sprites (and stick bodies when posed) over a caption-styled
// background. Locations must be pairwise separated by >= sprite_size in
// Chebyshev distance; violations raise an error naming the offending pair.
std::pair<Tensor, SceneAnnotation> generate_scene(const std::vector<IdentityFeature>& identities,
                                                  const std::vector<std::pair<int, int>>& locations,
                                                  int caption_label, const SceneParams& params,
                                                  bool with_pose, uint64_t rng_seed);

struct DatasetConfig {
    int count                 = 4096;
    int image_size            = 128;
    int sprite_size           = 32;
    int feature_dim           = 64;
    int n_identities          = 16;
    int n_caption_labels      = 6;
    int n_max                 = 4;
    double with_pose_fraction = 0.5;
    int holdout_combos_per_n  = 20;
    uint64_t seed             = 1;
    std::string out_dir;
    std::string split = "train";
};

struct DatasetRecord {
    std::string image_path;  // relative to the manifest directory
    SceneAnnotation annotation;
};

struct DatasetManifest {
    DatasetConfig config;
    uint64_t config_hash = 0;
    std::string split;
    std::vector<IdentityFeature> identity_pool;
    // holdout_combos[n-1] = sorted identity-label combos reserved for eval
    std::vector<std::vector<std::vector<int>>> holdout_combos;
    std::vector<DatasetRecord> records;
    std::string root_dir;  // directory holding manifest.jsonl and images/
};

uint64_t dataset_config_hash(const DatasetConfig& cfg);

// Writes images/NNNNN.ppm plus manifest.jsonl under cfg.out_dir.
DatasetManifest build_dataset(const DatasetConfig& cfg);

DatasetManifest load_manifest(const std::string& manifest_path, bool validate_images = true);
void save_manifest(const DatasetManifest& m, const std::string& manifest_path);

// Sample a combo of n distinct pool labels that is NOT held out (for
// training) or IS from the holdout list (for eval).
std::vector<int> sample_train_combo(const DatasetManifest& m, int n, Rng& rng);

}  // namespace idpatch::synthid

#endif  // IDPATCH_SYNTHID_HPP
