#ifndef IDPATCH_EVALKIT_HPP
#define IDPATCH_EVALKIT_HPP

#include <optional>
#include <string>
#include <vector>

#include "idpatch/sampler.hpp"
#include "idpatch/synthid.hpp"

namespace idpatch::evalkit {

// size x size crops centred at the anchors, clamped inward with the same
// rule as patch placement.
std::vector<Tensor> crop_faces(const Tensor& image01, const std::vector<std::pair<int, int>>& locations,
                               int size);

// Evaluation-side feature extractor: the sprite-codec decode followed by a
// fixed random rotation plus a small crop-dependent perturbation, standing in
// for the paper's separate evaluation face model. Cosine similarities are
// preserved up to the perturbation, but eval features are never bit-identical
// to conditioning features.
class EvalExtractor {
public:
    explicit EvalExtractor(int feature_dim, uint64_t seed = 0xE7A1FACEULL);

    synthid::IdentityFeature extract(const Tensor& crop) const;
    synthid::IdentityFeature reference(const synthid::IdentityFeature& f, int sprite_size) const;

private:
    int d_;
    std::vector<float> rotation_;  // [D, D] orthogonal
    float noise_scale_;
};

struct ResemblanceResult {
    std::vector<double> scores;
    std::optional<double> mean;  // empty input leaves the mean undefined
};

ResemblanceResult resemblance(const std::vector<Tensor>& gen_crops,
                              const std::vector<synthid::IdentityFeature>& ref_features,
                              const EvalExtractor& extractor, int sprite_size);

// S[i][j] = CosSim(eval(gen_i), eval(ref_j))
struct SimilarityMatrix {
    int n = 0;
    std::vector<double> values;  // row-major
    double at(int i, int j) const { return values[static_cast<size_t>(i) * n + j]; }
};

SimilarityMatrix similarity_matrix(const std::vector<Tensor>& gen_crops,
                                   const std::vector<synthid::IdentityFeature>& ref_features,
                                   const EvalExtractor& extractor, int sprite_size);

// Fraction of rows whose argmax sits on the diagonal; ties resolve to the
// lowest column index.
double association_accuracy(const SimilarityMatrix& s);

// Nearest-centroid caption scorer over pooled colour features.
class CaptionScorer {
public:
    void fit(const synthid::DatasetManifest& manifest);
    double score(const Tensor& image01, int label) const;  // softmax probability
    int n_labels() const { return static_cast<int>(centroids_.size()); }
    bool ready() const { return !centroids_.empty(); }

private:
    static std::vector<double> pooled_features(const Tensor& image01);
    std::vector<std::vector<double>> centroids_;
    double temperature_ = 1.0;
};

struct SceneRecord {
    int n_faces       = 0;
    int caption_label = 0;
    bool with_pose    = false;
    std::vector<double> resemblance;
    double mean_resemblance     = 0.0;
    double association_accuracy = 0.0;
    double text_score           = 0.0;
    double seconds              = 0.0;
    std::vector<int> identity_labels;
};

struct Aggregates {
    double mean_resemblance     = 0.0;
    double association_accuracy = 0.0;
    double mean_text_score      = 0.0;
    double mean_seconds         = 0.0;
};

struct EvalReport {
    int schema_version   = 1;
    uint64_t config_hash = 0;
    std::string variant  = "full";
    std::vector<SceneRecord> scenes;
    Aggregates aggregates;
    std::vector<std::pair<int, Aggregates>> per_n;

    void recompute_aggregates();
    std::string to_json_string() const;
    static EvalReport from_json_string(const std::string& s);
};

struct EvalStyle {
    int caption_label = 0;
    int n_faces       = 1;
    bool with_pose    = false;
};

struct ProtocolConfig {
    std::vector<EvalStyle> styles;
    int combos_per_style = 4;
    int crop_size        = 32;
    uint64_t seed        = 7;
    int threads          = 2;
    // sampler settings
    int steps                      = 50;
    double guidance                = 3.0;
    bool two_stage                 = true;
    double stage_boundary_fraction = 0.2;
    bool use_tokens                = true;
    bool use_patches               = true;
};

// Default style grid: every caption label crossed with every face count.
std::vector<EvalStyle> default_styles(int n_labels, const std::vector<int>& n_values,
                                      bool with_pose);

// Generates held-out identity combinations per style, evaluates all four
// dimensions and aggregates per N.
EvalReport run_protocol(const Sampler& sampler, const synthid::DatasetManifest& manifest,
                        const ProtocolConfig& cfg);

// report.json + per-N line plots (+ .ppm) under out_dir
std::vector<std::string> emit_report(const EvalReport& report, const std::string& out_dir);

}  // namespace idpatch::evalkit

#endif  // IDPATCH_EVALKIT_HPP
