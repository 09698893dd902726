#include "idpatch/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>

#include <json.hpp>

#include "idpatch/condimage.hpp"
#include "idpatch/errors.hpp"
#include "idpatch/image.hpp"
#include "idpatch/parallel.hpp"
#include "idpatch/plot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace idpatch::evalkit {

std::vector<Tensor> crop_faces(const Tensor& image01,
                               const std::vector<std::pair<int, int>>& locations, int size) {
    if (image01.rank() != 3 || image01.dim(0) != 3) throw ShapeError("crop_faces: want [3,H,W]");
    const int h = image01.dim(1), w = image01.dim(2);
    if (size < 1 || size > h || size > w) throw PreconditionError("crop_faces: bad size");
    std::vector<Tensor> crops;
    crops.reserve(locations.size());
    for (auto& [ax, ay] : locations) {
        if (ax < 0 || ax >= w || ay < 0 || ay >= h)
            throw PreconditionError("crop_faces: location out of bounds");
        const int x0 = condimage::clamp_box_start(ax, size, w);
        const int y0 = condimage::clamp_box_start(ay, size, h);
        Tensor c({3, size, size});
        for (int ch = 0; ch < 3; ch++)
            for (int y = 0; y < size; y++)
                for (int x = 0; x < size; x++)
                    c.at3(ch, y, x) = image01.at3(ch, y0 + y, x0 + x);
        crops.push_back(std::move(c));
    }
    return crops;
}

EvalExtractor::EvalExtractor(int feature_dim, uint64_t seed) : d_(feature_dim) {
    // random orthogonal matrix via Gram-Schmidt on a seeded gaussian draw
    Rng rng(mix_seed({0x524f544154450001ULL, seed, static_cast<uint64_t>(feature_dim)}));
    std::vector<double> m(static_cast<size_t>(d_) * d_);
    for (auto& v : m) v = rng.normal();
    for (int r = 0; r < d_; r++) {
        double* row = m.data() + static_cast<size_t>(r) * d_;
        for (int q = 0; q < r; q++) {
            const double* prev = m.data() + static_cast<size_t>(q) * d_;
            double dot = 0.0;
            for (int i = 0; i < d_; i++) dot += row[i] * prev[i];
            for (int i = 0; i < d_; i++) row[i] -= dot * prev[i];
        }
        double nrm = 0.0;
        for (int i = 0; i < d_; i++) nrm += row[i] * row[i];
        nrm = std::sqrt(nrm);
        for (int i = 0; i < d_; i++) row[i] /= nrm;
    }
    rotation_.resize(m.size());
    for (size_t i = 0; i < m.size(); i++) rotation_[i] = static_cast<float>(m[i]);
    noise_scale_ = 0.02f / std::sqrt(static_cast<float>(d_));
}

synthid::IdentityFeature EvalExtractor::extract(const Tensor& crop) const {
    synthid::IdentityFeature base = synthid::extract_feature(crop, d_);
    // crop-dependent deterministic perturbation
    const uint64_t crop_hash = fnv1a(crop.data(), crop.numel() * sizeof(float));
    Rng noise(mix_seed({0x4e4f495345000001ULL, crop_hash}));
    std::vector<double> perturbed(d_);
    for (int i = 0; i < d_; i++)
        perturbed[i] = base.values[i] + noise_scale_ * noise.normal();
    synthid::IdentityFeature out;
    out.values.resize(d_);
    for (int r = 0; r < d_; r++) {
        double acc = 0.0;
        const float* row = rotation_.data() + static_cast<size_t>(r) * d_;
        for (int i = 0; i < d_; i++) acc += row[i] * perturbed[i];
        out.values[r] = static_cast<float>(acc);
    }
    double nrm = 0.0;
    for (float v : out.values) nrm += static_cast<double>(v) * v;
    nrm = std::sqrt(nrm);
    if (nrm < 1e-12) {
        out.values.assign(d_, 0.f);
        out.values[0] = 1.f;
    } else {
        for (float& v : out.values) v = static_cast<float>(v / nrm);
    }
    out.id_label = base.id_label;
    return out;
}

synthid::IdentityFeature EvalExtractor::reference(const synthid::IdentityFeature& f,
                                                  int sprite_size) const {
    return extract(synthid::render_face(f, sprite_size));
}

ResemblanceResult resemblance(const std::vector<Tensor>& gen_crops,
                              const std::vector<synthid::IdentityFeature>& ref_features,
                              const EvalExtractor& extractor, int sprite_size) {
    if (gen_crops.size() != ref_features.size())
        throw PreconditionError("resemblance: length mismatch");
    ResemblanceResult out;
    for (size_t i = 0; i < gen_crops.size(); i++) {
        const auto gen = extractor.extract(gen_crops[i]);
        const auto ref = extractor.reference(ref_features[i], sprite_size);
        out.scores.push_back(synthid::cosine_similarity(gen, ref));
    }
    if (!out.scores.empty()) {
        double s = 0.0;
        for (double v : out.scores) s += v;
        out.mean = s / out.scores.size();
    }
    return out;
}

SimilarityMatrix similarity_matrix(const std::vector<Tensor>& gen_crops,
                                   const std::vector<synthid::IdentityFeature>& ref_features,
                                   const EvalExtractor& extractor, int sprite_size) {
    if (gen_crops.size() != ref_features.size())
        throw PreconditionError("similarity_matrix: length mismatch");
    SimilarityMatrix s;
    s.n = static_cast<int>(gen_crops.size());
    s.values.resize(static_cast<size_t>(s.n) * s.n);
    std::vector<synthid::IdentityFeature> gen(s.n), ref(s.n);
    for (int i = 0; i < s.n; i++) {
        gen[i] = extractor.extract(gen_crops[i]);
        ref[i] = extractor.reference(ref_features[i], sprite_size);
    }
    for (int i = 0; i < s.n; i++)
        for (int j = 0; j < s.n; j++)
            s.values[static_cast<size_t>(i) * s.n + j] = synthid::cosine_similarity(gen[i],
                                                                                    ref[j]);
    return s;
}

double association_accuracy(const SimilarityMatrix& s) {
    if (s.n < 1) throw PreconditionError("association_accuracy: empty matrix");
    if (s.values.size() != static_cast<size_t>(s.n) * s.n)
        throw ShapeError("association_accuracy: non-square input");
    int hits = 0;
    for (int i = 0; i < s.n; i++) {
        int best = 0;
        for (int j = 1; j < s.n; j++)
            if (s.at(i, j) > s.at(i, best)) best = j;  // strict: ties keep lowest index
        if (best == i) hits++;
    }
    return static_cast<double>(hits) / s.n;
}

std::vector<double> CaptionScorer::pooled_features(const Tensor& image01) {
    const int grid = 4;
    const int h = image01.dim(1), w = image01.dim(2);
    std::vector<double> feat(grid * grid * 3, 0.0);
    std::vector<int> counts(grid * grid, 0);
    for (int y = 0; y < h; y++)
        for (int x = 0; x < w; x++) {
            const int cell = (y * grid / h) * grid + (x * grid / w);
            counts[cell]++;
            for (int c = 0; c < 3; c++)
                feat[static_cast<size_t>(cell) * 3 + c] += image01.at3(c, y, x);
        }
    for (int cell = 0; cell < grid * grid; cell++)
        for (int c = 0; c < 3; c++)
            feat[static_cast<size_t>(cell) * 3 + c] /= std::max(1, counts[cell]);
    return feat;
}

void CaptionScorer::fit(const synthid::DatasetManifest& manifest) {
    const int k = manifest.config.n_caption_labels;
    std::vector<std::vector<double>> sums(k);
    std::vector<int> counts(k, 0);
    for (auto& s : sums) s.assign(48, 0.0);
    for (const auto& rec : manifest.records) {
        const Tensor img = to_unit_tensor(
            read_ppm((fs::path(manifest.root_dir) / rec.image_path).string()));
        const auto f = pooled_features(img);
        auto& acc    = sums[rec.annotation.caption_label];
        for (size_t i = 0; i < f.size(); i++) acc[i] += f[i];
        counts[rec.annotation.caption_label]++;
    }
    centroids_.assign(k, std::vector<double>(48, 0.0));
    for (int l = 0; l < k; l++) {
        if (counts[l] == 0) throw PreconditionError("caption scorer: label " + std::to_string(l) +
                                                    " has no training images");
        for (size_t i = 0; i < 48; i++) centroids_[l][i] = sums[l][i] / counts[l];
    }
    // temperature tied to centroid spread so probabilities are comparable
    // across vocabulary sizes
    double mean_d2 = 0.0;
    int pairs      = 0;
    for (int a = 0; a < k; a++)
        for (int b = a + 1; b < k; b++) {
            double d2 = 0.0;
            for (size_t i = 0; i < 48; i++) {
                const double d = centroids_[a][i] - centroids_[b][i];
                d2 += d * d;
            }
            mean_d2 += d2;
            pairs++;
        }
    temperature_ = pairs > 0 ? mean_d2 / pairs / 16.0 : 1.0;
    if (temperature_ <= 0.0) temperature_ = 1.0;
}

double CaptionScorer::score(const Tensor& image01, int label) const {
    if (centroids_.empty()) throw PreconditionError("caption scorer not fitted");
    if (label < 0 || label >= n_labels())
        throw PreconditionError("caption scorer: unknown label " + std::to_string(label));
    const auto f = pooled_features(image01);
    std::vector<double> neg_d(centroids_.size());
    double mx = -1e300;
    for (size_t l = 0; l < centroids_.size(); l++) {
        double d2 = 0.0;
        for (size_t i = 0; i < 48; i++) {
            const double d = f[i] - centroids_[l][i];
            d2 += d * d;
        }
        neg_d[l] = -d2 / temperature_;
        mx       = std::max(mx, neg_d[l]);
    }
    double z = 0.0;
    for (double v : neg_d) z += std::exp(v - mx);
    return std::exp(neg_d[label] - mx) / z;
}

void EvalReport::recompute_aggregates() {
    auto reduce = [](const std::vector<const SceneRecord*>& recs) {
        Aggregates a;
        if (recs.empty()) return a;
        double faces = 0.0;
        for (auto* r : recs) {
            for (double v : r->resemblance) {
                a.mean_resemblance += v;
                faces += 1.0;
            }
            a.association_accuracy += r->association_accuracy * r->n_faces;
            a.mean_text_score += r->text_score;
            a.mean_seconds += r->seconds;
        }
        if (faces > 0) {
            a.mean_resemblance /= faces;
            a.association_accuracy /= faces;
        }
        a.mean_text_score /= recs.size();
        a.mean_seconds /= recs.size();
        return a;
    };
    std::vector<const SceneRecord*> all;
    std::map<int, std::vector<const SceneRecord*>> by_n;
    for (const auto& s : scenes) {
        all.push_back(&s);
        by_n[s.n_faces].push_back(&s);
    }
    aggregates = reduce(all);
    per_n.clear();
    for (auto& [n, recs] : by_n) per_n.emplace_back(n, reduce(recs));
}

std::string EvalReport::to_json_string() const {
    json j;
    j["schema_version"] = schema_version;
    j["config_hash"]    = config_hash;
    j["variant"]        = variant;
    json sc             = json::array();
    for (const auto& s : scenes) {
        json r;
        r["n_faces"]              = s.n_faces;
        r["caption_label"]        = s.caption_label;
        r["with_pose"]            = s.with_pose;
        r["resemblance"]          = s.resemblance;
        r["mean_resemblance"]     = s.mean_resemblance;
        r["association_accuracy"] = s.association_accuracy;
        r["text_score"]           = s.text_score;
        r["seconds"]              = s.seconds;
        r["identity_labels"]      = s.identity_labels;
        sc.push_back(r);
    }
    j["scenes"] = sc;
    auto agg    = [](const Aggregates& a) {
        json r;
        r["mean_resemblance"]     = a.mean_resemblance;
        r["association_accuracy"] = a.association_accuracy;
        r["mean_text_score"]      = a.mean_text_score;
        r["mean_seconds"]         = a.mean_seconds;
        return r;
    };
    j["aggregates"] = agg(aggregates);
    json pn         = json::object();
    for (auto& [n, a] : per_n) pn[std::to_string(n)] = agg(a);
    j["per_n"] = pn;
    return j.dump(2);
}

EvalReport EvalReport::from_json_string(const std::string& text) {
    json j = json::parse(text);
    EvalReport rep;
    rep.schema_version = j.at("schema_version").get<int>();
    rep.config_hash    = j.at("config_hash").get<uint64_t>();
    rep.variant        = j.at("variant").get<std::string>();
    for (const auto& r : j.at("scenes")) {
        SceneRecord s;
        s.n_faces              = r.at("n_faces").get<int>();
        s.caption_label        = r.at("caption_label").get<int>();
        s.with_pose            = r.at("with_pose").get<bool>();
        s.resemblance          = r.at("resemblance").get<std::vector<double>>();
        s.mean_resemblance     = r.at("mean_resemblance").get<double>();
        s.association_accuracy = r.at("association_accuracy").get<double>();
        s.text_score           = r.at("text_score").get<double>();
        s.seconds              = r.at("seconds").get<double>();
        s.identity_labels      = r.at("identity_labels").get<std::vector<int>>();
        rep.scenes.push_back(std::move(s));
    }
    auto agg = [](const json& r) {
        Aggregates a;
        a.mean_resemblance     = r.at("mean_resemblance").get<double>();
        a.association_accuracy = r.at("association_accuracy").get<double>();
        a.mean_text_score      = r.at("mean_text_score").get<double>();
        a.mean_seconds         = r.at("mean_seconds").get<double>();
        return a;
    };
    rep.aggregates = agg(j.at("aggregates"));
    for (auto& [key, val] : j.at("per_n").items())
        rep.per_n.emplace_back(std::stoi(key), agg(val));
    return rep;
}

std::vector<EvalStyle> default_styles(int n_labels, const std::vector<int>& n_values,
                                      bool with_pose) {
    std::vector<EvalStyle> styles;
    for (int n : n_values)
        for (int label = 0; label < n_labels; label++)
            styles.push_back({label, n, with_pose});
    return styles;
}

EvalReport run_protocol(const Sampler& sampler, const synthid::DatasetManifest& manifest,
                        const ProtocolConfig& cfg) {
    EvalReport report;
    if (cfg.combos_per_style <= 0 || cfg.styles.empty()) {
        report.recompute_aggregates();
        return report;
    }
    const auto& mcfg = manifest.config;
    if (sampler.config().img_size != mcfg.image_size ||
        sampler.config().feature_dim != mcfg.feature_dim)
        throw ConfigError("eval: checkpoint dims do not match the dataset manifest");
    EvalExtractor extractor(mcfg.feature_dim);
    CaptionScorer scorer;
    scorer.fit(manifest);

    struct Job {
        EvalStyle style;
        std::vector<int> combo;  // identity labels, scene order
        std::vector<std::pair<int, int>> locations;
        std::vector<synthid::KeypointChain> pose;
        uint64_t seed = 0;
    };
    std::vector<Job> jobs;
    for (size_t si = 0; si < cfg.styles.size(); si++) {
        const auto& style = cfg.styles[si];
        const int n       = style.n_faces;
        if (n < 1 || n > mcfg.n_max)
            throw PreconditionError("eval style has unsupported face count " + std::to_string(n));
        const auto& held = manifest.holdout_combos[n - 1];
        if (held.empty()) throw PreconditionError("no holdout combos for N=" + std::to_string(n));
        for (int ci = 0; ci < cfg.combos_per_style; ci++) {
            Rng rng(mix_seed({0x4556414c4a4f4201ULL, cfg.seed, static_cast<uint64_t>(si),
                              static_cast<uint64_t>(ci)}));
            Job job;
            job.style = style;
            job.combo = held[rng.below(held.size())];
            for (int k = static_cast<int>(job.combo.size()) - 1; k > 0; k--)
                std::swap(job.combo[k], job.combo[rng.below(static_cast<uint64_t>(k + 1))]);
            // layout mirrors dataset generation
            const int margin = mcfg.sprite_size / 2;
            for (int attempt = 0;; attempt++) {
                std::vector<std::pair<int, int>> pts;
                bool ok = true;
                for (int i = 0; i < n && ok; i++) {
                    bool placed = false;
                    for (int tries = 0; tries < 200; tries++) {
                        const int x = margin +
                                      static_cast<int>(rng.below(mcfg.image_size - 2 * margin + 1));
                        const int y = margin +
                                      static_cast<int>(rng.below(mcfg.image_size - 2 * margin + 1));
                        bool clash = false;
                        for (auto& [px, py] : pts)
                            if (std::max(std::abs(px - x), std::abs(py - y)) < mcfg.sprite_size) {
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
                if (ok) {
                    job.locations = pts;
                    break;
                }
                if (attempt > 500) throw RuntimeFailure("eval layout sampling failed");
            }
            if (style.with_pose)
                for (auto& [x, y] : job.locations) {
                    auto chains = synthid::make_skeleton(x, y, mcfg.sprite_size, mcfg.image_size,
                                                         mcfg.image_size, rng);
                    for (auto& ch : chains) job.pose.push_back(std::move(ch));
                }
            job.seed = rng.next_u64();
            jobs.push_back(std::move(job));
        }
    }

    std::vector<SceneRecord> records(jobs.size());
    parallel_for(static_cast<int>(jobs.size()), cfg.threads, [&](int ji) {
        const Job& job = jobs[ji];
        GenerationRequest req;
        for (int lab : job.combo) req.identities.push_back(manifest.identity_pool[lab]);
        req.locations               = job.locations;
        req.caption_label           = job.style.caption_label;
        req.pose                    = job.pose;
        req.seed                    = job.seed;
        req.steps                   = cfg.steps;
        req.guidance                = cfg.guidance;
        req.two_stage               = cfg.two_stage;
        req.stage_boundary_fraction = cfg.stage_boundary_fraction;
        req.use_tokens              = cfg.use_tokens;
        req.use_patches             = cfg.use_patches;
        GeneratedImage gen = sampler.sample(req);

        SceneRecord rec;
        rec.n_faces         = job.style.n_faces;
        rec.caption_label   = job.style.caption_label;
        rec.with_pose       = job.style.with_pose;
        rec.identity_labels = job.combo;
        rec.seconds         = gen.seconds;
        const auto crops    = crop_faces(gen.pixels, req.locations, cfg.crop_size);
        const auto rr       = resemblance(crops, req.identities, extractor, mcfg.sprite_size);
        rec.resemblance      = rr.scores;
        rec.mean_resemblance = rr.mean.value_or(0.0);
        const auto sim       = similarity_matrix(crops, req.identities, extractor,
                                                 mcfg.sprite_size);
        rec.association_accuracy = association_accuracy(sim);
        rec.text_score           = scorer.score(gen.pixels, job.style.caption_label);
        records[ji]              = std::move(rec);
    });

    report.scenes = std::move(records);
    report.recompute_aggregates();
    return report;
}

std::vector<std::string> emit_report(const EvalReport& report, const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::vector<std::string> paths;
    const std::string report_path = (fs::path(out_dir) / "report.json").string();
    {
        std::ofstream f(report_path, std::ios::binary);
        if (!f) throw RuntimeFailure("cannot write report: " + report_path);
        f << report.to_json_string() << "\n";
    }
    paths.push_back(report_path);

    struct Metric {
        const char* name;
        double Aggregates::*field;
    };
    const Metric metrics[] = {
        {"resemblance", &Aggregates::mean_resemblance},
        {"association", &Aggregates::association_accuracy},
        {"time_seconds", &Aggregates::mean_seconds},
    };
    for (const auto& metric : metrics) {
        plot::Series series;
        series.label = report.variant;
        for (auto& [n, agg] : report.per_n)
            series.points.emplace_back(static_cast<double>(n), agg.*metric.field);
        const std::string path =
            (fs::path(out_dir) / (std::string(metric.name) + "_vs_n.ppm")).string();
        write_ppm(path, plot::render_line_plot(std::string(metric.name) + " vs N", "N",
                                               metric.name, {series}));
        paths.push_back(path);
    }
    return paths;
}

}  // namespace idpatch::evalkit
