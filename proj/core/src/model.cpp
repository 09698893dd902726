#include "idpatch/model.hpp"

#include <json.hpp>

#include "idpatch/rng.hpp"

using nlohmann::json;

namespace idpatch {

void ModelConfig::validate() const {
    if (feature_dim < 1) throw ConfigError("model.feature_dim must be >= 1");
    if (d_text < 1 || d_model < 1) throw ConfigError("model dims must be >= 1");
    if (d_model % heads != 0) throw ConfigError("model.d_model must be divisible by heads");
    if (widths[0] % heads != 0 || widths[1] % heads != 0 || widths[2] % heads != 0)
        throw ConfigError("model.widths must be divisible by heads");
    if (m_tokens < 1 || n_in_tokens < 1) throw ConfigError("model token counts must be >= 1");
    if (patch_size < 2) throw ConfigError("model.patch_size must be >= 2");
    if (img_size % 4 != 0) throw ConfigError("model.img_size must be divisible by 4");
    if (patch_size > img_size) throw ConfigError("model.patch_size must fit the image");
    if (text_len < 1 || n_labels < 1) throw ConfigError("model text config invalid");
    if (timesteps < 2) throw ConfigError("model.timesteps must be >= 2");
    if (!(beta_min > 0.0 && beta_min < beta_max && beta_max < 1.0))
        throw ConfigError("model betas invalid");
    if (temb_dim < 8) throw ConfigError("model.temb_dim too small");
    if (resampler_depth < 1) throw ConfigError("model.resampler_depth must be >= 1");
}

std::string ModelConfig::to_json_string() const {
    json j;
    j["feature_dim"]     = feature_dim;
    j["d_text"]          = d_text;
    j["d_model"]         = d_model;
    j["m_tokens"]        = m_tokens;
    j["n_in_tokens"]     = n_in_tokens;
    j["patch_size"]      = patch_size;
    j["text_len"]        = text_len;
    j["n_labels"]        = n_labels;
    j["img_size"]        = img_size;
    j["widths"]          = widths;
    j["heads"]           = heads;
    j["timesteps"]       = timesteps;
    j["beta_min"]        = beta_min;
    j["beta_max"]        = beta_max;
    j["temb_dim"]        = temb_dim;
    j["resampler_depth"] = resampler_depth;
    return j.dump();
}

ModelConfig ModelConfig::from_json_string(const std::string& s) {
    json j = json::parse(s);
    ModelConfig c;
    c.feature_dim     = j.at("feature_dim").get<int>();
    c.d_text          = j.at("d_text").get<int>();
    c.d_model         = j.at("d_model").get<int>();
    c.m_tokens        = j.at("m_tokens").get<int>();
    c.n_in_tokens     = j.at("n_in_tokens").get<int>();
    c.patch_size      = j.at("patch_size").get<int>();
    c.text_len        = j.at("text_len").get<int>();
    c.n_labels        = j.at("n_labels").get<int>();
    c.img_size        = j.at("img_size").get<int>();
    c.widths          = j.at("widths").get<std::array<int, 3>>();
    c.heads           = j.at("heads").get<int>();
    c.timesteps       = j.at("timesteps").get<int>();
    c.beta_min        = j.at("beta_min").get<double>();
    c.beta_max        = j.at("beta_max").get<double>();
    c.temb_dim        = j.at("temb_dim").get<int>();
    c.resampler_depth = j.at("resampler_depth").get<int>();
    return c;
}

uint64_t ModelConfig::hash() const {
    const std::string s = to_json_string();
    return fnv1a(s.data(), s.size());
}

}  // namespace idpatch
