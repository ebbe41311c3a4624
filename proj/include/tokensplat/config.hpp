#pragma once

// Model and run configuration plus the flat `key = value` config-file format
// with [sections]. Unknown sections or keys are errors; a run is fully
// determined by (config, seed).

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "tokensplat/common.hpp"

namespace tokensplat {

struct ModelConfig {
    int patch_size = 16;
    int embed_dim = 64;
    int heads = 4;
    int encoder_depth = 4;
    int decoder_depth = 4;
    int image_h = 64;
    int image_w = 64;
    int pnv = 4;          // neighbor-view budget for cross-view attention
    float epsilon = 0.2f; // fusion grouping size, scene units
    int k_per_token = 4;  // Gaussians per fused token
    int sh_degree = 1;
    int fuse_dim = 32;    // channel width after the head projections
    bool intrinsic_token = true;
    float lambda_lpips = 0.0f;
    float lambda_c = 1.0f;

    int tokens_per_view() const {
        return (image_h / patch_size) * (image_w / patch_size);
    }

    void validate() const {
        if (patch_size <= 0 || image_h % patch_size != 0 || image_w % patch_size != 0)
            throw ConfigError("image size must be divisible by the patch size");
        if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
            throw ConfigError("embed_dim must be a positive multiple of heads");
        if (embed_dim % 2 != 0) throw ConfigError("embed_dim must be even");
        if (encoder_depth < 1 || decoder_depth < 1)
            throw ConfigError("encoder/decoder depth must be at least 1");
        if (pnv < 2) throw ConfigError("pnv must be at least 2");
        if (epsilon <= 0.0f) throw ConfigError("epsilon must be positive");
        if (k_per_token < 1) throw ConfigError("k_per_token must be at least 1");
        if (sh_degree < 0 || sh_degree > 3) throw ConfigError("sh_degree must be in [0,3]");
        if (fuse_dim < 1) throw ConfigError("fuse_dim must be positive");
        if (lambda_lpips < 0.0f || lambda_c < 0.0f)
            throw ConfigError("loss weights must be nonnegative");
    }
};

struct RunConfig {
    ModelConfig model;
    // optimizer
    float lr = 1e-3f;
    float backbone_lr_scale = 1.0f;  // two-tier rate: backbone vs heads
    int steps = 500;
    std::uint64_t seed = 1;
    int checkpoint_every = 100;
    // dataset
    int n_views = 3;
    int n_targets = 2;       // held-out supervised views
    int gt_gaussians = 48;
    float camera_distance = 2.0f;
    float overlap = 0.8f;    // fraction in [0,1); arc span = (1-overlap)*180 deg
    float scene_extent = 1.0f;
    float fov_deg = 50.0f;

    void validate() const {
        model.validate();
        if (lr <= 0.0f) throw ConfigError("lr must be positive");
        if (backbone_lr_scale <= 0.0f) throw ConfigError("backbone_lr_scale must be positive");
        if (steps < 0) throw ConfigError("steps must be nonnegative");
        if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be at least 1");
        if (n_views < 2) throw ConfigError("n_views must be at least 2");
        if (n_targets < 0) throw ConfigError("n_targets must be nonnegative");
        if (gt_gaussians < 1) throw ConfigError("gt_gaussians must be positive");
        if (camera_distance <= 0.0f) throw ConfigError("camera_distance must be positive");
        if (overlap < 0.0f || overlap >= 1.0f) throw ConfigError("overlap must be in [0,1)");
        if (scene_extent <= 0.0f) throw ConfigError("scene_extent must be positive");
        if (fov_deg <= 1.0f || fov_deg >= 179.0f) throw ConfigError("fov_deg out of range");
    }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& v, const std::string& where) {
    std::istringstream ss(v);
    T out;
    ss >> out;
    std::string rest;
    if (ss.fail() || (ss >> rest))
        throw ConfigError("bad value for " + where + ": '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string& v, const std::string& where) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("bad boolean for " + where + ": '" + v + "'");
}

}  // namespace config_detail

// Schema, one entry per accepted (section, key).
inline std::map<std::string, std::function<void(RunConfig&, const std::string&)>>
config_schema() {
    using config_detail::parse_bool;
    using config_detail::parse_number;
    std::map<std::string, std::function<void(RunConfig&, const std::string&)>> m;
    auto num = [&m](const char* sk, auto getter) {
        m[sk] = [getter, sk = std::string(sk)](RunConfig& c, const std::string& v) {
            using T = std::remove_reference_t<decltype(*getter(c))>;
            *getter(c) = parse_number<T>(v, sk);
        };
    };
    num("model.patch_size", [](RunConfig& c) { return &c.model.patch_size; });
    num("model.embed_dim", [](RunConfig& c) { return &c.model.embed_dim; });
    num("model.heads", [](RunConfig& c) { return &c.model.heads; });
    num("model.encoder_depth", [](RunConfig& c) { return &c.model.encoder_depth; });
    num("model.decoder_depth", [](RunConfig& c) { return &c.model.decoder_depth; });
    num("model.image_h", [](RunConfig& c) { return &c.model.image_h; });
    num("model.image_w", [](RunConfig& c) { return &c.model.image_w; });
    num("model.pnv", [](RunConfig& c) { return &c.model.pnv; });
    num("model.epsilon", [](RunConfig& c) { return &c.model.epsilon; });
    num("model.k_per_token", [](RunConfig& c) { return &c.model.k_per_token; });
    num("model.sh_degree", [](RunConfig& c) { return &c.model.sh_degree; });
    num("model.fuse_dim", [](RunConfig& c) { return &c.model.fuse_dim; });
    m["model.intrinsic_token"] = [](RunConfig& c, const std::string& v) {
        c.model.intrinsic_token = config_detail::parse_bool(v, "model.intrinsic_token");
    };
    num("loss.lambda_lpips", [](RunConfig& c) { return &c.model.lambda_lpips; });
    num("loss.lambda_c", [](RunConfig& c) { return &c.model.lambda_c; });
    num("train.lr", [](RunConfig& c) { return &c.lr; });
    num("train.backbone_lr_scale", [](RunConfig& c) { return &c.backbone_lr_scale; });
    num("train.steps", [](RunConfig& c) { return &c.steps; });
    num("train.seed", [](RunConfig& c) { return &c.seed; });
    num("train.checkpoint_every", [](RunConfig& c) { return &c.checkpoint_every; });
    num("dataset.n_views", [](RunConfig& c) { return &c.n_views; });
    num("dataset.n_targets", [](RunConfig& c) { return &c.n_targets; });
    num("dataset.gt_gaussians", [](RunConfig& c) { return &c.gt_gaussians; });
    num("dataset.camera_distance", [](RunConfig& c) { return &c.camera_distance; });
    num("dataset.overlap", [](RunConfig& c) { return &c.overlap; });
    num("dataset.scene_extent", [](RunConfig& c) { return &c.scene_extent; });
    num("dataset.fov_deg", [](RunConfig& c) { return &c.fov_deg; });
    return m;
}

inline RunConfig parse_run_config_text(const std::string& text) {
    const auto schema = config_schema();
    RunConfig cfg;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = config_detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("line " + std::to_string(lineno) + ": unterminated section");
            section = config_detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = config_detail::trim(line.substr(0, eq));
        const std::string value = config_detail::trim(line.substr(eq + 1));
        const std::string full = section.empty() ? key : section + "." + key;
        const auto it = schema.find(full);
        if (it == schema.end())
            throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + full + "'");
        it->second(cfg, value);
    }
    cfg.validate();
    return cfg;
}

inline RunConfig parse_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_run_config_text(ss.str());
}

inline void write_run_config(const RunConfig& c, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot open config file for writing: " + path);
    out << "[model]\n";
    out << "patch_size = " << c.model.patch_size << "\n";
    out << "embed_dim = " << c.model.embed_dim << "\n";
    out << "heads = " << c.model.heads << "\n";
    out << "encoder_depth = " << c.model.encoder_depth << "\n";
    out << "decoder_depth = " << c.model.decoder_depth << "\n";
    out << "image_h = " << c.model.image_h << "\n";
    out << "image_w = " << c.model.image_w << "\n";
    out << "pnv = " << c.model.pnv << "\n";
    out << "epsilon = " << c.model.epsilon << "\n";
    out << "k_per_token = " << c.model.k_per_token << "\n";
    out << "sh_degree = " << c.model.sh_degree << "\n";
    out << "fuse_dim = " << c.model.fuse_dim << "\n";
    out << "intrinsic_token = " << (c.model.intrinsic_token ? "true" : "false") << "\n";
    out << "\n[loss]\n";
    out << "lambda_lpips = " << c.model.lambda_lpips << "\n";
    out << "lambda_c = " << c.model.lambda_c << "\n";
    out << "\n[train]\n";
    out << "lr = " << c.lr << "\n";
    out << "backbone_lr_scale = " << c.backbone_lr_scale << "\n";
    out << "steps = " << c.steps << "\n";
    out << "seed = " << c.seed << "\n";
    out << "checkpoint_every = " << c.checkpoint_every << "\n";
    out << "\n[dataset]\n";
    out << "n_views = " << c.n_views << "\n";
    out << "n_targets = " << c.n_targets << "\n";
    out << "gt_gaussians = " << c.gt_gaussians << "\n";
    out << "camera_distance = " << c.camera_distance << "\n";
    out << "overlap = " << c.overlap << "\n";
    out << "scene_extent = " << c.scene_extent << "\n";
    out << "fov_deg = " << c.fov_deg << "\n";
}

}  // namespace tokensplat
