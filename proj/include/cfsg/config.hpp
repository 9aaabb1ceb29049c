#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfsg/checkpoint.hpp"
#include "cfsg/crf.hpp"
#include "cfsg/error.hpp"
#include "cfsg/image.hpp"
#include "cfsg/network.hpp"
#include "cfsg/synth.hpp"
#include "cfsg/training.hpp"

namespace cfsg {

inline constexpr int kConfigVersion = 1;

struct MappingConfig {
    int tile = 64;
    int overlap = 0;
    double gsd_mm_per_px = 1.78;
    std::vector<int> grids{100, 50, 10};
    double heatmap_sigma = 4.0;
    int weed_pixel_threshold = 1;
};

/// Whole-pipeline configuration, stored as one JSON document. Every field
/// has a default; unknown keys are rejected so typos fail fast.
struct PipelineConfig {
    ArchitectureConfig architecture;
    TrainConfig training;
    FieldPrepParams preprocessing;
    crf::Params crf_params;
    MappingConfig mapping;
    SceneSpec synthetic;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j,
                           const std::vector<std::string>& known,
                           const std::string& section) {
    if (!j.is_object())
        throw ConfigError("config section '" + section + "' must be an object");
    for (const auto& [key, _] : j.items())
        if (std::find(known.begin(), known.end(), key) == known.end())
            throw ConfigError("unknown key '" + key + "' in config section '" +
                              section + "'");
}

template <typename T>
void opt(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

} // namespace detail

inline nlohmann::json pipeline_to_json(const PipelineConfig& c) {
    nlohmann::json j;
    j["version"] = kConfigVersion;
    j["architecture"] = arch_to_json(c.architecture);
    j["training"] = {
        {"batch_size", c.training.batch_size},
        {"initial_lr", c.training.initial_lr},
        {"max_epochs", c.training.max_epochs},
        {"seed", c.training.seed},
        {"augment", c.training.augment_enabled},
        {"hflip", c.training.augment.hflip},
        {"vflip", c.training.augment.vflip},
        {"rot90", c.training.augment.rot90},
        {"gamma_jitter", c.training.augment.gamma_jitter},
        {"plateau_patience", c.training.plateau_patience},
        {"plateau_factor", c.training.plateau_factor},
        {"plateau_tolerance", c.training.plateau_tolerance},
        {"early_stop_patience", c.training.early_stop_patience},
    };
    if (c.training.class_weights)
        j["training"]["class_weights"] = *c.training.class_weights;
    j["preprocessing"] = {
        {"work_width", c.preprocessing.work_width},
        {"work_height", c.preprocessing.work_height},
        {"blur_sigma", c.preprocessing.blur_sigma},
        {"gamma", c.preprocessing.gamma},
        {"tile_size", c.preprocessing.tile_size},
        {"crops", c.preprocessing.crops},
    };
    j["crf"] = {
        {"w1", c.crf_params.w1},
        {"w2", c.crf_params.w2},
        {"sigma_alpha", c.crf_params.sigma_alpha},
        {"sigma_beta", c.crf_params.sigma_beta},
        {"sigma_rho", c.crf_params.sigma_rho},
        {"iterations", c.crf_params.iterations},
        {"truncation_radius", c.crf_params.truncation_radius},
    };
    j["mapping"] = {
        {"tile", c.mapping.tile},
        {"overlap", c.mapping.overlap},
        {"gsd_mm_per_px", c.mapping.gsd_mm_per_px},
        {"grids", c.mapping.grids},
        {"heatmap_sigma", c.mapping.heatmap_sigma},
        {"weed_pixel_threshold", c.mapping.weed_pixel_threshold},
    };
    j["synthetic"] = {
        {"width", c.synthetic.width},
        {"height", c.synthetic.height},
        {"crop_rows", c.synthetic.crop_rows},
        {"row_spacing", c.synthetic.row_spacing},
        {"plant_spacing", c.synthetic.plant_spacing},
        {"plant_radius_min", c.synthetic.plant_radius_min},
        {"plant_radius_max", c.synthetic.plant_radius_max},
        {"weed_density", c.synthetic.weed_density},
        {"weed_radius_min", c.synthetic.weed_radius_min},
        {"weed_radius_max", c.synthetic.weed_radius_max},
        {"soil_noise_scale", c.synthetic.soil_noise_scale},
        {"soil_contrast", c.synthetic.soil_contrast},
        {"seed", c.synthetic.seed},
    };
    return j;
}

inline PipelineConfig pipeline_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j,
                           {"version", "architecture", "training",
                            "preprocessing", "crf", "mapping", "synthetic"},
                           "(root)");
    if (!j.contains("version"))
        throw ConfigError("config is missing the mandatory 'version' field");
    if (j.at("version").get<int>() != kConfigVersion)
        throw ConfigError("unsupported config version");

    PipelineConfig c;
    if (j.contains("architecture"))
        c.architecture = arch_from_json(j.at("architecture"));

    if (j.contains("training")) {
        const auto& t = j.at("training");
        detail::reject_unknown(
            t,
            {"batch_size", "initial_lr", "max_epochs", "seed", "augment",
             "hflip", "vflip", "rot90", "gamma_jitter", "class_weights",
             "plateau_patience", "plateau_factor", "plateau_tolerance",
             "early_stop_patience"},
            "training");
        detail::opt(t, "batch_size", c.training.batch_size);
        detail::opt(t, "initial_lr", c.training.initial_lr);
        detail::opt(t, "max_epochs", c.training.max_epochs);
        detail::opt(t, "seed", c.training.seed);
        detail::opt(t, "augment", c.training.augment_enabled);
        detail::opt(t, "hflip", c.training.augment.hflip);
        detail::opt(t, "vflip", c.training.augment.vflip);
        detail::opt(t, "rot90", c.training.augment.rot90);
        detail::opt(t, "gamma_jitter", c.training.augment.gamma_jitter);
        detail::opt(t, "plateau_patience", c.training.plateau_patience);
        detail::opt(t, "plateau_factor", c.training.plateau_factor);
        detail::opt(t, "plateau_tolerance", c.training.plateau_tolerance);
        detail::opt(t, "early_stop_patience", c.training.early_stop_patience);
        if (t.contains("class_weights"))
            c.training.class_weights = t.at("class_weights").get<std::vector<float>>();
        if (c.training.batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (c.training.initial_lr <= 0.0f) throw ConfigError("initial_lr must be > 0");
    }

    if (j.contains("preprocessing")) {
        const auto& p = j.at("preprocessing");
        detail::reject_unknown(p,
                               {"work_width", "work_height", "blur_sigma",
                                "gamma", "tile_size", "crops"},
                               "preprocessing");
        detail::opt(p, "work_width", c.preprocessing.work_width);
        detail::opt(p, "work_height", c.preprocessing.work_height);
        detail::opt(p, "blur_sigma", c.preprocessing.blur_sigma);
        detail::opt(p, "gamma", c.preprocessing.gamma);
        detail::opt(p, "tile_size", c.preprocessing.tile_size);
        detail::opt(p, "crops", c.preprocessing.crops);
    }

    if (j.contains("crf")) {
        const auto& p = j.at("crf");
        detail::reject_unknown(p,
                               {"w1", "w2", "sigma_alpha", "sigma_beta",
                                "sigma_rho", "iterations", "truncation_radius"},
                               "crf");
        detail::opt(p, "w1", c.crf_params.w1);
        detail::opt(p, "w2", c.crf_params.w2);
        detail::opt(p, "sigma_alpha", c.crf_params.sigma_alpha);
        detail::opt(p, "sigma_beta", c.crf_params.sigma_beta);
        detail::opt(p, "sigma_rho", c.crf_params.sigma_rho);
        detail::opt(p, "iterations", c.crf_params.iterations);
        detail::opt(p, "truncation_radius", c.crf_params.truncation_radius);
        c.crf_params.validate();
    }

    if (j.contains("mapping")) {
        const auto& p = j.at("mapping");
        detail::reject_unknown(p,
                               {"tile", "overlap", "gsd_mm_per_px", "grids",
                                "heatmap_sigma", "weed_pixel_threshold"},
                               "mapping");
        detail::opt(p, "tile", c.mapping.tile);
        detail::opt(p, "overlap", c.mapping.overlap);
        detail::opt(p, "gsd_mm_per_px", c.mapping.gsd_mm_per_px);
        detail::opt(p, "grids", c.mapping.grids);
        detail::opt(p, "heatmap_sigma", c.mapping.heatmap_sigma);
        detail::opt(p, "weed_pixel_threshold", c.mapping.weed_pixel_threshold);
    }

    if (j.contains("synthetic")) {
        const auto& p = j.at("synthetic");
        detail::reject_unknown(p,
                               {"width", "height", "crop_rows", "row_spacing",
                                "plant_spacing", "plant_radius_min",
                                "plant_radius_max", "weed_density",
                                "weed_radius_min", "weed_radius_max",
                                "soil_noise_scale", "soil_contrast", "seed"},
                               "synthetic");
        detail::opt(p, "width", c.synthetic.width);
        detail::opt(p, "height", c.synthetic.height);
        detail::opt(p, "crop_rows", c.synthetic.crop_rows);
        detail::opt(p, "row_spacing", c.synthetic.row_spacing);
        detail::opt(p, "plant_spacing", c.synthetic.plant_spacing);
        detail::opt(p, "plant_radius_min", c.synthetic.plant_radius_min);
        detail::opt(p, "plant_radius_max", c.synthetic.plant_radius_max);
        detail::opt(p, "weed_density", c.synthetic.weed_density);
        detail::opt(p, "weed_radius_min", c.synthetic.weed_radius_min);
        detail::opt(p, "weed_radius_max", c.synthetic.weed_radius_max);
        detail::opt(p, "soil_noise_scale", c.synthetic.soil_noise_scale);
        detail::opt(p, "soil_contrast", c.synthetic.soil_contrast);
        detail::opt(p, "seed", c.synthetic.seed);
        c.synthetic.validate();
    }
    return c;
}

inline PipelineConfig load_pipeline_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": invalid JSON: " + e.what());
    }
    return pipeline_from_json(j);
}

} // namespace cfsg
