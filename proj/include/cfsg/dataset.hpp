#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfsg/checkpoint.hpp"
#include "cfsg/error.hpp"
#include "cfsg/image.hpp"
#include "cfsg/image_io.hpp"
#include "cfsg/rng.hpp"
#include "cfsg/synth.hpp"

namespace cfsg {

inline std::string sample_image_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "image_%04d.png", index);
    return buf;
}

inline std::string sample_mask_name(int index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "mask_%04d.png", index);
    return buf;
}

/// Generates `count` scenes into `dir` (image + mask PNG pairs and a
/// manifest). Each scene draws from its own stream derived from the spec
/// seed, so the manifest's per-sample seeds are all distinct.
inline void write_synth_dataset(const SceneSpec& spec, const std::string& dir,
                                int count) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (!fs::is_directory(dir))
        throw IoError("cannot create dataset directory " + dir);

    nlohmann::json manifest;
    manifest["version"] = 1;
    manifest["count"] = count;
    manifest["scene_spec"] = {
        {"width", spec.width},           {"height", spec.height},
        {"crop_rows", spec.crop_rows},   {"row_spacing", spec.row_spacing},
        {"plant_spacing", spec.plant_spacing},
        {"plant_radius_min", spec.plant_radius_min},
        {"plant_radius_max", spec.plant_radius_max},
        {"weed_density", spec.weed_density},
        {"weed_radius_min", spec.weed_radius_min},
        {"weed_radius_max", spec.weed_radius_max},
        {"soil_noise_scale", spec.soil_noise_scale},
        {"soil_contrast", spec.soil_contrast},
        {"seed", spec.seed}};
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < count; ++i) {
        SceneSpec s = spec;
        s.seed = Rng::mix(spec.seed, static_cast<std::uint64_t>(i) + 1);
        seeds.push_back(s.seed);
        auto [img, mask] = synth_scene(s);
        save_image(img, (fs::path(dir) / sample_image_name(i)).string());
        save_mask(mask, (fs::path(dir) / sample_mask_name(i)).string());
    }
    manifest["seeds"] = seeds;
    atomic_write_file((fs::path(dir) / "manifest.json").string(),
                      manifest.dump(2) + "\n");
}

/// Loads every image_*.png / mask_*.png pair in a directory, sorted by name.
inline std::vector<Sample> load_dataset(const std::string& dir,
                                        int num_classes = 3) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IoError(dir + " is not a directory");
    std::vector<std::string> images;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name.rfind("image_", 0) == 0 && e.path().extension() == ".png")
            images.push_back(e.path().string());
    }
    std::sort(images.begin(), images.end());
    if (images.empty()) throw DataError("no image_*.png files in " + dir);

    std::vector<Sample> out;
    out.reserve(images.size());
    for (const auto& ipath : images) {
        fs::path mpath = fs::path(ipath).parent_path() /
                         ("mask_" + fs::path(ipath).filename().string().substr(6));
        if (!fs::exists(mpath))
            throw DataError("missing mask for " + ipath);
        Sample s;
        s.image = load_image(ipath);
        s.mask = load_mask(mpath.string(), num_classes);
        if (s.mask.width != s.image.width || s.mask.height != s.image.height)
            throw DataError("mask dims disagree with image for " + ipath);
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace cfsg
