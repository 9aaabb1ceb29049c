// cfsg: train a field-image segmentation network, predict orthomosaic ROIs,
// and turn weed maps into prescription grids and spray statistics.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cfsg/checkpoint.hpp"
#include "cfsg/config.hpp"
#include "cfsg/crf.hpp"
#include "cfsg/dataset.hpp"
#include "cfsg/evaluation.hpp"
#include "cfsg/image_io.hpp"
#include "cfsg/mapping.hpp"
#include "cfsg/network.hpp"
#include "cfsg/synth.hpp"
#include "cfsg/training.hpp"

namespace fs = std::filesystem;
using namespace cfsg;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

struct Common {
    std::string config_path;
    int threads = 0;

    PipelineConfig load() const {
        return config_path.empty() ? PipelineConfig{}
                                   : load_pipeline_config(config_path);
    }
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "pipeline config JSON");
    cmd->add_option("--threads", c.threads, "cap worker threads");
}

void apply_threads(const Common& c) {
    if (c.threads > 0)
        setenv("CFSG_THREADS", std::to_string(c.threads).c_str(), 1);
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (!fs::is_directory(dir)) throw IoError("cannot create directory " + dir);
}

Raster to_unit_range(const Raster& r) { return r; }

void save_raster_png(const Raster& r, const std::string& path) {
    std::vector<std::uint8_t> rows(r.v.size());
    for (std::size_t i = 0; i < r.v.size(); ++i)
        rows[i] = detail::to_byte(r.v[i]);
    detail::write_png_rows(path, rows, r.width, r.height, 1);
}

void write_probabilities(const Tensor& probs, const std::string& base) {
    nlohmann::json meta{{"width", probs.w},
                        {"height", probs.h},
                        {"classes", probs.c},
                        {"layout", "planar"},
                        {"dtype", "float32-le"}};
    atomic_write_file(base + ".json", meta.dump(2) + "\n");
    std::string payload(probs.size() * sizeof(float), '\0');
    std::memcpy(payload.data(), probs.data.data(), payload.size());
    atomic_write_file(base + ".bin", payload);
}

Tensor read_probabilities(const std::string& json_path) {
    std::ifstream f(json_path);
    if (!f) throw IoError("cannot open " + json_path);
    nlohmann::json meta;
    try {
        f >> meta;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(json_path + ": bad metadata: " + e.what());
    }
    Tensor t(1, meta.at("classes").get<int>(), meta.at("height").get<int>(),
             meta.at("width").get<int>());
    fs::path bin = fs::path(json_path).replace_extension(".bin");
    std::ifstream b(bin, std::ios::binary);
    if (!b) throw IoError("cannot open " + bin.string());
    std::string payload((std::istreambuf_iterator<char>(b)),
                        std::istreambuf_iterator<char>());
    if (payload.size() != t.size() * sizeof(float))
        throw DataError(bin.string() + ": payload size does not match dims");
    std::memcpy(t.data.data(), payload.data(), payload.size());
    return t;
}

std::vector<std::uint64_t> mask_class_counts(const std::vector<Sample>& data,
                                             int num_classes) {
    std::vector<std::uint64_t> counts(num_classes, 0);
    for (const auto& s : data)
        for (const auto id : s.mask.ids) counts[id] += 1;
    return counts;
}

// ---------------------------------------------------------------------------
// subcommand bodies
// ---------------------------------------------------------------------------

int run_synth(const Common& common, const std::string& out_dir, int count,
              std::int64_t seed_override) {
    PipelineConfig cfg = common.load();
    if (seed_override >= 0)
        cfg.synthetic.seed = static_cast<std::uint64_t>(seed_override);
    write_synth_dataset(cfg.synthetic, out_dir, count);
    std::printf("wrote %d scene pairs + manifest to %s\n", count,
                out_dir.c_str());
    return 0;
}

int run_train(const Common& common, const std::string& train_dir,
              const std::string& val_dir, const std::string& out_ckpt,
              std::string history_path, std::int64_t seed_override,
              int epochs_override) {
    PipelineConfig cfg = common.load();
    if (seed_override >= 0)
        cfg.training.seed = static_cast<std::uint64_t>(seed_override);
    if (epochs_override > 0) cfg.training.max_epochs = epochs_override;
    const auto train_set = load_dataset(train_dir, cfg.architecture.num_classes);
    const auto val_set = load_dataset(val_dir, cfg.architecture.num_classes);
    if (history_path.empty())
        history_path = (fs::path(out_ckpt).parent_path() / "history.csv").string();

    TrainResult result = train(
        train_set, val_set, cfg.architecture, cfg.training,
        [](const Model&, const EpochStats& s, bool best) {
            std::printf("epoch %3d  train %.4f  val %.4f  miou %.4f  lr %g%s\n",
                        s.epoch, s.train_loss, s.val_loss, s.val_miou,
                        static_cast<double>(s.lr), best ? "  *" : "");
            std::fflush(stdout);
        });
    save_checkpoint(result.model, out_ckpt);
    atomic_write_file(history_path, history_csv(result.history));
    std::printf("checkpoint: %s\nhistory: %s\n", out_ckpt.c_str(),
                history_path.c_str());
    return 0;
}

struct PredictFlags {
    std::string checkpoint, input, out_dir;
    bool use_crf = false;
    int tile = 0;
    int overlap = -1;
    double gsd = 0.0;
    std::vector<int> grids;
};

int run_predict(const Common& common, const PredictFlags& f) {
    PipelineConfig cfg = common.load();
    const double gsd = f.gsd > 0.0 ? f.gsd : cfg.mapping.gsd_mm_per_px;
    const int overlap = f.overlap >= 0 ? f.overlap : cfg.mapping.overlap;
    const std::vector<int> grids = f.grids.empty() ? cfg.mapping.grids : f.grids;

    Model model = load_checkpoint(f.checkpoint);
    const ImageRGB roi = load_image(f.input);
    ensure_dir(f.out_dir);

    RoiPrediction pred;
    if (f.tile > 0) {
        const TilePlan plan = plan_tiles(roi.width, roi.height, f.tile, overlap);
        pred = predict_roi(model, roi, plan,
                           f.use_crf ? &cfg.crf_params : nullptr);
    } else {
        if (roi.width % 32 != 0 || roi.height % 32 != 0)
            throw DataError("input dims must be divisible by 32 (or pass --tile)");
        ForwardTrace t = forward(model, image_to_tensor(roi), Mode::infer);
        pred.probabilities = t.probabilities;
        pred.mask = f.use_crf ? crf::refine(t.probabilities, roi, cfg.crf_params)
                              : argmax_mask(t.probabilities);
    }

    const fs::path out(f.out_dir);
    save_mask(pred.mask, (out / "mask.png").string());
    save_image(colorize_mask(pred.mask), (out / "color.png").string());
    write_probabilities(pred.probabilities, (out / "probabilities").string());
    save_raster_png(weed_heatmap(pred.mask, cfg.mapping.heatmap_sigma),
                    (out / "heatmap.png").string());

    std::string stats_csv =
        "grid_px,grid_cm,total_cells,free_weed_grids,weed_grids,"
        "spraying_rate_pct,saving_rate_pct\n";
    std::vector<std::pair<double, double>> curve;
    for (const int g : grids) {
        if (g > pred.mask.width || g > pred.mask.height) {
            std::fprintf(stderr, "note: grid %d exceeds ROI, skipped\n", g);
            continue;
        }
        const PrescriptionMap pm =
            prescription(pred.mask, g, cfg.mapping.weed_pixel_threshold);
        const SprayStats s = spray_stats(pm);
        char row[160];
        std::snprintf(row, sizeof row, "%d,%.4g,%zu,%llu,%llu,%.2f,%.2f\n", g,
                      ground_side_cm(g, gsd), pm.cells.size(),
                      static_cast<unsigned long long>(s.free_weed_grids),
                      static_cast<unsigned long long>(s.weed_grids),
                      s.spraying_rate, s.saving_rate);
        stats_csv += row;
        curve.emplace_back(ground_side_cm(g, gsd), s.saving_rate);

        Raster cells;
        cells.width = pm.cols;
        cells.height = pm.rows;
        cells.v.resize(pm.cells.size());
        for (std::size_t i = 0; i < pm.cells.size(); ++i)
            cells.v[i] = pm.cells[i] ? 1.0f : 0.0f;
        save_raster_png(cells, (out / ("prescription_" + std::to_string(g) +
                                       ".png")).string());
        std::string cells_csv = "row,col,spray\n";
        for (int r = 0; r < pm.rows; ++r)
            for (int c = 0; c < pm.cols; ++c)
                cells_csv += std::to_string(r) + "," + std::to_string(c) + "," +
                             (pm.sprayed(r, c) ? "1" : "0") + "\n";
        atomic_write_file((out / ("prescription_" + std::to_string(g) +
                                  ".csv")).string(),
                          cells_csv);
    }
    atomic_write_file((out / "spray_stats.csv").string(), stats_csv);
    if (curve.size() >= 2) {
        const LinearFit fit = fit_line(curve);
        const nlohmann::json j{{"slope", fit.slope},
                               {"intercept", fit.intercept},
                               {"r_squared", fit.r_squared}};
        atomic_write_file((out / "fit.json").string(), j.dump(2) + "\n");
    }
    std::printf("outputs in %s\n", f.out_dir.c_str());
    return 0;
}

int run_eval(const Common& common, const std::string& checkpoint,
             const std::string& data_dir, const std::string& pred_dir,
             const std::string& out_dir) {
    PipelineConfig cfg = common.load();
    const auto data = load_dataset(data_dir, cfg.architecture.num_classes);
    ConfusionMatrix cm(cfg.architecture.num_classes);

    if (!pred_dir.empty()) {
        for (std::size_t i = 0; i < data.size(); ++i) {
            const fs::path mp = fs::path(pred_dir) / sample_mask_name(static_cast<int>(i));
            if (!fs::exists(mp))
                throw DataError("missing prediction " + mp.string());
            accumulate(cm, load_mask(mp.string(), cm.num_classes), data[i].mask);
        }
    } else {
        if (checkpoint.empty())
            throw ConfigError("eval needs --checkpoint or --pred-dir");
        Model model = load_checkpoint(checkpoint);
        for (const auto& s : data) {
            if (s.image.width % 32 != 0 || s.image.height % 32 != 0)
                throw DataError("dataset tiles must be divisible by 32");
            ForwardTrace t = forward(model, image_to_tensor(s.image), Mode::infer);
            accumulate(cm, argmax_mask(t.probabilities), s.mask);
        }
    }

    const std::vector<std::string> names{"soil", "crop", "weed"};
    const std::string text = report_text(cm, names);
    std::fputs(text.c_str(), stdout);
    if (!out_dir.empty()) {
        ensure_dir(out_dir);
        atomic_write_file((fs::path(out_dir) / "metrics.csv").string(),
                          report_csv(cm, names));
        atomic_write_file((fs::path(out_dir) / "metrics.txt").string(), text);
        atomic_write_file((fs::path(out_dir) / "confusion.csv").string(),
                          confusion_csv(cm));
    }
    return 0;
}

int run_crf(const Common& common, const std::string& image_path,
            const std::string& probs_json, const std::string& out_path,
            const crf::Params& overrides) {
    PipelineConfig cfg = common.load();
    (void)cfg;
    const ImageRGB img = load_image(image_path);
    const Tensor probs = read_probabilities(probs_json);
    const LabelMask refined = crf::refine(probs, img, overrides);
    save_mask(refined, out_path);
    std::printf("refined mask: %s\n", out_path.c_str());
    return 0;
}

int run_featmaps(const Common& common, const std::string& checkpoint,
                 const std::string& image_path, const std::string& layer,
                 const std::string& out_dir) {
    (void)common;
    Model model = load_checkpoint(checkpoint);
    const ImageRGB img = load_image(image_path);
    const auto maps = extract_feature_maps(model, img, layer);
    ensure_dir(out_dir);
    nlohmann::json index;
    index["layer"] = layer;
    index["count"] = maps.size();
    index["width"] = maps.empty() ? 0 : maps[0].width;
    index["height"] = maps.empty() ? 0 : maps[0].height;
    std::vector<std::string> files;
    for (std::size_t c = 0; c < maps.size(); ++c) {
        char name[64];
        std::snprintf(name, sizeof name, "featmap_%s_c%03zu.png", layer.c_str(),
                      c);
        save_raster_png(to_unit_range(maps[c]),
                        (fs::path(out_dir) / name).string());
        files.emplace_back(name);
    }
    index["files"] = files;
    atomic_write_file((fs::path(out_dir) / "index.json").string(),
                      index.dump(2) + "\n");
    std::printf("%zu feature maps for %s in %s\n", maps.size(), layer.c_str(),
                out_dir.c_str());
    return 0;
}

int run_spraycurve(const Common& common, const std::string& mask_path,
                   std::vector<int> grids, double gsd,
                   const std::string& out_dir) {
    PipelineConfig cfg = common.load();
    if (grids.empty()) grids = cfg.mapping.grids;
    if (grids.size() < 2)
        throw ConfigError("spraycurve needs at least 2 grid sizes");
    if (gsd <= 0.0) gsd = cfg.mapping.gsd_mm_per_px;
    const LabelMask mask = load_mask(mask_path);
    ensure_dir(out_dir);

    std::string csv = "grid_px,grid_cm,spraying_rate_pct,saving_rate_pct\n";
    std::vector<std::pair<double, double>> curve;
    for (const int g : grids) {
        const SprayStats s = spray_stats(
            prescription(mask, g, cfg.mapping.weed_pixel_threshold));
        char row[96];
        std::snprintf(row, sizeof row, "%d,%.4g,%.2f,%.2f\n", g,
                      ground_side_cm(g, gsd), s.spraying_rate, s.saving_rate);
        csv += row;
        curve.emplace_back(ground_side_cm(g, gsd), s.saving_rate);
    }
    const LinearFit fit = fit_line(curve);
    atomic_write_file((fs::path(out_dir) / "spraycurve.csv").string(), csv);
    const nlohmann::json j{{"slope", fit.slope},
                           {"intercept", fit.intercept},
                           {"r_squared", fit.r_squared}};
    atomic_write_file((fs::path(out_dir) / "fit.json").string(),
                      j.dump(2) + "\n");
    std::fputs(csv.c_str(), stdout);
    std::printf("fit: slope %.4f intercept %.4f R^2 %.4f\n", fit.slope,
                fit.intercept, fit.r_squared);
    return 0;
}

int run_weights(const Common& common, const std::string& data_dir) {
    PipelineConfig cfg = common.load();
    const auto data = load_dataset(data_dir, cfg.architecture.num_classes);
    const auto counts = mask_class_counts(data, cfg.architecture.num_classes);
    const ClassWeights w = compute_class_weights(counts);
    const std::vector<std::string> names{"soil", "crop", "weed"};
    std::printf("class,pixels,weight\n");
    for (std::size_t c = 0; c < counts.size(); ++c)
        std::printf("%s,%llu,%.3f\n",
                    c < names.size() ? names[c].c_str() : "?",
                    static_cast<unsigned long long>(counts[c]),
                    static_cast<double>(w.w[c]));
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"crop/weed segmentation pipeline (field-to-aerial)"};
    app.require_subcommand(1);

    Common common;
    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    std::string synth_out;
    int synth_count = 10;
    std::int64_t synth_seed = -1;
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_option("--count", synth_count, "number of scenes");
    synth->add_option("--seed", synth_seed, "override scene seed");
    add_common(synth, common);

    // train
    auto* tr = app.add_subcommand("train", "train on a field dataset");
    std::string train_dir, val_dir, out_ckpt, history;
    std::int64_t train_seed = -1;
    int train_epochs = 0;
    tr->add_option("--train-dir", train_dir)->required();
    tr->add_option("--val-dir", val_dir)->required();
    tr->add_option("--out", out_ckpt, "output checkpoint")->required();
    tr->add_option("--history", history, "history CSV path");
    tr->add_option("--seed", train_seed, "override training seed");
    tr->add_option("--epochs", train_epochs, "override max epochs");
    add_common(tr, common);

    // predict / map
    PredictFlags pf;
    auto add_predict_flags = [&](CLI::App* cmd) {
        cmd->add_option("--checkpoint", pf.checkpoint)->required();
        cmd->add_option("--input", pf.input, "image or ROI raster")->required();
        cmd->add_option("--out-dir", pf.out_dir)->required();
        cmd->add_flag("--crf", pf.use_crf, "CRF-refine the stitched mask");
        cmd->add_option("--tile", pf.tile, "tile size for ROI prediction");
        cmd->add_option("--overlap", pf.overlap, "tile overlap in pixels");
        cmd->add_option("--gsd", pf.gsd, "ground sampling distance mm/px");
        cmd->add_option("--grid", pf.grids, "prescription grid sizes (px)");
        add_common(cmd, common);
    };
    auto* predict = app.add_subcommand("predict", "predict a tile or ROI");
    add_predict_flags(predict);
    auto* mapcmd =
        app.add_subcommand("map", "alias of predict with mapping outputs");
    add_predict_flags(mapcmd);

    // eval
    auto* ev = app.add_subcommand("eval", "evaluate on a labeled dataset");
    std::string eval_ckpt, eval_data, eval_pred, eval_out;
    ev->add_option("--checkpoint", eval_ckpt);
    ev->add_option("--data-dir", eval_data)->required();
    ev->add_option("--pred-dir", eval_pred,
                   "evaluate pre-computed prediction masks instead");
    ev->add_option("--out-dir", eval_out);
    add_common(ev, common);

    // crf
    auto* crfcmd = app.add_subcommand("crf", "refine dumped probabilities");
    std::string crf_image, crf_probs, crf_out;
    crf::Params crf_flags;
    crfcmd->add_option("--image", crf_image)->required();
    crfcmd->add_option("--probs", crf_probs, "probabilities .json path")->required();
    crfcmd->add_option("--out", crf_out, "output mask PNG")->required();
    crfcmd->add_option("--w1", crf_flags.w1);
    crfcmd->add_option("--w2", crf_flags.w2);
    crfcmd->add_option("--sigma-alpha", crf_flags.sigma_alpha);
    crfcmd->add_option("--sigma-beta", crf_flags.sigma_beta);
    crfcmd->add_option("--sigma-rho", crf_flags.sigma_rho);
    crfcmd->add_option("--iterations", crf_flags.iterations);
    crfcmd->add_option("--truncation-radius", crf_flags.truncation_radius);
    add_common(crfcmd, common);

    // featmaps
    auto* fm = app.add_subcommand("featmaps", "dump per-channel feature maps");
    std::string fm_ckpt, fm_image, fm_layer, fm_out;
    fm->add_option("--checkpoint", fm_ckpt)->required();
    fm->add_option("--input", fm_image)->required();
    fm->add_option("--layer", fm_layer, "layer name, e.g. conv1")->required();
    fm->add_option("--out-dir", fm_out)->required();
    add_common(fm, common);

    // spraycurve
    auto* sc = app.add_subcommand("spraycurve",
                                  "saving rate vs grid size from a mask");
    std::string sc_mask, sc_out;
    std::vector<int> sc_grids;
    double sc_gsd = 0.0;
    sc->add_option("--mask", sc_mask)->required();
    sc->add_option("--grids", sc_grids, "grid sizes in px")->delimiter(',');
    sc->add_option("--gsd", sc_gsd, "ground sampling distance mm/px");
    sc->add_option("--out-dir", sc_out)->required();
    add_common(sc, common);

    // weights
    auto* wcmd =
        app.add_subcommand("weights", "class weights from dataset statistics");
    std::string w_data;
    wcmd->add_option("--data-dir", w_data)->required();
    add_common(wcmd, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    try {
        apply_threads(common);
        if (synth->parsed())
            return run_synth(common, synth_out, synth_count, synth_seed);
        if (tr->parsed())
            return run_train(common, train_dir, val_dir, out_ckpt, history,
                             train_seed, train_epochs);
        if (predict->parsed() || mapcmd->parsed())
            return run_predict(common, pf);
        if (ev->parsed())
            return run_eval(common, eval_ckpt, eval_data, eval_pred, eval_out);
        if (crfcmd->parsed())
            return run_crf(common, crf_image, crf_probs, crf_out, crf_flags);
        if (fm->parsed())
            return run_featmaps(common, fm_ckpt, fm_image, fm_layer, fm_out);
        if (sc->parsed())
            return run_spraycurve(common, sc_mask, sc_grids, sc_gsd, sc_out);
        if (wcmd->parsed()) return run_weights(common, w_data);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitUsage;
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "divergence: %s\n", e.what());
        return kExitDivergence;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitData;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
