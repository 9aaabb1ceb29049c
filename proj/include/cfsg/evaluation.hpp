#pragma once

#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "cfsg/error.hpp"
#include "cfsg/image.hpp"

namespace cfsg {

/// m x m pixel counts; entry (i,j) = pixels of true class i predicted as j.
struct ConfusionMatrix {
    int num_classes = 0;
    std::vector<std::uint64_t> counts; // row-major, row = ground truth

    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int m)
        : num_classes(m), counts(static_cast<std::size_t>(m) * m, 0) {}

    std::uint64_t& at(int truth, int pred) {
        return counts[static_cast<std::size_t>(truth) * num_classes + pred];
    }
    std::uint64_t at(int truth, int pred) const {
        return counts[static_cast<std::size_t>(truth) * num_classes + pred];
    }
    std::uint64_t total() const {
        std::uint64_t t = 0;
        for (const auto v : counts) t += v;
        return t;
    }
    ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
        if (o.num_classes != num_classes)
            throw ShapeError("confusion classes", num_classes, o.num_classes);
        for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
        return *this;
    }
};

/// Adds per-pixel counts for one (prediction, truth) pair. Associative over
/// image sequences, so parallel accumulation into separate matrices merged
/// by += gives the same result.
inline void accumulate(ConfusionMatrix& cm, const LabelMask& predicted,
                       const LabelMask& truth) {
    if (predicted.width != truth.width)
        throw ShapeError("width", truth.width, predicted.width);
    if (predicted.height != truth.height)
        throw ShapeError("height", truth.height, predicted.height);
    for (std::size_t i = 0; i < truth.ids.size(); ++i) {
        const int t = truth.ids[i], p = predicted.ids[i];
        if (t >= cm.num_classes || p >= cm.num_classes)
            throw DataError("class id " + std::to_string(std::max(t, p)) +
                            " >= matrix size " + std::to_string(cm.num_classes));
        cm.at(t, p) += 1;
    }
}

struct MetricsReport {
    std::vector<double> per_class_accuracy; // n_ii / t_i
    std::vector<double> per_class_iou;      // n_ii / (t_i + sum_j n_ji - n_ii)
    std::vector<bool> class_present;        // false: no ground-truth pixels
    double mean_class_accuracy = 0.0;
    double mean_iou = 0.0;
    double overall_accuracy = 0.0;          // trace / total
};

/// Per-class accuracy and IoU plus their class means. The class-averaged
/// accuracy and the plain pixel ratio are both reported under distinct names
/// since the two definitions disagree on imbalanced data. Classes without
/// ground-truth pixels are excluded from the means and flagged.
inline MetricsReport metrics(const ConfusionMatrix& cm) {
    const int m = cm.num_classes;
    if (m == 0 || cm.total() == 0) throw DataError("empty confusion matrix");
    MetricsReport r;
    r.per_class_accuracy.assign(m, 0.0);
    r.per_class_iou.assign(m, 0.0);
    r.class_present.assign(m, true);
    std::uint64_t diag = 0;
    int present = 0;
    for (int i = 0; i < m; ++i) {
        std::uint64_t t_i = 0, col_i = 0;
        for (int j = 0; j < m; ++j) {
            t_i += cm.at(i, j);
            col_i += cm.at(j, i);
        }
        const std::uint64_t n_ii = cm.at(i, i);
        diag += n_ii;
        if (t_i == 0) {
            r.class_present[i] = false;
            continue;
        }
        ++present;
        r.per_class_accuracy[i] = static_cast<double>(n_ii) / t_i;
        r.per_class_iou[i] =
            static_cast<double>(n_ii) / static_cast<double>(t_i + col_i - n_ii);
        r.mean_class_accuracy += r.per_class_accuracy[i];
        r.mean_iou += r.per_class_iou[i];
    }
    if (present == 0) throw DataError("no class has ground-truth pixels");
    r.mean_class_accuracy /= present;
    r.mean_iou /= present;
    r.overall_accuracy = static_cast<double>(diag) / cm.total();
    return r;
}

/// CSV rendering: per-class OA/IoU pairs plus the two means — the table
/// layout segmentation papers report. The plain pixel ratio stays out of
/// this table; it lives in metrics() and the text report.
inline std::string report_csv(const ConfusionMatrix& cm,
                              const std::vector<std::string>& class_names) {
    if (static_cast<int>(class_names.size()) != cm.num_classes)
        throw ShapeError("class names", cm.num_classes,
                         static_cast<long long>(class_names.size()));
    const MetricsReport r = metrics(cm);
    std::string header, row;
    char buf[64];
    for (int i = 0; i < cm.num_classes; ++i) {
        header += class_names[i] + "_oa," + class_names[i] + "_iou,";
        std::snprintf(buf, sizeof buf, "%.4f,%.4f,", r.per_class_accuracy[i],
                      r.per_class_iou[i]);
        row += buf;
    }
    header += "moa,miou\n";
    std::snprintf(buf, sizeof buf, "%.4f,%.4f\n", r.mean_class_accuracy,
                  r.mean_iou);
    row += buf;
    return header + row;
}

/// Aligned table for terminals.
inline std::string report_text(const ConfusionMatrix& cm,
                               const std::vector<std::string>& class_names) {
    const MetricsReport r = metrics(cm);
    std::string out = "class            OA      IoU\n";
    char buf[128];
    for (int i = 0; i < cm.num_classes; ++i) {
        std::snprintf(buf, sizeof buf, "%-14s %6.4f   %6.4f%s\n",
                      class_names[i].c_str(), r.per_class_accuracy[i],
                      r.per_class_iou[i],
                      r.class_present[i] ? "" : "   (no ground truth; excluded)");
        out += buf;
    }
    std::snprintf(buf, sizeof buf,
                  "mOA %.4f  mIoU %.4f  overall accuracy %.4f\n",
                  r.mean_class_accuracy, r.mean_iou, r.overall_accuracy);
    out += buf;
    return out;
}

/// Raw count dump so every metric can be recomputed downstream.
inline std::string confusion_csv(const ConfusionMatrix& cm) {
    std::string out = "truth\\pred";
    for (int j = 0; j < cm.num_classes; ++j) out += "," + std::to_string(j);
    out += "\n";
    for (int i = 0; i < cm.num_classes; ++i) {
        out += std::to_string(i);
        for (int j = 0; j < cm.num_classes; ++j)
            out += "," + std::to_string(cm.at(i, j));
        out += "\n";
    }
    return out;
}

} // namespace cfsg
