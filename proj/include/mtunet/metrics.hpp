#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mtunet::metrics {

// Binary mask over an h x w grid, row-major, nonzero = foreground.
struct Mask {
    std::int64_t h = 0;
    std::int64_t w = 0;
    std::vector<std::uint8_t> data;

    bool empty_mask() const {
        for (auto v : data)
            if (v) return false;
        return true;
    }
};

// 2|A∩B| / (|A|+|B|). Both masks empty -> 1.0; exactly one empty -> 0.0.
double dice_score(const Mask& pred, const Mask& gt);

// 95th-percentile symmetric Hausdorff distance between mask boundaries
// (4-connectivity boundary, nearest-rank percentile, Euclidean pixels).
// Missing when either mask is empty.
std::optional<double> hd95(const Mask& pred, const Mask& gt);

// Foreground pixels with at least one 4-neighbor outside the mask (image
// border counts as outside).
Mask boundary_of(const Mask& mask);

struct ClassMetrics {
    std::int64_t class_id = 0;
    double dsc = 0.0;
    std::optional<double> hd95;
};

struct MetricReport {
    std::vector<ClassMetrics> per_class;
    double mean_dsc = 0.0;                 // over all foreground classes
    std::optional<double> mean_hd95;       // over classes with a defined hd95
};

// Per-foreground-class DSC/HD95 for integer label maps over [0, num_classes).
MetricReport evaluate_labels(const std::vector<std::int64_t>& pred,
                             const std::vector<std::int64_t>& gt, std::int64_t h, std::int64_t w,
                             std::int64_t num_classes);

std::string report_to_text(const MetricReport& report);
std::string report_to_csv(const MetricReport& report);

// Locale-independent fixed-point formatting used by all CSV/report writers.
std::string format_double(double value, int precision = 6);

}  // namespace mtunet::metrics
