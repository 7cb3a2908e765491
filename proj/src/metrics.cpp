#include "mtunet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include "mtunet/error.hpp"

namespace mtunet::metrics {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void require_same_shape(const Mask& a, const Mask& b) {
    if (a.h != b.h || a.w != b.w) {
        throw DimensionError("mask shapes differ: " + std::to_string(a.h) + "x" +
                             std::to_string(a.w) + " vs " + std::to_string(b.h) + "x" +
                             std::to_string(b.w));
    }
    if (static_cast<std::int64_t>(a.data.size()) != a.h * a.w ||
        static_cast<std::int64_t>(b.data.size()) != b.h * b.w) {
        throw DimensionError("mask data length inconsistent with extents");
    }
}

// 1D squared-distance transform (lower envelope of parabolas).
void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
    const std::int64_t n = static_cast<std::int64_t>(f.size());
    std::vector<std::int64_t> v(static_cast<std::size_t>(n));
    std::vector<double> z(static_cast<std::size_t>(n) + 1);
    std::int64_t k = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    for (std::int64_t q = 1; q < n; ++q) {
        if (f[q] == kInf) continue;
        if (f[v[k]] == kInf) {
            v[k] = q;
            continue;
        }
        double s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]));
        while (k > 0 && s <= z[k]) {
            --k;
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * (q - v[k]));
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    k = 0;
    for (std::int64_t q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        d[q] = (q - v[k]) * (q - v[k]) + f[v[k]];
    }
}

// Exact squared Euclidean distance from every pixel to the nearest seed.
std::vector<double> edt_squared(const Mask& seeds) {
    const std::int64_t h = seeds.h, w = seeds.w;
    std::vector<double> grid(static_cast<std::size_t>(h * w));
    for (std::int64_t i = 0; i < h * w; ++i) grid[i] = seeds.data[i] ? 0.0 : kInf;

    std::vector<double> f(static_cast<std::size_t>(std::max(h, w)));
    std::vector<double> d(static_cast<std::size_t>(std::max(h, w)));
    for (std::int64_t r = 0; r < h; ++r) {
        for (std::int64_t c = 0; c < w; ++c) f[c] = grid[r * w + c];
        f.resize(static_cast<std::size_t>(w));
        d.resize(static_cast<std::size_t>(w));
        edt_1d(f, d);
        for (std::int64_t c = 0; c < w; ++c) grid[r * w + c] = d[c];
    }
    for (std::int64_t c = 0; c < w; ++c) {
        f.resize(static_cast<std::size_t>(h));
        d.resize(static_cast<std::size_t>(h));
        for (std::int64_t r = 0; r < h; ++r) f[r] = grid[r * w + c];
        edt_1d(f, d);
        for (std::int64_t r = 0; r < h; ++r) grid[r * w + c] = d[r];
    }
    return grid;
}

// Nearest-rank percentile: sorted value at index ceil(q*n), 1-based.
double percentile_nearest_rank(std::vector<double>& values, double q) {
    std::sort(values.begin(), values.end());
    const auto n = static_cast<std::int64_t>(values.size());
    auto rank = static_cast<std::int64_t>(std::ceil(q * static_cast<double>(n)));
    rank = std::max<std::int64_t>(1, std::min(rank, n));
    return values[rank - 1];
}

}  // namespace

double dice_score(const Mask& pred, const Mask& gt) {
    require_same_shape(pred, gt);
    std::int64_t inter = 0, a = 0, b = 0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const bool pa = pred.data[i] != 0, pb = gt.data[i] != 0;
        a += pa;
        b += pb;
        inter += pa && pb;
    }
    if (a + b == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

Mask boundary_of(const Mask& mask) {
    Mask out{mask.h, mask.w, std::vector<std::uint8_t>(mask.data.size(), 0)};
    const std::int64_t h = mask.h, w = mask.w;
    for (std::int64_t r = 0; r < h; ++r) {
        for (std::int64_t c = 0; c < w; ++c) {
            if (!mask.data[r * w + c]) continue;
            const bool border = r == 0 || r == h - 1 || c == 0 || c == w - 1;
            const bool exposed = border || !mask.data[(r - 1) * w + c] ||
                                 !mask.data[(r + 1) * w + c] || !mask.data[r * w + c - 1] ||
                                 !mask.data[r * w + c + 1];
            out.data[r * w + c] = exposed ? 1 : 0;
        }
    }
    return out;
}

std::optional<double> hd95(const Mask& pred, const Mask& gt) {
    require_same_shape(pred, gt);
    if (pred.empty_mask() || gt.empty_mask()) return std::nullopt;

    const Mask ba = boundary_of(pred);
    const Mask bb = boundary_of(gt);
    const auto dist_to_a = edt_squared(ba);
    const auto dist_to_b = edt_squared(bb);

    std::vector<double> a_to_b, b_to_a;
    for (std::size_t i = 0; i < ba.data.size(); ++i) {
        if (ba.data[i]) a_to_b.push_back(std::sqrt(dist_to_b[i]));
        if (bb.data[i]) b_to_a.push_back(std::sqrt(dist_to_a[i]));
    }
    return std::max(percentile_nearest_rank(a_to_b, 0.95),
                    percentile_nearest_rank(b_to_a, 0.95));
}

MetricReport evaluate_labels(const std::vector<std::int64_t>& pred,
                             const std::vector<std::int64_t>& gt, std::int64_t h, std::int64_t w,
                             std::int64_t num_classes) {
    if (static_cast<std::int64_t>(pred.size()) != h * w ||
        static_cast<std::int64_t>(gt.size()) != h * w) {
        throw DimensionError("label map length inconsistent with extents");
    }
    MetricReport report;
    double dsc_sum = 0.0, hd_sum = 0.0;
    std::int64_t hd_count = 0;
    for (std::int64_t cls = 1; cls < num_classes; ++cls) {
        Mask mp{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w), 0)};
        Mask mg{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w), 0)};
        for (std::int64_t i = 0; i < h * w; ++i) {
            mp.data[i] = pred[i] == cls;
            mg.data[i] = gt[i] == cls;
        }
        ClassMetrics cm;
        cm.class_id = cls;
        cm.dsc = dice_score(mp, mg);
        cm.hd95 = hd95(mp, mg);
        dsc_sum += cm.dsc;
        if (cm.hd95) {
            hd_sum += *cm.hd95;
            ++hd_count;
        }
        report.per_class.push_back(cm);
    }
    if (!report.per_class.empty()) {
        report.mean_dsc = dsc_sum / static_cast<double>(report.per_class.size());
    }
    if (hd_count > 0) report.mean_hd95 = hd_sum / static_cast<double>(hd_count);
    return report;
}

std::string format_double(double value, int precision) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", precision, value);
    return buf;
}

std::string report_to_text(const MetricReport& report) {
    std::ostringstream os;
    for (const auto& cm : report.per_class) {
        os << "class " << cm.class_id << ": dsc=" << format_double(cm.dsc)
           << " hd95=" << (cm.hd95 ? format_double(*cm.hd95) : std::string("missing")) << "\n";
    }
    os << "mean: dsc=" << format_double(report.mean_dsc)
       << " hd95=" << (report.mean_hd95 ? format_double(*report.mean_hd95) : std::string("missing"))
       << "\n";
    return os.str();
}

std::string report_to_csv(const MetricReport& report) {
    std::ostringstream os;
    os << "class,dsc,hd95\n";
    for (const auto& cm : report.per_class) {
        os << cm.class_id << "," << format_double(cm.dsc) << ","
           << (cm.hd95 ? format_double(*cm.hd95) : std::string()) << "\n";
    }
    os << "mean," << format_double(report.mean_dsc) << ","
       << (report.mean_hd95 ? format_double(*report.mean_hd95) : std::string()) << "\n";
    return os.str();
}

}  // namespace mtunet::metrics
