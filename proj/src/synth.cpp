#include "mtunet/synth.hpp"

#include <algorithm>
#include <cmath>

#include "mtunet/error.hpp"

namespace mtunet::synth {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a ^ (b * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL);
    x ^= x >> 33;
    x *= 0xff51afd7ed558ccdULL;
    x ^= x >> 33;
    return x;
}

struct ShapeSpec {
    bool ellipse;
    double cy, cx;      // center, pixels
    double ry, rx;      // half extents, pixels
    double theta;       // rotation
};

bool inside(const ShapeSpec& s, double y, double x) {
    const double dy = y - s.cy, dx = x - s.cx;
    const double c = std::cos(s.theta), sn = std::sin(s.theta);
    const double u = c * dx + sn * dy;    // rotated frame
    const double v = -sn * dx + c * dy;
    if (s.ellipse) {
        return (u * u) / (s.rx * s.rx) + (v * v) / (s.ry * s.ry) <= 1.0;
    }
    return std::abs(u) <= s.rx && std::abs(v) <= s.ry;
}

}  // namespace

std::uint64_t SplitMix64::next() {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double SplitMix64::uniform01() {
    return static_cast<double>(next() >> 11) * 0x1.0p-53;
}

double SplitMix64::normal() {
    // Box-Muller; u1 kept away from zero.
    const double u1 = std::max(uniform01(), 1e-12);
    const double u2 = uniform01();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * kPi * u2);
}

std::int64_t SplitMix64::below(std::int64_t bound) {
    return static_cast<std::int64_t>(next() % static_cast<std::uint64_t>(bound));
}

double class_intensity(std::int64_t cls, std::int64_t num_classes) {
    return (static_cast<double>(cls) + 0.5) / static_cast<double>(num_classes);
}

std::vector<Sample> generate(const SynthSpec& spec) {
    if (spec.size < 32) {
        throw ConfigError("synth size must be >= 32, got " + std::to_string(spec.size));
    }
    if (spec.num_classes < 2) {
        throw ConfigError("synth num_classes must be >= 2, got " +
                          std::to_string(spec.num_classes));
    }
    if (spec.noise < 0.0 || spec.noise > 0.2) {
        throw ConfigError("synth noise must lie in [0, 0.2]");
    }
    if (spec.count < 0) throw ConfigError("synth count must be >= 0");
    // Each foreground shape occupies a meaningful fraction of the image; too
    // many classes cannot all stay visible on a small canvas.
    if (spec.num_classes > spec.size / 4) {
        throw ConfigError("synth num_classes too large for size " + std::to_string(spec.size));
    }

    const std::int64_t n = spec.size;
    std::vector<Sample> samples;
    samples.reserve(static_cast<std::size_t>(spec.count));
    for (std::int64_t idx = 0; idx < spec.count; ++idx) {
        for (std::int64_t attempt = 0;; ++attempt) {
            if (attempt >= 100) {
                throw ConfigError("synth could not place all foreground classes visibly");
            }
            SplitMix64 rng(mix(spec.seed, static_cast<std::uint64_t>(idx * 1000 + attempt)));
            Sample sample;
            sample.size = n;
            sample.label.assign(static_cast<std::size_t>(n * n), 0);

            std::vector<ShapeSpec> shapes;
            for (std::int64_t cls = 1; cls < spec.num_classes; ++cls) {
                ShapeSpec s;
                s.ellipse = rng.uniform01() < 0.5;
                s.cy = (0.2 + 0.6 * rng.uniform01()) * static_cast<double>(n);
                s.cx = (0.2 + 0.6 * rng.uniform01()) * static_cast<double>(n);
                s.ry = (0.10 + 0.18 * rng.uniform01()) * static_cast<double>(n);
                s.rx = (0.10 + 0.18 * rng.uniform01()) * static_cast<double>(n);
                s.theta = rng.uniform01() * kPi;
                shapes.push_back(s);
            }
            for (std::int64_t y = 0; y < n; ++y) {
                for (std::int64_t x = 0; x < n; ++x) {
                    for (std::int64_t cls = static_cast<std::int64_t>(shapes.size()); cls >= 1;
                         --cls) {
                        if (inside(shapes[static_cast<std::size_t>(cls - 1)],
                                   static_cast<double>(y), static_cast<double>(x))) {
                            sample.label[y * n + x] = cls;
                            break;  // later classes are drawn on top
                        }
                    }
                }
            }
            std::vector<std::int64_t> counts(static_cast<std::size_t>(spec.num_classes), 0);
            for (auto v : sample.label) ++counts[static_cast<std::size_t>(v)];
            bool all_present = true;
            for (std::int64_t cls = 1; cls < spec.num_classes; ++cls) {
                all_present = all_present && counts[static_cast<std::size_t>(cls)] > 0;
            }
            if (!all_present) continue;

            sample.image.resize(static_cast<std::size_t>(n * n));
            for (std::int64_t i = 0; i < n * n; ++i) {
                double v = class_intensity(sample.label[i], spec.num_classes);
                if (spec.noise > 0.0) v += spec.noise * rng.normal();
                sample.image[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
            samples.push_back(std::move(sample));
            break;
        }
    }
    return samples;
}

void flip_horizontal(Sample& sample) {
    const std::int64_t n = sample.size;
    for (std::int64_t y = 0; y < n; ++y) {
        for (std::int64_t x = 0; x < n / 2; ++x) {
            std::swap(sample.image[y * n + x], sample.image[y * n + (n - 1 - x)]);
            std::swap(sample.label[y * n + x], sample.label[y * n + (n - 1 - x)]);
        }
    }
}

void rotate90(Sample& sample, int quarter_turns) {
    const std::int64_t n = sample.size;
    quarter_turns = ((quarter_turns % 4) + 4) % 4;
    for (int t = 0; t < quarter_turns; ++t) {
        std::vector<float> img(sample.image.size());
        std::vector<std::int64_t> lab(sample.label.size());
        for (std::int64_t y = 0; y < n; ++y) {
            for (std::int64_t x = 0; x < n; ++x) {
                // (y, x) -> (x, n-1-y)
                img[x * n + (n - 1 - y)] = sample.image[y * n + x];
                lab[x * n + (n - 1 - y)] = sample.label[y * n + x];
            }
        }
        sample.image = std::move(img);
        sample.label = std::move(lab);
    }
}

void random_augment(Sample& sample, SplitMix64& rng) {
    if (rng.uniform01() < 0.5) flip_horizontal(sample);
    rotate90(sample, static_cast<int>(rng.below(4)));
}

}  // namespace mtunet::synth
