#pragma once

// Synthetic segmentation data: per-class ellipses/rectangles with distinct
// base intensities plus Gaussian noise, exact label maps, and deterministic
// per-sample RNG streams.

#include <cstdint>
#include <string>
#include <vector>

namespace mtunet::synth {

struct SynthSpec {
    std::uint64_t seed = 1234;
    std::int64_t count = 16;
    std::int64_t size = 64;
    std::int64_t num_classes = 3;  // background + foreground classes
    double noise = 0.05;           // image noise sigma, in [0, 0.2]
};

struct Sample {
    std::int64_t size = 0;
    std::vector<float> image;         // [1, size, size], values in [0,1]
    std::vector<std::int64_t> label;  // [size, size], values in [0, num_classes)
};

// Base image intensity for a class: evenly spaced in (0,1).
double class_intensity(std::int64_t cls, std::int64_t num_classes);

// Deterministic under spec.seed; every foreground class is guaranteed at
// least one pixel (samples violating this are regenerated).
std::vector<Sample> generate(const SynthSpec& spec);

// Joint image/label geometric transforms (augmentation hooks).
void flip_horizontal(Sample& sample);
void rotate90(Sample& sample, int quarter_turns);

// Random flip + random 90-degree rotation, driven by the given stream.
struct SplitMix64 {
    std::uint64_t state;
    explicit SplitMix64(std::uint64_t seed) : state(seed) {}
    std::uint64_t next();
    double uniform01();          // [0, 1)
    double normal();             // standard normal, Box-Muller
    std::int64_t below(std::int64_t bound);
};

void random_augment(Sample& sample, SplitMix64& rng);

}  // namespace mtunet::synth
