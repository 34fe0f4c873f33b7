#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

#include "ecovla/errors.hpp"
#include "ecovla/matrix.hpp"

namespace ecovla {

// One phase of a synthetic streaming environment. jump = true regenerates
// the base frame from base_seed at entry (a scene change); jump = false
// keeps the previous base and only changes the drift level.
struct Regime {
    std::size_t start_frame = 0;
    std::uint64_t base_seed = 0;
    float drift_sigma = 0.0f;
    bool jump = true;
};

struct EpisodeSpec {
    std::size_t frames = 512;
    std::size_t obs_rows = 32;  // visual tokens
    std::size_t obs_cols = 64;  // visual feature width
    std::vector<Regime> regimes;
    std::uint64_t seed = 1;

    void validate() const {
        if (obs_rows == 0 || obs_cols == 0) throw ConfigError("episode: empty observation shape");
        if (regimes.empty()) throw ConfigError("episode: at least one regime required");
        if (regimes.front().start_frame != 0) throw ConfigError("episode: first regime must start at 0");
        for (std::size_t i = 0; i < regimes.size(); ++i) {
            if (!(regimes[i].drift_sigma >= 0.0f)) throw ConfigError("episode: drift_sigma < 0");
            if (i > 0 && regimes[i].start_frame <= regimes[i - 1].start_frame)
                throw ConfigError("episode: regimes must be ordered by start_frame");
        }
    }
};

// Deterministic frame stream: within a regime, frame = base + fresh
// Gaussian(0, drift_sigma) noise per element; a jump regime swaps in a new
// base discontinuously.
inline std::vector<Matrix> generate_episode(const EpisodeSpec& spec) {
    spec.validate();
    std::mt19937 noise_rng(static_cast<std::uint32_t>(spec.seed));
    std::vector<Matrix> frames;
    frames.reserve(spec.frames);

    Matrix base(spec.obs_rows, spec.obs_cols, Layout::RowMajor);
    auto rebase = [&](std::uint64_t base_seed) {
        std::mt19937 rng(static_cast<std::uint32_t>(base_seed));
        std::normal_distribution<float> unit(0.0f, 1.0f);
        for (std::size_t i = 0; i < base.size(); ++i) base.data()[i] = unit(rng);
    };

    std::size_t regime_idx = 0;
    bool base_ready = false;
    for (std::size_t t = 0; t < spec.frames; ++t) {
        while (regime_idx + 1 < spec.regimes.size() &&
               spec.regimes[regime_idx + 1].start_frame == t)
            ++regime_idx;
        const Regime& regime = spec.regimes[regime_idx];
        if (!base_ready || (regime.jump && regime.start_frame == t)) {
            rebase(regime.base_seed);
            base_ready = true;
        }
        Matrix frame = base;
        if (regime.drift_sigma > 0.0f) {
            std::normal_distribution<float> noise(0.0f, regime.drift_sigma);
            for (std::size_t i = 0; i < frame.size(); ++i) frame.data()[i] += noise(noise_rng);
        }
        frames.push_back(std::move(frame));
    }
    return frames;
}

// Calibration set: the first k frames of an independent seeded episode drawn
// from the evaluation episode's first regime. The RNG stream is disjoint
// from the evaluation stream.
inline std::vector<Matrix> build_calibration(const EpisodeSpec& spec, std::size_t k) {
    if (k < 1) throw ConfigError("build_calibration: k must be >= 1");
    spec.validate();
    EpisodeSpec calib;
    calib.frames = k;
    calib.obs_rows = spec.obs_rows;
    calib.obs_cols = spec.obs_cols;
    calib.regimes = {spec.regimes.front()};
    calib.regimes.front().start_frame = 0;
    calib.seed = spec.seed ^ 0x9E3779B97F4A7C15ull;
    return generate_episode(calib);
}

}  // namespace ecovla
