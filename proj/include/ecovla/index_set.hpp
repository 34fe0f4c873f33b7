#pragma once

#include <cstddef>
#include <numeric>
#include <vector>

#include "ecovla/errors.hpp"

namespace ecovla {

// Strictly increasing set of retained channel indices over a full dimension.
// The structured form of a binary channel mask.
struct ChannelIndexSet {
    std::vector<std::size_t> retained;
    std::size_t full_dim = 0;

    ChannelIndexSet() = default;
    ChannelIndexSet(std::vector<std::size_t> idx, std::size_t dim)
        : retained(std::move(idx)), full_dim(dim) {
        validate();
    }

    static ChannelIndexSet all(std::size_t dim) {
        ChannelIndexSet s;
        s.retained.resize(dim);
        std::iota(s.retained.begin(), s.retained.end(), std::size_t{0});
        s.full_dim = dim;
        return s;
    }

    std::size_t count() const { return retained.size(); }
    bool is_full() const { return retained.size() == full_dim; }

    void validate() const {
        std::size_t prev = 0;
        bool first = true;
        for (std::size_t idx : retained) {
            if (idx >= full_dim) throw MaskError("channel index out of range");
            if (!first && idx <= prev) throw MaskError("channel indices must be strictly increasing");
            prev = idx;
            first = false;
        }
    }
};

}  // namespace ecovla
