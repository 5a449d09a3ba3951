#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace respeak {

// T x K grid of codec tokens, one row per frame, one column per codebook.
struct CodeGrid {
    int64_t frames = 0;
    int64_t num_codebooks = 0;
    std::vector<int32_t> codes; // row-major [frames x num_codebooks]

    CodeGrid() = default;
    CodeGrid(int64_t t, int64_t k) : frames(t), num_codebooks(k), codes(static_cast<size_t>(t * k), 0) {}

    int32_t& at(int64_t t, int64_t k) { return codes[static_cast<size_t>(t * num_codebooks + k)]; }
    int32_t at(int64_t t, int64_t k) const { return codes[static_cast<size_t>(t * num_codebooks + k)]; }

    void check_range(int64_t codebook_size) const {
        for (int32_t c : codes)
            if (c < 0 || c >= codebook_size)
                throw std::out_of_range("CodeGrid: code " + std::to_string(c) + " outside [0," +
                                        std::to_string(codebook_size) + ")");
    }

    bool operator==(const CodeGrid& o) const {
        return frames == o.frames && num_codebooks == o.num_codebooks && codes == o.codes;
    }
};

} // namespace respeak
