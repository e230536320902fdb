// SPDX-License-Identifier: Apache-2.0
//
// Byte accounting for saved-for-backward activations. Every activation store
// registers its footprint here, so peak_bytes is the instrumented measure of
// live tape memory used by the constant-memory claims and their tests.
#pragma once

#include <cstdint>

namespace chunktrain {

struct TapeStats {
    int64_t live_bytes = 0;
    int64_t peak_bytes = 0;

    void on_alloc(int64_t bytes) {
        live_bytes += bytes;
        if (live_bytes > peak_bytes) peak_bytes = live_bytes;
    }

    void on_free(int64_t bytes) { live_bytes -= bytes; }

    void reset() {
        live_bytes = 0;
        peak_bytes = 0;
    }
};

}  // namespace chunktrain
