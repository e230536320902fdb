// SPDX-License-Identifier: Apache-2.0
//
// Contiguous-append baseline simulation for the membench comparison.

#include "chunktrain/paged_kv.hpp"

#include <algorithm>

#include <json.hpp>

namespace chunktrain {

std::string memory_report_to_json(const MemoryReport& rep) {
    nlohmann::json j;
    j["device_bytes"] = rep.device_bytes;
    j["host_bytes"] = rep.host_bytes;
    j["grad_bytes"] = rep.grad_bytes;
    j["pages"] = rep.pages;
    j["reallocs"] = rep.reallocs;
    j["copied_bytes"] = rep.copied_bytes;
    return j.dump();
}

ContiguousReport simulate_contiguous_appends(int64_t n_appends, int64_t tokens_per_append,
                                             uint64_t bytes_per_token, GrowthPolicy policy) {
    ContiguousReport rep;
    uint64_t capacity = 0;  // bytes
    uint64_t stored = 0;    // bytes
    const uint64_t append_bytes = static_cast<uint64_t>(tokens_per_append) * bytes_per_token;
    for (int64_t i = 0; i < n_appends; ++i) {
        const uint64_t needed = stored + append_bytes;
        if (needed > capacity) {
            uint64_t new_cap = needed;
            if (policy == GrowthPolicy::doubling) {
                new_cap = std::max<uint64_t>(capacity * 2, needed);
            }
            // The copy happens before the new tokens are written: the old and
            // new buffers are both live while `stored` bytes move across.
            const uint64_t transient = capacity + new_cap;
            if (capacity > 0) {
                rep.reallocs += 1;
                rep.copied_bytes += stored;
                rep.events.push_back(ReallocEvent{stored, capacity, new_cap, transient});
            }
            rep.peak_bytes = std::max(rep.peak_bytes, transient);
            capacity = new_cap;
        }
        stored = needed;
        rep.peak_bytes = std::max(rep.peak_bytes, capacity);
    }
    rep.final_bytes = stored;
    return rep;
}

}  // namespace chunktrain
