// SPDX-License-Identifier: Apache-2.0
//
// Schedule log validation and serialization.

#include "chunktrain/tiered_memory.hpp"

#include <algorithm>
#include <map>
#include <ostream>
#include <sstream>

#include <json.hpp>

namespace chunktrain {

const char* to_string(EventKind k) {
    switch (k) {
        case EventKind::fetch_issued: return "fetch_issued";
        case EventKind::fetch_done: return "fetch_done";
        case EventKind::evict: return "evict";
        case EventKind::compute_begin: return "compute_begin";
        case EventKind::compute_end: return "compute_end";
        case EventKind::access: return "access";
    }
    return "?";
}

void dump_schedule_jsonl(const ScheduleLog& log, std::ostream& os) {
    {
        nlohmann::json header;
        header["bandwidth_bytes_per_s"] = log.bandwidth_bytes_per_s;
        os << header.dump() << "\n";
    }
    for (const auto& e : log.events) {
        nlohmann::json j;
        j["event"] = to_string(e.kind);
        j["t"] = e.t;
        j["layer"] = e.layer;
        if (e.page >= 0) j["page"] = e.page;
        if (e.chunk >= 0) j["chunk"] = e.chunk;
        if (e.bytes > 0) j["bytes"] = e.bytes;
        j["phase"] = e.phase == Phase::forward ? "forward" : "backward";
        os << j.dump() << "\n";
    }
}

ValidationReport validate_schedule(const ScheduleLog& log) {
    ValidationReport rep;
    auto violate = [&](const std::string& msg) { rep.violations.push_back(msg); };

    // Residency intervals per (layer, page): opened by fetch_done, closed by
    // evict. Every access must land inside an open interval.
    struct PageTrack {
        bool resident = false;
        double since = 0;
    };
    std::map<std::pair<int, int32_t>, PageTrack> track;

    double last_compute_t = -1;
    double prev_compute_end = 0;
    bool in_compute = false;
    double compute_begin_t = 0;
    double busy_transfer_s = 0;

    for (const auto& e : log.events) {
        const auto key = std::make_pair(e.layer, e.page);
        switch (e.kind) {
            case EventKind::fetch_issued:
                break;
            case EventKind::fetch_done: {
                track[key].resident = true;
                track[key].since = e.t;
                rep.transfer_bytes += e.bytes;
                if (e.phase == Phase::forward) rep.h2d_bytes_forward += e.bytes;
                else rep.h2d_bytes_backward += e.bytes;
                if (log.bandwidth_bytes_per_s > 0) {
                    busy_transfer_s += static_cast<double>(e.bytes) / log.bandwidth_bytes_per_s;
                }
                break;
            }
            case EventKind::evict: {
                auto it = track.find(key);
                if (it == track.end() || !it->second.resident) {
                    std::ostringstream os;
                    os << "evict of non-resident page layer=" << e.layer << " page=" << e.page
                       << " t=" << e.t;
                    violate(os.str());
                } else {
                    it->second.resident = false;
                }
                rep.transfer_bytes += e.bytes;
                rep.d2h_bytes += e.bytes;
                if (e.bytes > 0 && log.bandwidth_bytes_per_s > 0) {
                    busy_transfer_s += static_cast<double>(e.bytes) / log.bandwidth_bytes_per_s;
                }
                break;
            }
            case EventKind::access: {
                auto it = track.find(key);
                if (it == track.end() || !it->second.resident || it->second.since > e.t) {
                    std::ostringstream os;
                    os << "access before fetch_done (or after evict): layer=" << e.layer
                       << " page=" << e.page << " t=" << e.t;
                    violate(os.str());
                }
                break;
            }
            case EventKind::compute_begin: {
                if (e.t < last_compute_t) {
                    violate("compute stream timestamps decrease");
                }
                last_compute_t = e.t;
                if (in_compute) violate("nested compute_begin");
                in_compute = true;
                compute_begin_t = e.t;
                rep.stall_seconds += std::max(0.0, e.t - prev_compute_end);
                break;
            }
            case EventKind::compute_end: {
                if (!in_compute) violate("compute_end without begin");
                if (e.t < compute_begin_t) violate("compute segment ends before it begins");
                in_compute = false;
                prev_compute_end = e.t;
                last_compute_t = e.t;
                break;
            }
        }
    }
    if (in_compute) violate("unterminated compute segment");

    if (busy_transfer_s > 0) {
        rep.overlap_fraction =
            std::clamp(1.0 - rep.stall_seconds / busy_transfer_s, 0.0, 1.0);
    } else {
        rep.overlap_fraction = 1.0;
    }
    return rep;
}

}  // namespace chunktrain
