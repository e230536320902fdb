// SPDX-License-Identifier: Apache-2.0
//
// Simulated two-tier (device/host) page residency with asynchronous
// transfers on a simulated clock.
//
// The engine never touches tensor values: it moves residency tags, advances
// clocks, and logs events. Training results are therefore identical with the
// engine on or off; the schedule log is the artifact under test. Time comes
// from a cost model (seconds per layer, affine in attended tokens) and a link
// bandwidth, so every schedule is deterministic. H2D and D2H run on separate
// channels (two DMA engines); the compute stream blocks only in wait().
#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "chunktrain/paged_kv.hpp"

namespace chunktrain {

enum class EventKind : uint8_t {
    fetch_issued,
    fetch_done,
    evict,
    compute_begin,
    compute_end,
    access,
};

enum class Phase : uint8_t { forward, backward };

struct ScheduleEvent {
    EventKind kind;
    double t = 0;
    int layer = -1;
    int32_t page = -1;
    int chunk = -1;
    uint64_t bytes = 0;
    Phase phase = Phase::forward;
};

struct ScheduleLog {
    double bandwidth_bytes_per_s = 0;
    std::vector<ScheduleEvent> events;
};

const char* to_string(EventKind k);
void dump_schedule_jsonl(const ScheduleLog& log, std::ostream& os);

// Per-layer compute time = fixed_s + s_per_attended_token * attended tokens.
// The fixed part is split into sub-phases so the sparse schedule has a
// q-projection point to issue its fetch from and a kv-projection window to
// hide it in.
struct ComputeCostModel {
    double fixed_s_per_layer = 1e-3;
    double s_per_attended_token = 1e-6;

    static constexpr double kQFrac = 0.25;     // q projection
    static constexpr double kKvFrac = 0.25;    // k/v projection
    static constexpr double kPostFrac = 0.50;  // output projection + MLP

    double q_time() const { return fixed_s_per_layer * kQFrac; }
    double kv_time() const { return fixed_s_per_layer * kKvFrac; }
    double post_time() const { return fixed_s_per_layer * kPostFrac; }
    double attn_time(int64_t attended_tokens) const {
        return s_per_attended_token * static_cast<double>(attended_tokens);
    }
};

struct TierConfig {
    int64_t device_capacity_pages = -1;  // -1 = unlimited
    double bandwidth_bytes_per_s = 16e9;
    ComputeCostModel compute;
};

struct TransferHandle {
    int64_t id = -1;
};

struct ValidationReport {
    std::vector<std::string> violations;
    double stall_seconds = 0;
    uint64_t transfer_bytes = 0;  // everything that moved, both directions
    uint64_t h2d_bytes_forward = 0;
    uint64_t h2d_bytes_backward = 0;
    uint64_t d2h_bytes = 0;
    double overlap_fraction = 1.0;
};

// Replays a complete log: asserts residency-before-use and per-stream
// timestamp order, recomputes stall from gaps in the compute stream, and
// derives the overlap fraction of transfer busy time.
ValidationReport validate_schedule(const ScheduleLog& log);

template <class Real>
class TieredEngine {
public:
    TieredEngine(PagedCache<Real>& cache, const TierConfig& cfg) : cache_(&cache), cfg_(cfg) {
        if (cfg_.bandwidth_bytes_per_s <= 0) {
            throw ConfigError("tiered_memory: bandwidth must be positive");
        }
        log_.bandwidth_bytes_per_s = cfg_.bandwidth_bytes_per_s;
        cache_->set_residency_enforced(true);
        sync_();
    }

    ~TieredEngine() {
        if (cache_ != nullptr) cache_->set_residency_enforced(false);
    }

    TieredEngine(const TieredEngine&) = delete;
    TieredEngine& operator=(const TieredEngine&) = delete;

    void begin_phase(Phase p) { phase_ = p; }
    Phase phase() const { return phase_; }
    double now() const { return clock_; }
    double stall_seconds() const { return stall_s_; }
    uint64_t h2d_bytes(Phase p) const {
        return p == Phase::forward ? h2d_fwd_bytes_ : h2d_bwd_bytes_;
    }
    uint64_t d2h_bytes() const { return d2h_bytes_; }
    const ScheduleLog& log() const { return log_; }

    // Pages created by append are born device-resident with no host copy.
    // Logged as zero-byte fetch_done so the residency intervals are complete.
    void on_pages_appended(int layer, const SlotRange& range) {
        sync_();
        const int first = static_cast<int>(range.begin / cache_->page_size());
        const int last = static_cast<int>((range.end - 1) / cache_->page_size());
        for (int p = first; p <= last; ++p) {
            PageState& ps = state_(layer, p);
            ps.kv_host_valid = false;
            ps.reserved = true;
            ps.lru = ++lru_counter_;
            push_(EventKind::fetch_done, clock_, layer, p, 0);
        }
        enforce_capacity_(0);
    }

    // Grad pages were just written on device; their host copy (if any) is stale.
    void on_grads_scattered(int layer, std::span<const int32_t> ids) {
        for (int32_t p : ids) state_(layer, p).grad_host_valid = false;
    }

    // Appends happen mid-step in the forward pass; prefetch admission leaves
    // room for them so a pinned prefetch can never wedge a mandatory append.
    void set_prefetch_headroom_pages(int64_t pages) { prefetch_headroom_ = pages; }

    // Starts an async H2D transfer for the non-resident subset of ids.
    // Already-resident pages cost nothing. In-flight pages do not occupy the
    // device until wait() lands them, so issuing never evicts anything.
    //
    // A use-time (non best-effort) fetch claims its already-resident pages so
    // they cannot be evicted from under the step. best_effort marks a
    // prefetch: all-or-nothing — when transfers plus pins plus headroom would
    // not fit even after evicting every unreserved page, the prefetch is
    // skipped and the use-time fetch pays instead; otherwise resident pages
    // are pinned so the prefetched set survives until its step runs.
    TransferHandle fetch_async(int layer, std::span<const int32_t> ids, int chunk = -1,
                               bool best_effort = false) {
        sync_();
        Transfer tr;
        tr.layer = layer;
        std::vector<int32_t> to_transfer;
        std::vector<int32_t> to_pin;
        double ready = clock_;
        for (int32_t p : ids) {
            if (p < 0 || p >= cache_->n_pages(layer)) {
                throw StateError("fetch_pages: unknown page " + std::to_string(p));
            }
            PageState& ps = state_(layer, p);
            if (cache_->tier(layer, p) == Tier::device) {
                if (best_effort) {
                    if (!ps.reserved && !ps.pinned) to_pin.push_back(p);
                } else {
                    ps.reserved = true;
                    ps.pinned = false;
                    ps.lru = ++lru_counter_;
                }
                continue;
            }
            if (ps.in_flight_done > 0) {
                // Already being fetched by an earlier handle; ride along.
                tr.pages.push_back(p);
                ready = std::max(ready, ps.in_flight_done);
                continue;
            }
            to_transfer.push_back(p);
        }
        if (best_effort) {
            const int64_t headroom = phase_ == Phase::forward ? prefetch_headroom_ : 0;
            const int64_t demand = static_cast<int64_t>(to_transfer.size()) +
                                   static_cast<int64_t>(to_pin.size()) + headroom;
            if (!fits_after_eviction_(demand)) {
                to_transfer.clear();
            } else {
                for (int32_t p : to_pin) {
                    PageState& ps = state_(layer, p);
                    ps.pinned = true;
                    ps.lru = ++lru_counter_;
                }
            }
        }
        for (int32_t p : to_transfer) {
            PageState& ps = state_(layer, p);
            const uint64_t bytes = page_transfer_bytes_(layer, p);
            push_(EventKind::fetch_issued, clock_, layer, p, 0, chunk);
            // The fetch may not start before a pending writeback of the same
            // page has drained.
            const double start = std::max({h2d_free_, clock_, ps.writeback_done});
            const double done = start + static_cast<double>(bytes) / cfg_.bandwidth_bytes_per_s;
            h2d_free_ = done;
            ps.in_flight_done = done;
            if (phase_ == Phase::forward) h2d_fwd_bytes_ += bytes;
            else h2d_bwd_bytes_ += bytes;
            push_(EventKind::fetch_done, done, layer, p, bytes, chunk);
            ready = std::max(ready, done);
            tr.pages.push_back(p);
        }
        transfers_.push_back(std::move(tr));
        transfers_.back().ready = ready;
        TransferHandle h;
        h.id = static_cast<int64_t>(transfers_.size()) - 1;
        return h;
    }

    // Blocks the compute clock until the transfer lands (the blocked time is
    // the stall), then flips the fetched pages to device residency, claiming
    // them and evicting unreserved pages if over capacity.
    void wait(const TransferHandle& h) {
        if (h.id < 0 || h.id >= static_cast<int64_t>(transfers_.size())) {
            throw StateError("wait: handle was never issued");
        }
        Transfer& tr = transfers_[static_cast<size_t>(h.id)];
        if (tr.ready > clock_) {
            stall_s_ += tr.ready - clock_;
            clock_ = tr.ready;
        }
        for (int32_t p : tr.pages) {
            PageState& ps = state_(tr.layer, p);
            if (cache_->tier(tr.layer, p) == Tier::device) continue;  // landed via another handle
            enforce_capacity_(1);
            cache_->set_tier(tr.layer, p, Tier::device);
            ps.in_flight_done = 0;
            ps.reserved = true;
            ps.pinned = false;
            ps.lru = ++lru_counter_;
        }
        tr.pages.clear();
    }

    void record_access(int layer, std::span<const int32_t> ids, int chunk = -1) {
        for (int32_t p : ids) {
            if (cache_->tier(layer, p) != Tier::device) {
                throw ResidencyError("access to non-resident page " + std::to_string(p));
            }
            state_(layer, p).lru = ++lru_counter_;
            push_(EventKind::access, clock_, layer, p, 0, chunk);
        }
    }

    void advance_compute(double seconds, int chunk, int layer) {
        push_(EventKind::compute_begin, clock_, layer, -1, 0, chunk);
        clock_ += seconds;
        push_(EventKind::compute_end, clock_, layer, -1, 0, chunk);
    }

    // After a layer's compute the pages it used become evictable; LRU pages
    // are spilled until the device is within capacity.
    void end_layer_use(int layer, std::span<const int32_t> ids) {
        for (int32_t p : ids) {
            state_(layer, p).reserved = false;
            state_(layer, p).pinned = false;
        }
        enforce_capacity_(0);
    }

    void release_all_reservations() {
        for (auto& layer : pages_) {
            for (auto& ps : layer) {
                ps.reserved = false;
                ps.pinned = false;
            }
        }
        enforce_capacity_(0);
    }

private:
    struct PageState {
        bool kv_host_valid = true;    // host copy of K/V up to date
        bool grad_host_valid = true;  // host copy of grad pages up to date
        bool reserved = false;        // claimed by the current step; never evictable
        bool pinned = false;          // held by a prefetch; evicted only under pressure
        double in_flight_done = 0;    // h2d completion of a pending fetch, 0 if none
        double writeback_done = 0;    // d2h completion the next fetch must wait for
        uint64_t lru = 0;
    };

    struct Transfer {
        int layer = 0;
        std::vector<int32_t> pages;
        double ready = 0;
    };

    // Appends may have created pages the engine has not seen yet.
    void sync_() {
        pages_.resize(static_cast<size_t>(cache_->n_layers()));
        for (int l = 0; l < cache_->n_layers(); ++l) {
            pages_[static_cast<size_t>(l)].resize(static_cast<size_t>(cache_->n_pages(l)));
        }
    }

    PageState& state_(int layer, int page) {
        sync_();
        return pages_.at(static_cast<size_t>(layer)).at(static_cast<size_t>(page));
    }

    uint64_t page_transfer_bytes_(int layer, int page) const {
        uint64_t b = cache_->page_kv_bytes();
        if (cache_->grads_allocated(layer, page)) b += cache_->page_kv_bytes();
        return b;
    }

    int64_t device_page_count_() const {
        int64_t n = 0;
        for (int l = 0; l < cache_->n_layers(); ++l) {
            for (int p = 0; p < cache_->n_pages(l); ++p) {
                if (cache_->tier(l, p) == Tier::device) ++n;
            }
        }
        return n;
    }

    bool fits_after_eviction_(int64_t incoming) {
        if (cfg_.device_capacity_pages < 0) return true;
        sync_();
        int64_t evictable = 0;  // unreserved pages, pinned or not (pins are revocable)
        for (int l = 0; l < cache_->n_layers(); ++l) {
            for (int p = 0; p < cache_->n_pages(l); ++p) {
                if (cache_->tier(l, p) == Tier::device &&
                    !pages_[static_cast<size_t>(l)][static_cast<size_t>(p)].reserved) {
                    ++evictable;
                }
            }
        }
        return device_page_count_() - evictable + incoming <= cfg_.device_capacity_pages;
    }

    void enforce_capacity_(int64_t incoming) {
        if (cfg_.device_capacity_pages < 0) return;
        sync_();
        while (device_page_count_() + incoming > cfg_.device_capacity_pages) {
            int best_l = -1, best_p = -1;
            bool best_pinned = true;
            uint64_t best_lru = std::numeric_limits<uint64_t>::max();
            for (int l = 0; l < cache_->n_layers(); ++l) {
                for (int p = 0; p < cache_->n_pages(l); ++p) {
                    const PageState& ps = pages_[static_cast<size_t>(l)][static_cast<size_t>(p)];
                    if (cache_->tier(l, p) != Tier::device || ps.reserved) continue;
                    // Unpinned pages go first; a pinned page is spilled (its
                    // prefetch revoked) only when nothing else is left.
                    if (std::make_pair(ps.pinned, ps.lru) <
                        std::make_pair(best_pinned, best_lru)) {
                        best_pinned = ps.pinned;
                        best_lru = ps.lru;
                        best_l = l;
                        best_p = p;
                    }
                }
            }
            if (best_l < 0) {
                throw ConfigError(
                    "tiered_memory: device capacity smaller than the working set "
                    "(capacity " +
                    std::to_string(cfg_.device_capacity_pages) + " pages)");
            }
            pages_[static_cast<size_t>(best_l)][static_cast<size_t>(best_p)].pinned = false;
            evict_(best_l, best_p);
        }
    }

    void evict_(int layer, int page) {
        PageState& ps = state_(layer, page);
        uint64_t bytes = 0;
        if (!ps.kv_host_valid) bytes += cache_->page_kv_bytes();
        if (cache_->grads_allocated(layer, page) && !ps.grad_host_valid) {
            bytes += cache_->page_kv_bytes();
        }
        if (bytes > 0) {
            const double start = std::max(d2h_free_, clock_);
            ps.writeback_done = start + static_cast<double>(bytes) / cfg_.bandwidth_bytes_per_s;
            d2h_free_ = ps.writeback_done;
            d2h_bytes_ += bytes;
            ps.kv_host_valid = true;
            ps.grad_host_valid = true;
        }
        cache_->set_tier(layer, page, Tier::host);
        push_(EventKind::evict, clock_, layer, page, bytes);
    }

    void push_(EventKind k, double t, int layer, int32_t page, uint64_t bytes, int chunk = -1) {
        ScheduleEvent e;
        e.kind = k;
        e.t = t;
        e.layer = layer;
        e.page = page;
        e.chunk = chunk;
        e.bytes = bytes;
        e.phase = phase_;
        log_.events.push_back(e);
    }

    PagedCache<Real>* cache_;
    TierConfig cfg_;
    Phase phase_ = Phase::forward;
    double clock_ = 0;
    double h2d_free_ = 0;
    double d2h_free_ = 0;
    double stall_s_ = 0;
    uint64_t h2d_fwd_bytes_ = 0;
    uint64_t h2d_bwd_bytes_ = 0;
    uint64_t d2h_bytes_ = 0;
    uint64_t lru_counter_ = 0;
    int64_t prefetch_headroom_ = 0;
    std::vector<std::vector<PageState>> pages_;
    std::vector<Transfer> transfers_;
    ScheduleLog log_;
};

}  // namespace chunktrain
