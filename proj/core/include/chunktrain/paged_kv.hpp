// SPDX-License-Identifier: Apache-2.0
//
// Paged storage for the per-layer KV cache and its gradient mirror.
//
// Pages are fixed-size blocks of P token slots allocated from a free-list
// arena; appending never moves or copies existing page data, and gradient
// pages are materialized lazily on first scatter. Cache storage is invisible
// to the activation tape: attention reads it through gather copies and writes
// gradients back through scatter_add, so no autodiff node ever references a
// page.
#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "chunktrain/config.hpp"
#include "chunktrain/tensor.hpp"

namespace chunktrain {

enum class Tier : uint8_t { device, host };

struct MemoryReport {
    uint64_t device_bytes = 0;  // K+V page bytes currently tagged device
    uint64_t host_bytes = 0;    // K+V page bytes currently tagged host
    uint64_t grad_bytes = 0;    // allocated gradient page bytes (all tiers)
    int64_t pages = 0;          // logical pages summed over layers
    int64_t reallocs = 0;       // always 0 in paged mode
    uint64_t copied_bytes = 0;  // always 0 in paged mode
};

std::string memory_report_to_json(const MemoryReport& rep);

struct SlotRange {
    int64_t begin = 0;
    int64_t end = 0;  // exclusive
};

template <class Real>
class PagedCache {
public:
    explicit PagedCache(const ModelConfig& cfg)
        : page_size_(cfg.page_size),
          kv_heads_(cfg.n_kv_heads),
          head_dim_(cfg.head_dim),
          layers_(static_cast<size_t>(cfg.n_layers)) {
        cfg.validate();
    }

    int page_size() const { return page_size_; }
    int n_layers() const { return static_cast<int>(layers_.size()); }
    int64_t page_elems() const {
        return static_cast<int64_t>(page_size_) * kv_heads_ * head_dim_;
    }
    // One K or V page, bytes.
    uint64_t page_buffer_bytes() const { return static_cast<uint64_t>(page_elems()) * sizeof(Real); }
    // K+V together; the transfer unit of the tiered engine.
    uint64_t page_kv_bytes() const { return 2 * page_buffer_bytes(); }

    int64_t filled(int layer) const { return at_(layer).filled; }
    int n_pages(int layer) const { return static_cast<int>(at_(layer).pages.size()); }

    // Pages wholly produced by already-completed chunks, i.e. the candidate
    // set for retrieval when `filled` tokens precede the current chunk.
    static int full_pages_before(int64_t tokens, int page_size) {
        return static_cast<int>(tokens / page_size);
    }

    // Writes `rows` new token slots into tail-page free space, allocating
    // fresh pages from the free list as needed. K and V are [rows x kvh x hd].
    SlotRange append_chunk(int layer, const Tensor<Real>& k, const Tensor<Real>& v) {
        LayerState& st = at_(layer);
        if (k.rank() != 3 || k.dim(1) != kv_heads_ || k.dim(2) != head_dim_ || !k.same_shape(v)) {
            throw ShapeError("append_chunk: expected [rows x kvh x hd] K/V of equal shape");
        }
        const int64_t rows = k.dim(0);
        const int64_t row_elems = static_cast<int64_t>(kv_heads_) * head_dim_;
        const SlotRange range{st.filled, st.filled + rows};
        for (int64_t r = 0; r < rows; ++r) {
            const int64_t slot = st.filled + r;
            const int page = static_cast<int>(slot / page_size_);
            const int off = static_cast<int>(slot % page_size_);
            if (page == static_cast<int>(st.pages.size())) {
                PageEntry e;
                e.k_phys = alloc_page_();
                e.v_phys = alloc_page_();
                st.pages.push_back(e);
                st.kavg_sum.resize(st.pages.size() * static_cast<size_t>(row_elems), Real(0));
                st.kavg_count.push_back(0);
            }
            PageEntry& e = st.pages[static_cast<size_t>(page)];
            Real* kd = arena_[static_cast<size_t>(e.k_phys)].get() + off * row_elems;
            Real* vd = arena_[static_cast<size_t>(e.v_phys)].get() + off * row_elems;
            const Real* ks = k.ptr() + r * row_elems;
            const Real* vs = v.ptr() + r * row_elems;
            Real* sum = st.kavg_sum.data() + static_cast<size_t>(page) * row_elems;
            for (int64_t j = 0; j < row_elems; ++j) {
                kd[j] = ks[j];
                vd[j] = vs[j];
                sum[j] += ks[j];
            }
            st.kavg_count[static_cast<size_t>(page)] += 1;
        }
        st.filled += rows;
        return range;
    }

    struct Gathered {
        Tensor<Real> k;              // [n_ids*P x kvh x hd]
        Tensor<Real> v;
        std::vector<uint8_t> valid;  // one flag per slot
    };

    // Contiguous copies in page_ids order; unfilled tail slots are masked out
    // and zero-filled. Requires device residency when enforcement is on.
    Gathered gather_pages(int layer, std::span<const int32_t> page_ids) const {
        const LayerState& st = at_(layer);
        check_resident_(layer, page_ids, "gather_pages");
        return gather_impl_(st, page_ids, /*grads=*/false);
    }

    // Reads gradient pages; pages without allocated gradients come back as
    // zeros (missing grad pages mean no gradient has flowed yet).
    Gathered gather_grad_pages(int layer, std::span<const int32_t> page_ids) const {
        const LayerState& st = at_(layer);
        check_resident_(layer, page_ids, "gather_grad_pages");
        return gather_impl_(st, page_ids, /*grads=*/true);
    }

    // dK/dV shaped like the gather output for page_ids. Gradient pages are
    // allocated zeroed on first touch; masked slots are skipped. Values add in
    // place, so final totals are independent of call order up to fp rounding.
    void scatter_add_grads(int layer, std::span<const int32_t> page_ids, const Tensor<Real>& dk,
                           const Tensor<Real>& dv) {
        LayerState& st = at_(layer);
        check_resident_(layer, page_ids, "scatter_add_grads");
        const int64_t row_elems = static_cast<int64_t>(kv_heads_) * head_dim_;
        const int64_t want_rows = static_cast<int64_t>(page_ids.size()) * page_size_;
        if (dk.rank() != 3 || dk.dim(0) != want_rows || dk.dim(1) != kv_heads_ ||
            dk.dim(2) != head_dim_ || !dk.same_shape(dv)) {
            throw ShapeError("scatter_add_grads: gradient shape does not match gather layout");
        }
        for (size_t i = 0; i < page_ids.size(); ++i) {
            const int pid = page_ids[i];
            PageEntry& e = st.pages.at(static_cast<size_t>(pid));
            if (e.gk_phys < 0) {
                e.gk_phys = alloc_page_();
                e.gv_phys = alloc_page_();
                zero_page_(e.gk_phys);
                zero_page_(e.gv_phys);
            }
            const int valid_slots = valid_in_page_(st, pid);
            Real* gk = arena_[static_cast<size_t>(e.gk_phys)].get();
            Real* gv = arena_[static_cast<size_t>(e.gv_phys)].get();
            const Real* sk = dk.ptr() + static_cast<int64_t>(i) * page_size_ * row_elems;
            const Real* sv = dv.ptr() + static_cast<int64_t>(i) * page_size_ * row_elems;
            for (int64_t j = 0; j < valid_slots * row_elems; ++j) {
                gk[j] += sk[j];
                gv[j] += sv[j];
            }
        }
    }

    // Mean key per page per kv head over valid slots, maintained incrementally
    // at append time. This is pinned metadata: it stays addressable regardless
    // of page residency, which is what lets retrieval run before pages arrive.
    // n_candidates limits the view to the first n pages (-1 = all).
    Tensor<Real> page_mean_keys(int layer, int n_candidates = -1) const {
        const LayerState& st = at_(layer);
        const int n = n_candidates < 0 ? static_cast<int>(st.pages.size())
                                       : std::min<int>(n_candidates, static_cast<int>(st.pages.size()));
        const int64_t row_elems = static_cast<int64_t>(kv_heads_) * head_dim_;
        Tensor<Real> out({n, kv_heads_, head_dim_});
        for (int p = 0; p < n; ++p) {
            const Real inv = Real(1) / static_cast<Real>(st.kavg_count[static_cast<size_t>(p)]);
            const Real* sum = st.kavg_sum.data() + static_cast<size_t>(p) * row_elems;
            Real* o = out.ptr() + static_cast<int64_t>(p) * row_elems;
            for (int64_t j = 0; j < row_elems; ++j) o[j] = sum[j] * inv;
        }
        return out;
    }

    MemoryReport memory_report() const {
        MemoryReport r;
        for (const auto& st : layers_) {
            for (const auto& e : st.pages) {
                r.pages += 1;
                const uint64_t kv = page_kv_bytes();
                if (e.tier == Tier::device) r.device_bytes += kv;
                else r.host_bytes += kv;
                if (e.gk_phys >= 0) r.grad_bytes += 2 * page_buffer_bytes();
            }
        }
        return r;
    }

    Tier tier(int layer, int page) const { return at_(layer).pages.at(static_cast<size_t>(page)).tier; }
    void set_tier(int layer, int page, Tier t) {
        at_(layer).pages.at(static_cast<size_t>(page)).tier = t;
    }
    bool grads_allocated(int layer, int page) const {
        return at_(layer).pages.at(static_cast<size_t>(page)).gk_phys >= 0;
    }

    // When on, gather/scatter on a host-tagged page throws ResidencyError.
    void set_residency_enforced(bool on) { enforce_residency_ = on; }
    bool residency_enforced() const { return enforce_residency_; }

    // Zeroes the contents of every allocated gradient page (keeps them
    // allocated). Used between training steps and by the gradient-flow
    // ablation switch.
    void zero_grad_pages() {
        for (auto& st : layers_) {
            for (auto& e : st.pages) {
                if (e.gk_phys >= 0) {
                    zero_page_(e.gk_phys);
                    zero_page_(e.gv_phys);
                }
            }
        }
    }

    // Returns every logical page (and grad page) to the free list and clears
    // fill state. Arena blocks are retained for reuse.
    void reset() {
        for (auto& st : layers_) {
            for (auto& e : st.pages) {
                free_list_.push_back(e.k_phys);
                free_list_.push_back(e.v_phys);
                if (e.gk_phys >= 0) {
                    free_list_.push_back(e.gk_phys);
                    free_list_.push_back(e.gv_phys);
                }
            }
            st.pages.clear();
            st.kavg_sum.clear();
            st.kavg_count.clear();
            st.filled = 0;
        }
    }

    // Introspection for the zero-copy / stable-address invariants.
    const Real* key_page_data(int layer, int page) const {
        return arena_[static_cast<size_t>(at_(layer).pages.at(static_cast<size_t>(page)).k_phys)].get();
    }
    const Real* grad_key_page_data(int layer, int page) const {
        const auto& e = at_(layer).pages.at(static_cast<size_t>(page));
        return e.gk_phys < 0 ? nullptr : arena_[static_cast<size_t>(e.gk_phys)].get();
    }
    int64_t arena_blocks_allocated() const { return static_cast<int64_t>(arena_.size()); }
    int64_t free_list_size() const { return static_cast<int64_t>(free_list_.size()); }

private:
    struct PageEntry {
        int32_t k_phys = -1;
        int32_t v_phys = -1;
        int32_t gk_phys = -1;
        int32_t gv_phys = -1;
        Tier tier = Tier::device;
    };

    struct LayerState {
        std::vector<PageEntry> pages;
        std::vector<Real> kavg_sum;     // [n_pages x kvh x hd]
        std::vector<int32_t> kavg_count;
        int64_t filled = 0;
    };

    LayerState& at_(int layer) {
        if (layer < 0 || layer >= n_layers()) throw ShapeError("cache: layer out of range");
        return layers_[static_cast<size_t>(layer)];
    }
    const LayerState& at_(int layer) const {
        if (layer < 0 || layer >= n_layers()) throw ShapeError("cache: layer out of range");
        return layers_[static_cast<size_t>(layer)];
    }

    int32_t alloc_page_() {
        if (!free_list_.empty()) {
            const int32_t id = free_list_.back();
            free_list_.pop_back();
            return id;
        }
        arena_.push_back(std::make_unique<Real[]>(static_cast<size_t>(page_elems())));
        return static_cast<int32_t>(arena_.size() - 1);
    }

    void zero_page_(int32_t phys) {
        Real* p = arena_[static_cast<size_t>(phys)].get();
        std::fill(p, p + page_elems(), Real(0));
    }

    int valid_in_page_(const LayerState& st, int pid) const {
        const int64_t start = static_cast<int64_t>(pid) * page_size_;
        const int64_t v = std::min<int64_t>(page_size_, st.filled - start);
        return static_cast<int>(std::max<int64_t>(0, v));
    }

    void check_resident_(int layer, std::span<const int32_t> page_ids, const char* op) const {
        const LayerState& st = at_(layer);
        for (int32_t pid : page_ids) {
            if (pid < 0 || pid >= static_cast<int32_t>(st.pages.size())) {
                throw ShapeError(std::string(op) + ": page id out of range");
            }
            if (enforce_residency_ && st.pages[static_cast<size_t>(pid)].tier != Tier::device) {
                throw ResidencyError(std::string(op) + ": page " + std::to_string(pid) +
                                     " of layer " + std::to_string(layer) + " is not device-resident");
            }
        }
    }

    Gathered gather_impl_(const LayerState& st, std::span<const int32_t> page_ids, bool grads) const {
        const int64_t row_elems = static_cast<int64_t>(kv_heads_) * head_dim_;
        const int64_t rows = static_cast<int64_t>(page_ids.size()) * page_size_;
        Gathered g;
        g.k = Tensor<Real>({rows, kv_heads_, head_dim_});
        g.v = Tensor<Real>({rows, kv_heads_, head_dim_});
        g.valid.assign(static_cast<size_t>(rows), 0);
        for (size_t i = 0; i < page_ids.size(); ++i) {
            const int pid = page_ids[i];
            const PageEntry& e = st.pages.at(static_cast<size_t>(pid));
            const int valid_slots = valid_in_page_(st, pid);
            Real* dk = g.k.ptr() + static_cast<int64_t>(i) * page_size_ * row_elems;
            Real* dv = g.v.ptr() + static_cast<int64_t>(i) * page_size_ * row_elems;
            const Real* sk = nullptr;
            const Real* sv = nullptr;
            if (grads) {
                if (e.gk_phys >= 0) {
                    sk = arena_[static_cast<size_t>(e.gk_phys)].get();
                    sv = arena_[static_cast<size_t>(e.gv_phys)].get();
                }
            } else {
                sk = arena_[static_cast<size_t>(e.k_phys)].get();
                sv = arena_[static_cast<size_t>(e.v_phys)].get();
            }
            if (sk != nullptr) {
                std::copy(sk, sk + valid_slots * row_elems, dk);
                std::copy(sv, sv + valid_slots * row_elems, dv);
            }
            for (int s = 0; s < valid_slots; ++s) {
                g.valid[i * static_cast<size_t>(page_size_) + static_cast<size_t>(s)] = 1;
            }
        }
        return g;
    }

    int page_size_;
    int kv_heads_;
    int head_dim_;
    std::vector<LayerState> layers_;
    std::vector<std::unique_ptr<Real[]>> arena_;  // block addresses never move
    std::vector<int32_t> free_list_;
    bool enforce_residency_ = false;
};

// ---------------------------------------------------------------------------
// Contiguous-concat baseline (bytes-only event simulation)
// ---------------------------------------------------------------------------

enum class GrowthPolicy { exact_fit, doubling };

struct ReallocEvent {
    uint64_t stored_bytes_before = 0;  // bytes of tokens held when the copy runs
    uint64_t old_capacity = 0;
    uint64_t new_capacity = 0;
    uint64_t transient_bytes = 0;      // old + new buffers live during the copy
};

struct ContiguousReport {
    uint64_t peak_bytes = 0;
    uint64_t copied_bytes = 0;
    int64_t reallocs = 0;
    uint64_t final_bytes = 0;  // steady-state requirement after the last append
    std::vector<ReallocEvent> events;
};

// Simulates growing a contiguous KV buffer by realloc+copy. bytes_per_token
// covers the full per-token KV footprint (all layers, K and V).
ContiguousReport simulate_contiguous_appends(int64_t n_appends, int64_t tokens_per_append,
                                             uint64_t bytes_per_token, GrowthPolicy policy);

}  // namespace chunktrain
