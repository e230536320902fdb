// SPDX-License-Identifier: Apache-2.0
//
// Model/run configuration and the textual key=value config file format.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chunktrain/common.hpp"

namespace chunktrain {

enum class AttentionMode { dense, topk_sparse, local };

std::string to_string(AttentionMode m);
AttentionMode attention_mode_from_string(const std::string& s);

struct ModelConfig {
    int n_layers = 2;
    int d_model = 64;
    int n_q_heads = 4;
    int n_kv_heads = 2;
    int head_dim = 16;
    int d_ff = 256;
    int vocab_size = 256;
    int chunk_size = 64;   // C, tokens per chunk
    int page_size = 16;    // P, tokens per page
    // One entry per layer; a single entry is broadcast to every layer.
    std::vector<AttentionMode> attention_mode{AttentionMode::dense};
    int retrieval_budget = 128;  // B, tokens; B/P pages per query page in topk mode
    int local_window = 4;        // W, pages, local mode
    double rope_base = 10000.0;
    uint64_t seed = 0;
    // Score formula follows the retrieval equations verbatim, i.e. without the
    // 1/sqrt(d) factor; this toggle adds it back for experiments.
    bool score_scale = false;

    int gqa_group() const { return n_q_heads / n_kv_heads; }
    int pages_per_chunk() const { return chunk_size / page_size; }
    int budget_pages() const { return retrieval_budget / page_size; }
    AttentionMode mode_for_layer(int layer) const {
        if (attention_mode.size() == 1) return attention_mode[0];
        return attention_mode[static_cast<size_t>(layer)];
    }

    // Throws ConfigError on any violated invariant.
    void validate() const;
};

// Parses `key = value` lines ('#' starts a comment). Unknown keys are an
// error; attention_mode accepts a comma-separated per-layer list.
ModelConfig parse_model_config(const std::string& text);
ModelConfig load_model_config(const std::string& path);

}  // namespace chunktrain
