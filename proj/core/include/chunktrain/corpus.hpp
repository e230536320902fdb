// SPDX-License-Identifier: Apache-2.0
//
// Token corpus I/O (raw u32 little-endian ids) and synthetic generators.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace chunktrain {

std::vector<int32_t> load_corpus_u32le(const std::string& path);
void save_corpus_u32le(const std::string& path, const std::vector<int32_t>& tokens);

enum class SyntheticKind { random, periodic, needle };

SyntheticKind synthetic_kind_from_string(const std::string& s);

// random: uniform ids. periodic: a fixed random pattern tiled over the
// sequence (learnable by a small model). needle: uniform noise with a planted
// (marker, payload) pair repeated at fixed stride, for retrieval sanity runs.
std::vector<int32_t> make_synthetic_corpus(SyntheticKind kind, int64_t length, int vocab_size,
                                           uint64_t seed);

}  // namespace chunktrain
