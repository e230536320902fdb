// SPDX-License-Identifier: Apache-2.0

#include "chunktrain/corpus.hpp"

#include <algorithm>
#include <fstream>

#include "chunktrain/common.hpp"

namespace chunktrain {

std::vector<int32_t> load_corpus_u32le(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open corpus: " + path);
    std::vector<int32_t> out;
    unsigned char b[4];
    while (f.read(reinterpret_cast<char*>(b), 4)) {
        const uint32_t v = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
                           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
        out.push_back(static_cast<int32_t>(v));
    }
    if (f.gcount() != 0) throw IoError("corpus file size is not a multiple of 4: " + path);
    return out;
}

void save_corpus_u32le(const std::string& path, const std::vector<int32_t>& tokens) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open corpus for writing: " + path);
    for (int32_t t : tokens) {
        const uint32_t v = static_cast<uint32_t>(t);
        const unsigned char b[4] = {
            static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
            static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
        f.write(reinterpret_cast<const char*>(b), 4);
    }
    if (!f) throw IoError("corpus write failed: " + path);
}

SyntheticKind synthetic_kind_from_string(const std::string& s) {
    if (s == "random") return SyntheticKind::random;
    if (s == "periodic") return SyntheticKind::periodic;
    if (s == "needle") return SyntheticKind::needle;
    throw ConfigError("unknown synthetic corpus kind '" + s + "' (random|periodic|needle)");
}

std::vector<int32_t> make_synthetic_corpus(SyntheticKind kind, int64_t length, int vocab_size,
                                           uint64_t seed) {
    if (length <= 0) throw ConfigError("synthetic corpus length must be positive");
    if (vocab_size < 2) throw ConfigError("synthetic corpus needs vocab_size >= 2");
    Rng rng(seed ^ 0xC0FFEEull);
    std::vector<int32_t> out(static_cast<size_t>(length));
    switch (kind) {
        case SyntheticKind::random: {
            for (auto& t : out) t = static_cast<int32_t>(rng.below(static_cast<uint64_t>(vocab_size)));
            break;
        }
        case SyntheticKind::periodic: {
            const int period = std::min(16, vocab_size);
            std::vector<int32_t> pattern(static_cast<size_t>(period));
            for (auto& p : pattern) p = static_cast<int32_t>(rng.below(static_cast<uint64_t>(vocab_size)));
            for (int64_t i = 0; i < length; ++i) {
                out[static_cast<size_t>(i)] = pattern[static_cast<size_t>(i % period)];
            }
            break;
        }
        case SyntheticKind::needle: {
            const int32_t marker = vocab_size - 1;
            const int32_t payload = vocab_size - 2;
            const int64_t stride = 61;  // prime, so needles drift across page boundaries
            for (int64_t i = 0; i < length; ++i) {
                // Noise avoids the marker/payload ids so the signal is unambiguous.
                const uint64_t lim = vocab_size > 2 ? static_cast<uint64_t>(vocab_size - 2) : 2;
                out[static_cast<size_t>(i)] = static_cast<int32_t>(rng.below(lim));
            }
            for (int64_t i = 0; i + 1 < length; i += stride) {
                out[static_cast<size_t>(i)] = marker;
                out[static_cast<size_t>(i + 1)] = payload;
            }
            break;
        }
    }
    return out;
}

}  // namespace chunktrain
