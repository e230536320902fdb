// SPDX-License-Identifier: Apache-2.0
//
// Config file parsing and invariant validation.

#include "chunktrain/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace chunktrain {

std::string to_string(AttentionMode m) {
    switch (m) {
        case AttentionMode::dense: return "dense";
        case AttentionMode::topk_sparse: return "topk";
        case AttentionMode::local: return "local";
    }
    return "?";
}

AttentionMode attention_mode_from_string(const std::string& s) {
    if (s == "dense") return AttentionMode::dense;
    if (s == "topk" || s == "topk_sparse") return AttentionMode::topk_sparse;
    if (s == "local") return AttentionMode::local;
    throw ConfigError("unknown attention mode '" + s + "' (expected dense|topk|local)");
}

void ModelConfig::validate() const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) throw ConfigError("config: " + msg);
    };
    require(n_layers >= 1, "n_layers must be >= 1");
    require(d_model >= 1, "d_model must be >= 1");
    require(n_q_heads >= 1 && n_kv_heads >= 1, "head counts must be >= 1");
    require(n_q_heads % n_kv_heads == 0, "n_q_heads must be divisible by n_kv_heads");
    require(head_dim >= 2 && head_dim % 2 == 0, "head_dim must be even (rotary pairs)");
    require(d_ff >= 1, "d_ff must be >= 1");
    require(vocab_size >= 2, "vocab_size must be >= 2");
    require(page_size >= 1, "page_size must be >= 1");
    require(chunk_size >= 1, "chunk_size must be >= 1");
    require(chunk_size % page_size == 0, "chunk_size must be divisible by page_size");
    require(retrieval_budget >= 0, "retrieval_budget must be >= 0");
    require(retrieval_budget % page_size == 0, "retrieval_budget must be divisible by page_size");
    require(local_window >= 0, "local_window must be >= 0");
    require(rope_base > 1.0, "rope_base must be > 1");
    require(attention_mode.size() == 1 ||
                attention_mode.size() == static_cast<size_t>(n_layers),
            "attention_mode needs one entry or one per layer");
}

namespace {

std::string trim(const std::string& s) {
    size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

int64_t parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int64_t x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

}  // namespace

ModelConfig parse_model_config(const std::string& text) {
    ModelConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key == "n_layers") cfg.n_layers = static_cast<int>(parse_int(key, val));
        else if (key == "d_model") cfg.d_model = static_cast<int>(parse_int(key, val));
        else if (key == "n_q_heads") cfg.n_q_heads = static_cast<int>(parse_int(key, val));
        else if (key == "n_kv_heads") cfg.n_kv_heads = static_cast<int>(parse_int(key, val));
        else if (key == "head_dim") cfg.head_dim = static_cast<int>(parse_int(key, val));
        else if (key == "d_ff") cfg.d_ff = static_cast<int>(parse_int(key, val));
        else if (key == "vocab_size") cfg.vocab_size = static_cast<int>(parse_int(key, val));
        else if (key == "chunk_size") cfg.chunk_size = static_cast<int>(parse_int(key, val));
        else if (key == "page_size") cfg.page_size = static_cast<int>(parse_int(key, val));
        else if (key == "retrieval_budget") cfg.retrieval_budget = static_cast<int>(parse_int(key, val));
        else if (key == "local_window") cfg.local_window = static_cast<int>(parse_int(key, val));
        else if (key == "rope_base") cfg.rope_base = parse_double(key, val);
        else if (key == "seed") cfg.seed = static_cast<uint64_t>(parse_int(key, val));
        else if (key == "score_scale") cfg.score_scale = parse_int(key, val) != 0;
        else if (key == "attention_mode") {
            cfg.attention_mode.clear();
            std::stringstream ss(val);
            std::string item;
            while (std::getline(ss, item, ',')) {
                cfg.attention_mode.push_back(attention_mode_from_string(trim(item)));
            }
            if (cfg.attention_mode.empty()) {
                throw ConfigError("config: attention_mode list is empty");
            }
        } else {
            throw ConfigError("config: unknown key '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

ModelConfig load_model_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_model_config(ss.str());
}

}  // namespace chunktrain
