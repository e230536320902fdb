// SPDX-License-Identifier: Apache-2.0
//
// chunktrain CLI: training runs, gradient-equivalence reports, the paged
// vs contiguous memory benchmark, and offload schedule reports. All outputs
// are machine-readable (JSON lines / CSV); plotting is left to external
// tools.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "chunktrain/chunk_trainer.hpp"
#include "chunktrain/config.hpp"
#include "chunktrain/corpus.hpp"
#include "chunktrain/model.hpp"
#include "chunktrain/oracle.hpp"
#include "chunktrain/paged_kv.hpp"
#include "chunktrain/tiered_memory.hpp"

namespace fs = std::filesystem;
using namespace chunktrain;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfigError = 1;
constexpr int kExitRuntimeError = 2;
constexpr int kExitValidationViolation = 3;

struct RunOptions {
    std::string config_path;
    std::string corpus_path;
    std::string synthetic;
    int64_t corpus_len = 0;  // 0: derived from tokens
    int64_t steps = 50;
    int64_t tokens = 512;
    std::optional<int> chunk_size;
    std::optional<int> page_size;
    std::optional<int> budget;
    std::optional<std::string> mode;
    std::optional<int> local_window;
    std::string offload = "off";
    int64_t device_capacity = -1;
    double bandwidth = 16e9;
    std::string precision = "f32";
    std::optional<uint64_t> seed;
    std::string out_dir;
    double lr = 5e-5;
    std::vector<int> chunk_size_sweep;
    std::string growth = "exact-fit";
    std::vector<int> budget_grid;
    int grid_seeds = 10;
};

ModelConfig build_model_config(const RunOptions& opt) {
    ModelConfig cfg;
    if (!opt.config_path.empty()) cfg = load_model_config(opt.config_path);
    if (opt.chunk_size) cfg.chunk_size = *opt.chunk_size;
    if (opt.page_size) cfg.page_size = *opt.page_size;
    if (opt.budget) cfg.retrieval_budget = *opt.budget;
    if (opt.local_window) cfg.local_window = *opt.local_window;
    if (opt.mode) cfg.attention_mode = {attention_mode_from_string(*opt.mode)};
    if (opt.seed) cfg.seed = *opt.seed;
    cfg.validate();
    return cfg;
}

std::vector<int32_t> load_tokens(const RunOptions& opt, const ModelConfig& cfg) {
    if (!opt.corpus_path.empty()) {
        auto corpus = load_corpus_u32le(opt.corpus_path);
        for (int32_t t : corpus) {
            if (t < 0 || t >= cfg.vocab_size) {
                throw ConfigError("corpus token id " + std::to_string(t) +
                                  " outside vocab of " + std::to_string(cfg.vocab_size));
            }
        }
        return corpus;
    }
    if (opt.synthetic.empty()) {
        throw ConfigError("either --corpus or --synthetic is required");
    }
    const int64_t len = opt.corpus_len > 0 ? opt.corpus_len : 8 * opt.tokens;
    return make_synthetic_corpus(synthetic_kind_from_string(opt.synthetic), len, cfg.vocab_size,
                                 cfg.seed);
}

std::ofstream open_out(const RunOptions& opt, const std::string& filename) {
    fs::path p = opt.out_dir.empty() ? fs::path(filename) : fs::path(opt.out_dir) / filename;
    if (!opt.out_dir.empty()) fs::create_directories(opt.out_dir);
    std::ofstream f(p, std::ios::binary);
    if (!f) throw IoError("cannot open output file: " + p.string());
    return f;
}

TierConfig tier_from_options(const RunOptions& opt, const ModelConfig& cfg,
                             int64_t total_tokens) {
    TierConfig tier;
    tier.bandwidth_bytes_per_s = opt.bandwidth;
    if (opt.device_capacity >= 0) {
        tier.device_capacity_pages = opt.device_capacity;
    } else {
        // Default: one layer's final working set plus a chunk of slack.
        tier.device_capacity_pages =
            total_tokens / cfg.page_size + 2 * cfg.pages_per_chunk();
    }
    return tier;
}

void emit_retrieval_csv(std::ostream& os, int64_t step,
                        const std::vector<ChunkState>& chunks) {
    for (const auto& chunk : chunks) {
        for (size_t l = 0; l < chunk.selected.size(); ++l) {
            const auto& per_qpage = chunk.selected[l];
            for (size_t qp = 0; qp < per_qpage.size(); ++qp) {
                for (int32_t page : per_qpage[qp]) {
                    os << step << "," << chunk.index << "," << l << ","
                       << chunk.index * static_cast<int64_t>(per_qpage.size()) +
                              static_cast<int64_t>(qp)
                       << "," << page << "\n";
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

template <class Real>
int run_train(const RunOptions& opt) {
    const ModelConfig cfg = build_model_config(opt);
    const auto corpus = load_tokens(opt, cfg);
    if (static_cast<int64_t>(corpus.size()) < opt.tokens) {
        throw ConfigError("corpus shorter than --tokens");
    }

    auto sweep_sizes = opt.chunk_size_sweep;
    if (sweep_sizes.empty()) sweep_sizes.push_back(cfg.chunk_size);
    const bool sweeping = sweep_sizes.size() > 1;

    std::ofstream metrics = open_out(opt, "metrics.jsonl");
    std::ofstream sweep_csv;
    if (sweeping) {
        sweep_csv = open_out(opt, "chunk_sweep.csv");
        sweep_csv << "chunk_size,steps,tokens_per_step,mean_loss,tape_peak_bytes,seconds,"
                     "tokens_per_second\n";
    }

    for (int chunk_size : sweep_sizes) {
        ModelConfig run_cfg = cfg;
        run_cfg.chunk_size = chunk_size;
        run_cfg.validate();

        auto params = init_params<Real>(run_cfg, run_cfg.seed);
        ChunkTrainer<Real> trainer(run_cfg);
        if (opt.offload == "on") {
            trainer.enable_offload(tier_from_options(opt, run_cfg, opt.tokens));
        }
        auto opt_state = AdamState<Real>::zeros_like(run_cfg);
        AdamHyperParams hp;
        hp.lr = opt.lr;

        std::optional<std::ofstream> retrieval;
        const bool wants_retrieval =
            !opt.out_dir.empty() && !sweeping &&
            std::any_of(run_cfg.attention_mode.begin(), run_cfg.attention_mode.end(),
                        [](AttentionMode m) { return m == AttentionMode::topk_sparse; });
        if (wants_retrieval) {
            retrieval = open_out(opt, "retrieval.csv");
            *retrieval << "step,chunk,layer,query_page,selected_page\n";
        }

        double loss_sum = 0;
        const auto t0 = std::chrono::steady_clock::now();
        auto history = trainer.fit(
            params, corpus, opt.steps, opt.tokens, opt_state, hp,
            [&](const typename ChunkTrainer<Real>::FitRecord& rec) {
                nlohmann::json j;
                j["step"] = rec.step;
                j["loss"] = rec.metrics.loss;
                j["tape_peak_bytes"] = rec.metrics.tape_peak_bytes;
                j["kv_bytes"] = rec.metrics.kv_bytes;
                j["grad_page_bytes"] = rec.metrics.grad_page_bytes;
                j["transfer_bytes"] = rec.metrics.transfer_bytes;
                j["stall_ms"] = rec.metrics.stall_ms;
                if (sweeping) j["chunk_size"] = chunk_size;
                metrics << j.dump() << "\n";
                loss_sum += rec.metrics.loss;
                if (retrieval) emit_retrieval_csv(*retrieval, rec.step, trainer.last_chunks());
            });
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        if (sweeping) {
            const double mean_loss =
                history.empty() ? 0.0 : loss_sum / static_cast<double>(history.size());
            const double tok_s =
                secs > 0 ? static_cast<double>(opt.steps * opt.tokens) / secs : 0.0;
            sweep_csv << chunk_size << "," << opt.steps << "," << opt.tokens << "," << mean_loss
                      << "," << (history.empty() ? 0 : history.back().metrics.tape_peak_bytes)
                      << "," << secs << "," << tok_s << "\n";
        } else if (!opt.out_dir.empty()) {
            fs::path ckpt = fs::path(opt.out_dir) / "checkpoint.bin";
            save_checkpoint(ckpt.string(), params);
        }
        std::cout << "trained chunk_size=" << chunk_size << " steps=" << opt.steps
                  << (history.empty()
                          ? std::string(" (no steps)")
                          : " final_loss=" + std::to_string(history.back().metrics.loss))
                  << "\n";
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

template <class Real>
int run_gradcheck(const RunOptions& opt) {
    const ModelConfig cfg = build_model_config(opt);
    const auto corpus = load_tokens(opt, cfg);
    if (static_cast<int64_t>(corpus.size()) < opt.tokens) {
        throw ConfigError("corpus shorter than --tokens");
    }

    std::vector<int> grid = opt.budget_grid;
    if (opt.budget) grid = {*opt.budget};
    if (grid.empty()) {
        // Scaled budget grid: {1, 2, 8, 32} pages mirrors the reference-scale
        // {512, 2048, 8192, 32768}-token ladder.
        grid = {cfg.page_size, 2 * cfg.page_size, 8 * cfg.page_size, 32 * cfg.page_size};
    }

    std::ofstream csv = open_out(opt, "gradcheck.csv");
    csv << "variant,budget_tokens,context_tokens,seed,mean_l2,max_rel_err\n";

    const int n_seeds = std::max(1, opt.grid_seeds);
    std::vector<double> dense_max_rel;
    nlohmann::json dense_report;

    for (int s = 0; s < n_seeds; ++s) {
        const uint64_t seed = cfg.seed + static_cast<uint64_t>(s);
        auto params = init_params<Real>(cfg, seed);
        Rng rng(seed ^ 0xABCDEF);
        std::vector<int32_t> tokens(static_cast<size_t>(opt.tokens));
        for (auto& t : tokens) {
            t = static_cast<int32_t>(rng.below(static_cast<uint64_t>(cfg.vocab_size)));
        }

        const auto oracle = full_forward_backward(cfg, params, tokens);

        // Dense chunked variant.
        {
            ModelConfig dense_cfg = cfg;
            dense_cfg.attention_mode = {AttentionMode::dense};
            ChunkTrainer<Real> trainer(dense_cfg);
            auto grads = ParamGrads<Real>::zeros_like_config(dense_cfg);
            trainer.train_step(params, tokens, grads);
            const GradReport rep = compare_grads(grads, oracle.grads);
            dense_max_rel.push_back(rep.max_rel_err);
            csv << "dense,0," << opt.tokens << "," << seed << "," << rep.mean_l2() << ","
                << rep.max_rel_err << "\n";
            if (s == 0) dense_report = nlohmann::json::parse(grad_report_to_json(rep));
        }

        for (int budget : grid) {
            ModelConfig sparse_cfg = cfg;
            sparse_cfg.attention_mode = {AttentionMode::topk_sparse};
            sparse_cfg.retrieval_budget = budget;
            sparse_cfg.validate();
            ChunkTrainer<Real> trainer(sparse_cfg);
            auto grads = ParamGrads<Real>::zeros_like_config(sparse_cfg);
            trainer.train_step(params, tokens, grads);
            const GradReport rep = compare_grads(grads, oracle.grads);
            csv << "topk," << budget << "," << opt.tokens << "," << seed << "," << rep.mean_l2()
                << "," << rep.max_rel_err << "\n";
        }
    }

    {
        std::ofstream rep = open_out(opt, "gradreport_dense.json");
        rep << dense_report.dump(2) << "\n";
    }
    double worst_dense = 0;
    for (double v : dense_max_rel) worst_dense = std::max(worst_dense, v);
    std::cout << "gradcheck: seeds=" << n_seeds << " dense max_rel_err=" << worst_dense << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// membench
// ---------------------------------------------------------------------------

template <class Real>
int run_membench(const RunOptions& opt) {
    const ModelConfig cfg = build_model_config(opt);
    const GrowthPolicy policy = opt.growth == "doubling" ? GrowthPolicy::doubling
                               : opt.growth == "exact-fit"
                                   ? GrowthPolicy::exact_fit
                                   : throw ConfigError("--growth must be exact-fit|doubling");

    const uint64_t token_bytes = 2ull * cfg.n_layers * cfg.n_kv_heads * cfg.head_dim *
                                 sizeof(Real);  // K+V across layers, per token

    std::ofstream csv = open_out(opt, "membench.csv");
    csv << "T,paged_peak,contiguous_peak,theoretical\n";

    bool paged_exact = true;
    std::string last_report_json;
    for (int64_t t = cfg.chunk_size; t <= opt.tokens; t += cfg.chunk_size) {
        const int64_t appends = t / cfg.chunk_size;

        // Paged side: drive a real cache and read its accounting.
        PagedCache<Real> cache(cfg);
        Rng rng(cfg.seed);
        Tensor<Real> k({cfg.chunk_size, cfg.n_kv_heads, cfg.head_dim});
        Tensor<Real> v(k.shape);
        for (auto& x : k.data) x = static_cast<Real>(rng.normal());
        for (auto& x : v.data) x = static_cast<Real>(rng.normal());
        for (int64_t a = 0; a < appends; ++a) {
            for (int l = 0; l < cfg.n_layers; ++l) cache.append_chunk(l, k, v);
        }
        const MemoryReport mem = cache.memory_report();
        const uint64_t paged_peak = mem.device_bytes + mem.host_bytes;
        if (mem.copied_bytes != 0 || mem.reallocs != 0) paged_exact = false;
        last_report_json = memory_report_to_json(mem);

        const auto contiguous =
            simulate_contiguous_appends(appends, cfg.chunk_size, token_bytes, policy);
        const uint64_t theoretical = static_cast<uint64_t>(t) * token_bytes;
        if (paged_peak != theoretical) paged_exact = false;

        csv << t << "," << paged_peak << "," << contiguous.peak_bytes << "," << theoretical
            << "\n";
    }
    {
        std::ofstream rep = open_out(opt, "memory_report.json");
        rep << last_report_json << "\n";
    }
    std::cout << "membench: growth=" << opt.growth
              << " paged_peak==theoretical: " << (paged_exact ? "yes" : "NO") << "\n";
    return paged_exact ? kExitOk : kExitRuntimeError;
}

// ---------------------------------------------------------------------------
// schedule-report
// ---------------------------------------------------------------------------

template <class Real>
int run_schedule_report(const RunOptions& opt) {
    const ModelConfig cfg = build_model_config(opt);
    const auto corpus = load_tokens(opt, cfg);
    if (static_cast<int64_t>(corpus.size()) < opt.tokens) {
        throw ConfigError("corpus shorter than --tokens");
    }
    auto params = init_params<Real>(cfg, cfg.seed);
    ChunkTrainer<Real> trainer(cfg);
    trainer.enable_offload(tier_from_options(opt, cfg, opt.tokens));
    auto grads = ParamGrads<Real>::zeros_like_config(cfg);
    const auto m = trainer.train_step(
        params, std::span<const int32_t>(corpus.data(), static_cast<size_t>(opt.tokens)), grads);

    const ScheduleLog& log = *trainer.last_schedule();
    {
        std::ofstream f = open_out(opt, "schedule.jsonl");
        dump_schedule_jsonl(log, f);
    }
    const ValidationReport rep = validate_schedule(log);

    std::cout << "schedule-report\n"
              << "  violations:        " << rep.violations.size() << "\n"
              << "  stall_ms:          " << rep.stall_seconds * 1000.0 << "\n"
              << "  overlap_fraction:  " << rep.overlap_fraction << "\n"
              << "  h2d_forward_bytes: " << rep.h2d_bytes_forward << "\n"
              << "  h2d_backward_bytes:" << rep.h2d_bytes_backward << "\n"
              << "  d2h_bytes:         " << rep.d2h_bytes << "\n"
              << "  total_bytes:       " << rep.transfer_bytes << "\n"
              << "  loss:              " << m.loss << "\n";
    for (const auto& v : rep.violations) std::cout << "  violation: " << v << "\n";
    return rep.violations.empty() ? kExitOk : kExitValidationViolation;
}

template <class F32Fn, class F64Fn>
int dispatch_precision(const RunOptions& opt, F32Fn f32fn, F64Fn f64fn) {
    if (opt.precision == "f32") return f32fn();
    if (opt.precision == "f64") return f64fn();
    throw ConfigError("--precision must be f32|f64");
}

void add_common_options(CLI::App* cmd, RunOptions& opt) {
    cmd->add_option("--config", opt.config_path, "model config file (key = value)");
    cmd->add_option("--corpus", opt.corpus_path, "token corpus, raw u32 little-endian ids");
    cmd->add_option("--synthetic", opt.synthetic, "synthetic corpus: random|periodic|needle");
    cmd->add_option("--corpus-len", opt.corpus_len, "synthetic corpus length in tokens");
    cmd->add_option("--steps", opt.steps, "training steps");
    cmd->add_option("--tokens", opt.tokens, "tokens per training step (T)");
    cmd->add_option("--chunk-size", opt.chunk_size, "chunk size C in tokens");
    cmd->add_option("--page-size", opt.page_size, "page size P in tokens");
    cmd->add_option("--budget", opt.budget, "retrieval budget B in tokens");
    cmd->add_option("--mode", opt.mode, "attention mode for every layer: dense|topk|local");
    cmd->add_option("--local-window", opt.local_window, "local attention window in pages");
    cmd->add_option("--offload", opt.offload, "simulated KV offload: on|off")
        ->check(CLI::IsMember({"on", "off"}));
    cmd->add_option("--device-capacity", opt.device_capacity,
                    "device tier capacity in pages (default: sized to the run)");
    cmd->add_option("--bandwidth", opt.bandwidth, "simulated link bandwidth, bytes per second");
    cmd->add_option("--precision", opt.precision, "numeric width: f32|f64")
        ->check(CLI::IsMember({"f32", "f64"}));
    cmd->add_option("--seed", opt.seed, "seed override");
    cmd->add_option("--out", opt.out_dir, "output directory for reports");
    cmd->add_option("--lr", opt.lr, "Adam learning rate");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"chunk-recurrent transformer training with a paged KV cache"};
    app.require_subcommand(1);

    RunOptions opt;

    CLI::App* train = app.add_subcommand("train", "run training and emit metrics");
    add_common_options(train, opt);
    train->add_option("--sweep-chunk-sizes", opt.chunk_size_sweep,
                      "run once per chunk size and emit a throughput table")
        ->delimiter(',');

    CLI::App* gradcheck =
        app.add_subcommand("gradcheck", "compare chunked gradients against the full-sequence run");
    add_common_options(gradcheck, opt);
    gradcheck->add_option("--budget-grid", opt.budget_grid, "budget grid in tokens")
        ->delimiter(',');
    gradcheck->add_option("--grid-seeds", opt.grid_seeds, "seeds per grid point");

    CLI::App* membench =
        app.add_subcommand("membench", "paged vs contiguous cache growth comparison");
    add_common_options(membench, opt);
    membench->add_option("--growth", opt.growth, "contiguous growth policy: exact-fit|doubling");

    CLI::App* sched = app.add_subcommand("schedule-report",
                                         "run one step with offload logging and validate it");
    add_common_options(sched, opt);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitConfigError;
    }

    try {
        if (train->parsed()) {
            return dispatch_precision(opt, [&] { return run_train<float>(opt); },
                                      [&] { return run_train<double>(opt); });
        }
        if (gradcheck->parsed()) {
            return dispatch_precision(opt, [&] { return run_gradcheck<float>(opt); },
                                      [&] { return run_gradcheck<double>(opt); });
        }
        if (membench->parsed()) {
            return dispatch_precision(opt, [&] { return run_membench<float>(opt); },
                                      [&] { return run_membench<double>(opt); });
        }
        if (sched->parsed()) {
            return dispatch_precision(opt, [&] { return run_schedule_report<float>(opt); },
                                      [&] { return run_schedule_report<double>(opt); });
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfigError;
    } catch (const ResidencyError& e) {
        std::cerr << "residency violation: " << e.what() << "\n";
        return kExitValidationViolation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntimeError;
    }
    return kExitConfigError;
}
