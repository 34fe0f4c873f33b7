#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ecovla/episode.hpp"
#include "ecovla/flops.hpp"
#include "ecovla/model.hpp"
#include "ecovla/orchestrator.hpp"
#include "ecovla/pruning.hpp"
#include "ecovla/reference.hpp"

namespace ecovla {

// Outcome of one oracle check: pass/fail plus the measured value against the
// tolerance it was held to.
struct Verdict {
    std::string name;
    bool pass = false;
    double measured = 0.0;
    double threshold = 0.0;
    std::string detail;
};

struct VerifyTolerances {
    double masked_dense_rel = 1e-5;
    double eq11_rel = 1e-6;
    double fused_abs = 1e-6;
};

namespace detail_report {

inline double max_rel_diff(const Matrix& a, const Matrix& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) {
            const double x = a.at(i, j), y = b.at(i, j);
            const double denom = std::max({std::abs(x), std::abs(y), 1e-12});
            worst = std::max(worst, std::abs(x - y) / denom);
        }
    return worst;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            worst = std::max(worst, std::abs(static_cast<double>(a.at(i, j)) - b.at(i, j)));
    return worst;
}

inline Matrix random_matrix(std::mt19937& rng, std::size_t rows, std::size_t cols,
                            Layout layout = Layout::RowMajor) {
    Matrix m(rows, cols, layout);
    std::normal_distribution<float> dist(0.0f, 1.0f);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) m.at(i, j) = dist(rng);
    return m;
}

inline ChannelIndexSet random_keep(std::mt19937& rng, std::size_t full, std::size_t count) {
    std::vector<std::size_t> idx(full);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(count);
    std::sort(idx.begin(), idx.end());
    return ChannelIndexSet(std::move(idx), full);
}

// Dense model with the complement of the pattern zeroed out: pruned MLP
// channels lose their gate/up rows and down columns; pruned heads lose their
// q/k/v rows and w_out columns.
inline Model masked_clone(const Model& src, const SparsityPattern& pattern) {
    Model clone = src;
    const ModelConfig& cfg = src.config();
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
        BlockWeights& b = clone.mutable_blocks()[l];
        std::vector<bool> keep_mlp(cfg.ff_dim, false);
        for (std::size_t k : pattern.mlp_keep[l].retained) keep_mlp[k] = true;
        for (std::size_t k = 0; k < cfg.ff_dim; ++k) {
            if (keep_mlp[k]) continue;
            for (std::size_t j = 0; j < cfg.dim; ++j) {
                b.w_gate.at(k, j) = 0.0f;
                b.w_up.at(k, j) = 0.0f;
                b.w_down.at(j, k) = 0.0f;
            }
        }
        std::vector<bool> keep_head(cfg.heads, false);
        for (std::size_t h : pattern.head_keep[l].retained) keep_head[h] = true;
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            if (keep_head[h]) continue;
            for (std::size_t d = 0; d < cfg.head_dim; ++d) {
                const std::size_t row = h * cfg.head_dim + d;
                for (std::size_t j = 0; j < cfg.dim; ++j) {
                    b.w_q.at(row, j) = 0.0f;
                    b.w_k.at(row, j) = 0.0f;
                    b.w_v.at(row, j) = 0.0f;
                    b.w_out.at(j, row) = 0.0f;
                }
            }
        }
    }
    return clone;
}

// Random pattern at the configured ratio, scores drawn at random.
inline SparsityPattern random_pattern(std::mt19937& rng, const ModelConfig& cfg, double ratio,
                                      bool head_pruning, std::uint64_t version) {
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    std::vector<std::vector<float>> mlp(cfg.blocks), head(cfg.blocks);
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
        mlp[l].resize(cfg.ff_dim);
        for (auto& v : mlp[l]) v = u(rng);
        head[l].resize(cfg.heads);
        for (auto& v : head[l]) v = u(rng);
    }
    return select_mask(mlp, head, cfg.heads, ratio, head_pruning, version);
}

}  // namespace detail_report

// The full runtime oracle suite. Failures are verdicts, not errors.
inline std::vector<Verdict> verify_oracles(const ModelConfig& model_cfg, const EapConfig& eap_cfg,
                                           const VerifyTolerances& tol = {}) {
    std::vector<Verdict> verdicts;
    std::mt19937 rng(7);

    // Gather-free kernel against the dense-then-select route, exact.
    {
        double worst = 0.0;
        for (int it = 0; it < 20; ++it) {
            const std::size_t s = 1 + it % 5, cin = 3 + it % 13, cout = 2 + it % 17;
            const Matrix x = detail_report::random_matrix(rng, s, cin);
            const Matrix w = detail_report::random_matrix(rng, cout, cin);
            const std::size_t nk = 1 + static_cast<std::size_t>(rng() % cout);
            const ChannelIndexSet keep = detail_report::random_keep(rng, cout, nk);
            worst = std::max(worst, detail_report::max_abs_diff(
                                        sparse_linear(x, w, keep),
                                        reference::dense_then_select(x, w, keep)));
        }
        verdicts.push_back({"gather_free_exact", worst == 0.0, worst, 0.0,
                            "sparse_linear vs dense-then-select, bitwise"});
    }

    // Column-major input-channel kernel against scatter-then-dense, exact.
    {
        double worst = 0.0;
        for (int it = 0; it < 20; ++it) {
            const std::size_t s = 1 + it % 4, cin = 2 + it % 11, cout = 2 + it % 9;
            const std::size_t nk = 1 + static_cast<std::size_t>(rng() % cin);
            const ChannelIndexSet keep = detail_report::random_keep(rng, cin, nk);
            const Matrix x = detail_report::random_matrix(rng, s, nk);
            const Matrix w = detail_report::random_matrix(rng, cout, cin, Layout::ColMajor);
            worst = std::max(worst, detail_report::max_abs_diff(
                                        sparse_linear_colmajor(x, w, keep),
                                        reference::scatter_then_dense(x, w, keep)));
        }
        verdicts.push_back({"colmajor_exact", worst == 0.0, worst, 0.0,
                            "sparse_linear_colmajor vs scatter-then-dense, bitwise"});
    }

    // Sparse forward against the zero-masked dense model.
    {
        ModelConfig small = model_cfg;
        Model model(small);
        const SparsityPattern pattern =
            detail_report::random_pattern(rng, small, eap_cfg.ratio > 0 ? eap_cfg.ratio : 0.4,
                                          eap_cfg.head_pruning, 1);
        const Model masked = detail_report::masked_clone(model, pattern);
        const Matrix obs = detail_report::random_matrix(rng, small.vis_tokens, small.vis_dim);
        const VisualFeatures feats = model.encode_observation(obs);
        const HiddenState sparse_out =
            model.backbone_forward(model.make_hidden(feats), &pattern, nullptr);
        const HiddenState masked_out =
            masked.backbone_forward(masked.make_hidden(feats), nullptr, nullptr);
        const double worst = detail_report::max_rel_diff(sparse_out.x, masked_out.x);
        verdicts.push_back({"sparse_vs_masked_dense", worst <= tol.masked_dense_rel, worst,
                            tol.masked_dense_rel, "structured sparse forward vs zeroed weights"});
    }

    // Factored importance scores against the literal elementwise form.
    {
        double worst = 0.0;
        std::uniform_real_distribution<float> upos(0.0f, 4.0f);
        for (int it = 0; it < 100; ++it) {
            const std::size_t cout = 4 + it % 29, cin = 3 + it % 23;
            const Matrix w = detail_report::random_matrix(rng, cout, cin, Layout::ColMajor);
            std::vector<float> fused(cin);
            for (auto& v : fused) v = upos(rng);
            std::vector<float> cache(cin);
            for (std::size_t k = 0; k < cin; ++k) {
                double acc = 0.0;
                for (std::size_t i = 0; i < cout; ++i) {
                    const double sq = static_cast<double>(w.at(i, k)) * w.at(i, k);
                    acc += sq * sq;
                }
                cache[k] = static_cast<float>(std::sqrt(acc));
            }
            const std::vector<float> factored = importance_scores(cache, fused);
            const std::vector<float> literal = reference::importance_scores_literal(w, fused);
            for (std::size_t k = 0; k < cin; ++k) {
                const double denom = std::max({std::abs(static_cast<double>(literal[k])),
                                               std::abs(static_cast<double>(factored[k])), 1e-12});
                worst = std::max(worst, std::abs(static_cast<double>(factored[k]) - literal[k]) /
                                            denom);
            }
        }
        verdicts.push_back({"importance_factored_vs_literal", worst <= tol.eq11_rel, worst,
                            tol.eq11_rel, "factored score vs literal elementwise form"});
    }

    // Nearest-rank quantile against the scanning reference, exhaustive.
    {
        std::uniform_real_distribution<float> u(-1.0f, 1.0f);
        std::uint64_t mismatches = 0;
        for (std::size_t T = 2; T <= 10; ++T) {
            for (int p = 1; p <= 99; ++p) {
                SimilarityWindow win(T);
                std::vector<float> vals(T);
                for (auto& v : vals) {
                    v = u(rng);
                    win.push(v);
                }
                if (window_quantile(win, p) != reference::quantile_by_scan(vals, p)) ++mismatches;
            }
        }
        verdicts.push_back({"quantile_nearest_rank", mismatches == 0,
                            static_cast<double>(mismatches), 0.0,
                            "window quantile vs sorted-scan reference, T in 2..10, p in 1..99"});
    }

    // Instrumented cost of one full update against the worst-case formula.
    {
        ModelConfig mc = model_cfg;
        Model model(mc);
        EapConfig ec = eap_cfg;
        ec.calib_frames = 1;
        AdaptivePruner pruner(model, ec);
        const Matrix obs = detail_report::random_matrix(rng, mc.vis_tokens, mc.vis_dim);
        pruner.calibrate_from({obs});
        const VisualFeatures feats = model.encode_observation(obs);

        FrameActivations acts;
        acts.frame = 0;
        acts.features = feats;
        model.backbone_forward(model.make_hidden(feats), nullptr,
                               [&](std::size_t, const Matrix& inter,
                                   const std::vector<float>& hf) {
                                   acts.mlp_intermediates.push_back(inter);
                                   acts.head_features.push_back(hf);
                               });
        counters().reset();
        pruner.observe(feats);
        pruner.compute_update(acts);
        const std::uint64_t measured = counters().flop_ops;
        const std::uint64_t budget =
            5 * mc.vis_tokens * mc.dim +
            mc.blocks * (2 * mc.seq_len * mc.ff_dim + 3 * mc.ff_dim * mc.dim + 4 * mc.ff_dim);
        verdicts.push_back({"eap_cost_within_formula", measured <= budget,
                            static_cast<double>(measured), static_cast<double>(budget),
                            "instrumented float ops of one update vs worst-case formula"});
    }

    // Fused gated MLP against the four-step unfused route, plus traversal
    // counts (1 sweep fused vs 2 unfused).
    {
        double worst = 0.0;
        bool traversals_ok = true;
        for (int it = 0; it < 10; ++it) {
            const Matrix x = detail_report::random_matrix(rng, 8, 16);
            const Matrix wg = detail_report::random_matrix(rng, 24, 16);
            const Matrix wu = detail_report::random_matrix(rng, 24, 16);
            const ChannelIndexSet keep =
                detail_report::random_keep(rng, 24, 1 + static_cast<std::size_t>(rng() % 24));
            counters().reset();
            const Matrix fused = fused_gated_mlp(x, wg, wu, keep);
            const std::uint64_t fused_sweeps = counters().x_traversals;
            counters().reset();
            const Matrix unfused = reference::gated_mlp_unfused(x, wg, wu, keep);
            const std::uint64_t unfused_sweeps = counters().x_traversals;
            traversals_ok = traversals_ok && fused_sweeps == 1 && unfused_sweeps == 2;
            worst = std::max(worst, detail_report::max_abs_diff(fused, unfused));
        }
        verdicts.push_back({"fused_mlp_vs_unfused", worst <= tol.fused_abs && traversals_ok,
                            worst, tol.fused_abs,
                            "fused kernel vs unfused composition; 1 vs 2 input sweeps"});
    }

    // Structured-mask invariants on a freshly selected pattern.
    {
        bool ok = true;
        std::string detail = "select_mask output satisfies mask invariants";
        try {
            const SparsityPattern p = detail_report::random_pattern(
                rng, model_cfg, eap_cfg.ratio > 0 ? eap_cfg.ratio : 0.25, eap_cfg.head_pruning, 1);
            p.validate(model_cfg);
        } catch (const Error& e) {
            ok = false;
            detail = e.what();
        }
        verdicts.push_back({"mask_invariants", ok, ok ? 0.0 : 1.0, 0.0, detail});
    }

    // Hand value of the cost formula.
    {
        const std::uint64_t v = eap_flops_estimate(16, 8, 10, 32, 16);
        verdicts.push_back({"eap_formula_hand_value", v == 2944, static_cast<double>(v), 2944.0,
                            "eap_flops_estimate(16,8,10,32,16)"});
    }

    return verdicts;
}

// Dense-only baseline episode (no pruning state at all).
inline EpisodeResult run_dense_baseline(const Model& model, const std::vector<Matrix>& frames) {
    using Clock = std::chrono::steady_clock;
    EpisodeResult result;
    const std::uint64_t dense_flops = flops_count(model.config(), nullptr).total();
    const Clock::time_point start = Clock::now();
    Clock::time_point prev_end = start;
    for (std::size_t t = 0; t < frames.size(); ++t) {
        TraceRow row;
        row.frame = t;
        const Clock::time_point f0 = Clock::now();
        const VisualFeatures feats = model.encode_observation(frames[t]);
        HiddenState h = model.backbone_forward(model.make_hidden(feats), nullptr, nullptr);
        const Clock::time_point f1 = Clock::now();
        result.actions.push_back(model.action_expert_forward(h));
        const Clock::time_point f2 = Clock::now();
        row.t_backbone_ns = static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::nanoseconds>(f1 - f0).count());
        row.t_expert_ns = static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::nanoseconds>(f2 - f1).count());
        const Clock::time_point fe = Clock::now();
        row.t_wall_ns = static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::nanoseconds>(fe - prev_end).count());
        prev_end = fe;
        result.flops_executed += dense_flops;
        result.flops_dense_equiv += dense_flops;
        result.trace.push_back(row);
    }
    result.episode_wall_ns = static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(prev_end - start).count());
    return result;
}

struct ModeReport {
    std::string name;
    double mean_wall_ms = 0.0;
    double p95_wall_ms = 0.0;
    double mean_backbone_ms = 0.0;
    double mean_expert_ms = 0.0;
    double mean_prune_ms = 0.0;
    std::uint64_t triggers = 0;
    std::uint64_t dropped_triggers = 0;
    std::uint64_t updates = 0;
    std::uint64_t flops_executed = 0;
    std::uint64_t flops_dense_equiv = 0;
    std::uint64_t eap_flops_budget = 0;
    double speedup_vs_dense = 1.0;
    double divergence_vs_dense = 0.0;
    double delta_budget_ms = 0.0;
    double untriggered_within_budget = 1.0;  // fraction
};

struct Report {
    nlohmann::ordered_json config_echo;
    std::vector<ModeReport> modes;
    std::vector<Verdict> verdicts;
    std::uint64_t flops_savings = 0;  // dense-equivalent minus executed, sparse modes
    bool flops_reconcile = true;

    bool all_pass() const {
        for (const Verdict& v : verdicts)
            if (!v.pass) return false;
        return flops_reconcile;
    }
};

namespace detail_report {

inline double mean_ms(const std::vector<std::uint64_t>& ns) {
    if (ns.empty()) return 0.0;
    double acc = 0.0;
    for (std::uint64_t v : ns) acc += static_cast<double>(v);
    return acc / static_cast<double>(ns.size()) / 1e6;
}

inline double percentile_ms(std::vector<std::uint64_t> ns, double p) {
    if (ns.empty()) return 0.0;
    std::sort(ns.begin(), ns.end());
    const std::size_t rank = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(ns.size()))), 1,
        ns.size());
    return static_cast<double>(ns[rank - 1]) / 1e6;
}

// Mean relative L2 distance between per-frame action chunks.
inline double action_divergence(const std::vector<std::vector<float>>& a,
                                const std::vector<std::vector<float>>& b) {
    if (a.size() != b.size()) throw ShapeError("action_divergence: frame count mismatch");
    if (a.empty()) return 0.0;
    double acc = 0.0;
    for (std::size_t t = 0; t < a.size(); ++t) {
        double diff = 0.0, ref = 0.0;
        for (std::size_t j = 0; j < a[t].size(); ++j) {
            const double d = static_cast<double>(a[t][j]) - b[t][j];
            diff += d * d;
            ref += static_cast<double>(b[t][j]) * b[t][j];
        }
        acc += ref > 0.0 ? std::sqrt(diff) / std::sqrt(ref) : (diff > 0.0 ? 1.0 : 0.0);
    }
    return acc / static_cast<double>(a.size());
}

inline ModeReport summarize(const std::string& name, const EpisodeResult& result,
                            double dense_mean_wall_ms, double delta_budget_ms) {
    ModeReport m;
    m.name = name;
    std::vector<std::uint64_t> walls;
    std::vector<std::uint64_t> backbones, experts, prunes;
    for (const TraceRow& r : result.trace) {
        walls.push_back(r.t_wall_ns);
        backbones.push_back(r.t_backbone_ns);
        experts.push_back(r.t_expert_ns);
        prunes.push_back(r.t_prune_ns);
    }
    m.mean_wall_ms = mean_ms(walls);
    m.p95_wall_ms = percentile_ms(walls, 95.0);
    m.mean_backbone_ms = mean_ms(backbones);
    m.mean_expert_ms = mean_ms(experts);
    m.mean_prune_ms = mean_ms(prunes);
    m.triggers = result.triggers;
    m.dropped_triggers = result.dropped_triggers;
    m.updates = result.updates_published;
    m.flops_executed = result.flops_executed;
    m.flops_dense_equiv = result.flops_dense_equiv;
    m.eap_flops_budget = result.eap_flops_budget;
    if (m.mean_wall_ms > 0.0 && dense_mean_wall_ms > 0.0)
        m.speedup_vs_dense = dense_mean_wall_ms / m.mean_wall_ms;

    // Bounded-overhead accounting over untriggered frames: wall time minus
    // the frame's own backbone+expert lane time must stay within budget.
    m.delta_budget_ms = delta_budget_ms > 0.0 ? delta_budget_ms : 0.1 * m.mean_wall_ms;
    std::uint64_t untriggered = 0, within = 0;
    for (const TraceRow& r : result.trace) {
        if (r.triggered) continue;
        ++untriggered;
        const double delta_ms =
            (static_cast<double>(r.t_wall_ns) -
             static_cast<double>(r.t_backbone_ns + r.t_expert_ns)) /
            1e6;
        if (delta_ms <= m.delta_budget_ms) ++within;
    }
    m.untriggered_within_budget =
        untriggered == 0 ? 1.0 : static_cast<double>(within) / static_cast<double>(untriggered);
    return m;
}

}  // namespace detail_report

struct BenchmarkConfig {
    ModelConfig model;
    EapConfig eap;
    EpisodeSpec episode;
    double delta_budget_ms = 0.0;  // 0 = auto
    bool run_verify = true;
};

// Paired dense / sparse-synchronous / sparse-interleaved runs over the same
// episode and seed.
inline Report run_benchmark(const BenchmarkConfig& cfg,
                            std::vector<EpisodeResult>* raw_results = nullptr) {
    cfg.model.validate();
    cfg.eap.validate();
    Model model(cfg.model);
    const std::vector<Matrix> frames = generate_episode(cfg.episode);
    const std::vector<Matrix> calib = build_calibration(cfg.episode, cfg.eap.calib_frames);

    EpisodeResult dense = run_dense_baseline(model, frames);

    AdaptivePruner sync_pruner(model, cfg.eap);
    OrchestratorConfig sync_cfg;
    sync_cfg.mode = OrchestratorConfig::Mode::Synchronous;
    sync_cfg.delta_budget_ms = cfg.delta_budget_ms;
    Orchestrator sync_orch(model, sync_pruner, sync_cfg);
    EpisodeResult sync = sync_orch.run_episode(calib, frames);

    AdaptivePruner inter_pruner(model, cfg.eap);
    OrchestratorConfig inter_cfg;
    inter_cfg.mode = OrchestratorConfig::Mode::Interleaved;
    inter_cfg.delta_budget_ms = cfg.delta_budget_ms;
    Orchestrator inter_orch(model, inter_pruner, inter_cfg);
    EpisodeResult inter = inter_orch.run_episode(calib, frames);

    Report report;
    report.config_echo = {
        {"model",
         {{"blocks", cfg.model.blocks},
          {"dim", cfg.model.dim},
          {"heads", cfg.model.heads},
          {"ff_dim", cfg.model.ff_dim},
          {"seq_len", cfg.model.seq_len},
          {"vis_tokens", cfg.model.vis_tokens},
          {"vis_dim", cfg.model.vis_dim},
          {"expert_width", cfg.model.expert_width},
          {"seed", cfg.model.seed}}},
        {"eap",
         {{"window", cfg.eap.window},
          {"p", cfg.eap.p},
          {"alpha", cfg.eap.alpha},
          {"lambda", cfg.eap.lambda},
          {"ratio", cfg.eap.ratio},
          {"calib_frames", cfg.eap.calib_frames},
          {"head_pruning", cfg.eap.head_pruning}}},
        {"episode",
         {{"frames", cfg.episode.frames},
          {"seed", cfg.episode.seed},
          {"regimes", cfg.episode.regimes.size()}}},
        {"delta_budget_ms", cfg.delta_budget_ms}};

    std::vector<std::uint64_t> dense_walls;
    for (const TraceRow& r : dense.trace) dense_walls.push_back(r.t_wall_ns);
    const double dense_mean = detail_report::mean_ms(dense_walls);
    report.modes.push_back(
        detail_report::summarize("dense", dense, dense_mean, cfg.delta_budget_ms));
    report.modes.push_back(
        detail_report::summarize("sparse_sync", sync, dense_mean, cfg.delta_budget_ms));
    report.modes.push_back(
        detail_report::summarize("sparse_interleaved", inter, dense_mean, cfg.delta_budget_ms));
    report.modes[1].divergence_vs_dense =
        detail_report::action_divergence(sync.actions, dense.actions);
    report.modes[2].divergence_vs_dense =
        detail_report::action_divergence(inter.actions, dense.actions);

    report.flops_savings = sync.flops_dense_equiv - sync.flops_executed;
    report.flops_reconcile = (sync.flops_dense_equiv >= sync.flops_executed) &&
                             (inter.flops_dense_equiv >= inter.flops_executed);

    if (cfg.run_verify) report.verdicts = verify_oracles(cfg.model, cfg.eap);
    if (raw_results != nullptr) {
        raw_results->clear();
        raw_results->push_back(std::move(dense));
        raw_results->push_back(std::move(sync));
        raw_results->push_back(std::move(inter));
    }
    return report;
}

inline nlohmann::ordered_json report_to_json(const Report& report) {
    nlohmann::ordered_json j;
    j["config"] = report.config_echo;
    j["modes"] = nlohmann::ordered_json::array();
    for (const ModeReport& m : report.modes) {
        j["modes"].push_back({{"name", m.name},
                              {"mean_wall_ms", m.mean_wall_ms},
                              {"p95_wall_ms", m.p95_wall_ms},
                              {"mean_backbone_ms", m.mean_backbone_ms},
                              {"mean_expert_ms", m.mean_expert_ms},
                              {"mean_prune_ms", m.mean_prune_ms},
                              {"triggers", m.triggers},
                              {"dropped_triggers", m.dropped_triggers},
                              {"updates", m.updates},
                              {"flops_executed", m.flops_executed},
                              {"flops_dense_equiv", m.flops_dense_equiv},
                              {"eap_flops_budget", m.eap_flops_budget},
                              {"speedup_vs_dense", m.speedup_vs_dense},
                              {"divergence_vs_dense", m.divergence_vs_dense},
                              {"delta_budget_ms", m.delta_budget_ms},
                              {"untriggered_within_budget", m.untriggered_within_budget}});
    }
    j["verdicts"] = nlohmann::ordered_json::array();
    for (const Verdict& v : report.verdicts)
        j["verdicts"].push_back({{"name", v.name},
                                 {"pass", v.pass},
                                 {"measured", v.measured},
                                 {"threshold", v.threshold},
                                 {"detail", v.detail}});
    j["flops_savings"] = report.flops_savings;
    j["flops_reconcile"] = report.flops_reconcile;
    j["all_pass"] = report.all_pass();
    return j;
}

// Minimal structural schema check for emitted reports: required keys present,
// numeric fields finite.
inline bool validate_report_json(const nlohmann::json& j, std::string* why = nullptr) {
    const auto fail = [&](const std::string& msg) {
        if (why != nullptr) *why = msg;
        return false;
    };
    for (const char* key : {"config", "modes", "verdicts", "flops_savings", "flops_reconcile"})
        if (!j.contains(key)) return fail(std::string("missing key: ") + key);
    if (!j["modes"].is_array() || j["modes"].empty()) return fail("modes must be non-empty");
    for (const auto& m : j["modes"]) {
        for (const char* key :
             {"name", "mean_wall_ms", "p95_wall_ms", "triggers", "flops_executed"})
            if (!m.contains(key)) return fail(std::string("mode missing key: ") + key);
        for (const auto& [k, v] : m.items())
            if (v.is_number_float() && !std::isfinite(v.get<double>()))
                return fail("non-finite numeric field: " + k);
    }
    return true;
}

inline void write_report_json(const Report& report, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << report_to_json(report).dump(2) << '\n';
    if (!out) throw IoError("failed writing " + path);
}

inline const char* kTraceCsvHeader =
    "run,frame,forward,triggered,dropped_trigger,pattern_version,similarity,"
    "t_backbone_ns,t_expert_ns,t_prune_ns,t_wall_ns";

inline void append_trace_csv(std::ostream& out, const std::string& run_name,
                             const std::vector<TraceRow>& trace) {
    for (const TraceRow& r : trace) {
        out << run_name << ',' << r.frame << ',' << (r.sparse ? "sparse" : "dense") << ','
            << (r.triggered ? 1 : 0) << ',' << (r.dropped_trigger ? 1 : 0) << ','
            << r.pattern_version_applied << ',' << r.similarity << ',' << r.t_backbone_ns << ','
            << r.t_expert_ns << ',' << r.t_prune_ns << ',' << r.t_wall_ns << '\n';
    }
}

inline void write_trace_csv(const std::vector<std::pair<std::string, const EpisodeResult*>>& runs,
                            const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << kTraceCsvHeader << '\n';
    for (const auto& [name, result] : runs) append_trace_csv(out, name, result->trace);
    if (!out) throw IoError("failed writing " + path);
}

// JSON-lines trace: one object per frame.
inline void write_trace_jsonl(const EpisodeResult& result, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    for (const TraceRow& r : result.trace) {
        nlohmann::ordered_json j{{"frame", r.frame},
                                 {"forward", r.sparse ? "sparse" : "dense"},
                                 {"triggered", r.triggered},
                                 {"dropped_trigger", r.dropped_trigger},
                                 {"pattern_version", r.pattern_version_applied},
                                 {"similarity", r.similarity},
                                 {"t_backbone_ns", r.t_backbone_ns},
                                 {"t_expert_ns", r.t_expert_ns},
                                 {"t_prune_ns", r.t_prune_ns},
                                 {"t_wall_ns", r.t_wall_ns}};
        out << j.dump() << '\n';
    }
    if (!out) throw IoError("failed writing " + path);
}

}  // namespace ecovla
