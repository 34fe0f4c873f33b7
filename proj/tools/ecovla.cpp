// ecovla: adaptive-pruning runtime for a toy streaming transformer.
//
// Subcommands:
//   run     one episode in the chosen mode; per-frame JSON-lines trace +
//           aggregate JSON report
//   bench   paired dense / sparse-sync / sparse-interleaved runs on the same
//           episode; JSON report + flat CSV trace
//   verify  runtime oracle suite; exit code reflects the verdicts
//   flops   analytic per-frame FLOPs for the configured model

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ecovla/episode.hpp"
#include "ecovla/model_io.hpp"
#include "ecovla/orchestrator.hpp"
#include "ecovla/report.hpp"

namespace {

struct CliOptions {
    ecovla::ModelConfig model;
    ecovla::EapConfig eap;
    std::string mode = "interleaved";
    std::string head_pruning = "off";
    double delta_budget_ms = 0.0;  // 0 = auto (10% of mean frame time)
    std::size_t frames = 512;
    double drift = 0.01;
    std::vector<std::size_t> jumps;
    std::uint64_t episode_seed = 1;
    std::string out_dir = ".";
    std::string save_weights_prefix;
    std::string load_weights_prefix;
};

ecovla::Model make_model(const CliOptions& opt) {
    ecovla::Model model(opt.model);
    if (!opt.load_weights_prefix.empty())
        ecovla::load_weights(model, opt.load_weights_prefix + ".bin",
                             opt.load_weights_prefix + ".json");
    if (!opt.save_weights_prefix.empty())
        ecovla::save_weights(model, opt.save_weights_prefix + ".bin",
                             opt.save_weights_prefix + ".json");
    return model;
}

void add_common_options(CLI::App& app, CliOptions& opt) {
    app.add_option("--layers", opt.model.blocks, "Transformer block count")->capture_default_str();
    app.add_option("--dim", opt.model.dim, "Hidden width")->capture_default_str();
    app.add_option("--heads", opt.model.heads, "Attention heads")->capture_default_str();
    app.add_option("--dff", opt.model.ff_dim, "MLP width")->capture_default_str();
    app.add_option("--seq", opt.model.seq_len, "Sequence length")->capture_default_str();
    app.add_option("--vis-tokens", opt.model.vis_tokens, "Visual token count")
        ->capture_default_str();
    app.add_option("--vis-dim", opt.model.vis_dim, "Visual feature width")->capture_default_str();
    app.add_option("--expert-width", opt.model.expert_width, "Action expert width")
        ->capture_default_str();
    app.add_option("--model-seed", opt.model.seed, "Weight init seed")->capture_default_str();

    app.add_option("--ratio", opt.eap.ratio, "Pruning ratio in [0,1)")->capture_default_str();
    app.add_option("--alpha", opt.eap.alpha, "Temporal inertia in [0,1)")->capture_default_str();
    app.add_option("--lambda", opt.eap.lambda, "History EMA momentum in [0,1)")
        ->capture_default_str();
    app.add_option("--p", opt.eap.p, "Trigger quantile percent in (0,100)")
        ->capture_default_str();
    app.add_option("--window", opt.eap.window, "Similarity window length")->capture_default_str();
    app.add_option("--calib-frames", opt.eap.calib_frames, "Calibration frame count")
        ->capture_default_str();
    app.add_option("--head-pruning", opt.head_pruning, "Head pruning {on|off}")
        ->check(CLI::IsMember({"on", "off"}))
        ->capture_default_str();

    app.add_option("--mode", opt.mode, "Execution mode {sync|interleaved}")
        ->check(CLI::IsMember({"sync", "interleaved"}))
        ->capture_default_str();
    app.add_option("--delta-budget-ms", opt.delta_budget_ms,
                   "Concurrency overhead budget per frame; 0 = 10% of mean frame time")
        ->capture_default_str();

    app.add_option("--frames", opt.frames, "Episode length")->capture_default_str();
    app.add_option("--drift", opt.drift, "Per-frame Gaussian drift sigma")->capture_default_str();
    app.add_option("--jump-at", opt.jumps, "Frames at which the scene jumps to a new base")
        ->delimiter(',');
    app.add_option("--episode-seed", opt.episode_seed, "Episode noise seed")
        ->capture_default_str();
    app.add_option("--out-dir", opt.out_dir, "Output directory")->capture_default_str();
    app.add_option("--save-weights", opt.save_weights_prefix,
                   "Dump model weights to PREFIX.bin + PREFIX.json");
    app.add_option("--load-weights", opt.load_weights_prefix,
                   "Load model weights from PREFIX.bin + PREFIX.json");
}

void finalize(CliOptions& opt) {
    if (opt.model.heads == 0 || opt.model.dim % opt.model.heads != 0)
        throw ecovla::ConfigError("--dim must be divisible by --heads");
    opt.model.head_dim = opt.model.dim / opt.model.heads;
    opt.eap.head_pruning = opt.head_pruning == "on";
    opt.model.validate();
    opt.eap.validate();
    if (opt.delta_budget_ms < 0.0)
        throw ecovla::ConfigError("--delta-budget-ms must be positive (or 0 for auto)");
    std::filesystem::create_directories(opt.out_dir);
}

ecovla::EpisodeSpec episode_spec(const CliOptions& opt) {
    ecovla::EpisodeSpec spec;
    spec.frames = opt.frames;
    spec.obs_rows = opt.model.vis_tokens;
    spec.obs_cols = opt.model.vis_dim;
    spec.seed = opt.episode_seed;
    spec.regimes.push_back({0, opt.episode_seed * 131 + 17, static_cast<float>(opt.drift), true});
    std::size_t idx = 1;
    for (std::size_t j : opt.jumps) {
        spec.regimes.push_back(
            {j, opt.episode_seed * 131 + 17 + idx, static_cast<float>(opt.drift), true});
        ++idx;
    }
    spec.validate();
    return spec;
}

void print_mode(const ecovla::ModeReport& m) {
    std::printf("  %-18s mean %8.3f ms  p95 %8.3f ms  speedup %5.2fx  divergence %.3e\n",
                m.name.c_str(), m.mean_wall_ms, m.p95_wall_ms, m.speedup_vs_dense,
                m.divergence_vs_dense);
    std::printf("  %-18s triggers %llu (dropped %llu)  flops %llu / dense %llu\n", "",
                static_cast<unsigned long long>(m.triggers),
                static_cast<unsigned long long>(m.dropped_triggers),
                static_cast<unsigned long long>(m.flops_executed),
                static_cast<unsigned long long>(m.flops_dense_equiv));
}

int print_verdicts(const std::vector<ecovla::Verdict>& verdicts) {
    int failures = 0;
    for (const auto& v : verdicts) {
        std::printf("[%s] %-32s measured %.3e threshold %.3e  %s\n", v.pass ? "PASS" : "FAIL",
                    v.name.c_str(), v.measured, v.threshold, v.detail.c_str());
        failures += v.pass ? 0 : 1;
    }
    return failures;
}

int cmd_run(const CliOptions& opt) {
    const ecovla::Model model = make_model(opt);
    const ecovla::EpisodeSpec spec = episode_spec(opt);
    const std::vector<ecovla::Matrix> frames = ecovla::generate_episode(spec);
    const std::vector<ecovla::Matrix> calib =
        ecovla::build_calibration(spec, opt.eap.calib_frames);

    ecovla::AdaptivePruner pruner(model, opt.eap);
    ecovla::OrchestratorConfig ocfg;
    ocfg.mode = opt.mode == "sync" ? ecovla::OrchestratorConfig::Mode::Synchronous
                                   : ecovla::OrchestratorConfig::Mode::Interleaved;
    ocfg.delta_budget_ms = opt.delta_budget_ms;
    ecovla::Orchestrator orch(model, pruner, ocfg);
    const ecovla::EpisodeResult result = orch.run_episode(calib, frames);

    ecovla::Report report;
    report.config_echo = {{"mode", opt.mode},
                          {"frames", opt.frames},
                          {"ratio", opt.eap.ratio},
                          {"alpha", opt.eap.alpha},
                          {"lambda", opt.eap.lambda},
                          {"p", opt.eap.p},
                          {"window", opt.eap.window},
                          {"seed", opt.episode_seed}};
    report.modes.push_back(
        ecovla::detail_report::summarize(opt.mode, result, 0.0, opt.delta_budget_ms));

    const std::string trace_path = opt.out_dir + "/trace.jsonl";
    const std::string report_path = opt.out_dir + "/report.json";
    ecovla::write_trace_jsonl(result, trace_path);
    ecovla::write_report_json(report, report_path);

    std::printf("episode: %zu frames, %llu triggers (%llu dropped), %llu updates\n",
                result.trace.size(), static_cast<unsigned long long>(result.triggers),
                static_cast<unsigned long long>(result.dropped_triggers),
                static_cast<unsigned long long>(result.updates_published));
    print_mode(report.modes[0]);
    std::printf("trace  -> %s\nreport -> %s\n", trace_path.c_str(), report_path.c_str());
    return 0;
}

int cmd_bench(const CliOptions& opt) {
    ecovla::BenchmarkConfig cfg;
    cfg.model = opt.model;
    cfg.eap = opt.eap;
    cfg.episode = episode_spec(opt);
    cfg.delta_budget_ms = opt.delta_budget_ms;
    cfg.run_verify = true;

    std::vector<ecovla::EpisodeResult> raw;
    const ecovla::Report report = ecovla::run_benchmark(cfg, &raw);

    const std::string report_path = opt.out_dir + "/report.json";
    const std::string csv_path = opt.out_dir + "/trace.csv";
    ecovla::write_report_json(report, report_path);
    ecovla::write_trace_csv(
        {{"dense", &raw[0]}, {"sparse_sync", &raw[1]}, {"sparse_interleaved", &raw[2]}}, csv_path);

    std::printf("paired benchmark over %zu frames (ratio %.2f):\n", cfg.episode.frames,
                opt.eap.ratio);
    for (const auto& m : report.modes) print_mode(m);
    const int failures = print_verdicts(report.verdicts);
    std::printf("flops savings (sync run): %llu, reconcile: %s\n",
                static_cast<unsigned long long>(report.flops_savings),
                report.flops_reconcile ? "yes" : "no");
    std::printf("report -> %s\ntrace  -> %s\n", report_path.c_str(), csv_path.c_str());
    return failures == 0 && report.flops_reconcile ? 0 : 1;
}

int cmd_verify(const CliOptions& opt) {
    const std::vector<ecovla::Verdict> verdicts = ecovla::verify_oracles(opt.model, opt.eap);
    const int failures = print_verdicts(verdicts);
    std::printf("%zu checks, %d failed\n", verdicts.size(), failures);
    return failures == 0 ? 0 : 1;
}

int cmd_flops(const CliOptions& opt) {
    const ecovla::FlopsBreakdown dense = ecovla::flops_count(opt.model, nullptr);

    // Uniform mask at the configured ratio; the counts depend only on the
    // retained counts, not which channels are kept.
    const std::size_t keep_mlp = ecovla::retained_count(opt.model.ff_dim, opt.eap.ratio);
    const std::size_t keep_heads =
        opt.eap.head_pruning ? ecovla::retained_count(opt.model.heads, opt.eap.ratio)
                             : opt.model.heads;
    ecovla::SparsityPattern pattern;
    for (std::size_t l = 0; l < opt.model.blocks; ++l) {
        std::vector<std::size_t> mlp_idx(keep_mlp), head_idx(keep_heads);
        std::iota(mlp_idx.begin(), mlp_idx.end(), std::size_t{0});
        std::iota(head_idx.begin(), head_idx.end(), std::size_t{0});
        pattern.mlp_keep.push_back(ecovla::ChannelIndexSet(std::move(mlp_idx), opt.model.ff_dim));
        pattern.head_keep.push_back(
            ecovla::ChannelIndexSet(std::move(head_idx), opt.model.heads));
    }
    const ecovla::FlopsBreakdown sparse = ecovla::flops_count(opt.model, &pattern);

    nlohmann::ordered_json j;
    auto dump = [](const ecovla::FlopsBreakdown& f) {
        return nlohmann::ordered_json{{"attn_qkv", f.attn_qkv},
                                      {"attn_scores_values", f.attn_scores_values},
                                      {"attn_out_proj", f.attn_out_proj},
                                      {"mlp_gate_up", f.mlp_gate_up},
                                      {"mlp_down", f.mlp_down},
                                      {"expert", f.expert},
                                      {"encoder", f.encoder},
                                      {"backbone", f.backbone()},
                                      {"total", f.total()}};
    };
    j["dense"] = dump(dense);
    j["sparse"] = dump(sparse);
    j["sparse"]["ratio"] = opt.eap.ratio;
    j["sparse"]["reduction"] =
        1.0 - static_cast<double>(sparse.total()) / static_cast<double>(dense.total());
    // Worst-case per-update pruning cost: similarity once plus the per-block
    // terms for every block.
    j["pruning_update"] =
        5 * opt.model.vis_tokens * opt.model.dim +
        opt.model.blocks * (ecovla::eap_flops_estimate(opt.model.vis_tokens, opt.model.dim,
                                                       opt.model.seq_len, opt.model.ff_dim,
                                                       opt.model.dim) -
                            5 * opt.model.vis_tokens * opt.model.dim);
    j["arithmetic_intensity_backbone_gemm"] =
        ecovla::arithmetic_intensity(opt.model.seq_len, opt.model.ff_dim, opt.model.dim);
    std::printf("%s\n", j.dump(2).c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Adaptive structured pruning on a toy streaming transformer"};
    app.set_config("--config", "", "Key-value config file; command-line flags take precedence");
    CliOptions opt;
    add_common_options(app, opt);

    CLI::App* run = app.add_subcommand("run", "Run one episode in the chosen mode");
    CLI::App* bench = app.add_subcommand("bench", "Paired dense/sync/interleaved benchmark");
    CLI::App* verify = app.add_subcommand("verify", "Run the runtime oracle suite");
    CLI::App* flops = app.add_subcommand("flops", "Analytic FLOPs counters for the config");
    for (CLI::App* sub : {run, bench, verify, flops}) sub->fallthrough();
    app.require_subcommand(1);

    CLI11_PARSE(app, argc, argv);

    try {
        finalize(opt);
        if (run->parsed()) return cmd_run(opt);
        if (bench->parsed()) return cmd_bench(opt);
        if (verify->parsed()) return cmd_verify(opt);
        if (flops->parsed()) return cmd_flops(opt);
    } catch (const ecovla::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
