#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "ecovla/episode.hpp"
#include "ecovla/report.hpp"

using namespace ecovla;

namespace {

ModelConfig tiny_config(std::uint64_t seed = 42) {
    ModelConfig cfg;
    cfg.blocks = 2;
    cfg.dim = 16;
    cfg.heads = 4;
    cfg.head_dim = 4;
    cfg.ff_dim = 40;
    cfg.seq_len = 8;
    cfg.vis_tokens = 4;
    cfg.vis_dim = 8;
    cfg.expert_width = 8;
    cfg.seed = seed;
    return cfg;
}

EpisodeSpec two_regime_spec(const ModelConfig& mcfg, std::size_t frames, std::size_t boundary,
                            float drift, std::uint64_t seed) {
    EpisodeSpec spec;
    spec.frames = frames;
    spec.obs_rows = mcfg.vis_tokens;
    spec.obs_cols = mcfg.vis_dim;
    spec.seed = seed;
    spec.regimes.push_back({0, 11, drift, true});
    spec.regimes.push_back({boundary, 22, drift, true});
    return spec;
}

std::vector<float> consecutive_similarities(const std::vector<Matrix>& frames) {
    std::vector<float> sims;
    for (std::size_t t = 1; t < frames.size(); ++t)
        sims.push_back(visual_similarity(frames[t], frames[t - 1]));
    return sims;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("a static scene yields similarity 1.0 at every step") {
    EpisodeSpec spec;
    spec.frames = 12;
    spec.obs_rows = 4;
    spec.obs_cols = 8;
    spec.seed = 5;
    spec.regimes.push_back({0, 9, 0.0f, true});
    const std::vector<Matrix> frames = generate_episode(spec);
    REQUIRE(frames.size() == 12);
    for (float s : consecutive_similarities(frames)) REQUIRE(s == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("a jump regime dips the similarity exactly at the boundary") {
    const ModelConfig mcfg = tiny_config();
    const EpisodeSpec spec = two_regime_spec(mcfg, 20, 10, 0.01f, 7);
    const std::vector<Matrix> frames = generate_episode(spec);
    const std::vector<float> sims = consecutive_similarities(frames);
    const float boundary_sim = sims[9];  // sim(frame 10, frame 9)
    for (std::size_t i = 0; i < sims.size(); ++i) {
        if (i == 9) continue;
        REQUIRE(boundary_sim < sims[i]);
    }
}

TEST_CASE("episode generation is deterministic per seed") {
    const ModelConfig mcfg = tiny_config();
    const EpisodeSpec spec = two_regime_spec(mcfg, 16, 8, 0.05f, 21);
    const std::vector<Matrix> a = generate_episode(spec);
    const std::vector<Matrix> b = generate_episode(spec);
    EpisodeSpec other = spec;
    other.seed = 22;
    const std::vector<Matrix> c = generate_episode(other);
    REQUIRE(a.size() == b.size());
    bool all_equal = true, any_diff = false;
    for (std::size_t t = 0; t < a.size(); ++t)
        for (std::size_t i = 0; i < a[t].size(); ++i) {
            all_equal = all_equal && a[t].data()[i] == b[t].data()[i];
            any_diff = any_diff || a[t].data()[i] != c[t].data()[i];
        }
    REQUIRE(all_equal);
    REQUIRE(any_diff);
}

TEST_CASE("non-jump regimes keep the base and only change drift") {
    EpisodeSpec spec;
    spec.frames = 10;
    spec.obs_rows = 3;
    spec.obs_cols = 4;
    spec.seed = 13;
    spec.regimes.push_back({0, 5, 0.0f, true});
    spec.regimes.push_back({5, 99, 0.0f, false});  // base_seed ignored
    const std::vector<Matrix> frames = generate_episode(spec);
    for (std::size_t i = 0; i < frames[0].size(); ++i)
        REQUIRE(frames[4].data()[i] == frames[5].data()[i]);
}

TEST_CASE("episode spec validation") {
    EpisodeSpec spec;
    spec.regimes.clear();
    REQUIRE_THROWS_AS(spec.validate(), ConfigError);
    spec.regimes.push_back({3, 1, 0.0f, true});  // must start at 0
    REQUIRE_THROWS_AS(spec.validate(), ConfigError);
    spec.regimes = {{0, 1, 0.0f, true}, {0, 2, 0.0f, true}};  // not increasing
    REQUIRE_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("calibration set is singleton for k=1 and disjoint from the episode stream") {
    const ModelConfig mcfg = tiny_config();
    const EpisodeSpec spec = two_regime_spec(mcfg, 16, 8, 0.05f, 31);
    REQUIRE(build_calibration(spec, 1).size() == 1);
    REQUIRE_THROWS_AS(build_calibration(spec, 0), ConfigError);

    const std::vector<Matrix> calib = build_calibration(spec, 4);
    const std::vector<Matrix> episode = generate_episode(spec);
    bool differs = false;
    for (std::size_t i = 0; i < calib[0].size(); ++i)
        differs = differs || calib[0].data()[i] != episode[0].data()[i];
    REQUIRE(differs);  // same regime, independent noise stream

    // Every calibration frame is a valid encoder input.
    const Model model(mcfg);
    for (const Matrix& obs : calib) REQUIRE(model.encode_observation(obs).all_finite());
}

TEST_CASE("verify_oracles passes at the stated tolerances") {
    const std::vector<Verdict> verdicts = verify_oracles(tiny_config(), EapConfig{});
    REQUIRE_FALSE(verdicts.empty());
    for (const Verdict& v : verdicts) {
        INFO(v.name << " measured " << v.measured << " threshold " << v.threshold);
        REQUIRE(v.pass);
    }
}

TEST_CASE("corrupted masks fail the invariant check (negative control)") {
    ChannelIndexSet unsorted = ChannelIndexSet::all(4);
    std::swap(unsorted.retained[0], unsorted.retained[2]);
    REQUIRE_THROWS_AS(unsorted.validate(), MaskError);

    const ModelConfig cfg = tiny_config();
    SparsityPattern p = SparsityPattern::full(cfg);
    std::swap(p.mlp_keep[0].retained[0], p.mlp_keep[0].retained[5]);
    REQUIRE_THROWS_AS(p.validate(cfg), MaskError);
}

TEST_CASE("zero tolerance fails floating comparisons but not exact-arithmetic checks") {
    VerifyTolerances zero;
    zero.masked_dense_rel = 0.0;
    zero.eq11_rel = 0.0;
    zero.fused_abs = 0.0;
    const std::vector<Verdict> verdicts = verify_oracles(tiny_config(), EapConfig{}, zero);
    bool eq11_pass = true;
    for (const Verdict& v : verdicts) {
        if (v.name == "importance_factored_vs_literal") eq11_pass = v.pass;
        if (v.name == "gather_free_exact" || v.name == "colmajor_exact" ||
            v.name == "quantile_nearest_rank" || v.name == "mask_invariants" ||
            v.name == "eap_cost_within_formula" || v.name == "eap_formula_hand_value")
            REQUIRE(v.pass);
    }
    REQUIRE_FALSE(eq11_pass);
}

TEST_CASE("benchmark at ratio 0 shows no divergence and no flops savings") {
    BenchmarkConfig cfg;
    cfg.model = tiny_config();
    cfg.eap = EapConfig{};
    cfg.eap.ratio = 0.0;
    cfg.eap.window = 4;
    cfg.eap.calib_frames = 2;
    cfg.episode = two_regime_spec(cfg.model, 16, 8, 0.0f, 41);
    cfg.run_verify = false;
    const Report report = run_benchmark(cfg);
    REQUIRE(report.modes.size() == 3);
    REQUIRE(report.modes[1].flops_executed == report.modes[1].flops_dense_equiv);
    REQUIRE(report.modes[1].divergence_vs_dense == 0.0);
    REQUIRE(report.flops_savings == 0);
}

TEST_CASE("benchmark flops fields reconcile with the analytic counter") {
    BenchmarkConfig cfg;
    cfg.model = tiny_config();
    cfg.eap = EapConfig{};
    cfg.eap.ratio = 0.4;
    cfg.eap.window = 4;
    cfg.eap.calib_frames = 2;
    cfg.episode = two_regime_spec(cfg.model, 20, 10, 0.0f, 43);
    cfg.run_verify = false;
    std::vector<EpisodeResult> raw;
    const Report report = run_benchmark(cfg, &raw);
    REQUIRE(report.flops_reconcile);

    // Per-frame flops depend only on the retained counts, which are uniform,
    // so the executed total must equal the split between dense and sparse
    // frames exactly.
    const EpisodeResult& sync = raw[1];
    const std::uint64_t dense_per_frame = flops_count(cfg.model, nullptr).total();
    std::mt19937 rng(1);
    const SparsityPattern probe =
        detail_report::random_pattern(rng, cfg.model, cfg.eap.ratio, false, 1);
    const std::uint64_t sparse_per_frame = flops_count(cfg.model, &probe).total();
    std::uint64_t expect = 0;
    for (const TraceRow& row : sync.trace)
        expect += row.sparse ? sparse_per_frame : dense_per_frame;
    REQUIRE(sync.flops_executed == expect);
    REQUIRE(report.flops_savings == sync.flops_dense_equiv - sync.flops_executed);
}

TEST_CASE("report JSON emission is idempotent and schema-valid") {
    BenchmarkConfig cfg;
    cfg.model = tiny_config();
    cfg.eap = EapConfig{};
    cfg.eap.window = 4;
    cfg.eap.calib_frames = 2;
    cfg.episode = two_regime_spec(cfg.model, 12, 6, 0.0f, 47);
    cfg.run_verify = false;
    std::vector<EpisodeResult> raw;
    const Report report = run_benchmark(cfg, &raw);

    const std::string path = "report_test.json";
    write_report_json(report, path);
    const std::string first = slurp(path);
    write_report_json(report, path);
    REQUIRE(slurp(path) == first);

    std::string why;
    REQUIRE(validate_report_json(nlohmann::json::parse(first), &why));

    nlohmann::json broken = nlohmann::json::parse(first);
    broken.erase("modes");
    REQUIRE_FALSE(validate_report_json(broken, &why));
    std::remove(path.c_str());
}

TEST_CASE("trace CSV has one row per frame per run and jsonl one line per frame") {
    BenchmarkConfig cfg;
    cfg.model = tiny_config();
    cfg.eap = EapConfig{};
    cfg.eap.window = 4;
    cfg.eap.calib_frames = 2;
    cfg.episode = two_regime_spec(cfg.model, 10, 5, 0.0f, 53);
    cfg.run_verify = false;
    std::vector<EpisodeResult> raw;
    run_benchmark(cfg, &raw);

    const std::string csv_path = "trace_test.csv";
    write_trace_csv({{"dense", &raw[0]}, {"sync", &raw[1]}, {"interleaved", &raw[2]}}, csv_path);
    std::ifstream in(csv_path);
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++lines;
    REQUIRE(lines == 1 + 3 * cfg.episode.frames);  // header + rows

    const std::string jsonl_path = "trace_test.jsonl";
    write_trace_jsonl(raw[1], jsonl_path);
    std::ifstream jin(jsonl_path);
    std::size_t jlines = 0;
    while (std::getline(jin, line))
        if (!line.empty()) {
            REQUIRE_NOTHROW(nlohmann::json::parse(line));
            ++jlines;
        }
    REQUIRE(jlines == cfg.episode.frames);
    std::remove(csv_path.c_str());
    std::remove(jsonl_path.c_str());
}

TEST_CASE("emit to an unwritable path raises an I/O error") {
    const Report report;
    REQUIRE_THROWS_AS(write_report_json(report, "/nonexistent-dir/report.json"), IoError);
}

TEST_CASE("action divergence is non-decreasing in the pruning ratio for most seeds") {
    const ModelConfig mcfg = tiny_config();
    int monotone_seeds = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        ModelConfig m = mcfg;
        m.seed = seed;
        const Model model(m);
        EpisodeSpec spec = two_regime_spec(m, 24, 12, 0.02f, 100 + seed);
        const std::vector<Matrix> frames = generate_episode(spec);
        const std::vector<Matrix> calib = build_calibration(spec, 2);
        const EpisodeResult dense = run_dense_baseline(model, frames);

        std::vector<double> divergences;
        for (double ratio : {0.0, 0.25, 0.4, 0.6}) {
            EapConfig ecfg;
            ecfg.window = 4;
            ecfg.ratio = ratio;
            ecfg.calib_frames = 2;
            AdaptivePruner pruner(model, ecfg);
            OrchestratorConfig ocfg;
            ocfg.mode = OrchestratorConfig::Mode::Synchronous;
            Orchestrator orch(model, pruner, ocfg);
            const EpisodeResult run = orch.run_episode(calib, frames);
            divergences.push_back(detail_report::action_divergence(run.actions, dense.actions));
        }
        bool monotone = divergences[0] == 0.0;
        for (std::size_t i = 1; i < divergences.size(); ++i)
            monotone = monotone && divergences[i] >= divergences[i - 1];
        monotone_seeds += monotone ? 1 : 0;
    }
    INFO("monotone seeds: " << monotone_seeds);
    REQUIRE(monotone_seeds >= 6);
}
