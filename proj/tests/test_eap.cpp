#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "ecovla/pruning.hpp"
#include "ecovla/reference.hpp"

using namespace ecovla;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.blocks = 2;
    cfg.dim = 16;
    cfg.heads = 4;
    cfg.head_dim = 4;
    cfg.ff_dim = 32;
    cfg.seq_len = 8;
    cfg.vis_tokens = 4;
    cfg.vis_dim = 8;
    cfg.expert_width = 8;
    cfg.seed = 42;
    return cfg;
}

Matrix random_obs(std::mt19937& rng, const ModelConfig& cfg) {
    Matrix m(cfg.vis_tokens, cfg.vis_dim);
    std::normal_distribution<float> dist(0.0f, 1.0f);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    return m;
}

}  // namespace

TEST_CASE("visual_similarity of identical nonzero features is 1") {
    const Matrix f = Matrix::from_rows({{1, 2}, {3, -4}});
    REQUIRE(visual_similarity(f, f) == Catch::Approx(1.0).margin(1e-7));
}

TEST_CASE("visual_similarity hand case averages per-token cosines") {
    const Matrix f_t = Matrix::from_rows({{1, 0}, {0, 1}});
    const Matrix f_prev = Matrix::from_rows({{1, 0}, {1, 0}});
    REQUIRE(visual_similarity(f_t, f_prev) == Catch::Approx(0.5).margin(1e-7));
}

TEST_CASE("visual_similarity of antipodal features is -1") {
    const Matrix f = Matrix::from_rows({{1, 2, 3}, {-1, 0, 2}});
    Matrix neg(f.rows(), f.cols());
    for (std::size_t i = 0; i < f.rows(); ++i)
        for (std::size_t j = 0; j < f.cols(); ++j) neg.at(i, j) = -f.at(i, j);
    REQUIRE(visual_similarity(f, neg) == Catch::Approx(-1.0).margin(1e-7));
}

TEST_CASE("visual_similarity zero-norm rows contribute 0") {
    const Matrix f_t = Matrix::from_rows({{0, 0}, {1, 0}});
    const Matrix f_prev = Matrix::from_rows({{1, 1}, {1, 0}});
    // First token contributes 0, second contributes 1.
    REQUIRE(visual_similarity(f_t, f_prev) == Catch::Approx(0.5).margin(1e-7));
}

TEST_CASE("visual_similarity rejects shape mismatch") {
    REQUIRE_THROWS_AS(visual_similarity(Matrix(2, 3), Matrix(3, 2)), ShapeError);
}

TEST_CASE("cached similarity equals the pairwise form") {
    std::mt19937 rng(4);
    std::normal_distribution<float> dist;
    Matrix a(5, 7), b(5, 7);
    for (std::size_t i = 0; i < a.size(); ++i) {
        a.data()[i] = dist(rng);
        b.data()[i] = dist(rng);
    }
    const std::vector<double> prev_norms = feature_row_norms(b);
    std::vector<double> out;
    REQUIRE(visual_similarity_cached(a, b, prev_norms, out) ==
            Catch::Approx(visual_similarity(a, b)).margin(1e-7));
    REQUIRE(out == feature_row_norms(a));
}

TEST_CASE("similarity window is a bounded FIFO") {
    SimilarityWindow win(3);
    win.push(0.1f);
    REQUIRE(win.size() == 1);
    win.push(0.2f);
    win.push(0.3f);
    REQUIRE(win.full());
    win.push(0.4f);
    REQUIRE(win.size() == 3);
    const std::deque<float> expect{0.2f, 0.3f, 0.4f};
    REQUIRE(win.scores() == expect);
}

TEST_CASE("similarity window replay matches the last T pushes") {
    std::mt19937 rng(8);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    SimilarityWindow win(5);
    std::vector<float> pushed;
    for (int i = 0; i < 37; ++i) {
        const float s = u(rng);
        pushed.push_back(s);
        win.push(s);
    }
    std::vector<float> tail(pushed.end() - 5, pushed.end());
    std::vector<float> got(win.scores().begin(), win.scores().end());
    REQUIRE(got == tail);
}

TEST_CASE("should_update nearest-rank hand cases") {
    SimilarityWindow win(5);
    for (float s : {0.5f, 0.6f, 0.7f, 0.8f, 0.9f}) win.push(s);
    REQUIRE(window_quantile(win, 40.0) == 0.6f);
    REQUIRE(should_update(win, 0.55f, 40.0));
    REQUIRE_FALSE(should_update(win, 0.65f, 40.0));
    // Strict inequality: equality with the threshold does not trigger.
    REQUIRE_FALSE(should_update(win, 0.6f, 40.0));
}

TEST_CASE("should_update requires a full window") {
    SimilarityWindow win(4);
    win.push(0.5f);
    REQUIRE_THROWS_AS(should_update(win, 0.1f, 50.0), StateError);
}

TEST_CASE("window quantile matches the scanning reference exhaustively") {
    std::mt19937 rng(21);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    for (std::size_t T = 2; T <= 10; ++T) {
        for (int p = 1; p <= 99; ++p) {
            SimilarityWindow win(T);
            std::vector<float> vals(T);
            for (auto& v : vals) {
                v = u(rng);
                win.push(v);
            }
            REQUIRE(window_quantile(win, p) == reference::quantile_by_scan(vals, p));
        }
    }
}

TEST_CASE("trigger sensitivity is monotone in p") {
    std::mt19937 rng(33);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    std::uniform_real_distribution<double> up(1.0, 99.0);
    for (int it = 0; it < 1000; ++it) {
        const std::size_t T = 2 + rng() % 9;
        SimilarityWindow win(T);
        for (std::size_t i = 0; i < T; ++i) win.push(u(rng));
        const float s = u(rng);
        double p1 = up(rng), p2 = up(rng);
        if (p1 > p2) std::swap(p1, p2);
        REQUIRE(window_quantile(win, p1) <= window_quantile(win, p2));
        if (should_update(win, s, p1)) REQUIRE(should_update(win, s, p2));
    }
}

TEST_CASE("trigger rate jumps when the similarity distribution drops") {
    // Two-phase stream: similarities i.i.d. from A, then from a strictly
    // lower B. The empirical trigger rate over B's first T frames must beat
    // the steady-state rate over A's last T frames, for every seed.
    const std::size_t T = 50;
    const double p = 5.0;
    const int a_frames = 150, b_frames = 60;
    for (unsigned seed = 1; seed <= 20; ++seed) {
        std::mt19937 rng(seed);
        std::uniform_real_distribution<float> dist_a(0.75f, 0.9f);
        std::uniform_real_distribution<float> dist_b(0.2f, 0.35f);
        SimilarityWindow win(T);
        std::vector<bool> triggers;
        std::vector<float> stream;
        for (int i = 0; i < a_frames; ++i) stream.push_back(dist_a(rng));
        for (int i = 0; i < b_frames; ++i) stream.push_back(dist_b(rng));
        for (float s : stream) {
            triggers.push_back(win.full() && should_update(win, s, p));
            win.push(s);
        }
        int rate_a = 0, rate_b = 0;
        for (std::size_t t = a_frames - T; t < static_cast<std::size_t>(a_frames); ++t)
            rate_a += triggers[t] ? 1 : 0;
        for (std::size_t t = a_frames; t < a_frames + T; ++t) rate_b += triggers[t] ? 1 : 0;
        INFO("seed " << seed << " rate_a " << rate_a << " rate_b " << rate_b);
        REQUIRE(rate_b > rate_a);
    }
}

TEST_CASE("instantaneous_features sums squares per column") {
    const Matrix x = Matrix::from_rows({{1, 2}, {3, 4}});
    const std::vector<float> eps = instantaneous_features(x);
    REQUIRE(eps == std::vector<float>{10.0f, 20.0f});
}

TEST_CASE("instantaneous_features of zero matrix is zero and always non-negative") {
    REQUIRE(instantaneous_features(Matrix(3, 4)) == std::vector<float>(4, 0.0f));
    std::mt19937 rng(6);
    std::normal_distribution<float> dist;
    Matrix x(5, 9);
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = dist(rng);
    for (float v : instantaneous_features(x)) REQUIRE(v >= 0.0f);
}

TEST_CASE("fuse_features hand cases") {
    REQUIRE(fuse_features(std::vector<float>{10.0f}, std::vector<float>{20.0f}, 0.7) ==
            std::vector<float>{13.0f});
    const std::vector<float> hist{1.0f, 2.0f}, eps{5.0f, 7.0f};
    REQUIRE(fuse_features(hist, eps, 0.0) == eps);
    REQUIRE(fuse_features(hist, hist, 0.37) == hist);
    REQUIRE_THROWS_AS(fuse_features(hist, std::vector<float>{1.0f}, 0.5), ShapeError);
}

TEST_CASE("update_history hand cases and convexity") {
    REQUIRE(update_history(std::vector<float>{10.0f}, std::vector<float>{20.0f}, 0.9) ==
            std::vector<float>{11.0f});
    const std::vector<float> hist{3.0f, 8.0f}, eps{5.0f, 2.0f};
    REQUIRE(update_history(hist, eps, 0.0) == eps);
    const std::vector<float> next = update_history(hist, eps, 0.6);
    for (std::size_t k = 0; k < hist.size(); ++k) {
        REQUIRE(next[k] >= std::min(hist[k], eps[k]));
        REQUIRE(next[k] <= std::max(hist[k], eps[k]));
    }
}

TEST_CASE("importance_scores hand case and basic identities") {
    // Column [1, 2] with fused feature 3: || {3, 12} ||_2 = sqrt(153).
    Matrix w(2, 1, Layout::ColMajor);
    w.at(0, 0) = 1.0f;
    w.at(1, 0) = 2.0f;
    const std::vector<float> cache{std::sqrt(17.0f)};  // || {1, 4} ||_2
    const std::vector<float> fused{3.0f};
    const std::vector<float> s = importance_scores(cache, fused);
    REQUIRE(s[0] == Catch::Approx(std::sqrt(153.0)).margin(1e-5));
    const std::vector<float> lit = reference::importance_scores_literal(w, fused);
    REQUIRE(s[0] == Catch::Approx(lit[0]).epsilon(1e-6));

    REQUIRE(importance_scores(cache, std::vector<float>{0.0f}) == std::vector<float>{0.0f});
    REQUIRE(importance_scores(cache, std::vector<float>{1.0f}) == cache);
    REQUIRE_THROWS_AS(importance_scores(cache, std::vector<float>{-1.0f}), StateError);
}

TEST_CASE("factored scores match the literal form within 1e-6 relative") {
    std::mt19937 rng(55);
    std::normal_distribution<float> dist;
    std::uniform_real_distribution<float> upos(0.0f, 5.0f);
    for (int it = 0; it < 100; ++it) {
        const std::size_t cout = 2 + rng() % 40, cin = 1 + rng() % 30;
        Matrix w(cout, cin, Layout::ColMajor);
        for (std::size_t i = 0; i < w.rows(); ++i)
            for (std::size_t j = 0; j < w.cols(); ++j) w.at(i, j) = dist(rng);
        std::vector<float> fused(cin), cache(cin);
        for (auto& v : fused) v = upos(rng);
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
        for (std::size_t k = 0; k < cin; ++k)
            REQUIRE(factored[k] == Catch::Approx(literal[k]).epsilon(1e-6).margin(1e-12));
    }
}

TEST_CASE("top_k_retained picks the highest scores, ties to lower index") {
    const std::vector<float> scores{5.0f, 1.0f, 3.0f, 2.0f};
    REQUIRE(top_k_retained(scores, 2).retained == std::vector<std::size_t>{0, 2});
    const std::vector<float> equal(4, 1.0f);
    REQUIRE(top_k_retained(equal, 2).retained == std::vector<std::size_t>{0, 1});
    REQUIRE_THROWS_AS(top_k_retained(scores, 0), ConfigError);
}

TEST_CASE("top_k_retained matches the full-sort reference on random scores") {
    std::mt19937 rng(66);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (int it = 0; it < 100; ++it) {
        std::vector<float> scores(1 + rng() % 60);
        for (auto& s : scores) s = u(rng);
        if (it % 3 == 0 && scores.size() > 2) scores[1] = scores[scores.size() - 1];  // force ties
        const std::size_t k = 1 + rng() % scores.size();
        REQUIRE(top_k_retained(scores, k).retained == reference::top_k_by_sort(scores, k));
    }
}

TEST_CASE("retained_count rounds and rejects empty masks") {
    REQUIRE(retained_count(1024, 0.25) == 768);
    REQUIRE(retained_count(640, 0.4) == 384);
    REQUIRE(retained_count(10, 0.0) == 10);
    REQUIRE_THROWS_AS(retained_count(4, 0.95), ConfigError);
}

TEST_CASE("select_mask builds uniform per-block masks with the given version") {
    const std::vector<std::vector<float>> mlp{{4.0f, 1.0f, 3.0f, 2.0f}, {0.1f, 0.9f, 0.5f, 0.7f}};
    const SparsityPattern p = select_mask(mlp, {}, 4, 0.5, false, 3);
    REQUIRE(p.version == 3);
    REQUIRE(p.mlp_keep[0].retained == std::vector<std::size_t>{0, 2});
    REQUIRE(p.mlp_keep[1].retained == std::vector<std::size_t>{1, 3});
    REQUIRE(p.head_keep[0].is_full());
}

TEST_CASE("scale covariance: doubling activations scales features by 4 and keeps the mask") {
    std::mt19937 rng(71);
    std::normal_distribution<float> dist;
    Matrix x(6, 16);
    for (std::size_t i = 0; i < x.size(); ++i) x.data()[i] = dist(rng);
    Matrix x2(6, 16);
    for (std::size_t i = 0; i < x.size(); ++i) x2.data()[i] = 2.0f * x.data()[i];

    const std::vector<float> eps = instantaneous_features(x);
    const std::vector<float> eps2 = instantaneous_features(x2);
    for (std::size_t k = 0; k < eps.size(); ++k) REQUIRE(eps2[k] == 4.0f * eps[k]);

    std::vector<float> hist(16), hist4(16), cache(16);
    std::uniform_real_distribution<float> upos(0.1f, 2.0f);
    for (std::size_t k = 0; k < 16; ++k) {
        hist[k] = upos(rng);
        hist4[k] = 4.0f * hist[k];
        cache[k] = upos(rng);
    }
    const std::vector<float> fused = fuse_features(hist, eps, 0.7);
    const std::vector<float> fused4 = fuse_features(hist4, eps2, 0.7);
    for (std::size_t k = 0; k < 16; ++k) REQUIRE(fused4[k] == 4.0f * fused[k]);

    const std::vector<float> s1 = importance_scores(cache, fused);
    const std::vector<float> s4 = importance_scores(cache, fused4);
    for (std::size_t k = 0; k < 16; ++k) REQUIRE(s4[k] == 4.0f * s1[k]);
    REQUIRE(top_k_retained(s1, 6).retained == top_k_retained(s4, 6).retained);
}

TEST_CASE("eap_flops_estimate hand values and linearity") {
    REQUIRE(eap_flops_estimate(16, 8, 10, 32, 16) == 2944);
    REQUIRE(eap_flops_estimate(1, 1, 1, 1, 1) == 14);
    const std::uint64_t base = eap_flops_estimate(10, 4, 3, 5, 6);
    const std::uint64_t doubled = eap_flops_estimate(20, 4, 3, 5, 6);
    REQUIRE(doubled - base == 5 * 10 * 4);
    REQUIRE_THROWS_AS(eap_flops_estimate(0, 1, 1, 1, 1), ConfigError);
}

TEST_CASE("batched_scores equals the per-block loop bitwise and fuses the launch") {
    std::mt19937 rng(81);
    std::uniform_real_distribution<float> u(0.0f, 3.0f);
    const std::size_t L = 4, width = 24;
    std::vector<float> cache(L * width), fused(L * width);
    for (auto& v : cache) v = u(rng);
    for (auto& v : fused) v = u(rng);

    counters().reset();
    const std::vector<float> batched = batched_scores(cache, fused);
    REQUIRE(counters().kernel_invocations == 1);

    counters().reset();
    std::vector<float> looped;
    for (std::size_t l = 0; l < L; ++l) {
        const std::vector<float> s = importance_scores(
            std::span<const float>(cache.data() + l * width, width),
            std::span<const float>(fused.data() + l * width, width));
        looped.insert(looped.end(), s.begin(), s.end());
    }
    REQUIRE(counters().kernel_invocations == L);
    REQUIRE(batched == looped);

    // L = 1 degenerates to the single-block path.
    const std::vector<float> one = batched_scores(
        std::span<const float>(cache.data(), width), std::span<const float>(fused.data(), width));
    const std::vector<float> single = importance_scores(
        std::span<const float>(cache.data(), width), std::span<const float>(fused.data(), width));
    REQUIRE(one == single);
}

TEST_CASE("calibrate averages instantaneous features over the calibration set") {
    const ModelConfig cfg = tiny_config();
    const Model model(cfg);
    std::mt19937 rng(91);
    const Matrix obs1 = random_obs(rng, cfg);
    const Matrix obs2 = random_obs(rng, cfg);

    // Single frame: history equals that frame's features exactly.
    const ChannelFeatureState one = calibrate(model, {obs1});
    std::vector<std::vector<float>> expected(cfg.blocks);
    model.backbone_forward(model.make_hidden(model.encode_observation(obs1)), nullptr,
                           [&](std::size_t l, const Matrix& inter, const std::vector<float>&) {
                               expected[l] = instantaneous_features(inter);
                           });
    for (std::size_t l = 0; l < cfg.blocks; ++l) REQUIRE(one.mlp_history[l] == expected[l]);
    REQUIRE(one.step == 0);

    // Two identical frames: same as one.
    const ChannelFeatureState twice = calibrate(model, {obs1, obs1});
    for (std::size_t l = 0; l < cfg.blocks; ++l)
        for (std::size_t k = 0; k < cfg.ff_dim; ++k)
            REQUIRE(twice.mlp_history[l][k] ==
                    Catch::Approx(one.mlp_history[l][k]).epsilon(1e-6));

    // Mean matches a per-frame recomputation oracle.
    const ChannelFeatureState mixed = calibrate(model, {obs1, obs2});
    std::vector<std::vector<float>> expected2(cfg.blocks);
    model.backbone_forward(model.make_hidden(model.encode_observation(obs2)), nullptr,
                           [&](std::size_t l, const Matrix& inter, const std::vector<float>&) {
                               expected2[l] = instantaneous_features(inter);
                           });
    for (std::size_t l = 0; l < cfg.blocks; ++l)
        for (std::size_t k = 0; k < cfg.ff_dim; ++k)
            REQUIRE(mixed.mlp_history[l][k] ==
                    Catch::Approx(0.5 * (expected[l][k] + expected2[l][k])).epsilon(1e-5));

    REQUIRE_THROWS_AS(calibrate(model, {}), ConfigError);
}

TEST_CASE("pruner history stays finite and non-negative across updates") {
    const ModelConfig cfg = tiny_config();
    const Model model(cfg);
    EapConfig ecfg;
    ecfg.window = 3;
    ecfg.ratio = 0.25;
    ecfg.calib_frames = 2;
    AdaptivePruner pruner(model, ecfg);
    std::mt19937 rng(101);
    pruner.calibrate_from({random_obs(rng, cfg), random_obs(rng, cfg)});
    for (int it = 0; it < 5; ++it) {
        const Matrix obs = random_obs(rng, cfg);
        const VisualFeatures feats = model.encode_observation(obs);
        FrameActivations acts;
        acts.features = feats;
        model.backbone_forward(model.make_hidden(feats), nullptr,
                               [&](std::size_t, const Matrix& inter, const std::vector<float>& hf) {
                                   acts.mlp_intermediates.push_back(inter);
                                   acts.head_features.push_back(hf);
                               });
        const SparsityPattern p = pruner.compute_update(acts);
        REQUIRE(p.version == static_cast<std::uint64_t>(it + 1));
        pruner.state().validate();
    }
}

TEST_CASE("refractory hook suppresses triggers after an update") {
    const ModelConfig cfg = tiny_config();
    const Model model(cfg);
    EapConfig ecfg;
    ecfg.window = 2;
    ecfg.p = 50.0;
    ecfg.refractory_frames = 3;
    AdaptivePruner pruner(model, ecfg);
    std::mt19937 rng(111);
    pruner.calibrate_from({random_obs(rng, cfg)});

    // Alternate two very different observations so every evaluated frame
    // would trigger without the refractory rule.
    const Matrix a = random_obs(rng, cfg);
    const Matrix b = random_obs(rng, cfg);
    std::vector<int> trigger_frames;
    for (int t = 0; t < 12; ++t) {
        const Matrix& obs = (t % 2 == 0) ? a : b;
        const auto res = pruner.observe(model.encode_observation(obs));
        if (res.trigger) trigger_frames.push_back(t);
    }
    for (std::size_t i = 1; i < trigger_frames.size(); ++i)
        REQUIRE(trigger_frames[i] - trigger_frames[i - 1] > 3);
}

TEST_CASE("eap config validation rejects out-of-range parameters") {
    EapConfig bad;
    bad.window = 1;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad = EapConfig{};
    bad.p = 100.0;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad = EapConfig{};
    bad.alpha = 1.0;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
    bad = EapConfig{};
    bad.ratio = -0.1;
    REQUIRE_THROWS_AS(bad.validate(), ConfigError);
}
