#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "ecovla/errors.hpp"
#include "ecovla/flops.hpp"
#include "ecovla/model.hpp"
#include "ecovla/pruning.hpp"

namespace ecovla {

using ActivationHandoff = FrameActivations;

struct OrchestratorConfig {
    enum class Mode { Synchronous, Interleaved };
    Mode mode = Mode::Interleaved;
    // <= 0 means auto: resolved to 10% of the measured mean frame time when
    // the bounded-overhead property is evaluated.
    double delta_budget_ms = 0.0;

    // Fault-injection hooks for scheduling tests; inert by default.
    std::chrono::nanoseconds inject_prune_delay{0};
    bool suspend_pruning = false;
};

// Per-frame timing record. All times come from the monotonic clock; wall
// times telescope (each frame's wall spans from the previous frame's end),
// so their sum equals the episode wall time exactly.
struct TraceRow {
    std::uint64_t frame = 0;
    bool sparse = false;  // forward kind: false = dense
    bool triggered = false;
    bool dropped_trigger = false;
    std::uint64_t pattern_version_applied = 0;
    float similarity = 1.0f;
    std::uint64_t t_backbone_ns = 0;
    std::uint64_t t_expert_ns = 0;
    std::uint64_t t_prune_ns = 0;
    std::uint64_t t_wall_ns = 0;
};

// Atomically swapped immutable pattern snapshots. Readers take a raw pointer
// with acquire semantics and never block; published patterns stay alive for
// the board's lifetime. Versions must strictly increase.
class PatternBoard {
  public:
    void publish(SparsityPattern pattern) {
        std::lock_guard<std::mutex> guard(publish_mu_);
        const SparsityPattern* cur = current_.load(std::memory_order_acquire);
        if (cur != nullptr && pattern.version <= cur->version)
            throw StateError("publish_pattern: version must strictly increase");
        arena_.push_back(std::make_unique<SparsityPattern>(std::move(pattern)));
        current_.store(arena_.back().get(), std::memory_order_release);
    }

    const SparsityPattern* current() const { return current_.load(std::memory_order_acquire); }

  private:
    std::mutex publish_mu_;  // serializes writers only
    std::vector<std::unique_ptr<SparsityPattern>> arena_;
    std::atomic<const SparsityPattern*> current_{nullptr};
};

// Capacity-1 handoff between the lanes. Enqueue fails fast when occupied;
// the critical sections are pointer moves, never pruning work.
class HandoffSlot {
  public:
    bool try_push(ActivationHandoff&& h) {
        {
            std::lock_guard<std::mutex> guard(mu_);
            if (stop_ || item_.has_value()) return false;
            item_.emplace(std::move(h));
        }
        cv_.notify_one();
        return true;
    }

    // Blocks the pruning lane until an item or stop arrives.
    std::optional<ActivationHandoff> pop_wait() {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return stop_ || item_.has_value(); });
        if (item_.has_value()) {
            std::optional<ActivationHandoff> out(std::move(item_));
            item_.reset();
            return out;
        }
        return std::nullopt;
    }

    void stop() {
        {
            std::lock_guard<std::mutex> guard(mu_);
            stop_ = true;
        }
        cv_.notify_all();
    }

  private:
    std::mutex mu_;
    std::condition_variable cv_;
    std::optional<ActivationHandoff> item_;
    bool stop_ = false;
};

struct EpisodeResult {
    std::vector<TraceRow> trace;
    std::vector<std::vector<float>> actions;
    std::uint64_t episode_wall_ns = 0;
    std::uint64_t triggers = 0;
    std::uint64_t dropped_triggers = 0;
    std::uint64_t updates_published = 0;
    std::uint64_t flops_executed = 0;     // analytic, per executed frame mode
    std::uint64_t flops_dense_equiv = 0;  // frames * dense per-frame count
    std::uint64_t eap_flops_budget = 0;   // worst-case formula, accumulated
};

// Two-lane execution engine. The inference lane produces an action every
// frame and never waits on the pruning lane; the pruning lane consumes
// dense-frame activations and publishes new patterns through the board.
class Orchestrator {
  public:
    Orchestrator(const Model& model, AdaptivePruner& pruner, OrchestratorConfig cfg)
        : model_(model), pruner_(pruner), cfg_(cfg) {
        if (cfg_.delta_budget_ms < 0.0 && cfg_.delta_budget_ms != 0.0)
            throw ConfigError("delta_budget_ms must be positive (or 0 for auto)");
    }

    // Runs calibration, publishes the version-0 warmup mask, then drives
    // every frame through the configured mode.
    EpisodeResult run_episode(const std::vector<Matrix>& calib_obs,
                              const std::vector<Matrix>& frames) {
        board_ = std::make_unique<PatternBoard>();
        board_->publish(pruner_.calibrate_from(calib_obs));
        return cfg_.mode == OrchestratorConfig::Mode::Synchronous ? run_synchronous(frames)
                                                                  : run_interleaved(frames);
    }

    const PatternBoard& board() const { return *board_; }

  private:
    using Clock = std::chrono::steady_clock;

    static std::uint64_t ns_between(Clock::time_point a, Clock::time_point b) {
        return static_cast<std::uint64_t>(
            std::chrono::duration_cast<std::chrono::nanoseconds>(b - a).count());
    }

    EpisodeResult run_synchronous(const std::vector<Matrix>& frames) {
        EpisodeResult result;
        const std::uint64_t dense_frame_flops = flops_count(model_.config(), nullptr).total();
        const Clock::time_point episode_start = Clock::now();
        Clock::time_point prev_end = episode_start;

        for (std::size_t t = 0; t < frames.size(); ++t) {
            TraceRow row;
            row.frame = t;

            const Clock::time_point sim_start = Clock::now();
            const VisualFeatures feats = model_.encode_observation(frames[t]);
            const AdaptivePruner::Observation obs = pruner_.observe(feats);
            const Clock::time_point sim_end = Clock::now();
            row.similarity = obs.similarity;
            row.triggered = obs.trigger;
            std::uint64_t prune_ns = ns_between(sim_start, sim_end);

            const SparsityPattern* pattern = board_->current();
            row.pattern_version_applied = pattern->version;

            ActivationHandoff handoff;
            const Clock::time_point fwd_start = Clock::now();
            HiddenState h = model_.make_hidden(feats);
            if (obs.trigger) {
                handoff.frame = t;
                handoff.features = feats;
                h = model_.backbone_forward(
                    std::move(h), nullptr,
                    [&](std::size_t block, const Matrix& inter, const std::vector<float>& hf) {
                        (void)block;
                        handoff.mlp_intermediates.push_back(inter);
                        handoff.head_features.push_back(hf);
                    });
                row.sparse = false;
            } else {
                h = model_.backbone_forward(std::move(h), pattern, nullptr);
                row.sparse = true;
            }
            const Clock::time_point fwd_end = Clock::now();
            row.t_backbone_ns = ns_between(fwd_start, fwd_end);

            if (obs.trigger) {
                // Strictly serial: the update and mask selection run on this
                // lane before the expert stage. The new pattern applies from
                // the next frame.
                const Clock::time_point up_start = Clock::now();
                board_->publish(pruner_.compute_update(handoff));
                prune_ns += ns_between(up_start, Clock::now());
                ++result.triggers;
                ++result.updates_published;
            }
            row.t_prune_ns = prune_ns;

            const Clock::time_point ex_start = Clock::now();
            result.actions.push_back(model_.action_expert_forward(h));
            row.t_expert_ns = ns_between(ex_start, Clock::now());

            accumulate_flops(result, row, pattern, dense_frame_flops);
            const Clock::time_point frame_end = Clock::now();
            row.t_wall_ns = ns_between(prev_end, frame_end);
            prev_end = frame_end;
            result.trace.push_back(std::move(row));
        }
        result.episode_wall_ns = ns_between(episode_start, prev_end);
        return result;
    }

    EpisodeResult run_interleaved(const std::vector<Matrix>& frames) {
        EpisodeResult result;
        const std::uint64_t dense_frame_flops = flops_count(model_.config(), nullptr).total();

        HandoffSlot slot;
        std::atomic<bool> stop{false};
        // Written only by the pruning thread; read after join.
        std::vector<std::pair<std::uint64_t, std::uint64_t>> prune_times;
        std::uint64_t updates_published = 0;

        std::mutex suspend_mu;
        std::condition_variable suspend_cv;

        std::thread pruning_lane([&] {
            for (;;) {
                if (cfg_.suspend_pruning) {
                    // Fault injection: park without holding the slot, wake
                    // only for shutdown.
                    std::unique_lock<std::mutex> lk(suspend_mu);
                    suspend_cv.wait(lk, [&] { return stop.load(); });
                    return;
                }
                std::optional<ActivationHandoff> h = slot.pop_wait();
                if (!h.has_value()) return;
                if (cfg_.inject_prune_delay.count() > 0) sleep_in_slices(stop);
                const Clock::time_point up_start = Clock::now();
                SparsityPattern pattern = pruner_.compute_update(*h);
                board_->publish(std::move(pattern));
                prune_times.emplace_back(h->frame, ns_between(up_start, Clock::now()));
                ++updates_published;
            }
        });

        const Clock::time_point episode_start = Clock::now();
        Clock::time_point prev_end = episode_start;

        for (std::size_t t = 0; t < frames.size(); ++t) {
            TraceRow row;
            row.frame = t;

            const Clock::time_point sim_start = Clock::now();
            const VisualFeatures feats = model_.encode_observation(frames[t]);
            const AdaptivePruner::Observation obs = pruner_.observe(feats);
            std::uint64_t prune_ns = ns_between(sim_start, Clock::now());
            row.similarity = obs.similarity;
            row.triggered = obs.trigger;

            // Patterns are picked up at frame boundaries only.
            const SparsityPattern* pattern = board_->current();
            row.pattern_version_applied = pattern->version;

            const Clock::time_point fwd_start = Clock::now();
            HiddenState h = model_.make_hidden(feats);
            if (obs.trigger) {
                ActivationHandoff handoff;
                handoff.frame = t;
                handoff.features = feats;
                h = model_.backbone_forward(
                    std::move(h), nullptr,
                    [&](std::size_t block, const Matrix& inter, const std::vector<float>& hf) {
                        (void)block;
                        handoff.mlp_intermediates.push_back(inter);
                        handoff.head_features.push_back(hf);
                    });
                row.sparse = false;
                ++result.triggers;
                if (!slot.try_push(std::move(handoff))) {
                    // Previous job still in flight: drop the trigger and
                    // keep the current mask.
                    row.dropped_trigger = true;
                    ++result.dropped_triggers;
                }
            } else {
                h = model_.backbone_forward(std::move(h), pattern, nullptr);
                row.sparse = true;
            }
            row.t_backbone_ns = ns_between(fwd_start, Clock::now());
            row.t_prune_ns = prune_ns;  // off-lane update time merged after join

            const Clock::time_point ex_start = Clock::now();
            result.actions.push_back(model_.action_expert_forward(h));
            row.t_expert_ns = ns_between(ex_start, Clock::now());

            accumulate_flops(result, row, pattern, dense_frame_flops);
            const Clock::time_point frame_end = Clock::now();
            row.t_wall_ns = ns_between(prev_end, frame_end);
            prev_end = frame_end;
            result.trace.push_back(std::move(row));
        }
        result.episode_wall_ns = ns_between(episode_start, prev_end);

        stop.store(true);
        slot.stop();
        suspend_cv.notify_all();
        pruning_lane.join();

        for (const auto& [frame, ns] : prune_times) result.trace[frame].t_prune_ns += ns;
        result.updates_published = updates_published;
        return result;
    }

    void sleep_in_slices(const std::atomic<bool>& stop) const {
        std::chrono::nanoseconds remaining = cfg_.inject_prune_delay;
        const std::chrono::milliseconds slice{1};
        while (remaining.count() > 0 && !stop.load()) {
            const auto step = remaining > slice ? std::chrono::nanoseconds(slice) : remaining;
            std::this_thread::sleep_for(step);
            remaining -= step;
        }
    }

    void accumulate_flops(EpisodeResult& result, const TraceRow& row,
                          const SparsityPattern* pattern, std::uint64_t dense_frame_flops) const {
        const ModelConfig& cfg = model_.config();
        result.flops_dense_equiv += dense_frame_flops;
        result.flops_executed +=
            row.sparse ? flops_count(cfg, pattern).total() : dense_frame_flops;
        // Worst-case pruning budget: similarity every frame, block-wise
        // update terms only on triggered frames.
        result.eap_flops_budget += 5 * cfg.vis_tokens * cfg.dim;
        if (row.triggered && !row.dropped_trigger)
            result.eap_flops_budget +=
                cfg.blocks * (2 * cfg.seq_len * cfg.ff_dim + 3 * cfg.ff_dim * cfg.dim +
                              4 * cfg.ff_dim);
    }

    const Model& model_;
    AdaptivePruner& pruner_;
    OrchestratorConfig cfg_;
    std::unique_ptr<PatternBoard> board_;
};

}  // namespace ecovla
