// Copyright (c) 2026 the dualdit authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "dualdit/buffer.hpp"
#include "dualdit/model.hpp"
#include "dualdit/schedule.hpp"

namespace dualdit {

enum class Strategy { ddpm, ddim, lcm_sync, lcm_async };

inline std::string strategy_name(Strategy s) {
    switch (s) {
        case Strategy::ddpm: return "ddpm";
        case Strategy::ddim: return "ddim";
        case Strategy::lcm_sync: return "lcm-sync";
        case Strategy::lcm_async: return "lcm-async";
    }
    throw Error("strategy_name: unreachable");
}

inline Strategy strategy_from(const std::string& s) {
    if (s == "ddpm") return Strategy::ddpm;
    if (s == "ddim") return Strategy::ddim;
    if (s == "lcm-sync" || s == "lcm_sync") return Strategy::lcm_sync;
    if (s == "lcm-async" || s == "lcm_async") return Strategy::lcm_async;
    throw ConfigError("unknown strategy '" + s + "' (expected ddpm|ddim|lcm-sync|lcm-async)");
}

// Per-branch step counts, timestep lists and the deterministic interleaving.
// Expression step i is co-scheduled with gesture step interleave[i] and
// executes immediately before it.
struct SamplerPlan {
    Strategy strategy = Strategy::lcm_async;
    int steps_exp = 4;
    int steps_ges = 8;
    std::vector<int> ts_exp, ts_ges;  // descending; ddim lists end with 0
    std::vector<int> interleave;
    std::uint64_t seed = 0;
    int eps_min = 1;

    static SamplerPlan make(Strategy strategy, int steps_exp, int steps_ges, const NoiseSchedule& s,
                            std::uint64_t seed, int eps_min = 1) {
        SamplerPlan p;
        p.strategy = strategy;
        p.seed = seed;
        p.eps_min = eps_min;
        switch (strategy) {
            case Strategy::ddpm:
                // full ancestral chain; step counts follow the schedule
                p.ts_exp.resize(static_cast<std::size_t>(s.T));
                for (int t = s.T; t >= 1; --t) p.ts_exp[static_cast<std::size_t>(s.T - t)] = t;
                p.ts_ges = p.ts_exp;
                break;
            case Strategy::ddim:
                p.ts_exp = ddim_timesteps(steps_exp, s.T);
                p.ts_ges = ddim_timesteps(steps_ges, s.T);
                break;
            case Strategy::lcm_sync:
            case Strategy::lcm_async:
                p.ts_exp = lcm_timesteps(steps_exp, s, eps_min);
                p.ts_ges = lcm_timesteps(steps_ges, s, eps_min);
                break;
        }
        p.steps_exp = p.model_calls_exp();
        p.steps_ges = p.model_calls_ges();
        p.interleave.resize(static_cast<std::size_t>(p.steps_exp));
        for (int i = 0; i < p.steps_exp; ++i)
            p.interleave[static_cast<std::size_t>(i)] =
                static_cast<int>(static_cast<std::int64_t>(i) * p.steps_ges / p.steps_exp);
        p.validate();
        return p;
    }

    // model forward passes per branch (ddim lists carry a trailing 0 target)
    int model_calls_exp() const {
        return static_cast<int>(ts_exp.size()) - (strategy == Strategy::ddim ? 1 : 0);
    }
    int model_calls_ges() const {
        return static_cast<int>(ts_ges.size()) - (strategy == Strategy::ddim ? 1 : 0);
    }

    void validate() const {
        if (steps_exp < 1 || steps_ges < 1) throw ConfigError("SamplerPlan: step counts must be >= 1");
        if (strategy == Strategy::lcm_sync && steps_exp != steps_ges)
            throw ConfigError("SamplerPlan: lcm-sync requires equal step counts");
        if (strategy == Strategy::lcm_async && steps_exp > steps_ges)
            throw ConfigError("SamplerPlan: lcm-async requires steps_exp <= steps_ges");
        if (interleave.size() != static_cast<std::size_t>(steps_exp))
            throw ConfigError("SamplerPlan: interleave map must cover all expression steps");
        for (std::size_t i = 0; i < interleave.size(); ++i) {
            if (interleave[i] < 0 || interleave[i] >= steps_ges)
                throw ConfigError("SamplerPlan: interleave entry out of range");
            if (i > 0 && interleave[i] < interleave[i - 1])
                throw ConfigError("SamplerPlan: interleave map must be monotone non-decreasing");
        }
    }

    int staleness_bound() const { return (steps_ges + steps_exp - 1) / steps_exp; }  // ceil(T_ges/T_exp)
};

struct GenerationResult {
    Tensor expression;  // [frames x D_exp]
    Tensor gesture;     // [frames x 3J]
    double wall_ms_exp = 0.0;
    double wall_ms_ges = 0.0;
    int steps_exp = 0;
    int steps_ges = 0;
    int model_calls_exp = 0;
    int model_calls_ges = 0;
    std::vector<TraceRecord> trace;
};

namespace detail {

struct StepEvent {
    Branch branch;
    int step;  // per-branch step index
};

// canonical deterministic order: E_i immediately before G_{interleave[i]}
inline std::vector<StepEvent> event_order(const SamplerPlan& p) {
    std::vector<StepEvent> ev;
    int ei = 0;
    for (int g = 0; g < p.steps_ges; ++g) {
        while (ei < p.steps_exp && p.interleave[static_cast<std::size_t>(ei)] == g) {
            ev.push_back({Branch::expression, ei});
            ++ei;
        }
        ev.push_back({Branch::gesture, g});
    }
    while (ei < p.steps_exp) ev.push_back({Branch::expression, ei++});  // unreachable for valid plans
    return ev;
}

// a recorded feature read decision, used when replaying a trace
struct ReadScript {
    // (reader, layer, own_step) -> writer_step (-1 means self-substituted)
    std::vector<int> writer_step_expr;  // indexed own_step * layers + layer
    std::vector<int> writer_step_ges;
};

// Single branch pass at one timestep. Publishes this branch's per-layer
// features, reads the counterpart's latest (or scripted) features, records
// the trace, and returns the prediction head output.
struct PassContext {
    DualBranchModel* model = nullptr;
    const ModelConfig* cfg = nullptr;
    FeatureBuffer* buffer = nullptr;
    const Tensor* f_aud = nullptr;
    std::atomic<int>* completed_expr = nullptr;
    std::atomic<int>* completed_ges = nullptr;
    std::mutex* trace_mu = nullptr;
    std::vector<TraceRecord>* trace = nullptr;
    // replay support
    const ReadScript* script = nullptr;
    std::vector<std::vector<Tensor>>* history_expr = nullptr;  // [step][layer]
    std::vector<std::vector<Tensor>>* history_ges = nullptr;
};

inline Tensor run_branch_pass(PassContext& ctx, Branch branch, int own_step, const Tensor& x_in, int timestep) {
    const ModelConfig& cfg = *ctx.cfg;
    const bool is_expr = branch == Branch::expression;
    BranchParams& bp = is_expr ? ctx.model->expr : ctx.model->ges;
    const bool needs_other = reads_counterpart(ctx.model->fusion, is_expr);
    std::atomic<int>* other_completed = is_expr ? ctx.completed_ges : ctx.completed_expr;

    Tape t;
    ParamMap pm = lift_params(t, *ctx.model, false);
    Value cond = embed_timestep(t, pm, bp, timestep, cfg.d_model);
    Value x = branch_embed(t, pm, bp, t.leaf(x_in), t.leaf(*ctx.f_aud));
    std::vector<Tensor>* own_history = is_expr ? (ctx.history_expr ? &(*ctx.history_expr)[own_step] : nullptr)
                                               : (ctx.history_ges ? &(*ctx.history_ges)[own_step] : nullptr);

    for (int layer = 0; layer < cfg.layers; ++layer) {
        const BlockParams& blk = bp.blocks[static_cast<std::size_t>(layer)];
        Modulation m = adaln(t, pm, blk, cond);
        x = block_pre(t, pm, blk, x, m, cfg.heads);
        // write before read, per layer
        ctx.buffer->publish(branch, layer, own_step, t.val(x));
        if (own_history) (*own_history)[static_cast<std::size_t>(layer)] = t.val(x);
        if (needs_other) {
            Value other;
            TraceRecord rec;
            rec.reader = branch;
            rec.layer = layer;
            rec.own_step = own_step;
            if (ctx.script) {
                const auto& steps = is_expr ? ctx.script->writer_step_expr : ctx.script->writer_step_ges;
                const int w = steps[static_cast<std::size_t>(own_step * cfg.layers + layer)];
                if (w < 0) {
                    other = x;
                    rec.counterpart_version = -1;
                    rec.lag = 0;
                } else {
                    const auto& hist = is_expr ? *ctx.history_ges : *ctx.history_expr;
                    other = t.leaf(hist[static_cast<std::size_t>(w)][static_cast<std::size_t>(layer)]);
                    rec.counterpart_version = w + 1;
                    rec.lag = std::max(0, other_completed->load() - (w + 1));
                }
            } else {
                std::optional<BufferSnapshot> snap = ctx.buffer->read(other_branch(branch), layer);
                if (!snap) {
                    other = x;  // cold start: self-features substituted
                    rec.counterpart_version = -1;
                    rec.lag = 0;
                } else {
                    other = t.leaf(snap->features);
                    rec.counterpart_version = snap->version;
                    rec.lag = std::max(0, other_completed->load() - (snap->writer_step + 1));
                }
            }
            {
                std::lock_guard<std::mutex> lock(*ctx.trace_mu);
                ctx.trace->push_back(rec);
            }
            x = block_fuse(t, pm, blk, x, other, ctx.model->fusion, cfg.heads);
        }
        x = block_post(t, pm, blk, x, m);
    }
    return t.val(branch_output(t, pm, bp, x));
}

// per-branch latent update state machine over the plan's timestep list
struct BranchSampler {
    Branch branch;
    const SamplerPlan* plan = nullptr;
    const NoiseSchedule* sched = nullptr;
    ConsistencyParam cparam;
    Rng* rng = nullptr;  // caller-owned so streams persist across clips
    Tensor x;
    double wall_ms = 0.0;
    int calls = 0;

    const std::vector<int>& ts() const { return branch == Branch::expression ? plan->ts_exp : plan->ts_ges; }

    void init(std::int64_t frames, std::int64_t channels, std::optional<Tensor> init_latent) {
        if (init_latent) {
            x = std::move(*init_latent);
        } else {
            x = Tensor({frames, channels});
            for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng->gaussian();
        }
    }

    void step(PassContext& ctx, int k) {
        const auto t0 = std::chrono::steady_clock::now();
        const std::vector<int>& list = ts();
        const int t = list[static_cast<std::size_t>(k)];
        Tensor out = run_branch_pass(ctx, branch, k, x, t);
        ++calls;
        switch (plan->strategy) {
            case Strategy::ddpm: {
                Tensor z(x.shape());
                for (std::int64_t i = 0; i < z.size(); ++i) z[i] = rng->gaussian();
                x = ddpm_step(x, t, out, *sched, z);
                break;
            }
            case Strategy::ddim: {
                const int t_prev = list[static_cast<std::size_t>(k + 1)];
                x = ddim_step(x, t, t_prev, out, *sched);
                break;
            }
            case Strategy::lcm_sync:
            case Strategy::lcm_async: {
                Tensor x0_hat = consistency_apply(out, x, t, cparam);
                const bool last = static_cast<std::size_t>(k + 1) >= list.size();
                if (last) {
                    x = std::move(x0_hat);
                } else {
                    Tensor eps(x.shape());
                    for (std::int64_t i = 0; i < eps.size(); ++i) eps[i] = rng->gaussian();
                    x = forward_sample(x0_hat, list[static_cast<std::size_t>(k + 1)], eps, *sched);
                }
                break;
            }
        }
        wall_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
};

struct EngineOptions {
    bool concurrent = false;
    int slack = 0;  // how many det-order positions a branch may run ahead (concurrent mode)
    const ReadScript* script = nullptr;
    std::optional<Tensor> init_exp, init_ges;
    bool keep_history = false;
};

inline GenerationResult run_plan(DualBranchModel& model, const SamplerPlan& plan, const NoiseSchedule& sched,
                                 const Tensor& f_aud, Rng& rng_exp, Rng& rng_ges, const EngineOptions& opt = {}) {
    plan.validate();
    const ModelConfig& cfg = model.cfg;
    if (f_aud.rank() != 2 || f_aud.cols() != cfg.audio_dim)
        throw DimensionError("run_plan: audio features must be [frames x audio_dim]");
    const std::int64_t frames = f_aud.rows();

    FeatureBuffer buffer(cfg.layers);
    std::atomic<int> completed_expr{0}, completed_ges{0};
    std::mutex trace_mu;
    GenerationResult res;

    std::vector<std::vector<Tensor>> hist_e, hist_g;
    const bool want_history = opt.keep_history || opt.script != nullptr;
    if (want_history) {
        hist_e.assign(static_cast<std::size_t>(plan.steps_exp), std::vector<Tensor>(static_cast<std::size_t>(cfg.layers)));
        hist_g.assign(static_cast<std::size_t>(plan.steps_ges), std::vector<Tensor>(static_cast<std::size_t>(cfg.layers)));
    }

    PassContext ctx;
    ctx.model = &model;
    ctx.cfg = &cfg;
    ctx.buffer = &buffer;
    ctx.f_aud = &f_aud;
    ctx.completed_expr = &completed_expr;
    ctx.completed_ges = &completed_ges;
    ctx.trace_mu = &trace_mu;
    ctx.trace = &res.trace;
    ctx.script = opt.script;
    ctx.history_expr = want_history ? &hist_e : nullptr;
    ctx.history_ges = want_history ? &hist_g : nullptr;

    BranchSampler se{Branch::expression, &plan, &sched, ConsistencyParam::boundary(0.5, plan.eps_min), &rng_exp};
    BranchSampler sg{Branch::gesture, &plan, &sched, ConsistencyParam::boundary(0.5, plan.eps_min), &rng_ges};
    se.init(frames, cfg.expression_channels(), opt.init_exp);
    sg.init(frames, cfg.gesture_channels(), opt.init_ges);

    const std::vector<StepEvent> events = event_order(plan);

    if (!opt.concurrent) {
        if (opt.script) {
            // replay: execute events in any order consistent with the recorded reads
            std::size_t done_e = 0, done_g = 0;
            auto max_need = [&](Branch b, int step) {
                int need = -1;
                const auto& ws = b == Branch::expression ? opt.script->writer_step_expr : opt.script->writer_step_ges;
                if (!reads_counterpart(model.fusion, b == Branch::expression)) return -1;
                for (int l = 0; l < cfg.layers; ++l)
                    need = std::max(need, ws[static_cast<std::size_t>(step * cfg.layers + l)]);
                return need;
            };
            while (done_e < static_cast<std::size_t>(plan.steps_exp) || done_g < static_cast<std::size_t>(plan.steps_ges)) {
                bool moved = false;
                if (done_e < static_cast<std::size_t>(plan.steps_exp) &&
                    max_need(Branch::expression, static_cast<int>(done_e)) < static_cast<int>(done_g)) {
                    se.step(ctx, static_cast<int>(done_e));
                    completed_expr.fetch_add(1);
                    ++done_e;
                    moved = true;
                }
                if (done_g < static_cast<std::size_t>(plan.steps_ges) &&
                    max_need(Branch::gesture, static_cast<int>(done_g)) < static_cast<int>(done_e)) {
                    sg.step(ctx, static_cast<int>(done_g));
                    completed_ges.fetch_add(1);
                    ++done_g;
                    moved = true;
                }
                if (!moved) throw ContractError("run_plan: inconsistent trace script (replay deadlock)");
            }
        } else {
            for (const StepEvent& ev : events) {
                if (ev.branch == Branch::expression) {
                    se.step(ctx, ev.step);
                    completed_expr.fetch_add(1);
                } else {
                    sg.step(ctx, ev.step);
                    completed_ges.fetch_add(1);
                }
            }
        }
    } else {
        // Concurrent mode: one thread per branch; gates allow at most `slack`
        // det-order positions of drift, which also bounds read staleness.
        std::vector<int> pos_of_expr(static_cast<std::size_t>(plan.steps_exp));
        std::vector<int> pos_of_ges(static_cast<std::size_t>(plan.steps_ges));
        for (std::size_t i = 0; i < events.size(); ++i) {
            if (events[i].branch == Branch::expression) pos_of_expr[static_cast<std::size_t>(events[i].step)] = static_cast<int>(i);
            else pos_of_ges[static_cast<std::size_t>(events[i].step)] = static_cast<int>(i);
        }
        std::mutex gate_mu;
        std::condition_variable gate_cv;
        int done_positions_expr = 0, done_positions_ges = 0;  // count of completed events per branch
        std::exception_ptr err;

        auto worker = [&](Branch b) {
            try {
                BranchSampler& bs = b == Branch::expression ? se : sg;
                const int steps = b == Branch::expression ? plan.steps_exp : plan.steps_ges;
                const auto& pos = b == Branch::expression ? pos_of_expr : pos_of_ges;
                for (int k = 0; k < steps; ++k) {
                    // wait until every event more than `slack` positions before
                    // this one (on the other branch) has completed
                    const int my_pos = pos[static_cast<std::size_t>(k)];
                    {
                        std::unique_lock<std::mutex> lock(gate_mu);
                        gate_cv.wait(lock, [&] {
                            if (err) return true;
                            const auto& other_pos = b == Branch::expression ? pos_of_ges : pos_of_expr;
                            const int other_completed = b == Branch::expression ? done_positions_ges : done_positions_expr;
                            int required = 0;  // other-branch events ordered more than `slack` before this one
                            for (std::size_t s = 0; s < other_pos.size(); ++s)
                                if (other_pos[s] < my_pos - opt.slack) ++required;
                            return other_completed >= required;
                        });
                        if (err) return;
                    }
                    bs.step(ctx, k);
                    {
                        std::lock_guard<std::mutex> lock(gate_mu);
                        if (b == Branch::expression) {
                            ++done_positions_expr;
                            completed_expr.fetch_add(1);
                        } else {
                            ++done_positions_ges;
                            completed_ges.fetch_add(1);
                        }
                    }
                    gate_cv.notify_all();
                }
            } catch (...) {
                std::lock_guard<std::mutex> lock(gate_mu);
                err = std::current_exception();
                gate_cv.notify_all();
            }
        };
        std::thread te(worker, Branch::expression);
        std::thread tg(worker, Branch::gesture);
        te.join();
        tg.join();
        if (err) std::rethrow_exception(err);
    }

    res.expression = std::move(se.x);
    res.gesture = std::move(sg.x);
    res.wall_ms_exp = se.wall_ms;
    res.wall_ms_ges = sg.wall_ms;
    res.steps_exp = plan.steps_exp;
    res.steps_ges = plan.steps_ges;
    res.model_calls_exp = se.calls;
    res.model_calls_ges = sg.calls;
    if (res.expression.rows() != res.gesture.rows())
        throw ContractError("run_plan: frame count mismatch between branches");
    return res;
}

}  // namespace detail

// Lockstep sampling (ddpm, ddim, lcm-sync): both branches walk identical
// timestep lists; within each step the expression pass writes its features
// before the gesture pass reads them.
inline GenerationResult sample_sync(DualBranchModel& model, const SamplerPlan& plan, const NoiseSchedule& sched,
                                    const Tensor& f_aud) {
    if (plan.strategy != Strategy::ddpm && plan.strategy != Strategy::ddim && plan.strategy != Strategy::lcm_sync)
        throw ConfigError("sample_sync: plan strategy must be ddpm, ddim or lcm-sync");
    Rng root(plan.seed);
    Rng re = root.fork(0xE1);
    Rng rg = root.fork(0x6E);
    return detail::run_plan(model, plan, sched, f_aud, re, rg);
}

// Asynchronous sampling: the gesture branch runs steps_ges consistency steps,
// the expression branch runs steps_exp, co-scheduled by the interleave map,
// exchanging features through the buffer.
inline GenerationResult sample_async(DualBranchModel& model, const SamplerPlan& plan, const NoiseSchedule& sched,
                                     const Tensor& f_aud, const detail::EngineOptions& opt = {}) {
    if (plan.strategy != Strategy::lcm_async) throw ConfigError("sample_async: plan strategy must be lcm-async");
    if (plan.interleave.empty()) throw ConfigError("sample_async: empty interleave map");
    Rng root(plan.seed);
    Rng re = root.fork(0xE1);
    Rng rg = root.fork(0x6E);
    return detail::run_plan(model, plan, sched, f_aud, re, rg, opt);
}

inline int max_trace_lag(const std::vector<TraceRecord>& trace) {
    int m = 0;
    for (const TraceRecord& r : trace) m = std::max(m, r.lag);
    return m;
}

inline void write_trace_jsonl(const std::vector<TraceRecord>& trace, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw Error("write_trace_jsonl: cannot open " + path);
    for (const TraceRecord& r : trace) {
        f << "{\"branch\":\"" << branch_name(r.reader) << "\",\"layer\":" << r.layer << ",\"own_step\":" << r.own_step
          << ",\"counterpart_version\":" << r.counterpart_version << ",\"lag\":" << r.lag << "}\n";
    }
}

// Builds the read script recorded by a (possibly concurrent) run so the same
// decisions can be replayed deterministically.
inline detail::ReadScript script_from_trace(const std::vector<TraceRecord>& trace, const SamplerPlan& plan,
                                            int layers) {
    detail::ReadScript s;
    s.writer_step_expr.assign(static_cast<std::size_t>(plan.steps_exp * layers), -1);
    s.writer_step_ges.assign(static_cast<std::size_t>(plan.steps_ges * layers), -1);
    for (const TraceRecord& r : trace) {
        auto& dst = r.reader == Branch::expression ? s.writer_step_expr : s.writer_step_ges;
        // counterpart_version is writer_step + 1 for real reads, -1 for substituted
        dst[static_cast<std::size_t>(r.own_step * layers + r.layer)] =
            r.counterpart_version < 0 ? -1 : static_cast<int>(r.counterpart_version) - 1;
    }
    return s;
}

// Sliding-window long-sequence generation. Consecutive clips share `overlap`
// frames: the new clip's head is initialized from the noised tail of the
// previous clip and the final outputs are linearly blended across the overlap.
inline GenerationResult generate_long(DualBranchModel& model, const SamplerPlan& plan, const NoiseSchedule& sched,
                                      const Tensor& f_aud_stream, int clip_len, int overlap) {
    if (overlap >= clip_len) throw ConfigError("generate_long: overlap must be < clip length");
    if (overlap < 0) throw ConfigError("generate_long: overlap must be >= 0");
    if (f_aud_stream.rank() != 2) throw DimensionError("generate_long: audio stream must be 2-D");
    const std::int64_t total = f_aud_stream.rows();
    if (total < clip_len) throw ConfigError("generate_long: audio stream shorter than one clip");
    const ModelConfig& cfg = model.cfg;

    std::vector<std::int64_t> starts{0};
    while (starts.back() + clip_len < total) {
        std::int64_t next = starts.back() + (clip_len - overlap);
        if (next + clip_len > total) next = total - clip_len;
        starts.push_back(next);
    }

    Rng root(plan.seed);
    Rng re = root.fork(0xE1);
    Rng rg = root.fork(0x6E);

    GenerationResult out;
    out.expression = Tensor({total, cfg.expression_channels()});
    out.gesture = Tensor({total, cfg.gesture_channels()});
    out.steps_exp = 0;
    out.steps_ges = 0;

    Tensor prev_exp, prev_ges;
    std::int64_t prev_start = -1;
    for (std::size_t ci = 0; ci < starts.size(); ++ci) {
        const std::int64_t s0 = starts[ci];
        Tensor clip_aud({clip_len, cfg.audio_dim});
        for (std::int64_t r = 0; r < clip_len; ++r)
            for (std::int64_t c = 0; c < cfg.audio_dim; ++c) clip_aud.at(r, c) = f_aud_stream.at(s0 + r, c);

        detail::EngineOptions opt;
        std::int64_t ov = 0;
        if (ci > 0) {
            ov = prev_start + clip_len - s0;  // actual overlap with the previous clip
            // initialize the first `ov` frames from the noised tail of the previous clip
            auto noised_head = [&](const Tensor& prev, std::int64_t channels, Rng& rng, int t_start) {
                Tensor init({clip_len, channels});
                for (std::int64_t i = 0; i < init.size(); ++i) init[i] = rng.gaussian();
                if (ov > 0) {
                    Tensor tail({ov, channels});
                    for (std::int64_t r = 0; r < ov; ++r)
                        for (std::int64_t c = 0; c < channels; ++c) tail.at(r, c) = prev.at(clip_len - ov + r, c);
                    Tensor eps({ov, channels});
                    for (std::int64_t i = 0; i < eps.size(); ++i) eps[i] = rng.gaussian();
                    Tensor noised = forward_sample(tail, t_start, eps, sched);
                    for (std::int64_t r = 0; r < ov; ++r)
                        for (std::int64_t c = 0; c < channels; ++c) init.at(r, c) = noised.at(r, c);
                }
                return init;
            };
            opt.init_exp = noised_head(prev_exp, cfg.expression_channels(), re, plan.ts_exp.front());
            opt.init_ges = noised_head(prev_ges, cfg.gesture_channels(), rg, plan.ts_ges.front());
        }

        GenerationResult clip = detail::run_plan(model, plan, sched, clip_aud, re, rg, opt);
        out.wall_ms_exp += clip.wall_ms_exp;
        out.wall_ms_ges += clip.wall_ms_ges;
        out.steps_exp += clip.steps_exp;
        out.steps_ges += clip.steps_ges;
        out.model_calls_exp += clip.model_calls_exp;
        out.model_calls_ges += clip.model_calls_ges;
        for (const TraceRecord& r : clip.trace) out.trace.push_back(r);

        auto blend_into = [&](Tensor& dst, const Tensor& clip_out, std::int64_t channels) {
            for (std::int64_t r = 0; r < clip_len; ++r) {
                const std::int64_t row = s0 + r;
                if (ci > 0 && r < ov) {
                    const double w = ov > 1 ? static_cast<double>(r) / static_cast<double>(ov - 1) : 0.5;
                    for (std::int64_t c = 0; c < channels; ++c)
                        dst.at(row, c) = (1.0 - w) * dst.at(row, c) + w * clip_out.at(r, c);
                } else {
                    for (std::int64_t c = 0; c < channels; ++c) dst.at(row, c) = clip_out.at(r, c);
                }
            }
        };
        blend_into(out.expression, clip.expression, cfg.expression_channels());
        blend_into(out.gesture, clip.gesture, cfg.gesture_channels());

        prev_exp = std::move(clip.expression);
        prev_ges = std::move(clip.gesture);
        prev_start = s0;
    }
    return out;
}

// ---- benchmarking -----------------------------------------------------------

struct BenchRow {
    std::string strategy;
    int steps_exp = 0;
    int steps_ges = 0;
    double median_ms = 0.0;
    double p95_ms = 0.0;
    int model_calls_exp = 0;
    int model_calls_ges = 0;
    double fmd = std::numeric_limits<double>::quiet_NaN();
    double fed = std::numeric_limits<double>::quiet_NaN();
    double fgd = std::numeric_limits<double>::quiet_NaN();
    GenerationResult last_result;
};

// Median wall time per strategy on the same audio/model/hardware. `model_for`
// selects which checkpoint serves each plan (teacher for ddpm/ddim, distilled
// heads for the lcm strategies).
inline std::vector<BenchRow> bench_strategies(const std::function<DualBranchModel&(const SamplerPlan&)>& model_for,
                                              const std::vector<SamplerPlan>& plans, int repeats,
                                              const NoiseSchedule& sched, const Tensor& f_aud) {
    if (repeats < 3) throw ConfigError("bench_strategies: repeats must be >= 3");
    std::vector<BenchRow> rows;
    for (const SamplerPlan& plan : plans) {
        DualBranchModel& model = model_for(plan);
        BenchRow row;
        row.strategy = strategy_name(plan.strategy);
        row.steps_exp = plan.steps_exp;
        row.steps_ges = plan.steps_ges;
        std::vector<double> times;
        GenerationResult last;
        for (int r = 0; r < repeats + 1; ++r) {  // first run is warmup
            const auto t0 = std::chrono::steady_clock::now();
            GenerationResult res = plan.strategy == Strategy::lcm_async ? sample_async(model, plan, sched, f_aud)
                                                                        : sample_sync(model, plan, sched, f_aud);
            const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
            if (r > 0) times.push_back(ms);
            last = std::move(res);
        }
        std::sort(times.begin(), times.end());
        row.median_ms = times[times.size() / 2];
        row.p95_ms = times[static_cast<std::size_t>(std::min<double>(
            static_cast<double>(times.size()) - 1.0, std::ceil(0.95 * static_cast<double>(times.size())) - 1.0))];
        row.model_calls_exp = last.model_calls_exp;
        row.model_calls_ges = last.model_calls_ges;
        row.last_result = std::move(last);
        rows.push_back(std::move(row));
    }
    return rows;
}

inline void write_bench_csv(const std::vector<BenchRow>& rows, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw Error("write_bench_csv: cannot open " + path);
    f << "strategy,steps_exp,steps_ges,median_ms,p95_ms,fmd,fed,fgd\n";
    for (const BenchRow& r : rows) {
        f << r.strategy << "," << r.steps_exp << "," << r.steps_ges << "," << r.median_ms << "," << r.p95_ms << ","
          << r.fmd << "," << r.fed << "," << r.fgd << "\n";
    }
}

}  // namespace dualdit
