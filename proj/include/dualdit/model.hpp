// Copyright (c) 2026 the dualdit authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstring>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "dualdit/autograd.hpp"
#include "dualdit/common.hpp"
#include "dualdit/tensor.hpp"

namespace dualdit {

enum class FusionMode { none, uni_e2g, uni_g2e, cosync, concat, gated };

inline std::string fusion_mode_name(FusionMode m) {
    switch (m) {
        case FusionMode::none: return "none";
        case FusionMode::uni_e2g: return "uni_E2G";
        case FusionMode::uni_g2e: return "uni_G2E";
        case FusionMode::cosync: return "cosync";
        case FusionMode::concat: return "concat";
        case FusionMode::gated: return "gated";
    }
    throw Error("fusion_mode_name: unreachable");
}

inline FusionMode fusion_mode_from(const std::string& s) {
    if (s == "none") return FusionMode::none;
    if (s == "uni_E2G") return FusionMode::uni_e2g;
    if (s == "uni_G2E") return FusionMode::uni_g2e;
    if (s == "cosync") return FusionMode::cosync;
    if (s == "concat") return FusionMode::concat;
    if (s == "gated") return FusionMode::gated;
    throw ConfigError("unknown fusion mode '" + s + "' (expected none|uni_E2G|uni_G2E|cosync|concat|gated)");
}

// true if the given branch's fusion step reads counterpart features
inline bool reads_counterpart(FusionMode m, bool is_expression) {
    switch (m) {
        case FusionMode::none: return false;
        case FusionMode::uni_e2g: return !is_expression;  // expression -> gesture only
        case FusionMode::uni_g2e: return is_expression;   // gesture -> expression only
        default: return true;
    }
}

struct ModelConfig {
    int n_frames = 34;  // N
    int joints = 8;     // J
    int expr_dim = 16;  // D_exp
    int audio_dim = 32; // D_aud
    int d_model = 64;
    int heads = 4;
    int layers = 4;

    int gesture_channels() const { return 3 * joints; }
    int expression_channels() const { return expr_dim; }
    int motion_channels() const { return gesture_channels() + expr_dim; }
    int head_dim() const { return d_model / heads; }

    void validate() const {
        if (n_frames < 1 || joints < 1 || expr_dim < 1 || audio_dim < 1 || d_model < 1 || heads < 1 || layers < 1)
            throw ConfigError("ModelConfig: all dimensions must be positive");
        if (d_model % heads != 0) throw ConfigError("ModelConfig: d_model must be divisible by heads");
    }

    nlohmann::json to_json() const {
        return {{"n_frames", n_frames}, {"joints", joints},   {"expr_dim", expr_dim}, {"audio_dim", audio_dim},
                {"d_model", d_model},   {"heads", heads},     {"layers", layers}};
    }
    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.n_frames = j.at("n_frames").get<int>();
        c.joints = j.at("joints").get<int>();
        c.expr_dim = j.at("expr_dim").get<int>();
        c.audio_dim = j.at("audio_dim").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.heads = j.at("heads").get<int>();
        c.layers = j.at("layers").get<int>();
        c.validate();
        return c;
    }
};

// ---- parameter containers ------------------------------------------------

struct LinearParams {
    Tensor w, b;
    template <typename F>
    void for_each(const std::string& prefix, F&& f) {
        f(prefix + ".w", w);
        f(prefix + ".b", b);
    }
};

struct MlpParams {
    Tensor w1, b1, w2, b2;
    template <typename F>
    void for_each(const std::string& prefix, F&& f) {
        f(prefix + ".w1", w1);
        f(prefix + ".b1", b1);
        f(prefix + ".w2", w2);
        f(prefix + ".b2", b2);
    }
};

struct AttnParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    template <typename F>
    void for_each(const std::string& prefix, F&& f) {
        f(prefix + ".wq", wq);
        f(prefix + ".bq", bq);
        f(prefix + ".wk", wk);
        f(prefix + ".bk", bk);
        f(prefix + ".wv", wv);
        f(prefix + ".bv", bv);
        f(prefix + ".wo", wo);
        f(prefix + ".bo", bo);
    }
};

// cross-branch synchronization layer: Q from own stream, K/V from the
// counterpart, then MLP(LN(.)) added back as a residual
struct SyncParams {
    AttnParams attn;
    Tensor ln_g, ln_b;
    MlpParams mlp;
    template <typename F>
    void for_each(const std::string& prefix, F&& f) {
        attn.for_each(prefix + ".attn", f);
        f(prefix + ".ln_g", ln_g);
        f(prefix + ".ln_b", ln_b);
        mlp.for_each(prefix + ".mlp", f);
    }
};

struct BlockParams {
    Tensor adaln_w, adaln_b;  // cond -> 6 * d_model scale/shift/gate vectors
    AttnParams self_attn;
    std::optional<SyncParams> sync;    // attention-family fusion
    std::optional<LinearParams> cat;   // concat fusion: [own; other] -> d
    std::optional<LinearParams> gate;  // gated fusion:  [own; other] -> d gate logits
    MlpParams mlp;

    template <typename F>
    void for_each(const std::string& prefix, F&& f) {
        f(prefix + ".adaln_w", adaln_w);
        f(prefix + ".adaln_b", adaln_b);
        self_attn.for_each(prefix + ".self_attn", f);
        if (sync) sync->for_each(prefix + ".sync", f);
        if (cat) cat->for_each(prefix + ".cat", f);
        if (gate) gate->for_each(prefix + ".gate", f);
        mlp.for_each(prefix + ".mlp", f);
    }
};

struct BranchParams {
    Tensor in_w, in_b;    // channels -> d_model
    Tensor aud_w, aud_b;  // audio_dim -> d_model
    MlpParams temb;       // learned head over the sinusoidal timestep base
    std::vector<BlockParams> blocks;
    Tensor out_ln_g, out_ln_b;
    Tensor out_w, out_b;  // d_model -> channels

    template <typename F>
    void for_each(const std::string& prefix, F&& f) {
        f(prefix + ".in_w", in_w);
        f(prefix + ".in_b", in_b);
        f(prefix + ".aud_w", aud_w);
        f(prefix + ".aud_b", aud_b);
        temb.for_each(prefix + ".temb", f);
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].for_each(prefix + ".block" + std::to_string(i), f);
        f(prefix + ".out_ln_g", out_ln_g);
        f(prefix + ".out_ln_b", out_ln_b);
        f(prefix + ".out_w", out_w);
        f(prefix + ".out_b", out_b);
    }
};

struct DualBranchModel {
    ModelConfig cfg;
    FusionMode fusion = FusionMode::cosync;
    BranchParams expr;
    BranchParams ges;

    template <typename F>
    void for_each_param(F&& f) {
        expr.for_each("expr", f);
        ges.for_each("ges", f);
    }

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out;
        for_each_param([&](const std::string&, Tensor& t) { out.push_back(&t); });
        return out;
    }

    std::int64_t parameter_count() {
        std::int64_t n = 0;
        for_each_param([&](const std::string&, Tensor& t) { n += t.size(); });
        return n;
    }
};

// ---- initialization --------------------------------------------------------

namespace detail {

inline Tensor randn(std::vector<std::int64_t> shape, Rng& rng, double std_dev) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = std_dev * rng.gaussian();
    return t;
}

inline AttnParams init_attn(int d, Rng& rng, double sd) {
    AttnParams a;
    a.wq = randn({d, d}, rng, sd);
    a.bq = Tensor::zeros({d});
    a.wk = randn({d, d}, rng, sd);
    a.bk = Tensor::zeros({d});
    a.wv = randn({d, d}, rng, sd);
    a.bv = Tensor::zeros({d});
    a.wo = randn({d, d}, rng, sd);
    a.bo = Tensor::zeros({d});
    return a;
}

inline MlpParams init_mlp(int din, int dhid, int dout, Rng& rng, double sd) {
    MlpParams m;
    m.w1 = randn({din, dhid}, rng, sd);
    m.b1 = Tensor::zeros({dhid});
    m.w2 = randn({dhid, dout}, rng, sd);
    m.b2 = Tensor::zeros({dout});
    return m;
}

inline BranchParams init_branch(const ModelConfig& cfg, FusionMode fusion, int channels, Rng& rng) {
    const int d = cfg.d_model;
    const double sd = 0.02;
    BranchParams b;
    b.in_w = randn({channels, d}, rng, sd);
    b.in_b = Tensor::zeros({d});
    b.aud_w = randn({cfg.audio_dim, d}, rng, sd);
    b.aud_b = Tensor::zeros({d});
    b.temb = init_mlp(d, d, d, rng, sd);
    b.blocks.resize(static_cast<std::size_t>(cfg.layers));
    for (auto& blk : b.blocks) {
        blk.adaln_w = randn({d, 6 * d}, rng, sd);
        blk.adaln_b = Tensor::zeros({6 * d});
        blk.self_attn = init_attn(d, rng, sd);
        switch (fusion) {
            case FusionMode::none:
            case FusionMode::uni_e2g:
            case FusionMode::uni_g2e:
            case FusionMode::cosync: {
                SyncParams sp;
                sp.attn = init_attn(d, rng, sd);
                sp.ln_g = Tensor::ones({d});
                sp.ln_b = Tensor::zeros({d});
                sp.mlp = init_mlp(d, 2 * d, d, rng, sd);
                blk.sync = std::move(sp);
                break;
            }
            case FusionMode::concat: {
                // start near identity on the own stream so the signal survives init
                LinearParams lp;
                lp.w = randn({2 * d, d}, rng, sd);
                for (int i = 0; i < d; ++i) lp.w.at(i, i) += 1.0;
                lp.b = Tensor::zeros({d});
                blk.cat = std::move(lp);
                break;
            }
            case FusionMode::gated: {
                LinearParams lp;
                lp.w = randn({2 * d, d}, rng, sd);
                lp.b = Tensor::zeros({d});
                blk.gate = std::move(lp);
                break;
            }
        }
        blk.mlp = init_mlp(d, 4 * d, d, rng, sd);
    }
    b.out_ln_g = Tensor::ones({d});
    b.out_ln_b = Tensor::zeros({d});
    b.out_w = randn({d, channels}, rng, sd);
    b.out_b = Tensor::zeros({channels});
    return b;
}

}  // namespace detail

// All interaction-family variants (none/uni/cosync) allocate identical
// parameter sets from the same seed, so ablations differ only in wiring.
inline DualBranchModel make_model(const ModelConfig& cfg, FusionMode fusion, std::uint64_t seed) {
    cfg.validate();
    DualBranchModel m;
    m.cfg = cfg;
    m.fusion = fusion;
    Rng rng(seed);
    const FusionMode family = (fusion == FusionMode::concat || fusion == FusionMode::gated) ? fusion : FusionMode::cosync;
    m.expr = detail::init_branch(cfg, family, cfg.expression_channels(), rng);
    m.ges = detail::init_branch(cfg, family, cfg.gesture_channels(), rng);
    return m;
}

// ---- forward pass ----------------------------------------------------------

// Looks up the tape leaf for each model parameter. Leaves are created in
// declaration order so gradient iteration is deterministic.
struct ParamMap {
    Tape* tape = nullptr;
    std::unordered_map<const Tensor*, Value> map;

    Value operator()(const Tensor& t) const {
        auto it = map.find(&t);
        if (it == map.end()) throw ContractError("ParamMap: tensor not lifted onto the tape");
        return it->second;
    }
};

inline ParamMap lift_params(Tape& tape, DualBranchModel& m, bool requires_grad) {
    ParamMap pm;
    pm.tape = &tape;
    m.for_each_param([&](const std::string&, Tensor& t) { pm.map.emplace(&t, tape.leaf(t, requires_grad)); });
    return pm;
}

// interleaved [sin(t*w0), cos(t*w0), sin(t*w1), ...]; at t=0 this is [0,1,0,1,...]
inline Tensor sinusoidal_base(int t, int d) {
    if (t < 0) throw ContractError("sinusoidal_base: t must be >= 0");
    Tensor out({1, static_cast<std::int64_t>(d)});
    const int pairs = d / 2;
    for (int k = 0; k < pairs; ++k) {
        const double w = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(d));
        out[2 * k] = std::sin(static_cast<double>(t) * w);
        out[2 * k + 1] = std::cos(static_cast<double>(t) * w);
    }
    if (d % 2 == 1) out[d - 1] = std::sin(static_cast<double>(t));
    return out;
}

// gamma(t): sinusoidal base through the branch's learned MLP -> [1 x d] row
inline Value embed_timestep(Tape& tape, const ParamMap& pm, const BranchParams& bp, int t, int d_model) {
    Value base = tape.leaf(sinusoidal_base(t, d_model));
    Value h = tape.silu(tape.linear(base, pm(bp.temb.w1), pm(bp.temb.b1)));
    return tape.linear(h, pm(bp.temb.w2), pm(bp.temb.b2));
}

namespace detail {

inline Value vec(Tape& t, Value row) {  // [1 x d] -> [d]
    return t.reshape(row, {t.val(row).cols()});
}

inline Value linear_rows(Tape& t, const ParamMap& pm, Value x, const Tensor& w, const Tensor& b) {
    return t.add_rowvec(t.matmul(x, pm(w)), pm(b));
}

// multi-head attention: queries from q_in, keys/values from kv_in
inline Value attention(Tape& t, const ParamMap& pm, const AttnParams& ap, Value q_in, Value kv_in, int heads) {
    const std::int64_t d = t.val(q_in).cols();
    const std::int64_t hd = d / heads;
    Value q = linear_rows(t, pm, q_in, ap.wq, ap.bq);
    Value k = linear_rows(t, pm, kv_in, ap.wk, ap.bk);
    Value v = linear_rows(t, pm, kv_in, ap.wv, ap.bv);
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Value> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Value qh = t.slice_cols(q, h * hd, hd);
        Value kh = t.slice_cols(k, h * hd, hd);
        Value vh = t.slice_cols(v, h * hd, hd);
        Value scores = t.scale(t.matmul(qh, t.transpose(kh)), scale);
        outs.push_back(t.matmul(t.softmax_rows(scores), vh));
    }
    Value cat = heads == 1 ? outs[0] : t.concat_cols(outs);
    return linear_rows(t, pm, cat, ap.wo, ap.bo);
}

inline Value mlp_forward(Tape& t, const ParamMap& pm, const MlpParams& mp, Value x) {
    Value h = linear_rows(t, pm, x, mp.w1, mp.b1);
    h = t.gelu(h);
    return linear_rows(t, pm, h, mp.w2, mp.b2);
}

struct Modulation {
    Value sa_shift, sa_scale, sa_gate, mlp_shift, mlp_scale, mlp_gate;
};

inline Modulation adaln(Tape& t, const ParamMap& pm, const BlockParams& blk, Value cond_row) {
    const std::int64_t d = t.val(cond_row).cols();
    Value mod = linear_rows(t, pm, t.silu(cond_row), blk.adaln_w, blk.adaln_b);  // [1 x 6d]
    Modulation m;
    m.sa_shift = vec(t, t.slice_cols(mod, 0, d));
    m.sa_scale = vec(t, t.slice_cols(mod, d, d));
    m.sa_gate = vec(t, t.slice_cols(mod, 2 * d, d));
    m.mlp_shift = vec(t, t.slice_cols(mod, 3 * d, d));
    m.mlp_scale = vec(t, t.slice_cols(mod, 4 * d, d));
    m.mlp_gate = vec(t, t.slice_cols(mod, 5 * d, d));
    return m;
}

inline Value modulate(Tape& t, Value x, Value shift, Value scale) {
    // x * (1 + scale) + shift, broadcast over rows
    return t.add_rowvec(t.add(x, t.mul_rowvec(x, scale)), shift);
}

inline Value ln_plain(Tape& t, Value x) {
    const std::int64_t d = t.val(x).cols();
    return t.layernorm_rows(x, t.leaf(Tensor::ones({d})), t.leaf(Tensor::zeros({d})), 1e-5);
}

// self-attention half of a block; the result is the feature this branch
// records for the counterpart
inline Value block_pre(Tape& t, const ParamMap& pm, const BlockParams& blk, Value x, const Modulation& m, int heads) {
    Value h = modulate(t, ln_plain(t, x), m.sa_shift, m.sa_scale);
    Value attn = attention(t, pm, blk.self_attn, h, h, heads);
    return t.add(x, t.mul_rowvec(attn, m.sa_gate));
}

// fusion step; other is the counterpart's recorded layer feature
inline Value block_fuse(Tape& t, const ParamMap& pm, const BlockParams& blk, Value x, Value other, FusionMode mode,
                        int heads) {
    switch (mode) {
        case FusionMode::none:
            return x;
        case FusionMode::uni_e2g:
        case FusionMode::uni_g2e:
        case FusionMode::cosync: {
            const SyncParams& sp = *blk.sync;
            Value a = attention(t, pm, sp.attn, x, other, heads);
            Value normed = t.layernorm_rows(a, pm(sp.ln_g), pm(sp.ln_b), 1e-5);
            return t.add(mlp_forward(t, pm, sp.mlp, normed), x);
        }
        case FusionMode::concat: {
            Value cat = t.concat_cols({x, other});
            return linear_rows(t, pm, cat, blk.cat->w, blk.cat->b);
        }
        case FusionMode::gated: {
            Value cat = t.concat_cols({x, other});
            Value g = t.sigmoid(linear_rows(t, pm, cat, blk.gate->w, blk.gate->b));
            Value one_minus = t.affine(g, -1.0, 1.0);
            return t.add(t.mul(g, x), t.mul(one_minus, other));
        }
    }
    throw Error("block_fuse: unreachable");
}

inline Value block_post(Tape& t, const ParamMap& pm, const BlockParams& blk, Value x, const Modulation& m) {
    Value h = modulate(t, ln_plain(t, x), m.mlp_shift, m.mlp_scale);
    return t.add(x, t.mul_rowvec(mlp_forward(t, pm, blk.mlp, h), m.mlp_gate));
}

inline Value branch_embed(Tape& t, const ParamMap& pm, const BranchParams& bp, Value z_t, Value f_aud) {
    return t.add(linear_rows(t, pm, z_t, bp.in_w, bp.in_b), linear_rows(t, pm, f_aud, bp.aud_w, bp.aud_b));
}

inline Value branch_output(Tape& t, const ParamMap& pm, const BranchParams& bp, Value x) {
    Value h = t.layernorm_rows(x, pm(bp.out_ln_g), pm(bp.out_ln_b), 1e-5);
    return linear_rows(t, pm, h, bp.out_w, bp.out_b);
}

}  // namespace detail

// Per-layer activations a branch exposes to its counterpart (post
// self-attention, pre fusion).
struct BranchFeatures {
    std::vector<Value> layers;
};

struct BranchOutput {
    Value eps_hat;  // [N x C] prediction head output
    BranchFeatures features;
};

// Single-branch forward with externally supplied counterpart features (the
// sampler's pass-level exchange). counterpart[i] invalid => substitute own
// features (cold start).
inline BranchOutput branch_forward(Tape& t, const ParamMap& pm, const ModelConfig& cfg, const BranchParams& bp,
                                   FusionMode mode, bool is_expression, Value z_t, int timestep, Value f_aud,
                                   const std::vector<Value>& counterpart) {
    const bool needs_other = reads_counterpart(mode, is_expression);
    if (needs_other && counterpart.size() != static_cast<std::size_t>(cfg.layers))
        throw ContractError("branch_forward: fusion mode needs counterpart features for every layer");
    Value cond = embed_timestep(t, pm, bp, timestep, cfg.d_model);
    Value x = detail::branch_embed(t, pm, bp, z_t, f_aud);
    BranchOutput out;
    out.features.layers.reserve(static_cast<std::size_t>(cfg.layers));
    for (int i = 0; i < cfg.layers; ++i) {
        const BlockParams& blk = bp.blocks[static_cast<std::size_t>(i)];
        detail::Modulation m = detail::adaln(t, pm, blk, cond);
        x = detail::block_pre(t, pm, blk, x, m, cfg.heads);
        out.features.layers.push_back(x);
        if (needs_other) {
            Value other = counterpart[static_cast<std::size_t>(i)];
            if (!other.valid()) other = x;  // bootstrap: self-features substituted
            x = detail::block_fuse(t, pm, blk, x, other, mode, cfg.heads);
        }
        x = detail::block_post(t, pm, blk, x, m);
    }
    out.eps_hat = detail::branch_output(t, pm, bp, x);
    return out;
}

struct DualOutput {
    Value eps_expr, eps_ges;
    BranchFeatures feat_expr, feat_ges;
};

// Live dual-branch forward: layer i of each branch attends to layer-i
// features of the other, computed in the same pass. Timesteps may differ.
// stop_gradient cuts the gradient path at the feature exchange.
inline DualOutput model_forward(Tape& t, const ParamMap& pm, DualBranchModel& m, Value z_e, Value z_g, int t_e,
                                int t_g, Value f_aud, bool stop_gradient = false) {
    const ModelConfig& cfg = m.cfg;
    Value cond_e = embed_timestep(t, pm, m.expr, t_e, cfg.d_model);
    Value cond_g = embed_timestep(t, pm, m.ges, t_g, cfg.d_model);
    Value xe = detail::branch_embed(t, pm, m.expr, z_e, f_aud);
    Value xg = detail::branch_embed(t, pm, m.ges, z_g, f_aud);
    DualOutput out;
    for (int i = 0; i < cfg.layers; ++i) {
        const BlockParams& be = m.expr.blocks[static_cast<std::size_t>(i)];
        const BlockParams& bg = m.ges.blocks[static_cast<std::size_t>(i)];
        detail::Modulation me = detail::adaln(t, pm, be, cond_e);
        detail::Modulation mg = detail::adaln(t, pm, bg, cond_g);
        xe = detail::block_pre(t, pm, be, xe, me, cfg.heads);
        xg = detail::block_pre(t, pm, bg, xg, mg, cfg.heads);
        out.feat_expr.layers.push_back(xe);
        out.feat_ges.layers.push_back(xg);
        Value fe = stop_gradient ? t.detach(xe) : xe;
        Value fg = stop_gradient ? t.detach(xg) : xg;
        if (reads_counterpart(m.fusion, true)) xe = detail::block_fuse(t, pm, be, xe, fg, m.fusion, cfg.heads);
        if (reads_counterpart(m.fusion, false)) xg = detail::block_fuse(t, pm, bg, xg, fe, m.fusion, cfg.heads);
        xe = detail::block_post(t, pm, be, xe, me);
        xg = detail::block_post(t, pm, bg, xg, mg);
    }
    out.eps_expr = detail::branch_output(t, pm, m.expr, xe);
    out.eps_ges = detail::branch_output(t, pm, m.ges, xg);
    return out;
}

// standalone gated fusion (also exercised directly by tests)
inline Value gated_fuse(Tape& t, Value f_a, Value f_b, Value w_g, Value b_g) {
    Value cat = t.concat_cols({f_a, f_b});
    Value g = t.sigmoid(t.add_rowvec(t.matmul(cat, w_g), b_g));
    return t.add(t.mul(g, f_a), t.mul(t.affine(g, -1.0, 1.0), f_b));
}

// ---- checkpoint format -----------------------------------------------------
//
// "AFCKPT1" magic, u32 JSON-block length, JSON block (model config, fusion
// mode, role), then each parameter tensor in declaration order as
// u32 rank, u64 extents..., f64 data..., all little-endian.

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline std::uint32_t read_u32(std::istream& is, const char* what) {
    std::uint32_t v;
    is.read(reinterpret_cast<char*>(&v), 4);
    if (!is) throw FormatError(std::string("checkpoint: truncated reading ") + what + " at offset " +
                               std::to_string(static_cast<long long>(is.tellg())));
    return v;
}
inline std::uint64_t read_u64(std::istream& is, const char* what) {
    std::uint64_t v;
    is.read(reinterpret_cast<char*>(&v), 8);
    if (!is) throw FormatError(std::string("checkpoint: truncated reading ") + what);
    return v;
}

}  // namespace detail

inline void save_checkpoint(DualBranchModel& m, const std::string& path, const std::string& role = "model",
                            const nlohmann::json& extra = nlohmann::json::object()) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("save_checkpoint: cannot open " + path);
    os.write("AFCKPT1", 7);
    nlohmann::json j = extra;
    j["config"] = m.cfg.to_json();
    j["fusion"] = fusion_mode_name(m.fusion);
    j["role"] = role;
    const std::string header = j.dump();
    detail::write_u32(os, static_cast<std::uint32_t>(header.size()));
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    m.for_each_param([&](const std::string&, Tensor& t) {
        detail::write_u32(os, static_cast<std::uint32_t>(t.shape().size()));
        for (std::int64_t e : t.shape()) detail::write_u64(os, static_cast<std::uint64_t>(e));
        os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * 8));
    });
    if (!os) throw Error("save_checkpoint: write failed for " + path);
}

struct LoadedCheckpoint {
    DualBranchModel model;
    std::string role;
    nlohmann::json header;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("load_checkpoint: cannot open " + path);
    char magic[7];
    is.read(magic, 7);
    if (!is || std::memcmp(magic, "AFCKPT1", 7) != 0)
        throw FormatError("checkpoint: bad magic at offset 0 in " + path);
    const std::uint32_t hlen = detail::read_u32(is, "header length");
    std::string header(hlen, '\0');
    is.read(header.data(), hlen);
    if (!is) throw FormatError("checkpoint: truncated JSON header");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(header);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: malformed JSON header: ") + e.what());
    }
    LoadedCheckpoint lc;
    lc.header = j;
    lc.role = j.value("role", "model");
    ModelConfig cfg = ModelConfig::from_json(j.at("config"));
    FusionMode fusion = fusion_mode_from(j.at("fusion").get<std::string>());
    lc.model = make_model(cfg, fusion, 0);
    lc.model.for_each_param([&](const std::string& name, Tensor& t) {
        const std::uint32_t rank = detail::read_u32(is, name.c_str());
        std::vector<std::int64_t> shape;
        for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<std::int64_t>(detail::read_u64(is, name.c_str())));
        if (shape != t.shape())
            throw FormatError("checkpoint: shape mismatch for " + name + " at offset " +
                              std::to_string(static_cast<long long>(is.tellg())));
        is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * 8));
        if (!is) throw FormatError("checkpoint: truncated tensor data for " + name);
    });
    return lc;
}

}  // namespace dualdit
