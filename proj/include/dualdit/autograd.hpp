// Copyright (c) 2026 the dualdit authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "dualdit/tensor.hpp"

namespace dualdit {

// Handle into a Tape. Cheap to copy; valid only for the tape that created it.
struct Value {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Ops append nodes in execution order; backward() replays
// the registered pulls in exact reverse order. One tape per execution context,
// never shared across threads.
class Tape {
public:
    Value leaf(Tensor t, bool requires_grad = false) {
        ensure_finite(t, "leaf");
        return push("leaf", {}, std::move(t), requires_grad, nullptr);
    }

    const Tensor& val(Value v) const { return nodes_[check(v)].val; }

    // Gradient of the last backward() root w.r.t. this node. Zero tensor if
    // the node is not on any path to the root.
    const Tensor& grad(Value v) const {
        const Node& n = nodes_[check(v)];
        if (grads_.size() > static_cast<std::size_t>(v.id) && grads_[v.id].size() != 0) return grads_[v.id];
        grad_zero_.emplace(n.val.shape());
        return *grad_zero_;
    }

    std::size_t num_nodes() const { return nodes_.size(); }

    void backward(Value root) {
        const Node& r = nodes_[check(root)];
        if (!r.val.is_scalar()) throw ContractError("backward: root must be scalar-valued");
        grads_.assign(nodes_.size(), Tensor());
        grads_[root.id] = Tensor::ones({1});
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!n.requires_grad || !n.back) continue;
            if (grads_[i].size() == 0) continue;  // not on any path to the root
            n.back(*this, i);
        }
    }

    // ---- primitive ops ------------------------------------------------

    Value add(Value a, Value b) {
        const Tensor &ta = val(a), &tb = val(b);
        ensure_same_shape(ta, tb, "add");
        Tensor out(ta.shape());
        for (std::int64_t i = 0; i < ta.size(); ++i) out[i] = ta[i] + tb[i];
        return push("add", {a.id, b.id}, std::move(out), rg(a) || rg(b), [](Tape& t, int id) {
            const Tensor& g = t.grads_[id];
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                for (std::int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
            });
            t.pull(t.nodes_[id].in[1], [&](Tensor& d) {
                for (std::int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
            });
        });
    }

    Value sub(Value a, Value b) {
        const Tensor &ta = val(a), &tb = val(b);
        ensure_same_shape(ta, tb, "sub");
        Tensor out(ta.shape());
        for (std::int64_t i = 0; i < ta.size(); ++i) out[i] = ta[i] - tb[i];
        return push("sub", {a.id, b.id}, std::move(out), rg(a) || rg(b), [](Tape& t, int id) {
            const Tensor& g = t.grads_[id];
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                for (std::int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
            });
            t.pull(t.nodes_[id].in[1], [&](Tensor& d) {
                for (std::int64_t i = 0; i < g.size(); ++i) d[i] -= g[i];
            });
        });
    }

    Value mul(Value a, Value b) {
        const Tensor &ta = val(a), &tb = val(b);
        ensure_same_shape(ta, tb, "mul");
        Tensor out(ta.shape());
        for (std::int64_t i = 0; i < ta.size(); ++i) out[i] = ta[i] * tb[i];
        return push("mul", {a.id, b.id}, std::move(out), rg(a) || rg(b), [](Tape& t, int id) {
            const Tensor& g = t.grads_[id];
            const Tensor& va = t.nodes_[t.nodes_[id].in[0]].val;
            const Tensor& vb = t.nodes_[t.nodes_[id].in[1]].val;
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                for (std::int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * vb[i];
            });
            t.pull(t.nodes_[id].in[1], [&](Tensor& d) {
                for (std::int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * va[i];
            });
        });
    }

    // elementwise k*x + c
    Value affine(Value x, double k, double c) {
        const Tensor& tx = val(x);
        Tensor out(tx.shape());
        for (std::int64_t i = 0; i < tx.size(); ++i) out[i] = k * tx[i] + c;
        return push("affine", {x.id}, std::move(out), rg(x), [k](Tape& t, int id) {
            const Tensor& g = t.grads_[id];
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                for (std::int64_t i = 0; i < g.size(); ++i) d[i] += k * g[i];
            });
        });
    }

    Value scale(Value x, double k) { return affine(x, k, 0.0); }

    Value matmul(Value a, Value b) {
        const Tensor &ta = val(a), &tb = val(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows())
            throw DimensionError("matmul: incompatible shapes " + ta.shape_str() + " x " + tb.shape_str());
        Tensor out = mm(ta, tb);
        return push("matmul", {a.id, b.id}, std::move(out), rg(a) || rg(b), [](Tape& t, int id) {
            const Tensor& g = t.grads_[id];
            const Tensor& va = t.nodes_[t.nodes_[id].in[0]].val;
            const Tensor& vb = t.nodes_[t.nodes_[id].in[1]].val;
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) { mm_acc_nt(g, vb, d); });   // dA += g * B^T
            t.pull(t.nodes_[id].in[1], [&](Tensor& d) { mm_acc_tn(va, g, d); });   // dB += A^T * g
        });
    }

    Value transpose(Value x) {
        const Tensor& tx = val(x);
        if (tx.rank() != 2) throw DimensionError("transpose: expected 2-D");
        Tensor out({tx.cols(), tx.rows()});
        for (std::int64_t r = 0; r < tx.rows(); ++r)
            for (std::int64_t c = 0; c < tx.cols(); ++c) out.at(c, r) = tx.at(r, c);
        return push("transpose", {x.id}, std::move(out), rg(x), [](Tape& t, int id) {
            const Tensor& g = t.grads_[id];
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                for (std::int64_t r = 0; r < g.rows(); ++r)
                    for (std::int64_t c = 0; c < g.cols(); ++c) d.at(c, r) += g.at(r, c);
            });
        });
    }

    // x[N x d] + v[d] broadcast over rows
    Value add_rowvec(Value x, Value v) {
        const Tensor &tx = val(x), &tv = val(v);
        check_rowvec(tx, tv, "add_rowvec");
        Tensor out(tx.shape());
        const std::int64_t n = tx.rows(), d = tx.cols();
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t c = 0; c < d; ++c) out.at(r, c) = tx.at(r, c) + tv[c];
        return push("add_rowvec", {x.id, v.id}, std::move(out), rg(x) || rg(v), [](Tape& t, int id) {
            const Tensor& g = t.grads_[id];
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                for (std::int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
            });
            t.pull(t.nodes_[id].in[1], [&](Tensor& d) {
                for (std::int64_t r = 0; r < g.rows(); ++r)
                    for (std::int64_t c = 0; c < g.cols(); ++c) d[c] += g.at(r, c);
            });
        });
    }

    // x[N x d] * v[d] broadcast over rows
    Value mul_rowvec(Value x, Value v) {
        const Tensor &tx = val(x), &tv = val(v);
        check_rowvec(tx, tv, "mul_rowvec");
        Tensor out(tx.shape());
        const std::int64_t n = tx.rows(), d = tx.cols();
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t c = 0; c < d; ++c) out.at(r, c) = tx.at(r, c) * tv[c];
        return push("mul_rowvec", {x.id, v.id}, std::move(out), rg(x) || rg(v), [](Tape& t, int id) {
            const Tensor& g = t.grads_[id];
            const Tensor& vx = t.nodes_[t.nodes_[id].in[0]].val;
            const Tensor& vv = t.nodes_[t.nodes_[id].in[1]].val;
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                for (std::int64_t r = 0; r < g.rows(); ++r)
                    for (std::int64_t c = 0; c < g.cols(); ++c) d.at(r, c) += g.at(r, c) * vv[c];
            });
            t.pull(t.nodes_[id].in[1], [&](Tensor& d) {
                for (std::int64_t r = 0; r < g.rows(); ++r)
                    for (std::int64_t c = 0; c < g.cols(); ++c) d[c] += g.at(r, c) * vx.at(r, c);
            });
        });
    }

    Value slice_cols(Value x, std::int64_t start, std::int64_t len) {
        const Tensor& tx = val(x);
        if (tx.rank() != 2 || start < 0 || len <= 0 || start + len > tx.cols())
            throw DimensionError("slice_cols: bad range");
        Tensor out({tx.rows(), len});
        for (std::int64_t r = 0; r < tx.rows(); ++r)
            for (std::int64_t c = 0; c < len; ++c) out.at(r, c) = tx.at(r, start + c);
        return push("slice_cols", {x.id}, std::move(out), rg(x), [start, len](Tape& t, int id) {
            const Tensor& g = t.grads_[id];
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                for (std::int64_t r = 0; r < g.rows(); ++r)
                    for (std::int64_t c = 0; c < len; ++c) d.at(r, start + c) += g.at(r, c);
            });
        });
    }

    Value concat_cols(const std::vector<Value>& parts) {
        if (parts.empty()) throw ContractError("concat_cols: empty");
        std::int64_t n = val(parts[0]).rows(), d = 0;
        bool any_rg = false;
        std::vector<int> in;
        for (Value p : parts) {
            const Tensor& tp = val(p);
            if (tp.rank() != 2 || tp.rows() != n) throw DimensionError("concat_cols: row mismatch");
            d += tp.cols();
            any_rg = any_rg || rg(p);
            in.push_back(p.id);
        }
        Tensor out({n, d});
        std::int64_t off = 0;
        for (Value p : parts) {
            const Tensor& tp = val(p);
            for (std::int64_t r = 0; r < n; ++r)
                for (std::int64_t c = 0; c < tp.cols(); ++c) out.at(r, off + c) = tp.at(r, c);
            off += tp.cols();
        }
        return push("concat_cols", std::move(in), std::move(out), any_rg, [](Tape& t, int id) {
            const Tensor& g = t.grads_[id];
            std::int64_t off2 = 0;
            for (int src : t.nodes_[id].in) {
                const std::int64_t w = t.nodes_[src].val.cols();
                t.pull(src, [&](Tensor& d) {
                    for (std::int64_t r = 0; r < g.rows(); ++r)
                        for (std::int64_t c = 0; c < w; ++c) d.at(r, c) += g.at(r, off2 + c);
                });
                off2 += w;
            }
        });
    }

    Value slice_rows(Value x, std::int64_t start, std::int64_t len) {
        const Tensor& tx = val(x);
        if (tx.rank() != 2 || start < 0 || len <= 0 || start + len > tx.rows())
            throw DimensionError("slice_rows: bad range");
        Tensor out({len, tx.cols()});
        for (std::int64_t r = 0; r < len; ++r)
            for (std::int64_t c = 0; c < tx.cols(); ++c) out.at(r, c) = tx.at(start + r, c);
        return push("slice_rows", {x.id}, std::move(out), rg(x), [start, len](Tape& t, int id) {
            const Tensor& g = t.grads_[id];
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                for (std::int64_t r = 0; r < len; ++r)
                    for (std::int64_t c = 0; c < g.cols(); ++c) d.at(start + r, c) += g.at(r, c);
            });
        });
    }

    // first-order frame difference: out[i] = x[i+1] - x[i]
    Value frame_diff(Value x) {
        const Tensor& tx = val(x);
        if (tx.rank() != 2 || tx.rows() < 2) throw ContractError("frame_diff: need at least 2 frames");
        Tensor out({tx.rows() - 1, tx.cols()});
        for (std::int64_t r = 0; r + 1 < tx.rows(); ++r)
            for (std::int64_t c = 0; c < tx.cols(); ++c) out.at(r, c) = tx.at(r + 1, c) - tx.at(r, c);
        return push("frame_diff", {x.id}, std::move(out), rg(x), [](Tape& t, int id) {
            const Tensor& g = t.grads_[id];
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                for (std::int64_t r = 0; r < g.rows(); ++r)
                    for (std::int64_t c = 0; c < g.cols(); ++c) {
                        d.at(r + 1, c) += g.at(r, c);
                        d.at(r, c) -= g.at(r, c);
                    }
            });
        });
    }

    // softmax along the last axis of a 2-D tensor, max-subtracted
    Value softmax_rows(Value x) {
        const Tensor& tx = val(x);
        if (tx.rank() != 2) throw DimensionError("softmax_rows: expected 2-D");
        Tensor out(tx.shape());
        const std::int64_t n = tx.rows(), d = tx.cols();
        for (std::int64_t r = 0; r < n; ++r) {
            double m = tx.at(r, 0);
            for (std::int64_t c = 1; c < d; ++c) m = std::max(m, tx.at(r, c));
            double s = 0.0;
            for (std::int64_t c = 0; c < d; ++c) {
                const double e = std::exp(tx.at(r, c) - m);
                out.at(r, c) = e;
                s += e;
            }
            for (std::int64_t c = 0; c < d; ++c) out.at(r, c) /= s;
        }
        return push("softmax_rows", {x.id}, std::move(out), rg(x), [](Tape& t, int id) {
            const Tensor& g = t.grads_[id];
            const Tensor& y = t.nodes_[id].val;
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                for (std::int64_t r = 0; r < y.rows(); ++r) {
                    double dot = 0.0;
                    for (std::int64_t c = 0; c < y.cols(); ++c) dot += g.at(r, c) * y.at(r, c);
                    for (std::int64_t c = 0; c < y.cols(); ++c)
                        d.at(r, c) += y.at(r, c) * (g.at(r, c) - dot);
                }
            });
        });
    }

    // layer norm over the last axis, then affine with gain/bias vectors
    Value layernorm_rows(Value x, Value gain, Value bias, double eps) {
        const Tensor &tx = val(x), &tg = val(gain), &tb = val(bias);
        check_rowvec(tx, tg, "layernorm_rows(gain)");
        check_rowvec(tx, tb, "layernorm_rows(bias)");
        if (eps <= 0.0) throw ContractError("layernorm_rows: eps must be > 0");
        const std::int64_t n = tx.rows(), d = tx.cols();
        Tensor out(tx.shape());
        Tensor xhat(tx.shape());
        std::vector<double> inv_std(static_cast<std::size_t>(n));
        for (std::int64_t r = 0; r < n; ++r) {
            double mu = 0.0;
            for (std::int64_t c = 0; c < d; ++c) mu += tx.at(r, c);
            mu /= static_cast<double>(d);
            double var = 0.0;
            for (std::int64_t c = 0; c < d; ++c) {
                const double dv = tx.at(r, c) - mu;
                var += dv * dv;
            }
            var /= static_cast<double>(d);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[static_cast<std::size_t>(r)] = is;
            for (std::int64_t c = 0; c < d; ++c) {
                const double xh = (tx.at(r, c) - mu) * is;
                xhat.at(r, c) = xh;
                out.at(r, c) = xh * tg[c] + tb[c];
            }
        }
        Value v = push("layernorm_rows", {x.id, gain.id, bias.id}, std::move(out), rg(x) || rg(gain) || rg(bias),
                       [xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int id) {
                           const Tensor& g = t.grads_[id];
                           const Tensor& vg = t.nodes_[t.nodes_[id].in[1]].val;
                           const std::int64_t n2 = g.rows(), d2 = g.cols();
                           t.pull(t.nodes_[id].in[1], [&](Tensor& dg) {
                               for (std::int64_t r = 0; r < n2; ++r)
                                   for (std::int64_t c = 0; c < d2; ++c) dg[c] += g.at(r, c) * xhat.at(r, c);
                           });
                           t.pull(t.nodes_[id].in[2], [&](Tensor& db) {
                               for (std::int64_t r = 0; r < n2; ++r)
                                   for (std::int64_t c = 0; c < d2; ++c) db[c] += g.at(r, c);
                           });
                           t.pull(t.nodes_[id].in[0], [&](Tensor& dx) {
                               for (std::int64_t r = 0; r < n2; ++r) {
                                   double sum_dh = 0.0, sum_dh_xh = 0.0;
                                   for (std::int64_t c = 0; c < d2; ++c) {
                                       const double dh = g.at(r, c) * vg[c];
                                       sum_dh += dh;
                                       sum_dh_xh += dh * xhat.at(r, c);
                                   }
                                   const double inv_d = 1.0 / static_cast<double>(d2);
                                   for (std::int64_t c = 0; c < d2; ++c) {
                                       const double dh = g.at(r, c) * vg[c];
                                       dx.at(r, c) += inv_std[static_cast<std::size_t>(r)] *
                                                      (dh - inv_d * sum_dh - xhat.at(r, c) * inv_d * sum_dh_xh);
                                   }
                               }
                           });
                       });
        return v;
    }

    Value gelu(Value x) {
        const Tensor& tx = val(x);
        Tensor out(tx.shape());
        for (std::int64_t i = 0; i < tx.size(); ++i) out[i] = tx[i] * phi(tx[i]);
        return push("gelu", {x.id}, std::move(out), rg(x), [](Tape& t, int id) {
            const Tensor& g = t.grads_[id];
            const Tensor& vx = t.nodes_[t.nodes_[id].in[0]].val;
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                for (std::int64_t i = 0; i < g.size(); ++i)
                    d[i] += g[i] * (phi(vx[i]) + vx[i] * dphi(vx[i]));
            });
        });
    }

    Value silu(Value x) {
        const Tensor& tx = val(x);
        Tensor out(tx.shape());
        for (std::int64_t i = 0; i < tx.size(); ++i) out[i] = tx[i] * sigm(tx[i]);
        return push("silu", {x.id}, std::move(out), rg(x), [](Tape& t, int id) {
            const Tensor& g = t.grads_[id];
            const Tensor& vx = t.nodes_[t.nodes_[id].in[0]].val;
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                for (std::int64_t i = 0; i < g.size(); ++i) {
                    const double s = sigm(vx[i]);
                    d[i] += g[i] * (s * (1.0 + vx[i] * (1.0 - s)));
                }
            });
        });
    }

    Value sigmoid(Value x) {
        const Tensor& tx = val(x);
        Tensor out(tx.shape());
        for (std::int64_t i = 0; i < tx.size(); ++i) out[i] = sigm(tx[i]);
        return push("sigmoid", {x.id}, std::move(out), rg(x), [](Tape& t, int id) {
            const Tensor& g = t.grads_[id];
            const Tensor& y = t.nodes_[id].val;
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                for (std::int64_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i] * (1.0 - y[i]);
            });
        });
    }

    Value sum_all(Value x) {
        const Tensor& tx = val(x);
        double s = 0.0;
        for (std::int64_t i = 0; i < tx.size(); ++i) s += tx[i];
        return push("sum_all", {x.id}, Tensor::scalar(s), rg(x), [](Tape& t, int id) {
            const double g = t.grads_[id][0];
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                for (std::int64_t i = 0; i < d.size(); ++i) d[i] += g;
            });
        });
    }

    Value mean_all(Value x) {
        const Tensor& tx = val(x);
        double s = 0.0;
        for (std::int64_t i = 0; i < tx.size(); ++i) s += tx[i];
        const double inv_n = 1.0 / static_cast<double>(tx.size());
        return push("mean_all", {x.id}, Tensor::scalar(s * inv_n), rg(x), [inv_n](Tape& t, int id) {
            const double g = t.grads_[id][0] * inv_n;
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                for (std::int64_t i = 0; i < d.size(); ++i) d[i] += g;
            });
        });
    }

    // mean over elements of the Huber penalty of (a - b)
    Value huber_mean(Value a, Value b, double delta) {
        const Tensor &ta = val(a), &tb = val(b);
        ensure_same_shape(ta, tb, "huber_mean");
        if (delta <= 0.0) throw ContractError("huber_mean: delta must be > 0");
        double s = 0.0;
        for (std::int64_t i = 0; i < ta.size(); ++i) {
            const double e = ta[i] - tb[i];
            const double ae = std::abs(e);
            s += ae < delta ? 0.5 * e * e : delta * (ae - 0.5 * delta);
        }
        const double inv_n = 1.0 / static_cast<double>(ta.size());
        return push("huber_mean", {a.id, b.id}, Tensor::scalar(s * inv_n), rg(a) || rg(b),
                    [delta, inv_n](Tape& t, int id) {
                        const double g = t.grads_[id][0] * inv_n;
                        const Tensor& va = t.nodes_[t.nodes_[id].in[0]].val;
                        const Tensor& vb = t.nodes_[t.nodes_[id].in[1]].val;
                        auto w = [&](std::int64_t i) {
                            const double e = va[i] - vb[i];
                            return std::abs(e) < delta ? e : (e > 0 ? delta : -delta);
                        };
                        t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                            for (std::int64_t i = 0; i < d.size(); ++i) d[i] += g * w(i);
                        });
                        t.pull(t.nodes_[id].in[1], [&](Tensor& d) {
                            for (std::int64_t i = 0; i < d.size(); ++i) d[i] -= g * w(i);
                        });
                    });
    }

    // same data, new shape (row-major order preserved)
    Value reshape(Value x, std::vector<std::int64_t> shape) {
        const Tensor& tx = val(x);
        Tensor out(std::move(shape), tx.vec());
        return push("reshape", {x.id}, std::move(out), rg(x), [](Tape& t, int id) {
            const Tensor& g = t.grads_[id];
            t.pull(t.nodes_[id].in[0], [&](Tensor& d) {
                for (std::int64_t i = 0; i < g.size(); ++i) d[i] += g[i];
            });
        });
    }

    // value copy with the gradient path cut
    Value detach(Value x) { return leaf(val(x), false); }

    // ---- composites ----------------------------------------------------

    Value mse(Value a, Value b) {
        Value d = sub(a, b);
        return mean_all(mul(d, d));
    }

    Value linear(Value x, Value w, Value b) { return add_rowvec(matmul(x, w), b); }

private:
    struct Node {
        const char* op;
        std::vector<int> in;
        Tensor val;
        bool requires_grad;
        std::function<void(Tape&, int)> back;
    };

    static double sigm(double x) { return 1.0 / (1.0 + std::exp(-x)); }
    static double phi(double x) { return 0.5 * (1.0 + std::erf(x * 0.7071067811865475244)); }
    static double dphi(double x) { return 0.3989422804014326779 * std::exp(-0.5 * x * x); }

    static Tensor mm(const Tensor& a, const Tensor& b) {
        const std::int64_t m = a.rows(), k = a.cols(), n = b.cols();
        Tensor c({m, n});
        for (std::int64_t i = 0; i < m; ++i) {
            const double* arow = a.data() + i * k;
            double* crow = c.data() + i * n;
            for (std::int64_t l = 0; l < k; ++l) {
                const double av = arow[l];
                if (av == 0.0) continue;
                const double* brow = b.data() + l * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
        return c;
    }

    // d += g * b^T   (g: m x n, b: k x n, d: m x k)
    static void mm_acc_nt(const Tensor& g, const Tensor& b, Tensor& d) {
        const std::int64_t m = g.rows(), n = g.cols(), k = b.rows();
        for (std::int64_t i = 0; i < m; ++i) {
            const double* grow = g.data() + i * n;
            double* drow = d.data() + i * k;
            for (std::int64_t l = 0; l < k; ++l) {
                const double* brow = b.data() + l * n;
                double s = 0.0;
                for (std::int64_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                drow[l] += s;
            }
        }
    }

    // d += a^T * g   (a: m x k, g: m x n, d: k x n)
    static void mm_acc_tn(const Tensor& a, const Tensor& g, Tensor& d) {
        const std::int64_t m = a.rows(), k = a.cols(), n = g.cols();
        for (std::int64_t i = 0; i < m; ++i) {
            const double* arow = a.data() + i * k;
            const double* grow = g.data() + i * n;
            for (std::int64_t l = 0; l < k; ++l) {
                const double av = arow[l];
                if (av == 0.0) continue;
                double* drow = d.data() + l * n;
                for (std::int64_t j = 0; j < n; ++j) drow[j] += av * grow[j];
            }
        }
    }

    static void check_rowvec(const Tensor& x, const Tensor& v, const char* op) {
        if (x.rank() != 2 || v.rank() != 1 || v.shape()[0] != x.cols())
            throw DimensionError(std::string(op) + ": expected [N x d] with [d], got " + x.shape_str() + " and " +
                                 v.shape_str());
    }

    int check(Value v) const {
        if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
            throw ContractError("Tape: invalid value handle");
        return v.id;
    }

    bool rg(Value v) const { return nodes_[check(v)].requires_grad; }

    Value push(const char* op, std::vector<int> in, Tensor val, bool requires_grad,
               std::function<void(Tape&, int)> back) {
        ensure_finite(val, op);
        nodes_.push_back(Node{op, std::move(in), std::move(val), requires_grad, std::move(back)});
        return Value{static_cast<int>(nodes_.size()) - 1};
    }

    // accumulate into an input's gradient buffer, skipping non-grad subgraphs
    template <typename F>
    void pull(int id, F&& f) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return;
        Tensor& buf = grads_[id];
        if (buf.size() == 0) buf = Tensor::zeros(n.val.shape());
        f(buf);
    }

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    mutable std::optional<Tensor> grad_zero_;
};

}  // namespace dualdit
