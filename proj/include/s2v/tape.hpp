#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "matrix.hpp"
#include "param_store.hpp"

namespace s2v {

// Eager reverse-mode autodiff over Matrix values. Each op computes its result
// immediately and registers a closure that scatters the upstream gradient to
// its inputs; backward() replays closures in reverse creation order, which is
// a valid topological order by construction.
//
// Storage is f32; reductions and row statistics accumulate in f64. Scalar
// (1x1) results additionally carry an f64 value that propagates through
// scalar arithmetic, so losses built from reductions keep double precision.
//
// A tape built with precise=true additionally keeps an f64 shadow of every
// node and runs the forward arithmetic on the shadows, rounding into the f32
// storage afterwards. Backward still reads the f32 values. Finite-difference
// probes evaluate losses on precise tapes so the difference quotient is not
// drowned by f32 activation rounding.
class Tape {
public:
    explicit Tape(bool grads_enabled = true, bool precise = false)
        : grads_enabled_(grads_enabled), precise_(precise) {}

    struct Node {
        Matrix value;
        Matrix grad;
        std::vector<double> wide;
        double value64 = std::numeric_limits<double>::quiet_NaN();
        bool needs_grad = false;
        std::function<void()> backprop;
    };

    int leaf(Matrix m, bool needs_grad = false) {
        Node n;
        n.value = std::move(m);
        n.needs_grad = needs_grad && grads_enabled_;
        if (precise_) {
            n.wide.assign(n.value.data.begin(), n.value.data.end());
            if (n.value.rows == 1 && n.value.cols == 1) n.value64 = n.wide[0];
        }
        nodes_.push_back(std::move(n));
        return (int) nodes_.size() - 1;
    }

    // Binds a parameter tensor; after backward() its accumulated gradient is
    // added into the store's grad buffer. Repeated binds return the same node.
    int param(ParamStore & store, const std::string & name) {
        for (const auto & b : bound_) {
            if (b.store == &store && b.name == name) return b.node;
        }
        const auto & e = store.entry(name);
        int id = leaf(e.value, e.trainable);
        bound_.push_back({&store, name, id});
        return id;
    }

    const Matrix & val(int id) const { return nodes_.at(id).value; }

    // f64 view of a scalar node.
    double scalar(int id) const {
        const Node & n = nodes_.at(id);
        if (n.value.rows != 1 || n.value.cols != 1) {
            throw ContractError("scalar: node is not 1x1");
        }
        return sval(id);
    }

    size_t num_nodes() const { return nodes_.size(); }

    void backward(int loss_id) {
        if (backward_done_) {
            throw ContractError("backward: already called on this tape");
        }
        Node & loss = nodes_.at(loss_id);
        if (loss.value.rows != 1 || loss.value.cols != 1) {
            throw ContractError("backward: loss must be a 1x1 scalar");
        }
        backward_done_ = true;
        if (!grads_enabled_) return;
        grad_of(loss_id).data[0] = 1.0f;
        for (int i = loss_id; i >= 0; --i) {
            Node & n = nodes_[i];
            if (n.backprop && !n.grad.data.empty()) {
                n.backprop();
            }
        }
        for (const auto & b : bound_) {
            Node & n = nodes_[b.node];
            if (n.grad.data.empty()) continue;
            Matrix & g = b.store->grad(b.name);
            for (size_t k = 0; k < g.data.size(); ++k) g.data[k] += n.grad.data[k];
        }
    }

    // ---- elementwise ----

    int add(int a, int b) {
        const Matrix & A = val(a);
        const Matrix & B = val(b);
        require_same_shape(A, B, "add");
        Matrix out(A.rows, A.cols);
        std::vector<double> w;
        if (precise_) {
            const auto & wa = wv(a);
            const auto & wb = wv(b);
            w.resize(wa.size());
            for (size_t i = 0; i < w.size(); ++i) w[i] = wa[i] + wb[i];
            round_into(w, out);
        } else {
            for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = A.data[i] + B.data[i];
        }
        int id = make(std::move(out), {a, b});
        if (precise_) attach_wide(id, std::move(w));
        else if (is_scalar(id)) set_sval(id, sval(a) + sval(b));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a, b] {
                const Matrix & g = nodes_[id].grad;
                if (wants(a)) accum(a, g, 1.0);
                if (wants(b)) accum(b, g, 1.0);
            };
        }
        return id;
    }

    int sub(int a, int b) {
        const Matrix & A = val(a);
        const Matrix & B = val(b);
        require_same_shape(A, B, "sub");
        Matrix out(A.rows, A.cols);
        std::vector<double> w;
        if (precise_) {
            const auto & wa = wv(a);
            const auto & wb = wv(b);
            w.resize(wa.size());
            for (size_t i = 0; i < w.size(); ++i) w[i] = wa[i] - wb[i];
            round_into(w, out);
        } else {
            for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = A.data[i] - B.data[i];
        }
        int id = make(std::move(out), {a, b});
        if (precise_) attach_wide(id, std::move(w));
        else if (is_scalar(id)) set_sval(id, sval(a) - sval(b));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a, b] {
                const Matrix & g = nodes_[id].grad;
                if (wants(a)) accum(a, g, 1.0);
                if (wants(b)) accum(b, g, -1.0);
            };
        }
        return id;
    }

    int mul(int a, int b) {
        const Matrix & A = val(a);
        const Matrix & B = val(b);
        require_same_shape(A, B, "mul");
        Matrix out(A.rows, A.cols);
        std::vector<double> w;
        if (precise_) {
            const auto & wa = wv(a);
            const auto & wb = wv(b);
            w.resize(wa.size());
            for (size_t i = 0; i < w.size(); ++i) w[i] = wa[i] * wb[i];
            round_into(w, out);
        } else {
            for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = A.data[i] * B.data[i];
        }
        int id = make(std::move(out), {a, b});
        if (precise_) attach_wide(id, std::move(w));
        else if (is_scalar(id)) set_sval(id, sval(a) * sval(b));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a, b] {
                const Matrix & g = nodes_[id].grad;
                if (wants(a)) {
                    Matrix & ga = grad_of(a);
                    const Matrix & B2 = nodes_[b].value;
                    for (size_t i = 0; i < g.data.size(); ++i) ga.data[i] += g.data[i] * B2.data[i];
                }
                if (wants(b)) {
                    Matrix & gb = grad_of(b);
                    const Matrix & A2 = nodes_[a].value;
                    for (size_t i = 0; i < g.data.size(); ++i) gb.data[i] += g.data[i] * A2.data[i];
                }
            };
        }
        return id;
    }

    int scale(int a, double c) {
        const Matrix & A = val(a);
        Matrix out(A.rows, A.cols);
        std::vector<double> w;
        if (precise_) {
            const auto & wa = wv(a);
            w.resize(wa.size());
            for (size_t i = 0; i < w.size(); ++i) w[i] = wa[i] * c;
            round_into(w, out);
        } else {
            for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = (float) (A.data[i] * c);
        }
        int id = make(std::move(out), {a});
        if (precise_) attach_wide(id, std::move(w));
        else if (is_scalar(id)) set_sval(id, sval(a) * c);
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a, c] {
                if (wants(a)) accum(a, nodes_[id].grad, c);
            };
        }
        return id;
    }

    int add_const(int a, double c) {
        const Matrix & A = val(a);
        Matrix out(A.rows, A.cols);
        std::vector<double> w;
        if (precise_) {
            const auto & wa = wv(a);
            w.resize(wa.size());
            for (size_t i = 0; i < w.size(); ++i) w[i] = wa[i] + c;
            round_into(w, out);
        } else {
            for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = (float) (A.data[i] + c);
        }
        int id = make(std::move(out), {a});
        if (precise_) attach_wide(id, std::move(w));
        else if (is_scalar(id)) set_sval(id, sval(a) + c);
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a] {
                if (wants(a)) accum(a, nodes_[id].grad, 1.0);
            };
        }
        return id;
    }

    int tanh_op(int a) {
        const Matrix & A = val(a);
        Matrix out(A.rows, A.cols);
        std::vector<double> w;
        if (precise_) {
            const auto & wa = wv(a);
            w.resize(wa.size());
            for (size_t i = 0; i < w.size(); ++i) w[i] = std::tanh(wa[i]);
            round_into(w, out);
        } else {
            for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = (float) std::tanh((double) A.data[i]);
        }
        int id = make(std::move(out), {a});
        if (precise_) attach_wide(id, std::move(w));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a] {
                if (!wants(a)) return;
                const Matrix & g = nodes_[id].grad;
                const Matrix & y = nodes_[id].value;
                Matrix & ga = grad_of(a);
                for (size_t i = 0; i < g.data.size(); ++i) {
                    double yi = y.data[i];
                    ga.data[i] += (float) ((double) g.data[i] * (1.0 - yi * yi));
                }
            };
        }
        return id;
    }

    int gelu(int a) {
        const Matrix & A = val(a);
        Matrix out(A.rows, A.cols);
        std::vector<double> w;
        if (precise_) {
            const auto & wa = wv(a);
            w.resize(wa.size());
            for (size_t i = 0; i < w.size(); ++i) w[i] = detail::gelu_scalar(wa[i]);
            round_into(w, out);
        } else {
            for (size_t i = 0; i < out.data.size(); ++i) {
                out.data[i] = (float) detail::gelu_scalar((double) A.data[i]);
            }
        }
        int id = make(std::move(out), {a});
        if (precise_) attach_wide(id, std::move(w));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a] {
                if (!wants(a)) return;
                const Matrix & g = nodes_[id].grad;
                const Matrix & x = nodes_[a].value;
                Matrix & ga = grad_of(a);
                for (size_t i = 0; i < g.data.size(); ++i) {
                    ga.data[i] += (float) ((double) g.data[i] * detail::gelu_grad_scalar((double) x.data[i]));
                }
            };
        }
        return id;
    }

    // Numerically stable log(1 + e^x), elementwise; scalar nodes keep f64.
    int softplus(int a) {
        const Matrix & A = val(a);
        Matrix out(A.rows, A.cols);
        std::vector<double> w;
        if (precise_) {
            const auto & wa = wv(a);
            w.resize(wa.size());
            for (size_t i = 0; i < w.size(); ++i) w[i] = detail::softplus_scalar(wa[i]);
            round_into(w, out);
        } else {
            for (size_t i = 0; i < out.data.size(); ++i) {
                out.data[i] = (float) detail::softplus_scalar((double) A.data[i]);
            }
        }
        int id = make(std::move(out), {a});
        if (precise_) attach_wide(id, std::move(w));
        else if (is_scalar(id)) set_sval(id, detail::softplus_scalar(sval(a)));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a] {
                if (!wants(a)) return;
                const Matrix & g = nodes_[id].grad;
                const Matrix & x = nodes_[a].value;
                Matrix & ga = grad_of(a);
                for (size_t i = 0; i < g.data.size(); ++i) {
                    ga.data[i] += (float) ((double) g.data[i] * detail::sigmoid_scalar((double) x.data[i]));
                }
            };
        }
        return id;
    }

    // ---- linear algebra ----

    int matmul(int a, int b, bool ta = false, bool tb = false) {
        const Matrix & A = val(a);
        const Matrix & B = val(b);
        Matrix out(ta ? A.cols : A.rows, tb ? B.rows : B.cols);
        std::vector<double> w;
        if (precise_) {
            w.resize(out.data.size());
            matmul_wide_into(wv(a).data(), A.rows, A.cols, wv(b).data(), B.rows, B.cols, ta, tb,
                             w.data());
            round_into(w, out);
        } else {
            matmul_into(A, B, ta, tb, out, false);
        }
        int id = make(std::move(out), {a, b});
        if (precise_) attach_wide(id, std::move(w));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a, b, ta, tb] {
                const Matrix & g = nodes_[id].grad;
                const Matrix & A2 = nodes_[a].value;
                const Matrix & B2 = nodes_[b].value;
                if (wants(a)) {
                    Matrix & ga = grad_of(a);
                    if (!ta) {
                        matmul_into(g, B2, false, !tb, ga, true);
                    } else {
                        matmul_into(B2, g, tb, true, ga, true);
                    }
                }
                if (wants(b)) {
                    Matrix & gb = grad_of(b);
                    if (!tb) {
                        matmul_into(A2, g, !ta, false, gb, true);
                    } else {
                        matmul_into(g, A2, true, ta, gb, true);
                    }
                }
            };
        }
        return id;
    }

    // out[i,:] = a[i,:] + v[0,:]
    int add_row_vec(int a, int v) {
        const Matrix & A = val(a);
        const Matrix & V = val(v);
        if (V.rows != 1 || V.cols != A.cols) {
            throw DimensionError("add_row_vec: vector must be 1x" + std::to_string(A.cols));
        }
        Matrix out(A.rows, A.cols);
        std::vector<double> w;
        if (precise_) {
            const auto & wa = wv(a);
            const auto & wvec = wv(v);
            w.resize(wa.size());
            for (int i = 0; i < A.rows; ++i) {
                for (int j = 0; j < A.cols; ++j) {
                    w[(size_t) i * A.cols + j] = wa[(size_t) i * A.cols + j] + wvec[(size_t) j];
                }
            }
            round_into(w, out);
        } else {
            for (int i = 0; i < A.rows; ++i) {
                const float * ar = A.row(i);
                float * orow = out.row(i);
                for (int j = 0; j < A.cols; ++j) orow[j] = ar[j] + V.data[j];
            }
        }
        int id = make(std::move(out), {a, v});
        if (precise_) attach_wide(id, std::move(w));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a, v] {
                const Matrix & g = nodes_[id].grad;
                if (wants(a)) accum(a, g, 1.0);
                if (wants(v)) {
                    Matrix & gv = grad_of(v);
                    for (int j = 0; j < g.cols; ++j) {
                        double s = 0.0;
                        for (int i = 0; i < g.rows; ++i) s += g.at(i, j);
                        gv.data[j] += (float) s;
                    }
                }
            };
        }
        return id;
    }

    // ---- normalization ----

    int layer_norm_rows(int a) { return film_ln_rows(a, -1, -1); }

    // Row layer norm followed by an optional feature-wise affine modulation
    // (1 + gamma) * z + beta, gamma/beta 1xC. Pass -1 for both to get plain
    // layer norm.
    int film_ln_rows(int a, int gamma, int beta) {
        if ((gamma < 0) != (beta < 0)) {
            throw ContractError("film_ln_rows: gamma and beta must be given together");
        }
        const Matrix & A = val(a);
        if (A.cols < 2) {
            throw DimensionError("film_ln_rows: rows must have length >= 2");
        }
        const bool mod = gamma >= 0;
        if (mod) {
            const Matrix & G = val(gamma);
            const Matrix & B = val(beta);
            if (G.rows != 1 || G.cols != A.cols || B.rows != 1 || B.cols != A.cols) {
                throw DimensionError("film_ln_rows: gamma/beta must be 1x" + std::to_string(A.cols));
            }
        }
        Matrix z(A.rows, A.cols);
        std::vector<double> inv((size_t) A.rows);
        std::vector<double> w;
        Matrix out(A.rows, A.cols);
        if (precise_) {
            const auto & wa = wv(a);
            std::vector<double> wz(wa.size());
            for (int i = 0; i < A.rows; ++i) {
                inv[(size_t) i] =
                    detail::ln_row_wide(&wa[(size_t) i * A.cols], A.cols, &wz[(size_t) i * A.cols]);
            }
            round_into(wz, z);
            if (mod) {
                const auto & wg = wv(gamma);
                const auto & wb = wv(beta);
                w.resize(wz.size());
                for (int i = 0; i < A.rows; ++i) {
                    for (int j = 0; j < A.cols; ++j) {
                        size_t k = (size_t) i * A.cols + j;
                        w[k] = (1.0 + wg[(size_t) j]) * wz[k] + wb[(size_t) j];
                    }
                }
            } else {
                w = std::move(wz);
            }
            round_into(w, out);
        } else {
            for (int i = 0; i < A.rows; ++i) {
                inv[(size_t) i] = detail::ln_row(A.row(i), A.cols, z.row(i));
            }
            if (mod) {
                const Matrix & G = val(gamma);
                const Matrix & B = val(beta);
                for (int i = 0; i < A.rows; ++i) {
                    const float * zr = z.row(i);
                    float * orow = out.row(i);
                    for (int j = 0; j < A.cols; ++j) {
                        orow[j] = (1.0f + G.data[j]) * zr[j] + B.data[j];
                    }
                }
            } else {
                out = z;
            }
        }
        int id = mod ? make(std::move(out), {a, gamma, beta}) : make(std::move(out), {a});
        if (precise_) attach_wide(id, std::move(w));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a, gamma, beta, mod, z = std::move(z), inv = std::move(inv)] {
                const Matrix & g = nodes_[id].grad;
                const int R = g.rows, C = g.cols;
                std::vector<double> dgamma, dbeta;
                if (mod) {
                    dgamma.assign((size_t) C, 0.0);
                    dbeta.assign((size_t) C, 0.0);
                }
                std::vector<double> dz((size_t) C);
                Matrix * ga = wants(a) ? &grad_of(a) : nullptr;
                for (int i = 0; i < R; ++i) {
                    const float * gr = g.row(i);
                    const float * zr = z.row(i);
                    if (mod) {
                        const Matrix & G = nodes_[gamma].value;
                        for (int j = 0; j < C; ++j) {
                            dz[(size_t) j] = (double) gr[j] * (1.0 + G.data[j]);
                            dgamma[(size_t) j] += (double) gr[j] * zr[j];
                            dbeta[(size_t) j] += gr[j];
                        }
                    } else {
                        for (int j = 0; j < C; ++j) dz[(size_t) j] = gr[j];
                    }
                    if (ga) {
                        double m1 = 0.0, m2 = 0.0;
                        for (int j = 0; j < C; ++j) {
                            m1 += dz[(size_t) j];
                            m2 += dz[(size_t) j] * zr[j];
                        }
                        m1 /= C;
                        m2 /= C;
                        float * gar = ga->row(i);
                        for (int j = 0; j < C; ++j) {
                            gar[j] += (float) (inv[(size_t) i] * (dz[(size_t) j] - m1 - zr[j] * m2));
                        }
                    }
                }
                if (mod && wants(gamma)) {
                    Matrix & gg = grad_of(gamma);
                    for (int j = 0; j < C; ++j) gg.data[j] += (float) dgamma[(size_t) j];
                }
                if (mod && wants(beta)) {
                    Matrix & gb = grad_of(beta);
                    for (int j = 0; j < C; ++j) gb.data[j] += (float) dbeta[(size_t) j];
                }
            };
        }
        return id;
    }

    int softmax_rows_op(int a) {
        const Matrix & A = val(a);
        if (A.cols < 1) {
            throw DimensionError("softmax_rows: rows must be non-empty");
        }
        Matrix out(A.rows, A.cols);
        std::vector<double> w;
        if (precise_) {
            const auto & wa = wv(a);
            w.resize(wa.size());
            for (int i = 0; i < A.rows; ++i) {
                detail::softmax_row_wide(&wa[(size_t) i * A.cols], A.cols, &w[(size_t) i * A.cols]);
            }
            round_into(w, out);
        } else {
            for (int i = 0; i < A.rows; ++i) {
                detail::softmax_row(A.row(i), A.cols, out.row(i));
            }
        }
        int id = make(std::move(out), {a});
        if (precise_) attach_wide(id, std::move(w));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a] {
                if (!wants(a)) return;
                const Matrix & g = nodes_[id].grad;
                const Matrix & y = nodes_[id].value;
                Matrix & ga = grad_of(a);
                for (int i = 0; i < g.rows; ++i) {
                    const float * gr = g.row(i);
                    const float * yr = y.row(i);
                    double dot = 0.0;
                    for (int j = 0; j < g.cols; ++j) dot += (double) gr[j] * yr[j];
                    float * gar = ga.row(i);
                    for (int j = 0; j < g.cols; ++j) {
                        gar[j] += (float) ((double) yr[j] * ((double) gr[j] - dot));
                    }
                }
            };
        }
        return id;
    }

    // Rows scaled to unit Euclidean norm.
    int l2_normalize_rows(int a) {
        const Matrix & A = val(a);
        Matrix out(A.rows, A.cols);
        std::vector<double> norms((size_t) A.rows);
        std::vector<double> w;
        if (precise_) {
            const auto & wa = wv(a);
            w.resize(wa.size());
            for (int i = 0; i < A.rows; ++i) {
                double s = 0.0;
                const double * ar = &wa[(size_t) i * A.cols];
                for (int j = 0; j < A.cols; ++j) s += ar[j] * ar[j];
                double n = std::sqrt(s);
                if (n < 1e-12) {
                    throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(i));
                }
                norms[(size_t) i] = n;
                for (int j = 0; j < A.cols; ++j) w[(size_t) i * A.cols + j] = ar[j] / n;
            }
            round_into(w, out);
        } else {
            for (int i = 0; i < A.rows; ++i) {
                double s = 0.0;
                const float * ar = A.row(i);
                for (int j = 0; j < A.cols; ++j) s += (double) ar[j] * ar[j];
                double n = std::sqrt(s);
                if (n < 1e-12) {
                    throw NumericError("l2_normalize_rows: zero-norm row " + std::to_string(i));
                }
                norms[(size_t) i] = n;
                for (int j = 0; j < A.cols; ++j) out.at(i, j) = (float) (ar[j] / n);
            }
        }
        int id = make(std::move(out), {a});
        if (precise_) attach_wide(id, std::move(w));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a, norms = std::move(norms)] {
                if (!wants(a)) return;
                const Matrix & g = nodes_[id].grad;
                const Matrix & y = nodes_[id].value;
                Matrix & ga = grad_of(a);
                for (int i = 0; i < g.rows; ++i) {
                    const float * gr = g.row(i);
                    const float * yr = y.row(i);
                    double dot = 0.0;
                    for (int j = 0; j < g.cols; ++j) dot += (double) gr[j] * yr[j];
                    float * gar = ga.row(i);
                    for (int j = 0; j < g.cols; ++j) {
                        gar[j] += (float) (((double) gr[j] - (double) yr[j] * dot) / norms[(size_t) i]);
                    }
                }
            };
        }
        return id;
    }

    // ---- structural ----

    int gather_rows(int table, const std::vector<int> & ids) {
        const Matrix & T = val(table);
        if (ids.empty()) {
            throw InputError("gather_rows: empty id list");
        }
        Matrix out((int) ids.size(), T.cols);
        std::vector<double> w;
        if (precise_) w.resize(out.data.size());
        for (size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] < 0 || ids[i] >= T.rows) {
                throw InputError("gather_rows: id " + std::to_string(ids[i]) + " out of range [0," +
                                 std::to_string(T.rows) + ")");
            }
            std::copy(T.row(ids[i]), T.row(ids[i]) + T.cols, out.row((int) i));
            if (precise_) {
                const auto & wt = wv(table);
                std::copy(wt.begin() + (size_t) ids[i] * T.cols,
                          wt.begin() + (size_t) (ids[i] + 1) * T.cols, w.begin() + i * T.cols);
            }
        }
        int id = make(std::move(out), {table});
        if (precise_) attach_wide(id, std::move(w));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, table, ids] {
                if (!wants(table)) return;
                const Matrix & g = nodes_[id].grad;
                Matrix & gt = grad_of(table);
                for (size_t i = 0; i < ids.size(); ++i) {
                    const float * gr = g.row((int) i);
                    float * tr = gt.row(ids[i]);
                    for (int j = 0; j < g.cols; ++j) tr[j] += gr[j];
                }
            };
        }
        return id;
    }

    int concat_rows(const std::vector<int> & parts) {
        if (parts.empty()) {
            throw InputError("concat_rows: no parts");
        }
        int cols = val(parts[0]).cols;
        int rows = 0;
        for (int p : parts) {
            if (val(p).cols != cols) {
                throw DimensionError("concat_rows: column mismatch");
            }
            rows += val(p).rows;
        }
        Matrix out(rows, cols);
        std::vector<double> w;
        if (precise_) w.resize(out.data.size());
        int r = 0;
        for (int p : parts) {
            const Matrix & P = val(p);
            std::copy(P.data.begin(), P.data.end(), out.row(r));
            if (precise_) {
                const auto & wp = wv(p);
                std::copy(wp.begin(), wp.end(), w.begin() + (size_t) r * cols);
            }
            r += P.rows;
        }
        int id = make(std::move(out), parts);
        if (precise_) attach_wide(id, std::move(w));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, parts] {
                const Matrix & g = nodes_[id].grad;
                int r0 = 0;
                for (int p : parts) {
                    int pr = nodes_[p].value.rows;
                    if (wants(p)) {
                        Matrix & gp = grad_of(p);
                        for (int i = 0; i < pr; ++i) {
                            const float * gr = g.row(r0 + i);
                            float * gpr = gp.row(i);
                            for (int j = 0; j < g.cols; ++j) gpr[j] += gr[j];
                        }
                    }
                    r0 += pr;
                }
            };
        }
        return id;
    }

    // Rows [r0, r1).
    int slice_rows(int a, int r0, int r1) {
        const Matrix & A = val(a);
        if (r0 < 0 || r1 > A.rows || r0 >= r1) {
            throw DimensionError("slice_rows: bad range [" + std::to_string(r0) + "," +
                                 std::to_string(r1) + ") of " + std::to_string(A.rows));
        }
        Matrix out(r1 - r0, A.cols);
        std::copy(A.row(r0), A.row(r0) + (size_t) (r1 - r0) * A.cols, out.data.begin());
        std::vector<double> w;
        if (precise_) {
            const auto & wa = wv(a);
            w.assign(wa.begin() + (size_t) r0 * A.cols, wa.begin() + (size_t) r1 * A.cols);
        }
        int id = make(std::move(out), {a});
        if (precise_) attach_wide(id, std::move(w));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a, r0] {
                if (!wants(a)) return;
                const Matrix & g = nodes_[id].grad;
                Matrix & ga = grad_of(a);
                for (int i = 0; i < g.rows; ++i) {
                    const float * gr = g.row(i);
                    float * gar = ga.row(r0 + i);
                    for (int j = 0; j < g.cols; ++j) gar[j] += gr[j];
                }
            };
        }
        return id;
    }

    // Columns [c0, c1).
    int slice_cols(int a, int c0, int c1) {
        const Matrix & A = val(a);
        if (c0 < 0 || c1 > A.cols || c0 >= c1) {
            throw DimensionError("slice_cols: bad range");
        }
        Matrix out(A.rows, c1 - c0);
        std::vector<double> w;
        if (precise_) w.resize(out.data.size());
        for (int i = 0; i < A.rows; ++i) {
            std::copy(A.row(i) + c0, A.row(i) + c1, out.row(i));
            if (precise_) {
                const auto & wa = wv(a);
                std::copy(wa.begin() + (size_t) i * A.cols + c0, wa.begin() + (size_t) i * A.cols + c1,
                          w.begin() + (size_t) i * (c1 - c0));
            }
        }
        int id = make(std::move(out), {a});
        if (precise_) attach_wide(id, std::move(w));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a, c0] {
                if (!wants(a)) return;
                const Matrix & g = nodes_[id].grad;
                Matrix & ga = grad_of(a);
                for (int i = 0; i < g.rows; ++i) {
                    const float * gr = g.row(i);
                    float * gar = ga.row(i);
                    for (int j = 0; j < g.cols; ++j) gar[c0 + j] += gr[j];
                }
            };
        }
        return id;
    }

    int concat_cols(const std::vector<int> & parts) {
        if (parts.empty()) {
            throw InputError("concat_cols: no parts");
        }
        int rows = val(parts[0]).rows;
        int cols = 0;
        for (int p : parts) {
            if (val(p).rows != rows) {
                throw DimensionError("concat_cols: row mismatch");
            }
            cols += val(p).cols;
        }
        Matrix out(rows, cols);
        std::vector<double> w;
        if (precise_) w.resize(out.data.size());
        int c0 = 0;
        for (int p : parts) {
            const Matrix & P = val(p);
            for (int i = 0; i < rows; ++i) {
                std::copy(P.row(i), P.row(i) + P.cols, out.row(i) + c0);
                if (precise_) {
                    const auto & wp = wv(p);
                    std::copy(wp.begin() + (size_t) i * P.cols, wp.begin() + (size_t) (i + 1) * P.cols,
                              w.begin() + (size_t) i * cols + c0);
                }
            }
            c0 += P.cols;
        }
        int id = make(std::move(out), parts);
        if (precise_) attach_wide(id, std::move(w));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, parts] {
                const Matrix & g = nodes_[id].grad;
                int c0 = 0;
                for (int p : parts) {
                    int pc = nodes_[p].value.cols;
                    if (wants(p)) {
                        Matrix & gp = grad_of(p);
                        for (int i = 0; i < g.rows; ++i) {
                            const float * gr = g.row(i) + c0;
                            float * gpr = gp.row(i);
                            for (int j = 0; j < pc; ++j) gpr[j] += gr[j];
                        }
                    }
                    c0 += pc;
                }
            };
        }
        return id;
    }

    // ---- reductions ----

    int mean_rows(int a) {
        const Matrix & A = val(a);
        if (A.rows < 1) {
            throw DimensionError("mean_rows: empty matrix");
        }
        Matrix out(1, A.cols);
        std::vector<double> w;
        if (precise_) {
            const auto & wa = wv(a);
            w.resize((size_t) A.cols);
            for (int j = 0; j < A.cols; ++j) {
                double s = 0.0;
                for (int i = 0; i < A.rows; ++i) s += wa[(size_t) i * A.cols + j];
                w[(size_t) j] = s / A.rows;
            }
            round_into(w, out);
        } else {
            for (int j = 0; j < A.cols; ++j) {
                double s = 0.0;
                for (int i = 0; i < A.rows; ++i) s += A.at(i, j);
                out.data[j] = (float) (s / A.rows);
            }
        }
        int id = make(std::move(out), {a});
        if (precise_) attach_wide(id, std::move(w));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a] {
                if (!wants(a)) return;
                const Matrix & g = nodes_[id].grad;
                Matrix & ga = grad_of(a);
                for (int i = 0; i < ga.rows; ++i) {
                    float * gar = ga.row(i);
                    for (int j = 0; j < ga.cols; ++j) gar[j] += (float) ((double) g.data[j] / ga.rows);
                }
            };
        }
        return id;
    }

    int sum_all(int a) {
        const Matrix & A = val(a);
        double s = 0.0;
        if (precise_) {
            for (double v : wv(a)) s += v;
        } else {
            for (float v : A.data) s += v;
        }
        int id = make_scalar(s, {a});
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a] {
                if (wants(a)) {
                    float g = nodes_[id].grad.data[0];
                    Matrix & ga = grad_of(a);
                    for (float & v : ga.data) v += g;
                }
            };
        }
        return id;
    }

    int mean_all(int a) {
        const Matrix & A = val(a);
        if (A.data.empty()) {
            throw DimensionError("mean_all: empty matrix");
        }
        double s = 0.0;
        if (precise_) {
            for (double v : wv(a)) s += v;
        } else {
            for (float v : A.data) s += v;
        }
        const double n = (double) A.data.size();
        int id = make_scalar(s / n, {a});
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a] {
                if (wants(a)) {
                    Matrix & ga = grad_of(a);
                    double g = (double) nodes_[id].grad.data[0] / (double) ga.data.size();
                    for (float & v : ga.data) v += (float) g;
                }
            };
        }
        return id;
    }

    // Sum of squared entries (squared Frobenius norm).
    int sum_sq(int a) {
        const Matrix & A = val(a);
        double s = 0.0;
        if (precise_) {
            for (double v : wv(a)) s += v * v;
        } else {
            for (float v : A.data) s += (double) v * v;
        }
        int id = make_scalar(s, {a});
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, a] {
                if (!wants(a)) return;
                double g = nodes_[id].grad.data[0];
                const Matrix & x = nodes_[a].value;
                Matrix & ga = grad_of(a);
                for (size_t i = 0; i < ga.data.size(); ++i) {
                    ga.data[i] += (float) (2.0 * g * (double) x.data[i]);
                }
            };
        }
        return id;
    }

    // Mean over rows of -log softmax(logits)[target].
    int nll_rows(int logits, const std::vector<int> & targets) {
        const Matrix & L = val(logits);
        if ((int) targets.size() != L.rows) {
            throw DimensionError("nll_rows: " + std::to_string(targets.size()) + " targets for " +
                                 std::to_string(L.rows) + " rows");
        }
        double s = 0.0;
        for (int i = 0; i < L.rows; ++i) {
            int t = targets[(size_t) i];
            if (t < 0 || t >= L.cols) {
                throw InputError("nll_rows: target " + std::to_string(t) + " out of range");
            }
            if (precise_) {
                const double * lr = &wv(logits)[(size_t) i * L.cols];
                s += detail::logsumexp_row_wide(lr, L.cols) - lr[t];
            } else {
                s += detail::logsumexp_row(L.row(i), L.cols) - (double) L.at(i, t);
            }
        }
        const int R = L.rows;
        int id = make_scalar(s / R, {logits});
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, logits, targets] {
                if (!wants(logits)) return;
                double g = nodes_[id].grad.data[0];
                const Matrix & L2 = nodes_[logits].value;
                Matrix & gl = grad_of(logits);
                std::vector<float> p((size_t) L2.cols);
                for (int i = 0; i < L2.rows; ++i) {
                    detail::softmax_row(L2.row(i), L2.cols, p.data());
                    float * gr = gl.row(i);
                    for (int j = 0; j < L2.cols; ++j) {
                        double ind = (j == targets[(size_t) i]) ? 1.0 : 0.0;
                        gr[j] += (float) (g * ((double) p[(size_t) j] - ind) / L2.rows);
                    }
                }
            };
        }
        return id;
    }

    // Sum over rows of log softmax(logits)[target].
    int logprob_sum_rows(int logits, const std::vector<int> & targets) {
        const Matrix & L = val(logits);
        if ((int) targets.size() != L.rows) {
            throw DimensionError("logprob_sum_rows: target count mismatch");
        }
        double s = 0.0;
        for (int i = 0; i < L.rows; ++i) {
            int t = targets[(size_t) i];
            if (t < 0 || t >= L.cols) {
                throw InputError("logprob_sum_rows: target out of range");
            }
            if (precise_) {
                const double * lr = &wv(logits)[(size_t) i * L.cols];
                s += lr[t] - detail::logsumexp_row_wide(lr, L.cols);
            } else {
                s += (double) L.at(i, t) - detail::logsumexp_row(L.row(i), L.cols);
            }
        }
        int id = make_scalar(s, {logits});
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, logits, targets] {
                if (!wants(logits)) return;
                double g = nodes_[id].grad.data[0];
                const Matrix & L2 = nodes_[logits].value;
                Matrix & gl = grad_of(logits);
                std::vector<float> p((size_t) L2.cols);
                for (int i = 0; i < L2.rows; ++i) {
                    detail::softmax_row(L2.row(i), L2.cols, p.data());
                    float * gr = gl.row(i);
                    for (int j = 0; j < L2.cols; ++j) {
                        double ind = (j == targets[(size_t) i]) ? 1.0 : 0.0;
                        gr[j] += (float) (g * (ind - (double) p[(size_t) j]));
                    }
                }
            };
        }
        return id;
    }

    // Mean of scalar nodes, in f64.
    int scalar_mean(const std::vector<int> & parts) {
        if (parts.empty()) {
            throw InputError("scalar_mean: no parts");
        }
        double s = 0.0;
        for (int p : parts) {
            if (val(p).rows != 1 || val(p).cols != 1) {
                throw ContractError("scalar_mean: parts must be 1x1");
            }
            s += sval(p);
        }
        int id = make_scalar(s / (double) parts.size(), parts);
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, parts] {
                double g = (double) nodes_[id].grad.data[0] / (double) parts.size();
                for (int p : parts) {
                    if (wants(p)) grad_of(p).data[0] += (float) g;
                }
            };
        }
        return id;
    }

    // ---- attention ----

    // Causal aggregate of style-query attention read back onto the sequence.
    //
    // q: M x dk style queries, k: T x dk, v: T x dv per-position keys/values.
    // For each prefix length i, each style row m attends over positions t <= i
    // with weights a_m(i) = softmax(q_m . k_t / sqrt(dk)); the result row i is
    //   G_i = sum_m a_{m,i}(i) * (sum_{t<=i} a_{m,t}(i) * v_t),
    // i.e. the per-style summaries weighted back by each style's affinity to
    // position i itself. Row i depends only on k/v rows 0..i, bitwise: the
    // forward pass uses a running max so later positions never perturb
    // earlier arithmetic.
    int causal_style_attn(int q, int k, int v) {
        const Matrix & Q = val(q);
        const Matrix & K = val(k);
        const Matrix & V = val(v);
        if (Q.cols != K.cols) {
            throw DimensionError("causal_style_attn: query/key width mismatch");
        }
        if (K.rows != V.rows) {
            throw DimensionError("causal_style_attn: key/value length mismatch");
        }
        if (Q.rows < 1 || K.rows < 1) {
            throw InputError("causal_style_attn: empty queries or sequence");
        }
        const int M = Q.rows, T = K.rows, dk = Q.cols, dv = V.cols;
        std::vector<double> G((size_t) T * dv, 0.0);
        if (precise_) {
            const auto & wq = wv(q);
            const auto & wk = wv(k);
            const auto & wvv = wv(v);
            style_attn_forward(
                M, T, dk, dv, [&wq, dk](int m, int j) { return wq[(size_t) m * dk + j]; },
                [&wk, dk](int t, int j) { return wk[(size_t) t * dk + j]; },
                [&wvv, dv](int t, int j) { return wvv[(size_t) t * dv + j]; }, G);
        } else {
            style_attn_forward(
                M, T, dk, dv, [&Q](int m, int j) { return (double) Q.at(m, j); },
                [&K](int t, int j) { return (double) K.at(t, j); },
                [&V](int t, int j) { return (double) V.at(t, j); }, G);
        }
        Matrix out(T, dv);
        round_into(G, out);
        int id = make(std::move(out), {q, k, v});
        if (precise_) attach_wide(id, std::move(G));
        if (nodes_[id].needs_grad) {
            nodes_[id].backprop = [this, id, q, k, v] { causal_style_attn_backward(id, q, k, v); };
        }
        return id;
    }

private:
    bool is_scalar(int id) const {
        const Matrix & m = nodes_[id].value;
        return m.rows == 1 && m.cols == 1;
    }

    double sval(int id) const {
        const Node & n = nodes_[id];
        if (!std::isnan(n.value64)) return n.value64;
        return (double) n.value.data[0];
    }

    void set_sval(int id, double v) {
        nodes_[id].value64 = v;
        nodes_[id].value.data[0] = (float) v;
    }

    // f64 shadow of a node; only valid on precise tapes. References are
    // invalidated by the next make(), same as val().
    const std::vector<double> & wv(int id) const {
        const auto & w = nodes_.at(id).wide;
        if (w.empty()) {
            throw ContractError("tape: missing f64 shadow in precise mode");
        }
        return w;
    }

    void attach_wide(int id, std::vector<double> && w) {
        Node & n = nodes_[id];
        if (n.value.rows == 1 && n.value.cols == 1) n.value64 = w[0];
        n.wide = std::move(w);
    }

    static void round_into(const std::vector<double> & w, Matrix & out) {
        for (size_t i = 0; i < w.size(); ++i) out.data[i] = (float) w[i];
    }

    int make_scalar(double s, const std::vector<int> & parents) {
        int id = make(Matrix(1, 1), parents);
        set_sval(id, s);
        if (precise_) nodes_[id].wide = {s};
        return id;
    }

    bool wants(int id) const { return nodes_[id].needs_grad; }

    Matrix & grad_of(int id) {
        Node & n = nodes_[id];
        if (n.grad.data.empty()) {
            n.grad = Matrix(n.value.rows, n.value.cols);
        }
        return n.grad;
    }

    void accum(int id, const Matrix & g, double c) {
        Matrix & dst = grad_of(id);
        if (c == 1.0) {
            for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += g.data[i];
        } else {
            for (size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += (float) (c * g.data[i]);
        }
    }

    int make(Matrix value, const std::vector<int> & parents) {
        Node n;
        n.value = std::move(value);
        if (grads_enabled_) {
            for (int p : parents) {
                if (nodes_.at(p).needs_grad) {
                    n.needs_grad = true;
                    break;
                }
            }
        }
        nodes_.push_back(std::move(n));
        return (int) nodes_.size() - 1;
    }

    // Shared forward for causal_style_attn; the accessors decide whether the
    // inputs are read as f32 or from the f64 shadows.
    template <class QF, class KF, class VF>
    static void style_attn_forward(int M, int T, int dk, int dv, QF qat, KF kat, VF vat,
                                   std::vector<double> & G) {
        const double scale = 1.0 / std::sqrt((double) dk);
        std::vector<double> P((size_t) dv);
        for (int m = 0; m < M; ++m) {
            double c = -std::numeric_limits<double>::infinity();
            double Z = 0.0;
            std::fill(P.begin(), P.end(), 0.0);
            for (int t = 0; t < T; ++t) {
                double l = 0.0;
                for (int j = 0; j < dk; ++j) l += qat(m, j) * kat(t, j);
                l *= scale;
                if (l > c) {
                    double r = std::exp(c - l);
                    Z *= r;
                    for (int j = 0; j < dv; ++j) P[(size_t) j] *= r;
                    c = l;
                }
                double w = std::exp(l - c);
                Z += w;
                for (int j = 0; j < dv; ++j) P[(size_t) j] += w * vat(t, j);
                double coef = w / (Z * Z);
                double * gt = &G[(size_t) t * dv];
                for (int j = 0; j < dv; ++j) gt[j] += coef * P[(size_t) j];
            }
        }
    }

    void causal_style_attn_backward(int id, int q, int k, int v) {
        const Matrix & G = nodes_[id].grad;
        const Matrix & Q = nodes_[q].value;
        const Matrix & K = nodes_[k].value;
        const Matrix & V = nodes_[v].value;
        const int M = Q.rows, T = K.rows, dk = Q.cols, dv = V.cols;
        const double scale = 1.0 / std::sqrt((double) dk);

        Matrix * gq = wants(q) ? &grad_of(q) : nullptr;
        Matrix * gk = wants(k) ? &grad_of(k) : nullptr;
        Matrix * gv = wants(v) ? &grad_of(v) : nullptr;

        std::vector<double> w((size_t) T);
        std::vector<double> Zs((size_t) T);
        std::vector<double> Ps((size_t) T * dv);
        std::vector<double> S1((size_t) dv);
        std::vector<double> dl((size_t) T);

        for (int m = 0; m < M; ++m) {
            const float * qm = Q.row(m);
            double c = -std::numeric_limits<double>::infinity();
            for (int t = 0; t < T; ++t) {
                const float * kt = K.row(t);
                double l = 0.0;
                for (int j = 0; j < dk; ++j) l += (double) qm[j] * kt[j];
                w[(size_t) t] = l * scale;
                if (w[(size_t) t] > c) c = w[(size_t) t];
            }
            double Z = 0.0;
            for (int t = 0; t < T; ++t) {
                w[(size_t) t] = std::exp(w[(size_t) t] - c);
                Z += w[(size_t) t];
                Zs[(size_t) t] = Z;
                const float * vt = V.row(t);
                double * pt = &Ps[(size_t) t * dv];
                const double * prev = t > 0 ? &Ps[(size_t) (t - 1) * dv] : nullptr;
                for (int j = 0; j < dv; ++j) {
                    pt[j] = (prev ? prev[j] : 0.0) + w[(size_t) t] * (double) vt[j];
                }
            }
            std::fill(S1.begin(), S1.end(), 0.0);
            double S2 = 0.0;
            for (int t = T - 1; t >= 0; --t) {
                const float * gt = G.row(t);
                const double * pt = &Ps[(size_t) t * dv];
                double zt = Zs[(size_t) t];
                double gdotp = 0.0;
                for (int j = 0; j < dv; ++j) gdotp += (double) gt[j] * pt[j];
                double coef = w[(size_t) t] / (zt * zt);
                for (int j = 0; j < dv; ++j) S1[(size_t) j] += coef * (double) gt[j];
                S2 += coef * gdotp / zt;
                const float * vt = V.row(t);
                double vdotS1 = 0.0;
                for (int j = 0; j < dv; ++j) vdotS1 += (double) vt[j] * S1[(size_t) j];
                dl[(size_t) t] = w[(size_t) t] * (gdotp / (zt * zt) + vdotS1 - 2.0 * S2);
                if (gv) {
                    float * gvt = gv->row(t);
                    for (int j = 0; j < dv; ++j) {
                        gvt[j] += (float) (w[(size_t) t] * S1[(size_t) j]);
                    }
                }
            }
            if (gq) {
                float * gqm = gq->row(m);
                for (int j = 0; j < dk; ++j) {
                    double s = 0.0;
                    for (int t = 0; t < T; ++t) s += dl[(size_t) t] * (double) K.at(t, j);
                    gqm[j] += (float) (scale * s);
                }
            }
            if (gk) {
                for (int t = 0; t < T; ++t) {
                    float * gkt = gk->row(t);
                    for (int j = 0; j < dk; ++j) {
                        gkt[j] += (float) (scale * dl[(size_t) t] * (double) qm[j]);
                    }
                }
            }
        }
    }

    struct Binding {
        ParamStore * store;
        std::string name;
        int node;
    };

    std::vector<Node> nodes_;
    std::vector<Binding> bound_;
    bool grads_enabled_ = true;
    bool precise_ = false;
    bool backward_done_ = false;
};

} // namespace s2v
