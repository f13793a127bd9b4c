#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "optim.hpp"
#include "param_store.hpp"
#include "rng.hpp"
#include "tape.hpp"

namespace s2v {

// Conditional flow matching decoder from token sequences to acoustic frames.
// The probability path is the straight line x_tau = (1 - tau) x0 + tau y1
// with x0 standard normal, so the regression target is y1 - x0. The field
// network is per-frame: frame t sees only its own noisy value, its token, the
// step time and the global speaker embedding, never neighboring frames.

struct FlowConfig {
    int frame_dim = 2;
    int width = 32;
    int layers = 2;
    int token_vocab = 64;
    int speakers = 8;
    int spk_dim = 16;
    bool spk_on = true;

    void validate() const {
        if (frame_dim < 1) throw ConfigError("flow: frame_dim must be >= 1");
        if (width < 4 || width % 2 != 0) throw ConfigError("flow: width must be even and >= 4");
        if (layers < 1) throw ConfigError("flow: layers must be >= 1");
        if (token_vocab < 2) throw ConfigError("flow: token vocab must be >= 2");
        if (speakers < 1) throw ConfigError("flow: speakers must be >= 1");
        if (spk_dim < 2) throw ConfigError("flow: spk_dim must be >= 2");
    }
};

struct FlowExample {
    std::vector<int> tokens;
    int speaker = -1;
    Matrix frames;
};

class FlowModel {
public:
    FlowConfig cfg;
    ParamStore params;

    FlowModel() = default;
    explicit FlowModel(const FlowConfig & c) : cfg(c) { cfg.validate(); }

    void init(uint64_t seed) {
        Rng rng = Rng(seed).split("flow_init");
        auto gauss = [&](int r, int c, double scale) {
            Matrix m(r, c);
            rng.fill_gaussian(m, scale);
            return m;
        };
        const int d = cfg.width;
        params.add("flow.in.w", gauss(cfg.frame_dim, d, 0.5));
        params.add("flow.in.b", Matrix(1, d));
        params.add("flow.tok_emb", gauss(cfg.token_vocab, d, 0.3));
        params.add("flow.time.w", gauss(d, d, 1.0 / std::sqrt((double) d)));
        params.add("flow.time.b", Matrix(1, d));
        for (int l = 0; l < cfg.layers; ++l) {
            const std::string p = "flow.L" + std::to_string(l) + ".";
            params.add(p + "w1", gauss(d, 2 * d, 1.0 / std::sqrt((double) d)));
            params.add(p + "b1", Matrix(1, 2 * d));
            params.add(p + "w2", gauss(2 * d, d, 0.5 / std::sqrt(2.0 * d)));
            params.add(p + "b2", Matrix(1, d));
            params.add(p + "spk_wg", Matrix(cfg.spk_dim, d));
            params.add(p + "spk_bg", Matrix(1, d));
            params.add(p + "spk_wb", Matrix(cfg.spk_dim, d));
            params.add(p + "spk_bb", Matrix(1, d));
        }
        params.add("flow.out.w", gauss(d, cfg.frame_dim, 0.5 / std::sqrt((double) d)));
        params.add("flow.out.b", Matrix(1, cfg.frame_dim));
        params.add("spk.table", gauss(cfg.speakers, cfg.spk_dim, 1.0));
    }

    struct Bound {
        int in_w, in_b, tok_emb, time_w, time_b, out_w, out_b, spk_table;
        struct Layer {
            int w1, b1, w2, b2, spk_wg, spk_bg, spk_wb, spk_bb;
        };
        std::vector<Layer> layers;
    };

    Bound bind(Tape & t) {
        Bound b;
        b.in_w = t.param(params, "flow.in.w");
        b.in_b = t.param(params, "flow.in.b");
        b.tok_emb = t.param(params, "flow.tok_emb");
        b.time_w = t.param(params, "flow.time.w");
        b.time_b = t.param(params, "flow.time.b");
        b.out_w = t.param(params, "flow.out.w");
        b.out_b = t.param(params, "flow.out.b");
        b.spk_table = t.param(params, "spk.table");
        for (int l = 0; l < cfg.layers; ++l) {
            const std::string p = "flow.L" + std::to_string(l) + ".";
            Bound::Layer L;
            L.w1 = t.param(params, p + "w1");
            L.b1 = t.param(params, p + "b1");
            L.w2 = t.param(params, p + "w2");
            L.b2 = t.param(params, p + "b2");
            L.spk_wg = t.param(params, p + "spk_wg");
            L.spk_bg = t.param(params, p + "spk_bg");
            L.spk_wb = t.param(params, p + "spk_wb");
            L.spk_bb = t.param(params, p + "spk_bb");
            b.layers.push_back(L);
        }
        return b;
    }

    // Unit-norm speaker row as a tape node.
    int speaker_node(Tape & t, const Bound & b, int speaker) const {
        check_speaker(speaker);
        return t.l2_normalize_rows(t.gather_rows(b.spk_table, {speaker}));
    }

    Matrix speaker_embed(int speaker) {
        Tape t(false);
        Bound b = bind(t);
        return t.val(speaker_node(t, b, speaker));
    }

    // Predicted velocity field at noise level tau for the given frames.
    // x: T x frame_dim node. Pass spk = -1 to drop speaker conditioning.
    int vector_field(Tape & t, const Bound & b, int x, double tau, const std::vector<int> & tokens,
                     int spk) const {
        const Matrix & X = t.val(x);
        if ((int) tokens.size() != X.rows) {
            throw DimensionError("vector_field: " + std::to_string(tokens.size()) + " tokens for " +
                                 std::to_string(X.rows) + " frames");
        }
        if (X.cols != cfg.frame_dim) {
            throw DimensionError("vector_field: frames must have " + std::to_string(cfg.frame_dim) +
                                 " columns");
        }
        if (tau < 0.0 || tau > 1.0) {
            throw InputError("vector_field: tau must lie in [0, 1]");
        }
        int h = t.add_row_vec(t.matmul(x, b.in_w), b.in_b);
        h = t.add(h, t.gather_rows(b.tok_emb, tokens));
        int te = t.leaf(time_embedding(tau));
        h = t.add_row_vec(h, t.add_row_vec(t.matmul(te, b.time_w), b.time_b));
        int gamma = -1, beta = -1;
        for (int l = 0; l < cfg.layers; ++l) {
            const auto & L = b.layers[(size_t) l];
            if (cfg.spk_on && spk >= 0) {
                gamma = t.add_row_vec(t.matmul(spk, L.spk_wg), L.spk_bg);
                beta = t.add_row_vec(t.matmul(spk, L.spk_wb), L.spk_bb);
            }
            int n = t.film_ln_rows(h, gamma, beta);
            int mid = t.gelu(t.add_row_vec(t.matmul(n, L.w1), L.b1));
            h = t.add(h, t.add_row_vec(t.matmul(mid, L.w2), L.b2));
            gamma = beta = -1;
        }
        return t.add_row_vec(t.matmul(h, b.out_w), b.out_b);
    }

    // Squared Frobenius distance between the predicted field and the linear
    // path target y1 - x0, evaluated at x_tau.
    int flow_loss_at(Tape & t, const Bound & b, const FlowExample & ex, const Matrix & x0,
                     double tau) {
        validate_example(ex);
        require_same_shape(ex.frames, x0, "flow_loss");
        Matrix xtau(x0.rows, x0.cols);
        Matrix target(x0.rows, x0.cols);
        for (size_t i = 0; i < x0.data.size(); ++i) {
            xtau.data[i] = (float) ((1.0 - tau) * (double) x0.data[i] + tau * (double) ex.frames.data[i]);
            target.data[i] = ex.frames.data[i] - x0.data[i];
        }
        int spk = (cfg.spk_on && ex.speaker >= 0) ? speaker_node(t, b, ex.speaker) : -1;
        int pred = vector_field(t, b, t.leaf(xtau), tau, ex.tokens, spk);
        return t.sum_sq(t.sub(pred, t.leaf(target)));
    }

    // One (x0, tau) draw per call.
    int flow_loss(Tape & t, const Bound & b, const FlowExample & ex, Rng & rng) {
        Matrix x0(ex.frames.rows, ex.frames.cols);
        rng.fill_gaussian(x0);
        double tau = rng.uniform();
        return flow_loss_at(t, b, ex, x0, tau);
    }

    double sft_step(const std::vector<FlowExample> & batch, AdamOptimizer & opt, double lr,
                    Rng & rng) {
        if (batch.empty()) {
            throw InputError("flow sft step: empty batch");
        }
        Tape t;
        Bound b = bind(t);
        std::vector<int> losses;
        for (const auto & ex : batch) {
            losses.push_back(flow_loss(t, b, ex, rng));
        }
        int loss = t.scalar_mean(losses);
        double v = t.scalar(loss);
        if (!std::isfinite(v)) {
            std::string bad;
            for (size_t i = 0; i < losses.size(); ++i) {
                if (!std::isfinite(t.scalar(losses[(size_t) i]))) {
                    bad += (bad.empty() ? "" : ",") + std::to_string(i);
                }
            }
            throw NumericError("flow sft step: non-finite loss at batch indices [" + bad + "]");
        }
        params.zero_grads();
        t.backward(loss);
        opt.step(params, lr);
        return v;
    }

    // Euler integration of the field from a standard normal draw.
    Matrix ode_sample(const std::vector<int> & tokens, int speaker, int steps, Rng & rng) {
        Matrix x0((int) tokens.size(), cfg.frame_dim);
        rng.fill_gaussian(x0);
        return ode_sample_from(tokens, speaker, steps, x0);
    }

    Matrix ode_sample_from(const std::vector<int> & tokens, int speaker, int steps,
                           const Matrix & x0) {
        if (steps < 1) {
            throw InputError("ode_sample: steps must be >= 1");
        }
        if (tokens.empty()) {
            throw InputError("ode_sample: empty token sequence");
        }
        Matrix x = x0;
        const double dt = 1.0 / (double) steps;
        for (int k = 0; k < steps; ++k) {
            Tape t(false);
            Bound b = bind(t);
            int spk = (cfg.spk_on && speaker >= 0) ? speaker_node(t, b, speaker) : -1;
            int vf = vector_field(t, b, t.leaf(x), (double) k * dt, tokens, spk);
            const Matrix & v = t.val(vf);
            for (size_t i = 0; i < x.data.size(); ++i) {
                x.data[i] = (float) ((double) x.data[i] + dt * (double) v.data[i]);
            }
            if (!x.all_finite()) {
                throw NumericError("ode_sample: non-finite state at step " + std::to_string(k));
            }
        }
        return x;
    }

    void save(const std::string & path) const { save_store(path, params); }
    void load(const std::string & path) { load_into_store(load_checkpoint(path), params); }

private:
    void check_speaker(int speaker) const {
        if (speaker < 0 || speaker >= cfg.speakers) {
            throw InputError("unknown speaker id " + std::to_string(speaker));
        }
    }

    void validate_example(const FlowExample & ex) const {
        if (ex.tokens.empty()) {
            throw InputError("flow example: empty token sequence");
        }
        for (int tok : ex.tokens) {
            if (tok < 0 || tok >= cfg.token_vocab) {
                throw InputError("flow example: token " + std::to_string(tok) + " out of range");
            }
        }
        if (ex.frames.rows != (int) ex.tokens.size() || ex.frames.cols != cfg.frame_dim) {
            throw DimensionError("flow example: frames must be " + std::to_string(ex.tokens.size()) +
                                 "x" + std::to_string(cfg.frame_dim));
        }
        if (cfg.spk_on && ex.speaker >= 0) check_speaker(ex.speaker);
    }

    // Interleaved sin/cos features of tau at geometric frequencies.
    Matrix time_embedding(double tau) const {
        Matrix te(1, cfg.width);
        const int half = cfg.width / 2;
        for (int i = 0; i < half; ++i) {
            double freq = std::pow(200.0, (double) i / (double) half);
            te.data[(size_t) (2 * i)] = (float) std::sin(tau * freq);
            te.data[(size_t) (2 * i + 1)] = (float) std::cos(tau * freq);
        }
        return te;
    }
};

} // namespace s2v
