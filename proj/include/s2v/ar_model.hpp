#pragma once

#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "optim.hpp"
#include "param_store.hpp"
#include "rng.hpp"
#include "style.hpp"
#include "tape.hpp"

namespace s2v {

// Decoder-only autoregressive token model conditioned on a style reference.
// Input layout per sequence: [content tokens, SEP, target prefix], learned
// absolute positions, pre-norm blocks of self-attention, style cross
// attention and MLP. Style enters twice: modulation of the block layer norms
// driven by pooled style embeddings, and causal cross attention with style
// embeddings as queries. The logit head reads the residual stream directly.

struct ArConfig {
    int layers = 2;
    int width = 32;
    int heads = 1;
    int content_vocab = 32;
    int target_vocab = 64;
    int style_dim = 8;
    int max_len = 48;
    int max_positions = 96;
    bool film_on = true;
    bool xattn_on = true;
    bool film_site1 = true;
    bool film_site2 = true;
    bool film_site3 = true;

    int proj_dim() const { return width / 2; }
    int terminator() const { return target_vocab - 1; }

    void validate() const {
        if (layers < 0) throw ConfigError("ar: layers must be >= 0");
        if (width < 2 || width % 2 != 0) throw ConfigError("ar: width must be even and >= 2");
        if (heads < 1 || width % heads != 0) throw ConfigError("ar: heads must divide width");
        if (content_vocab < 1) throw ConfigError("ar: content vocab must be >= 1");
        if (target_vocab < 2) throw ConfigError("ar: target vocab must be >= 2");
        if (style_dim < 1) throw ConfigError("ar: style dim must be >= 1");
        if (max_len < 2) throw ConfigError("ar: max_len must be >= 2");
        if (max_positions < max_len + 2) throw ConfigError("ar: max_positions too small for max_len");
    }
};

struct ArExample {
    std::vector<int> content;
    int style_id = -1;
    Matrix style_frames;
    std::vector<int> target;
};

enum class DecodeMode { greedy, sample };

struct GenResult {
    std::vector<int> tokens;
    bool truncated = false;
};

class ArModel {
public:
    ArConfig cfg;
    ParamStore params;

    ArModel() = default;
    explicit ArModel(const ArConfig & c) : cfg(c) { cfg.validate(); }

    void init(uint64_t seed) {
        Rng rng = Rng(seed).split("ar_init");
        auto gauss = [&](int r, int c, double scale) {
            Matrix m(r, c);
            rng.fill_gaussian(m, scale);
            return m;
        };
        const int d = cfg.width;
        const double es = 0.5 / std::sqrt((double) d);
        const double ws = 1.0 / std::sqrt((double) d);
        params.add("ar.content_emb", gauss(cfg.content_vocab, d, es));
        params.add("ar.target_emb", gauss(cfg.target_vocab, d, es));
        params.add("ar.sep_emb", gauss(1, d, es));
        params.add("ar.pos_emb", gauss(cfg.max_positions, d, es));
        for (int l = 0; l < cfg.layers; ++l) {
            const std::string p = "ar.L" + std::to_string(l) + ".";
            params.add(p + "attn.wq", gauss(d, d, ws));
            params.add(p + "attn.wk", gauss(d, d, ws));
            params.add(p + "attn.wv", gauss(d, d, ws));
            params.add(p + "attn.wo", gauss(d, d, ws / std::sqrt(2.0 * cfg.layers)));
            params.add(p + "mlp.w1", gauss(d, 4 * d, ws));
            params.add(p + "mlp.b1", Matrix(1, 4 * d));
            params.add(p + "mlp.w2", gauss(4 * d, d, 0.5 / std::sqrt(4.0 * d)));
            params.add(p + "mlp.b2", Matrix(1, d));
        }
        params.add("ar.head.w", gauss(d, cfg.target_vocab, ws));
        params.add("ar.head.b", Matrix(1, cfg.target_vocab));
        init_style_encoder(params, rng, cfg.style_dim, d);
        init_film(params, rng, d, cfg.proj_dim(), cfg.layers);
        init_cross_attention(params, rng, d, cfg.layers);
    }

    struct Bound {
        int content_emb, target_emb, sep_emb, pos_emb, head_w, head_b;
        int style_w, style_b, film_proj_w, film_proj_b;
        struct Layer {
            int wq, wk, wv, wo, m_w1, m_b1, m_w2, m_b2;
            int x_wq, x_wk, x_wv, x_wo;
            int f_wg, f_bg, f_wb, f_bb;
        };
        std::vector<Layer> layers;
    };

    Bound bind(Tape & t) {
        Bound b;
        b.content_emb = t.param(params, "ar.content_emb");
        b.target_emb = t.param(params, "ar.target_emb");
        b.sep_emb = t.param(params, "ar.sep_emb");
        b.pos_emb = t.param(params, "ar.pos_emb");
        b.head_w = t.param(params, "ar.head.w");
        b.head_b = t.param(params, "ar.head.b");
        b.style_w = t.param(params, "style_enc.w");
        b.style_b = t.param(params, "style_enc.b");
        b.film_proj_w = t.param(params, "film.proj.w");
        b.film_proj_b = t.param(params, "film.proj.b");
        for (int l = 0; l < cfg.layers; ++l) {
            const std::string p = "ar.L" + std::to_string(l) + ".";
            const std::string f = film_layer_prefix(l);
            const std::string x = xattn_layer_prefix(l);
            Bound::Layer L;
            L.wq = t.param(params, p + "attn.wq");
            L.wk = t.param(params, p + "attn.wk");
            L.wv = t.param(params, p + "attn.wv");
            L.wo = t.param(params, p + "attn.wo");
            L.m_w1 = t.param(params, p + "mlp.w1");
            L.m_b1 = t.param(params, p + "mlp.b1");
            L.m_w2 = t.param(params, p + "mlp.w2");
            L.m_b2 = t.param(params, p + "mlp.b2");
            L.x_wq = t.param(params, x + "wq");
            L.x_wk = t.param(params, x + "wk");
            L.x_wv = t.param(params, x + "wv");
            L.x_wo = t.param(params, x + "wo");
            L.f_wg = t.param(params, f + "wg");
            L.f_bg = t.param(params, f + "bg");
            L.f_wb = t.param(params, f + "wb");
            L.f_bb = t.param(params, f + "bb");
            b.layers.push_back(L);
        }
        return b;
    }

    int encode_style_node(Tape & t, const Bound & b, const Matrix & frames) const {
        if (frames.cols != cfg.style_dim) {
            throw InputError("style frames must have " + std::to_string(cfg.style_dim) + " columns");
        }
        if (frames.rows < 1) {
            throw InputError("style reference needs at least one frame");
        }
        return encode_style(t, t.leaf(frames), b.style_w, b.style_b);
    }

    Matrix encode_style_frames(const Matrix & frames) {
        Tape t(false);
        Bound b = bind(t);
        return t.val(encode_style_node(t, b, frames));
    }

    // Returns (prefix length + 1) x target_vocab logits; row i predicts
    // target token i given content and prefix tokens 0..i-1. Pass es = -1
    // only when both conditioning paths are disabled.
    int forward(Tape & t, const Bound & b, const std::vector<int> & content,
                const std::vector<int> & prefix, int es) const {
        if (content.empty()) {
            throw InputError("ar forward: empty content");
        }
        for (int c : content) {
            if (c < 0 || c >= cfg.content_vocab) {
                throw InputError("ar forward: content token " + std::to_string(c) + " out of range");
            }
        }
        for (int p : prefix) {
            if (p < 0 || p >= cfg.target_vocab) {
                throw InputError("ar forward: prefix token " + std::to_string(p) + " out of range");
            }
        }
        const int Tc = (int) content.size();
        const int S = Tc + 1 + (int) prefix.size();
        if (S > cfg.max_positions) {
            throw InputError("ar forward: sequence length " + std::to_string(S) + " exceeds " +
                             std::to_string(cfg.max_positions) + " positions");
        }
        if ((cfg.film_on || cfg.xattn_on) && es < 0) {
            throw ContractError("ar forward: style embeddings required when conditioning is on");
        }

        int ce = t.gather_rows(b.content_emb, content);
        int h = ce;
        if (!prefix.empty()) {
            int pe = t.gather_rows(b.target_emb, prefix);
            h = t.concat_rows({ce, b.sep_emb, pe});
        } else {
            h = t.concat_rows({ce, b.sep_emb});
        }
        std::vector<int> pos_ids(S);
        for (int i = 0; i < S; ++i) pos_ids[(size_t) i] = i;
        h = t.add(h, t.gather_rows(b.pos_emb, pos_ids));

        Matrix mask(S, S);
        for (int i = 0; i < S; ++i) {
            for (int j = i + 1; j < S; ++j) mask.at(i, j) = -1e9f;
        }
        int mask_id = t.leaf(mask);

        for (int l = 0; l < cfg.layers; ++l) {
            const auto & L = b.layers[(size_t) l];
            int gamma = -1, beta = -1;
            if (cfg.film_on) {
                auto gb = film_params(t, es, b.film_proj_w, b.film_proj_b, L.f_wg, L.f_bg, L.f_wb,
                                      L.f_bb);
                gamma = gb.first;
                beta = gb.second;
            }
            int n1 = t.film_ln_rows(h, cfg.film_site1 ? gamma : -1, cfg.film_site1 ? beta : -1);
            h = t.add(h, self_attention(t, L, n1, mask_id));
            if (cfg.xattn_on) {
                int n2 = t.film_ln_rows(h, cfg.film_site2 ? gamma : -1, cfg.film_site2 ? beta : -1);
                h = t.add(h, style_cross_attention_causal(t, es, n2, L.x_wq, L.x_wk, L.x_wv, L.x_wo));
            }
            int n3 = t.film_ln_rows(h, cfg.film_site3 ? gamma : -1, cfg.film_site3 ? beta : -1);
            int mid = t.gelu(t.add_row_vec(t.matmul(n3, L.m_w1), L.m_b1));
            h = t.add(h, t.add_row_vec(t.matmul(mid, L.m_w2), L.m_b2));
        }

        int preds = t.slice_rows(h, Tc, S);
        return t.add_row_vec(t.matmul(preds, b.head_w), b.head_b);
    }

    // Mean token negative log likelihood of the full target (terminator
    // included) under teacher forcing.
    int nll(Tape & t, const Bound & b, const ArExample & ex, int es) const {
        if (ex.target.empty()) {
            throw InputError("ar nll: empty target");
        }
        std::vector<int> prefix(ex.target.begin(), ex.target.end() - 1);
        int logits = forward(t, b, ex.content, prefix, es);
        return t.nll_rows(logits, ex.target);
    }

    double eval_nll(const std::vector<ArExample> & batch) {
        if (batch.empty()) {
            throw InputError("ar eval: empty batch");
        }
        double total = 0.0;
        for (const auto & ex : batch) {
            Tape t(false);
            Bound b = bind(t);
            int es = needs_style() ? encode_style_node(t, b, ex.style_frames) : -1;
            total += t.scalar(nll(t, b, ex, es));
        }
        return total / (double) batch.size();
    }

    double sft_step(const std::vector<ArExample> & batch, AdamOptimizer & opt, double lr) {
        if (batch.empty()) {
            throw InputError("ar sft step: empty batch");
        }
        Tape t;
        Bound b = bind(t);
        std::vector<int> losses;
        for (const auto & ex : batch) {
            int es = needs_style() ? encode_style_node(t, b, ex.style_frames) : -1;
            losses.push_back(nll(t, b, ex, es));
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
            throw NumericError("ar sft step: non-finite loss at batch indices [" + bad + "]");
        }
        params.zero_grads();
        t.backward(loss);
        opt.step(params, lr);
        return v;
    }

    GenResult generate(const std::vector<int> & content, const Matrix & es_matrix, DecodeMode mode,
                       double temperature, Rng * rng = nullptr) {
        GenResult res;
        const bool greedy = mode == DecodeMode::greedy || temperature < 1e-8;
        if (!greedy && rng == nullptr) {
            throw InputError("ar generate: sampling requires an rng");
        }
        while ((int) res.tokens.size() < cfg.max_len) {
            Tape t(false);
            Bound b = bind(t);
            int es = -1;
            if (needs_style()) {
                if (es_matrix.cols != cfg.width || es_matrix.rows < 1) {
                    throw InputError("ar generate: style embedding matrix must be Mx" +
                                     std::to_string(cfg.width));
                }
                es = t.leaf(es_matrix);
            }
            int logits = forward(t, b, content, res.tokens, es);
            const Matrix & lg = t.val(logits);
            const float * row = lg.row(lg.rows - 1);
            int tok;
            if (greedy) {
                tok = 0;
                for (int j = 1; j < lg.cols; ++j) {
                    if (row[j] > row[tok]) tok = j;
                }
            } else {
                std::vector<double> scaled((size_t) lg.cols);
                for (int j = 0; j < lg.cols; ++j) scaled[(size_t) j] = (double) row[j] / temperature;
                double mx = scaled[0];
                for (double v : scaled) mx = std::max(mx, v);
                double z = 0.0;
                for (double & v : scaled) {
                    v = std::exp(v - mx);
                    z += v;
                }
                double u = rng->uniform() * z;
                tok = lg.cols - 1;
                double acc = 0.0;
                for (int j = 0; j < lg.cols; ++j) {
                    acc += scaled[(size_t) j];
                    if (u < acc) {
                        tok = j;
                        break;
                    }
                }
            }
            res.tokens.push_back(tok);
            if (tok == cfg.terminator()) {
                return res;
            }
        }
        res.truncated = true;
        return res;
    }

    GenResult generate_from_frames(const std::vector<int> & content, const Matrix & frames,
                                   DecodeMode mode, double temperature, Rng * rng = nullptr) {
        Matrix es = needs_style() ? encode_style_frames(frames) : Matrix(1, cfg.width);
        return generate(content, es, mode, temperature, rng);
    }

    bool needs_style() const { return cfg.film_on || cfg.xattn_on; }

    void save(const std::string & path) const { save_store(path, params); }
    void load(const std::string & path) { load_into_store(load_checkpoint(path), params); }

private:
    int self_attention(Tape & t, const Bound::Layer & L, int x, int mask_id) const {
        int q = t.matmul(x, L.wq);
        int k = t.matmul(x, L.wk);
        int v = t.matmul(x, L.wv);
        const int H = cfg.heads;
        const int dh = cfg.width / H;
        const double scale = 1.0 / std::sqrt((double) dh);
        std::vector<int> heads;
        for (int hh = 0; hh < H; ++hh) {
            int qh = H == 1 ? q : t.slice_cols(q, hh * dh, (hh + 1) * dh);
            int kh = H == 1 ? k : t.slice_cols(k, hh * dh, (hh + 1) * dh);
            int vh = H == 1 ? v : t.slice_cols(v, hh * dh, (hh + 1) * dh);
            int logits = t.add(t.scale(t.matmul(qh, kh, false, true), scale), mask_id);
            int a = t.softmax_rows_op(logits);
            heads.push_back(t.matmul(a, vh));
        }
        int merged = H == 1 ? heads[0] : t.concat_cols(heads);
        return t.matmul(merged, L.wo);
    }
};

} // namespace s2v
