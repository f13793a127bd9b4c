#pragma once

#include <string>
#include <utility>

#include "param_store.hpp"
#include "rng.hpp"
#include "tape.hpp"

namespace s2v {

// Style conditioning machinery: a reference-frame encoder producing per-frame
// style embeddings, feature-wise layer-norm modulation driven by the pooled
// embedding, and style-query cross-attention whose result is redistributed
// back over sequence positions.

inline std::string film_layer_prefix(int layer) { return "film.L" + std::to_string(layer) + "."; }
inline std::string xattn_layer_prefix(int layer) { return "xattn.L" + std::to_string(layer) + "."; }

inline void init_style_encoder(ParamStore & store, Rng & rng, int style_dim, int width) {
    Matrix w(style_dim, width);
    rng.fill_gaussian(w, 0.4 / std::sqrt((double) style_dim));
    store.add("style_enc.w", std::move(w));
    store.add("style_enc.b", Matrix(1, width));
}

// Shared pooled projection plus one (gamma, beta) head per layer. Heads start
// at zero so modulation begins as identity.
inline void init_film(ParamStore & store, Rng & rng, int width, int proj_dim, int layers) {
    Matrix pw(width, proj_dim);
    rng.fill_gaussian(pw, 1.0 / std::sqrt((double) width));
    store.add("film.proj.w", std::move(pw));
    store.add("film.proj.b", Matrix(1, proj_dim));
    for (int l = 0; l < layers; ++l) {
        const std::string p = film_layer_prefix(l);
        store.add(p + "wg", Matrix(proj_dim, width));
        store.add(p + "bg", Matrix(1, width));
        store.add(p + "wb", Matrix(proj_dim, width));
        store.add(p + "bb", Matrix(1, width));
    }
}

// W_O starts at zero so the cross-attention branch begins as identity on the
// residual stream.
inline void init_cross_attention(ParamStore & store, Rng & rng, int width, int layers) {
    double s = 1.0 / std::sqrt((double) width);
    for (int l = 0; l < layers; ++l) {
        const std::string p = xattn_layer_prefix(l);
        Matrix wq(width, width), wk(width, width), wv(width, width);
        rng.fill_gaussian(wq, s);
        rng.fill_gaussian(wk, s);
        rng.fill_gaussian(wv, s);
        store.add(p + "wq", std::move(wq));
        store.add(p + "wk", std::move(wk));
        store.add(p + "wv", std::move(wv));
        store.add(p + "wo", Matrix(width, width));
    }
}

// E_s = tanh(frames * W + b), one embedding row per reference frame.
inline int encode_style(Tape & t, int frames, int w, int b) {
    return t.tanh_op(t.add_row_vec(t.matmul(frames, w), b));
}

inline Matrix encode_style(const Matrix & frames, const Matrix & w, const Matrix & b) {
    Tape t(false);
    return t.val(encode_style(t, t.leaf(frames), t.leaf(w), t.leaf(b)));
}

// Pools E_s over frames, projects to the bottleneck, and produces this
// layer's (gamma, beta) pair, each 1 x width.
inline std::pair<int, int> film_params(Tape & t, int es, int proj_w, int proj_b, int wg, int bg,
                                       int wb, int bb) {
    int pooled = t.add_row_vec(t.matmul(t.mean_rows(es), proj_w), proj_b);
    int gamma = t.add_row_vec(t.matmul(pooled, wg), bg);
    int beta = t.add_row_vec(t.matmul(pooled, wb), bb);
    return {gamma, beta};
}

// (1 + gamma) * LayerNorm(h) + beta.
inline int film_ln(Tape & t, int h, int gamma = -1, int beta = -1) {
    return t.film_ln_rows(h, gamma, beta);
}

inline Matrix film_ln(const Matrix & h, const Matrix & gamma, const Matrix & beta) {
    Tape t(false);
    return t.val(t.film_ln_rows(t.leaf(h), t.leaf(gamma), t.leaf(beta)));
}

// Full-sequence style cross-attention. Style embeddings act as queries over
// the position latents; per-style summaries U are scattered back to positions
// through the transposed attention pattern:
//   Q = E_s Wq, K = H Wk, V = H Wv, A = softmax(Q K^T / sqrt(dk)),
//   delta = A^T (A V Wo).
inline int style_cross_attention(Tape & t, int es, int h, int wq, int wk, int wv, int wo) {
    int q = t.matmul(es, wq);
    int k = t.matmul(h, wk);
    int v = t.matmul(h, wv);
    double dk = (double) t.val(q).cols;
    int logits = t.scale(t.matmul(q, k, false, true), 1.0 / std::sqrt(dk));
    int a = t.softmax_rows_op(logits);
    int u = t.matmul(a, v);
    return t.matmul(a, t.matmul(u, wo), true, false);
}

// Prefix-causal variant used inside autoregressive blocks: row i of the
// result attends only over positions 0..i.
inline int style_cross_attention_causal(Tape & t, int es, int h, int wq, int wk, int wv, int wo) {
    int q = t.matmul(es, wq);
    int k = t.matmul(h, wk);
    int v = t.matmul(h, wv);
    return t.matmul(t.causal_style_attn(q, k, v), wo);
}

} // namespace s2v
