#pragma once

#include <optional>
#include <string>
#include <vector>

#include "ar_model.hpp"
#include "matrix.hpp"
#include "rng.hpp"

namespace s2v {

// Preference fine-tuning of the token model without a reference policy.
// Scores are model log likelihoods of whole sequences; the loss is the
// log-sigmoid preference objective written in its softplus form.

inline double dpo_loss(double s_pos, double s_neg, double beta = 1.0) {
    if (beta <= 0.0) {
        throw InputError("dpo_loss: beta must be positive");
    }
    return detail::softplus_scalar(beta * (s_neg - s_pos));
}

// Sequence score: sum (or mean) of per-token log likelihoods under teacher
// forcing, terminator included.
inline int score_node(Tape & t, const ArModel & model, const ArModel::Bound & b,
                      const std::vector<int> & content, const std::vector<int> & tokens, int es,
                      bool mean_norm = false) {
    if (tokens.empty()) {
        throw InputError("score: empty token sequence");
    }
    std::vector<int> prefix(tokens.begin(), tokens.end() - 1);
    int logits = model.forward(t, b, content, prefix, es);
    int s = t.logprob_sum_rows(logits, tokens);
    if (mean_norm) {
        s = t.scale(s, 1.0 / (double) tokens.size());
    }
    return s;
}

inline double score(ArModel & model, const std::vector<int> & content,
                    const std::vector<int> & tokens, const Matrix & style_frames,
                    bool mean_norm = false) {
    Tape t(false);
    ArModel::Bound b = model.bind(t);
    int es = model.needs_style() ? model.encode_style_node(t, b, style_frames) : -1;
    return t.scalar(score_node(t, model, b, content, tokens, es, mean_norm));
}

enum class DegradationKind { truncate, repeat, jitter, early_stop };

inline const char * degradation_name(DegradationKind k) {
    switch (k) {
        case DegradationKind::truncate: return "truncate";
        case DegradationKind::repeat: return "repeat";
        case DegradationKind::jitter: return "jitter";
        case DegradationKind::early_stop: return "early_stop";
    }
    throw InputError("unknown degradation kind");
}

inline DegradationKind degradation_from_name(const std::string & name) {
    if (name == "truncate") return DegradationKind::truncate;
    if (name == "repeat") return DegradationKind::repeat;
    if (name == "jitter") return DegradationKind::jitter;
    if (name == "early_stop") return DegradationKind::early_stop;
    throw InputError("unknown degradation kind '" + name + "'");
}

struct DegradationSpec {
    DegradationKind kind = DegradationKind::truncate;
    double strength = 0.5;
};

struct NegativeResult {
    std::optional<std::vector<int>> tokens;
    std::string skip_reason;
};

// Builds a degraded copy of a positive sequence, mimicking one decoder
// failure mode. The input normally ends with the terminator; degradations
// apply to the core tokens before it. Strength in (0, 1] sets severity. The
// result always differs from the input; when the sequence is too short for
// the requested kind, the pair is skipped with a reason instead.
inline NegativeResult make_negatives(const std::vector<int> & pos, const DegradationSpec & spec,
                                     Rng & rng, int vocab, int terminator) {
    if (pos.empty()) {
        throw InputError("make_negatives: empty sequence");
    }
    if (spec.strength <= 0.0 || spec.strength > 1.0) {
        throw InputError("make_negatives: strength must lie in (0, 1]");
    }
    std::vector<int> core = pos;
    if (core.back() == terminator) core.pop_back();
    if (core.empty()) {
        return {std::nullopt, "sequence has no tokens before the terminator"};
    }
    const int n = (int) core.size();
    std::vector<int> out;
    switch (spec.kind) {
        case DegradationKind::truncate: {
            int keep = std::max(1, (int) std::floor((double) n * (1.0 - spec.strength)));
            if (keep >= n) {
                return {std::nullopt, "sequence too short to truncate at this strength"};
            }
            out.assign(core.begin(), core.begin() + keep);
            return {out, ""};
        }
        case DegradationKind::repeat: {
            int span = std::max(1, std::min(n, (int) std::floor(spec.strength * n)));
            int start = rng.uniform_int(n - span + 1);
            out.assign(core.begin(), core.begin() + start + span);
            out.insert(out.end(), core.begin() + start, core.begin() + start + span);
            out.insert(out.end(), core.begin() + start + span, core.end());
            out.push_back(terminator);
            return {out, ""};
        }
        case DegradationKind::jitter: {
            int k = std::min(n, std::max(1, (int) std::ceil(spec.strength * n)));
            std::vector<int> idx(core.size());
            for (size_t i = 0; i < idx.size(); ++i) idx[i] = (int) i;
            rng.shuffle(idx);
            out = core;
            for (int i = 0; i < k; ++i) {
                int p = idx[(size_t) i];
                int lo = std::min(out[(size_t) p], terminator);
                int hi = std::max(out[(size_t) p], terminator);
                int tok = rng.uniform_int(vocab - 2);
                if (tok >= lo) ++tok;
                if (tok >= hi) ++tok;
                out[(size_t) p] = tok;
            }
            out.push_back(terminator);
            return {out, ""};
        }
        case DegradationKind::early_stop: {
            if (n < 2) {
                return {std::nullopt, "sequence too short to stop early"};
            }
            int cut = 1 + rng.uniform_int(n - 1);
            out.assign(core.begin(), core.begin() + cut);
            out.push_back(terminator);
            return {out, ""};
        }
    }
    throw InputError("make_negatives: unknown kind");
}

struct PreferencePair {
    std::vector<int> input_tokens;
    std::string style_ref_path;
    Matrix style_frames;
    std::vector<int> pos_tokens;
    std::vector<int> neg_tokens;
    std::string degradation_kind;
};

struct DpoStepStats {
    double loss = 0.0;
    double margin = 0.0;
};

// One preference update on the token model. Only the token-model parameter
// store is touched; the flow decoder does not participate in this loss.
inline DpoStepStats dpo_step(ArModel & model, const std::vector<PreferencePair> & batch,
                             AdamOptimizer & opt, double lr, double beta, bool mean_norm) {
    if (batch.empty()) {
        throw InputError("dpo step: empty batch");
    }
    if (beta <= 0.0) {
        throw InputError("dpo step: beta must be positive");
    }
    Tape t;
    ArModel::Bound b = model.bind(t);
    std::vector<int> losses;
    double margin_total = 0.0;
    for (const auto & pair : batch) {
        int es = model.needs_style() ? model.encode_style_node(t, b, pair.style_frames) : -1;
        int sp = score_node(t, model, b, pair.input_tokens, pair.pos_tokens, es, mean_norm);
        int sn = score_node(t, model, b, pair.input_tokens, pair.neg_tokens, es, mean_norm);
        margin_total += t.scalar(sp) - t.scalar(sn);
        losses.push_back(t.softplus(t.scale(t.sub(sn, sp), beta)));
    }
    int loss = t.scalar_mean(losses);
    DpoStepStats stats;
    stats.loss = t.scalar(loss);
    stats.margin = margin_total / (double) batch.size();
    if (!std::isfinite(stats.loss)) {
        std::string bad;
        for (size_t i = 0; i < losses.size(); ++i) {
            if (!std::isfinite(t.scalar(losses[(size_t) i]))) {
                bad += (bad.empty() ? "" : ",") + std::to_string(i);
            }
        }
        throw NumericError("dpo step: non-finite loss at batch indices [" + bad + "]");
    }
    model.params.zero_grads();
    t.backward(loss);
    opt.step(model.params, lr);
    return stats;
}

inline double pair_margin(ArModel & model, const PreferencePair & pair, bool mean_norm) {
    return score(model, pair.input_tokens, pair.pos_tokens, pair.style_frames, mean_norm) -
           score(model, pair.input_tokens, pair.neg_tokens, pair.style_frames, mean_norm);
}

} // namespace s2v
