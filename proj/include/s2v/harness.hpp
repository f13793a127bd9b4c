#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "ar_model.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "dpo.hpp"
#include "flow.hpp"
#include "grad_check.hpp"
#include "synthetic.hpp"

namespace s2v {

// Stage orchestration over an output directory:
//   <out>/data/         datasets from gen-data
//   <out>/checkpoints/  sft_ar.s2vc, sft_flow.s2vc, dpo.s2vc
//   <out>/reports/      one json per stage plus eval and ablation reports
// Reports are deterministic per (config, seed) except the wall_s field.

namespace detail {

inline double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

inline void require_file(const std::string & path, const std::string & hint) {
    if (!std::filesystem::exists(path)) {
        throw DependencyError("missing '" + path + "'; " + hint);
    }
}

inline void write_json(const std::string & path, const json & j) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    std::ofstream os(path);
    if (!os) {
        throw IoError("cannot open '" + path + "' for writing");
    }
    os << j.dump(2) << "\n";
}

inline std::vector<int> core_tokens(const std::vector<int> & tokens, int terminator) {
    std::vector<int> core = tokens;
    if (!core.empty() && core.back() == terminator) core.pop_back();
    return core;
}

inline int longest_run(const std::vector<int> & tokens) {
    int best = 0, cur = 0;
    for (size_t i = 0; i < tokens.size(); ++i) {
        cur = (i > 0 && tokens[i] == tokens[i - 1]) ? cur + 1 : 1;
        best = std::max(best, cur);
    }
    return best;
}

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    size_t n = v.size();
    if (n == 0) return std::numeric_limits<double>::quiet_NaN();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace detail

// ---- style probe ----

// Tiny multinomial logistic classifier over token-sequence summary features,
// trained full batch in f64 with a fixed iteration count so results are a
// pure function of its inputs.
struct StyleProbe {
    int classes = 0;
    int dim = 0;
    std::vector<double> w;

    static std::vector<double> features(const std::vector<int> & core, int vocab, int max_len) {
        std::vector<double> f((size_t) vocab + 2, 0.0);
        const double n = (double) core.size();
        for (int tok : core) {
            if (tok >= 0 && tok < vocab) f[(size_t) tok] += 1.0 / std::max(1.0, n);
        }
        f[(size_t) vocab] = n / (double) std::max(1, max_len);
        int dups = 0;
        for (size_t i = 1; i < core.size(); ++i) {
            if (core[i] == core[i - 1]) ++dups;
        }
        f[(size_t) vocab + 1] = core.size() > 1 ? (double) dups / (double) (core.size() - 1) : 0.0;
        return f;
    }

    void train(const std::vector<std::vector<double>> & xs, const std::vector<int> & ys,
               int n_classes, int iters = 300, double lr = 0.5) {
        if (xs.empty() || xs.size() != ys.size()) {
            throw InputError("probe train: empty or mismatched inputs");
        }
        classes = n_classes;
        dim = (int) xs[0].size();
        w.assign((size_t) classes * (size_t) (dim + 1), 0.0);
        const double n = (double) xs.size();
        std::vector<double> grad(w.size());
        std::vector<double> logits((size_t) classes);
        for (int it = 0; it < iters; ++it) {
            std::fill(grad.begin(), grad.end(), 0.0);
            for (size_t r = 0; r < xs.size(); ++r) {
                score(xs[r], logits);
                double mx = logits[0];
                for (double v : logits) mx = std::max(mx, v);
                double z = 0.0;
                for (double & v : logits) {
                    v = std::exp(v - mx);
                    z += v;
                }
                for (int c = 0; c < classes; ++c) {
                    double p = logits[(size_t) c] / z - (c == ys[r] ? 1.0 : 0.0);
                    double * g = &grad[(size_t) c * (size_t) (dim + 1)];
                    for (int d = 0; d < dim; ++d) g[d] += p * xs[r][(size_t) d];
                    g[dim] += p;
                }
            }
            for (size_t i = 0; i < w.size(); ++i) w[i] -= lr * grad[i] / n;
        }
    }

    int predict(const std::vector<double> & x) const {
        std::vector<double> logits((size_t) classes);
        score(x, logits);
        int best = 0;
        for (int c = 1; c < classes; ++c) {
            if (logits[(size_t) c] > logits[(size_t) best]) best = c;
        }
        return best;
    }

private:
    void score(const std::vector<double> & x, std::vector<double> & logits) const {
        for (int c = 0; c < classes; ++c) {
            const double * wc = &w[(size_t) c * (size_t) (dim + 1)];
            double s = wc[dim];
            for (int d = 0; d < dim; ++d) s += wc[d] * x[(size_t) d];
            logits[(size_t) c] = s;
        }
    }
};

// ---- metrics ----

struct MetricsReport {
    double val_nll = std::numeric_limits<double>::quiet_NaN();
    double em = std::numeric_limits<double>::quiet_NaN();
    double em_zero_style = std::numeric_limits<double>::quiet_NaN();
    double style_probe_acc = std::numeric_limits<double>::quiet_NaN();
    double fail_truncated = std::numeric_limits<double>::quiet_NaN();
    double fail_early_stop = std::numeric_limits<double>::quiet_NaN();
    double fail_repeat = std::numeric_limits<double>::quiet_NaN();
    double fail_any = std::numeric_limits<double>::quiet_NaN();
    double mean_margin = std::numeric_limits<double>::quiet_NaN();
    double flow_mean_err = std::numeric_limits<double>::quiet_NaN();
    double flow_speaker_shift_err = std::numeric_limits<double>::quiet_NaN();
    double wall_s = 0.0;

    json to_json() const {
        json j;
        auto put = [&](const char * name, double v) {
            if (std::isnan(v)) {
                j[name] = nullptr;
            } else {
                j[name] = v;
            }
        };
        put("val_nll", val_nll);
        put("em", em);
        put("em_zero_style", em_zero_style);
        put("style_probe_acc", style_probe_acc);
        put("fail_truncated", fail_truncated);
        put("fail_early_stop", fail_early_stop);
        put("fail_repeat", fail_repeat);
        put("fail_any", fail_any);
        put("mean_margin", mean_margin);
        put("flow_mean_err", flow_mean_err);
        put("flow_speaker_shift_err", flow_speaker_shift_err);
        j["wall_s"] = wall_s;
        return j;
    }
};

// Shared evaluation protocol. All sampling streams derive from the config
// seed, never from the models, so two checkpoints are always measured under
// identical draws.
inline MetricsReport evaluate_models(const RunConfig & rc, const TaskSpec & ts, ArModel & ar,
                                     FlowModel * flow,
                                     const std::vector<ArExample> & probe_train,
                                     const std::vector<ArExample> & test,
                                     const std::vector<PreferencePair> & pref_val,
                                     const std::vector<FlowExample> & flow_val) {
    const double t0 = detail::now_s();
    MetricsReport rep;
    const int term = ts.terminator();

    rep.val_nll = ar.eval_nll(test);

    int hits = 0, zero_hits = 0;
    std::vector<std::vector<int>> greedy_cores;
    greedy_cores.reserve(test.size());
    for (const auto & ex : test) {
        GenResult g = ar.generate_from_frames(ex.content, ex.style_frames, DecodeMode::greedy, 0.0);
        if (g.tokens == ex.target) ++hits;
        greedy_cores.push_back(detail::core_tokens(g.tokens, term));
        Matrix zero(ex.style_frames.rows, ar.cfg.width);
        GenResult gz = ar.generate(ex.content, zero, DecodeMode::greedy, 0.0);
        if (gz.tokens == ex.target) ++zero_hits;
    }
    rep.em = (double) hits / (double) test.size();
    rep.em_zero_style = (double) zero_hits / (double) test.size();

    {
        StyleProbe probe;
        std::vector<std::vector<double>> xs;
        std::vector<int> ys;
        size_t cap = std::min<size_t>(probe_train.size(), 1024);
        for (size_t i = 0; i < cap; ++i) {
            xs.push_back(StyleProbe::features(detail::core_tokens(probe_train[i].target, term),
                                              ts.target_vocab, ar.cfg.max_len));
            ys.push_back(probe_train[i].style_id);
        }
        probe.train(xs, ys, ts.styles);
        int correct = 0;
        for (size_t i = 0; i < test.size(); ++i) {
            auto f = StyleProbe::features(greedy_cores[i], ts.target_vocab, ar.cfg.max_len);
            if (probe.predict(f) == test[i].style_id) ++correct;
        }
        rep.style_probe_acc = (double) correct / (double) test.size();
    }

    {
        Rng rng = Rng(rc.seed).split("eval_sample");
        int truncated = 0, early = 0, repeat = 0, any = 0;
        const int n = rc.eval_gen_samples;
        for (int i = 0; i < n; ++i) {
            const ArExample & ex = test[(size_t) i % test.size()];
            GenResult g = ar.generate_from_frames(ex.content, ex.style_frames, DecodeMode::sample,
                                                  rc.eval_temperature, &rng);
            std::vector<int> core = detail::core_tokens(g.tokens, term);
            std::vector<int> gt = detail::core_tokens(ex.target, term);
            bool f_trunc = g.truncated;
            bool f_early = !g.truncated && core.size() < gt.size();
            bool f_rep = detail::longest_run(core) > detail::longest_run(gt);
            truncated += f_trunc;
            early += f_early;
            repeat += f_rep;
            any += (f_trunc || f_early || f_rep);
        }
        rep.fail_truncated = (double) truncated / n;
        rep.fail_early_stop = (double) early / n;
        rep.fail_repeat = (double) repeat / n;
        rep.fail_any = (double) any / n;
    }

    {
        double total = 0.0;
        for (const auto & p : pref_val) {
            total += pair_margin(ar, p, rc.dpo_score_norm == "mean");
        }
        rep.mean_margin = total / (double) pref_val.size();
    }

    if (flow != nullptr && !flow_val.empty()) {
        const FlowExample & anchor = flow_val.front();
        Rng rng = Rng(rc.seed).split("eval_flow");
        Matrix mean(anchor.frames.rows, anchor.frames.cols);
        std::vector<double> acc(mean.data.size(), 0.0);
        const int n = rc.eval_flow_samples;
        for (int i = 0; i < n; ++i) {
            Matrix s = flow->ode_sample(anchor.tokens, anchor.speaker, rc.flow_ode_steps, rng);
            for (size_t k = 0; k < acc.size(); ++k) acc[k] += (double) s.data[k];
        }
        double worst = 0.0;
        for (int r = 0; r < mean.rows; ++r) {
            for (int c = 0; c < mean.cols; ++c) {
                double m = acc[(size_t) r * (size_t) mean.cols + (size_t) c] / n;
                double want = (double) ts.mu.at(anchor.tokens[(size_t) r], c) +
                              (double) ts.delta.at(anchor.speaker, c);
                worst = std::max(worst, std::fabs(m - want));
            }
        }
        rep.flow_mean_err = worst;

        const int per_spk = 48;
        std::vector<std::vector<double>> spk_mean((size_t) ts.speakers);
        for (int s = 0; s < ts.speakers; ++s) {
            std::vector<double> m((size_t) ts.frame_dim, 0.0);
            for (int i = 0; i < per_spk; ++i) {
                Matrix x = flow->ode_sample(anchor.tokens, s, rc.flow_ode_steps, rng);
                for (int r = 0; r < x.rows; ++r) {
                    for (int c = 0; c < x.cols; ++c) m[(size_t) c] += (double) x.at(r, c);
                }
            }
            for (double & v : m) v /= (double) per_spk * (double) anchor.frames.rows;
            spk_mean[(size_t) s] = std::move(m);
        }
        double shift_worst = 0.0;
        for (int a = 0; a + 1 < ts.speakers; a += 2) {
            int b = a + 1;
            for (int c = 0; c < ts.frame_dim; ++c) {
                double got = spk_mean[(size_t) a][(size_t) c] - spk_mean[(size_t) b][(size_t) c];
                double want = (double) ts.delta.at(a, c) - (double) ts.delta.at(b, c);
                shift_worst = std::max(shift_worst, std::fabs(got - want));
            }
        }
        rep.flow_speaker_shift_err = shift_worst;
    }

    rep.wall_s = detail::now_s() - t0;
    return rep;
}

// ---- training loops ----

inline ArModel train_ar_model(const RunConfig & rc, const std::vector<ArExample> & train,
                              int steps, bool verbose = false) {
    ArModel model(rc.ar_config());
    model.init(rc.seed);
    AdamOptimizer opt(model.params);
    Rng rng = Rng(rc.seed).split("ar_batches");
    const int report_every = std::max(1, steps / 10);
    double recent = 0.0;
    int recent_n = 0;
    for (int step = 0; step < steps; ++step) {
        std::vector<ArExample> batch;
        for (int b = 0; b < rc.ar_batch; ++b) {
            batch.push_back(train[(size_t) rng.uniform_int((int) train.size())]);
        }
        double loss = model.sft_step(batch, opt, rc.ar_lr);
        recent += loss;
        ++recent_n;
        if (verbose && (step + 1) % report_every == 0) {
            std::fprintf(stderr, "  ar step %d/%d loss %.4f\n", step + 1, steps,
                         recent / recent_n);
            recent = 0.0;
            recent_n = 0;
        }
    }
    return model;
}

inline FlowModel train_flow_model(const RunConfig & rc, const std::vector<FlowExample> & train,
                                  int steps, bool verbose = false) {
    FlowModel model(rc.flow_config());
    model.init(rc.seed);
    AdamOptimizer opt(model.params);
    Rng rng = Rng(rc.seed).split("flow_batches");
    Rng noise = Rng(rc.seed).split("flow_noise");
    const int report_every = std::max(1, steps / 10);
    double recent = 0.0;
    int recent_n = 0;
    for (int step = 0; step < steps; ++step) {
        std::vector<FlowExample> batch;
        for (int b = 0; b < rc.flow_batch; ++b) {
            batch.push_back(train[(size_t) rng.uniform_int((int) train.size())]);
        }
        double loss = model.sft_step(batch, opt, rc.flow_lr, noise);
        recent += loss;
        ++recent_n;
        if (verbose && (step + 1) % report_every == 0) {
            std::fprintf(stderr, "  flow step %d/%d loss %.4f\n", step + 1, steps,
                         recent / recent_n);
            recent = 0.0;
            recent_n = 0;
        }
    }
    return model;
}

struct DpoLoopStats {
    double loss_final = 0.0;
    double train_margin_final = 0.0;
};

inline DpoLoopStats dpo_loop(ArModel & model, const RunConfig & rc,
                             const std::vector<PreferencePair> & train, int steps,
                             bool verbose = false) {
    AdamOptimizer opt(model.params);
    Rng rng = Rng(rc.seed).split("dpo_batches");
    const bool mean_norm = rc.dpo_score_norm == "mean";
    const int report_every = std::max(1, steps / 10);
    DpoLoopStats out;
    for (int step = 0; step < steps; ++step) {
        std::vector<PreferencePair> batch;
        for (int b = 0; b < rc.dpo_batch; ++b) {
            batch.push_back(train[(size_t) rng.uniform_int((int) train.size())]);
        }
        DpoStepStats st = dpo_step(model, batch, opt, rc.dpo_lr, rc.dpo_beta, mean_norm);
        out.loss_final = st.loss;
        out.train_margin_final = st.margin;
        if (verbose && (step + 1) % report_every == 0) {
            std::fprintf(stderr, "  dpo step %d/%d loss %.4f margin %.4f\n", step + 1, steps,
                         st.loss, st.margin);
        }
    }
    return out;
}

// ---- stages ----

inline std::string data_dir(const std::string & out_dir) { return out_dir + "/data"; }
inline std::string ckpt_path(const std::string & out_dir, const std::string & stage) {
    return out_dir + "/checkpoints/" + stage + ".s2vc";
}
inline std::string report_path(const std::string & out_dir, const std::string & name) {
    return out_dir + "/reports/" + name + ".json";
}

inline json run_gen_data(const RunConfig & rc, const std::string & out_dir) {
    const double t0 = detail::now_s();
    GenDataSummary sum = gen_synthetic(rc, data_dir(out_dir));
    json rep;
    rep["stage"] = "gen_data";
    rep["ar_train"] = sum.ar_train;
    rep["ar_val"] = sum.ar_val;
    rep["ar_test"] = sum.ar_test;
    rep["flow_train"] = sum.flow_train;
    rep["flow_val"] = sum.flow_val;
    rep["pref_train"] = sum.pref_train;
    rep["pref_val"] = sum.pref_val;
    rep["pref_skipped"] = sum.pref_skipped;
    rep["wall_s"] = detail::now_s() - t0;
    detail::write_json(report_path(out_dir, "gen_data"), rep);
    return rep;
}

inline json run_stage_sft_ar(const RunConfig & rc, const std::string & out_dir,
                             bool verbose = false) {
    const double t0 = detail::now_s();
    const std::string train_path = data_dir(out_dir) + "/ar_train.jsonl";
    detail::require_file(train_path, "run gen-data first");
    auto train = load_ar_dataset(train_path);
    auto val = load_ar_dataset(data_dir(out_dir) + "/ar_val.jsonl");
    ArModel model = train_ar_model(rc, train, rc.ar_steps, verbose);
    std::filesystem::create_directories(out_dir + "/checkpoints");
    model.save(ckpt_path(out_dir, "sft_ar"));
    json rep;
    rep["stage"] = "sft_ar";
    rep["steps"] = rc.ar_steps;
    rep["val_nll"] = model.eval_nll(val);
    rep["wall_s"] = detail::now_s() - t0;
    detail::write_json(report_path(out_dir, "sft_ar"), rep);
    return rep;
}

inline json run_stage_sft_flow(const RunConfig & rc, const std::string & out_dir,
                               bool verbose = false) {
    const double t0 = detail::now_s();
    const std::string train_path = data_dir(out_dir) + "/flow_train.jsonl";
    detail::require_file(train_path, "run gen-data first");
    auto train = load_flow_dataset(train_path);
    auto val = load_flow_dataset(data_dir(out_dir) + "/flow_val.jsonl");
    FlowModel model = train_flow_model(rc, train, rc.flow_steps, verbose);
    std::filesystem::create_directories(out_dir + "/checkpoints");
    model.save(ckpt_path(out_dir, "sft_flow"));
    double val_loss = 0.0;
    Rng rng = Rng(rc.seed).split("flow_val_eval");
    for (const auto & ex : val) {
        Tape t(false);
        FlowModel::Bound b = model.bind(t);
        val_loss += t.scalar(model.flow_loss(t, b, ex, rng));
    }
    json rep;
    rep["stage"] = "sft_flow";
    rep["steps"] = rc.flow_steps;
    rep["val_loss"] = val_loss / (double) val.size();
    rep["wall_s"] = detail::now_s() - t0;
    detail::write_json(report_path(out_dir, "sft_flow"), rep);
    return rep;
}

inline json run_stage_dpo(const RunConfig & rc, const std::string & out_dir,
                          bool verbose = false) {
    const double t0 = detail::now_s();
    const std::string ar_ckpt = ckpt_path(out_dir, "sft_ar");
    const std::string flow_ckpt = ckpt_path(out_dir, "sft_flow");
    detail::require_file(ar_ckpt, "run train-ar first");
    detail::require_file(flow_ckpt, "run train-flow first");
    const std::string pref_path = data_dir(out_dir) + "/pref_train.jsonl";
    detail::require_file(pref_path, "run gen-data first");
    auto train = load_pref_dataset(pref_path);
    auto val = load_pref_dataset(data_dir(out_dir) + "/pref_val.jsonl");

    ArModel model(rc.ar_config());
    model.init(rc.seed);
    model.load(ar_ckpt);

    const bool mean_norm = rc.dpo_score_norm == "mean";
    auto val_margin = [&]() {
        double total = 0.0;
        for (const auto & p : val) total += pair_margin(model, p, mean_norm);
        return total / (double) val.size();
    };
    double margin_before = val_margin();
    DpoLoopStats stats = dpo_loop(model, rc, train, rc.dpo_steps, verbose);
    double margin_after = val_margin();

    auto flow_entries = load_checkpoint(flow_ckpt);
    std::vector<CheckpointEntry> merged = store_entries(model.params);
    for (auto & e : flow_entries) merged.push_back(std::move(e));
    save_checkpoint(ckpt_path(out_dir, "dpo"), merged);

    json rep;
    rep["stage"] = "dpo";
    rep["steps"] = rc.dpo_steps;
    rep["loss_final"] = stats.loss_final;
    rep["margin_before"] = margin_before;
    rep["margin_after"] = margin_after;
    rep["wall_s"] = detail::now_s() - t0;
    detail::write_json(report_path(out_dir, "dpo"), rep);
    return rep;
}

inline json run_stage(const std::string & stage, const RunConfig & rc, const std::string & out_dir,
                      bool verbose = false) {
    if (stage == "sft_ar") return run_stage_sft_ar(rc, out_dir, verbose);
    if (stage == "sft_flow") return run_stage_sft_flow(rc, out_dir, verbose);
    if (stage == "dpo") return run_stage_dpo(rc, out_dir, verbose);
    throw InputError("unknown stage '" + stage + "'");
}

// Evaluation of a named checkpoint against the generated datasets; the tag
// selects which token-model weights to score (the flow weights are the sft
// ones either way, the dpo stage never alters them).
inline MetricsReport evaluate(const RunConfig & rc, const std::string & out_dir,
                              const std::string & tag) {
    if (tag != "sft" && tag != "dpo") {
        throw InputError("eval tag must be 'sft' or 'dpo', got '" + tag + "'");
    }
    const std::string ckpt = ckpt_path(out_dir, tag == "sft" ? "sft_ar" : "dpo");
    detail::require_file(ckpt, tag == "sft" ? "run train-ar first" : "run train-dpo first");
    const std::string task_path = data_dir(out_dir) + "/task.json";
    detail::require_file(task_path, "run gen-data first");

    std::ifstream is(task_path);
    TaskSpec ts = TaskSpec::from_json(json::parse(is));
    auto probe_train = load_ar_dataset(data_dir(out_dir) + "/ar_train.jsonl");
    auto test = load_ar_dataset(data_dir(out_dir) + "/ar_test.jsonl");
    auto pref_val = load_pref_dataset(data_dir(out_dir) + "/pref_val.jsonl");
    auto flow_val = load_flow_dataset(data_dir(out_dir) + "/flow_val.jsonl");

    ArModel ar(rc.ar_config());
    ar.init(rc.seed);
    ar.load(ckpt);

    FlowModel flow(rc.flow_config());
    FlowModel * flow_ptr = nullptr;
    const std::string flow_ckpt = ckpt_path(out_dir, "sft_flow");
    if (std::filesystem::exists(flow_ckpt)) {
        flow.init(rc.seed);
        flow.load(flow_ckpt);
        flow_ptr = &flow;
    }

    MetricsReport rep = evaluate_models(rc, ts, ar, flow_ptr, probe_train, test, pref_val,
                                        flow_val);
    detail::write_json(report_path(out_dir, "eval_" + tag), rep.to_json());
    return rep;
}

// ---- gradient integrity bundle ----

struct GradCheckReport {
    GradCheckResult ar;
    GradCheckResult flow;
    GradCheckResult dpo;
    double wall_s = 0.0;

    bool pass(double tol = 1e-3) const {
        return ar.pass(tol) && flow.pass(tol) && dpo.pass(tol);
    }

    json to_json() const {
        auto part = [](const GradCheckResult & r) {
            json j;
            j["max_rel_err"] = r.max_rel_err;
            j["coords"] = r.coords_checked;
            j["worst_param"] = r.worst.param;
            j["worst_index"] = r.worst.index;
            j["worst_analytic"] = r.worst.analytic;
            j["worst_numeric"] = r.worst.numeric;
            return j;
        };
        json j;
        j["ar"] = part(ar);
        j["flow"] = part(flow);
        j["dpo"] = part(dpo);
        j["wall_s"] = wall_s;
        return j;
    }
};

// Composite finite-difference checks over small but fully featured models:
// the conditioned token model through its training loss, the flow field
// through its matching loss at a fixed blend point, and the preference loss
// through two scored sequences.
inline GradCheckReport run_gradcheck(double step = 1e-3, int max_coords = 64) {
    const double t0 = detail::now_s();
    GradCheckReport rep;

    {
        ArConfig cfg;
        cfg.layers = 2;
        cfg.width = 8;
        cfg.heads = 2;
        cfg.content_vocab = 12;
        cfg.target_vocab = 16;
        cfg.style_dim = 4;
        cfg.max_len = 12;
        cfg.max_positions = 24;
        ArModel model(cfg);
        model.init(99);
        ArExample ex;
        ex.content = {1, 4, 7};
        ex.target = {2, 9, 5, cfg.terminator()};
        ex.style_frames = Matrix(3, cfg.style_dim);
        Rng(7).fill_gaussian(ex.style_frames, 0.8);
        auto loss = [&](ParamStore & store, bool with_grad) {
            Tape t(with_grad, true);
            ArModel::Bound b = model.bind(t);
            int es = model.encode_style_node(t, b, ex.style_frames);
            int l = model.nll(t, b, ex, es);
            double v = t.scalar(l);
            if (with_grad) t.backward(l);
            return v;
        };
        rep.ar = grad_check(loss, model.params, step, max_coords, 1234);
    }

    {
        FlowConfig cfg;
        cfg.frame_dim = 2;
        cfg.width = 16;
        cfg.layers = 2;
        cfg.token_vocab = 16;
        cfg.speakers = 4;
        cfg.spk_dim = 4;
        FlowModel model(cfg);
        model.init(55);
        FlowExample ex;
        ex.tokens = {3, 8, 11};
        ex.speaker = 1;
        ex.frames = Matrix(3, cfg.frame_dim);
        Rng(11).fill_gaussian(ex.frames, 0.7);
        Matrix x0(3, cfg.frame_dim);
        Rng(13).fill_gaussian(x0);
        auto loss = [&](ParamStore & store, bool with_grad) {
            Tape t(with_grad, true);
            FlowModel::Bound b = model.bind(t);
            int l = model.flow_loss_at(t, b, ex, x0, 0.35);
            double v = t.scalar(l);
            if (with_grad) t.backward(l);
            return v;
        };
        rep.flow = grad_check(loss, model.params, step, max_coords, 4321);
    }

    {
        ArConfig cfg;
        cfg.layers = 2;
        cfg.width = 8;
        cfg.heads = 1;
        cfg.content_vocab = 12;
        cfg.target_vocab = 16;
        cfg.style_dim = 4;
        cfg.max_len = 12;
        cfg.max_positions = 24;
        ArModel model(cfg);
        model.init(77);
        Matrix frames(2, cfg.style_dim);
        Rng(17).fill_gaussian(frames, 0.8);
        std::vector<int> content = {2, 5};
        std::vector<int> pos = {6, 10, cfg.terminator()};
        std::vector<int> neg = {6, 6, cfg.terminator()};
        auto loss = [&](ParamStore & store, bool with_grad) {
            Tape t(with_grad, true);
            ArModel::Bound b = model.bind(t);
            int es = model.encode_style_node(t, b, frames);
            int sp = score_node(t, model, b, content, pos, es);
            int sn = score_node(t, model, b, content, neg, es);
            int l = t.softplus(t.scale(t.sub(sn, sp), 1.5));
            double v = t.scalar(l);
            if (with_grad) t.backward(l);
            return v;
        };
        rep.dpo = grad_check(loss, model.params, step, max_coords, 2468);
    }

    rep.wall_s = detail::now_s() - t0;
    return rep;
}

// ---- ablation ladder ----

struct AblationVariant {
    std::string name;
    std::string label;
    bool film = false;
    bool xattn = false;
    bool spk = false;
    bool dpo = false;
};

inline std::vector<AblationVariant> ablation_ladder() {
    return {
        {"sft_only", "SFT only", false, false, false, false},
        {"film", "+ FiLM", true, false, false, false},
        {"xattn", "+ Cross-Attention", true, true, false, false},
        {"spk_emb", "+ Global Spk. Emb.", true, true, true, false},
        {"dpo", "+ DPO", true, true, true, true},
    };
}

// Trains the five-variant ladder per seed, re-using stages that a variant
// shares with its predecessor, and reports per-seed metrics plus the
// across-seed median for every number.
inline json run_ablation(const RunConfig & rc, const std::string & out_dir,
                         bool verbose = false) {
    const double t0 = detail::now_s();
    const auto ladder = ablation_ladder();
    const auto seeds = rc.ablate_seed_list();
    const int ar_steps = rc.ablate_ar_steps > 0 ? rc.ablate_ar_steps : rc.ar_steps;
    const int flow_steps = rc.ablate_flow_steps > 0 ? rc.ablate_flow_steps : rc.flow_steps;
    const int dpo_steps = rc.ablate_dpo_steps > 0 ? rc.ablate_dpo_steps : rc.dpo_steps;

    std::vector<std::vector<MetricsReport>> per_variant(ladder.size());
    for (size_t si = 0; si < seeds.size(); ++si) {
        RunConfig rs = rc;
        rs.seed = seeds[si];
        const std::string seed_dir = out_dir + "/ablate/seed" + std::to_string(seeds[si]);
        if (verbose) std::fprintf(stderr, "ablation seed %llu\n", (unsigned long long) rs.seed);
        gen_synthetic(rs, data_dir(seed_dir));
        std::ifstream is(data_dir(seed_dir) + "/task.json");
        TaskSpec ts = TaskSpec::from_json(json::parse(is));
        auto ar_train = load_ar_dataset(data_dir(seed_dir) + "/ar_train.jsonl");
        auto ar_test = load_ar_dataset(data_dir(seed_dir) + "/ar_test.jsonl");
        auto flow_train = load_flow_dataset(data_dir(seed_dir) + "/flow_train.jsonl");
        auto flow_val = load_flow_dataset(data_dir(seed_dir) + "/flow_val.jsonl");
        auto pref_train = load_pref_dataset(data_dir(seed_dir) + "/pref_train.jsonl");
        auto pref_val = load_pref_dataset(data_dir(seed_dir) + "/pref_val.jsonl");

        std::map<std::pair<bool, bool>, ArModel> ar_cache;
        std::map<bool, FlowModel> flow_cache;
        for (size_t vi = 0; vi < ladder.size(); ++vi) {
            const AblationVariant & v = ladder[vi];
            RunConfig rv = rs;
            rv.ar_film = v.film;
            rv.ar_xattn = v.xattn;
            rv.flow_spk = v.spk;
            if (verbose) std::fprintf(stderr, " variant %s\n", v.name.c_str());

            auto ar_key = std::make_pair(v.film, v.xattn);
            if (!ar_cache.count(ar_key)) {
                ar_cache.emplace(ar_key, train_ar_model(rv, ar_train, ar_steps, verbose));
            }
            if (!flow_cache.count(v.spk)) {
                flow_cache.emplace(v.spk, train_flow_model(rv, flow_train, flow_steps, verbose));
            }
            FlowModel & flow = flow_cache.at(v.spk);

            MetricsReport rep;
            if (v.dpo) {
                ArModel tuned = ar_cache.at(ar_key);
                dpo_loop(tuned, rv, pref_train, dpo_steps, verbose);
                rep = evaluate_models(rv, ts, tuned, &flow, ar_train, ar_test, pref_val,
                                      flow_val);
            } else {
                rep = evaluate_models(rv, ts, ar_cache.at(ar_key), &flow, ar_train, ar_test,
                                      pref_val, flow_val);
            }
            per_variant[vi].push_back(rep);
        }
    }

    json table;
    table["seeds"] = seeds;
    table["ar_steps"] = ar_steps;
    table["flow_steps"] = flow_steps;
    table["dpo_steps"] = dpo_steps;
    json variants = json::array();
    for (size_t vi = 0; vi < ladder.size(); ++vi) {
        json vj;
        vj["name"] = ladder[vi].name;
        vj["label"] = ladder[vi].label;
        json per_seed = json::array();
        for (const auto & rep : per_variant[vi]) per_seed.push_back(rep.to_json());
        vj["per_seed"] = std::move(per_seed);
        json med;
        auto put_median = [&](const char * field, auto getter) {
            std::vector<double> vals;
            for (const auto & rep : per_variant[vi]) {
                double x = getter(rep);
                if (!std::isnan(x)) vals.push_back(x);
            }
            if (vals.empty()) {
                med[field] = nullptr;
            } else {
                med[field] = detail::median(vals);
            }
        };
        put_median("em", [](const MetricsReport & r) { return r.em; });
        put_median("em_zero_style", [](const MetricsReport & r) { return r.em_zero_style; });
        put_median("style_probe_acc", [](const MetricsReport & r) { return r.style_probe_acc; });
        put_median("fail_any", [](const MetricsReport & r) { return r.fail_any; });
        put_median("mean_margin", [](const MetricsReport & r) { return r.mean_margin; });
        put_median("flow_mean_err", [](const MetricsReport & r) { return r.flow_mean_err; });
        put_median("flow_speaker_shift_err",
                   [](const MetricsReport & r) { return r.flow_speaker_shift_err; });
        put_median("val_nll", [](const MetricsReport & r) { return r.val_nll; });
        vj["median"] = std::move(med);
        variants.push_back(std::move(vj));
    }
    table["variants"] = std::move(variants);
    table["wall_s"] = detail::now_s() - t0;
    detail::write_json(report_path(out_dir, "ablation"), table);
    return table;
}

// ---- manifest pipeline entry ----

inline json run_pipeline_files(const std::string & in_manifest, const std::string & out_manifest,
                               const std::string & report_file, const PipelineOptions & opt) {
    auto records = load_manifest(in_manifest);
    PipelineResult result = run_pipeline(records, opt);
    save_manifest(out_manifest, result.records);
    detail::write_json(report_file, result.report);
    return result.report;
}

} // namespace s2v
