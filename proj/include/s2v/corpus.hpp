#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "rng.hpp"

namespace s2v {

// Manifest-level curation: multi-system transcript fusion with token-level
// confidence, quality gating, dedup and stratified balancing. Separation and
// transcript refinement are declared stages that pass records through, so the
// stage graph stays intact without the external models behind those steps.

struct Hypothesis {
    std::string system;
    std::vector<std::string> tokens;
    std::vector<double> confs;
};

struct QualityMetrics {
    double mos_like = std::numeric_limits<double>::quiet_NaN();
    double energy = std::numeric_limits<double>::quiet_NaN();
    double pitch_stability = std::numeric_limits<double>::quiet_NaN();
    double noise_ratio = std::numeric_limits<double>::quiet_NaN();
};

struct SegmentTags {
    std::string style;
    std::string gender;
    std::string language;
};

struct SegmentRecord {
    std::string id;
    std::string audio_path;
    double duration_s = 0.0;
    std::vector<Hypothesis> hypotheses;
    QualityMetrics quality;
    SegmentTags tags;
};

inline void validate_record(const SegmentRecord & rec) {
    if (rec.hypotheses.empty()) {
        throw InputError("record '" + rec.id + "': needs at least one hypothesis");
    }
    if (!(rec.duration_s > 0.0)) {
        throw InputError("record '" + rec.id + "': duration must be positive");
    }
    for (const auto & h : rec.hypotheses) {
        if (h.tokens.empty()) {
            throw InputError("record '" + rec.id + "': hypothesis '" + h.system +
                             "' has no tokens");
        }
        if (h.confs.size() != h.tokens.size()) {
            throw InputError("record '" + rec.id + "': hypothesis '" + h.system +
                             "' has " + std::to_string(h.tokens.size()) + " tokens but " +
                             std::to_string(h.confs.size()) + " confidences");
        }
        for (double c : h.confs) {
            if (!(c >= 0.0 && c <= 1.0)) {
                throw InputError("record '" + rec.id + "': hypothesis '" + h.system +
                                 "' has a confidence outside [0, 1]");
            }
        }
    }
}

// ---- alignment ----

struct AlignSlot {
    bool present = false;
    std::string token;
    double conf = 0.0;
};

// One row per input system, pivot included; each row has one slot per pivot
// token. Hypothesis tokens inserted relative to the pivot carry no slot.
struct AlignmentGrid {
    size_t pivot = 0;
    std::vector<std::string> pivot_tokens;
    std::vector<std::vector<AlignSlot>> rows;
};

namespace detail {

inline double mean_conf(const Hypothesis & h) {
    double s = 0.0;
    for (double c : h.confs) s += c;
    return s / (double) h.confs.size();
}

// Slots of `hyp` against the pivot under a minimal edit-distance alignment.
// Ties between minimal paths resolve by walking from the front and preferring
// match, then substitute, then dropping a pivot token, then skipping a
// hypothesis token.
inline std::vector<AlignSlot> align_to_pivot(const std::vector<std::string> & pivot,
                                             const Hypothesis & hyp) {
    const size_t p = pivot.size();
    const size_t h = hyp.tokens.size();
    std::vector<std::vector<int>> d(p + 1, std::vector<int>(h + 1, 0));
    for (size_t i = 0; i <= p; ++i) d[i][h] = (int) (p - i);
    for (size_t j = 0; j <= h; ++j) d[p][j] = (int) (h - j);
    for (size_t i = p; i-- > 0;) {
        for (size_t j = h; j-- > 0;) {
            int diag = d[i + 1][j + 1] + (pivot[i] == hyp.tokens[j] ? 0 : 1);
            int del = d[i + 1][j] + 1;
            int ins = d[i][j + 1] + 1;
            d[i][j] = std::min(diag, std::min(del, ins));
        }
    }
    std::vector<AlignSlot> slots(p);
    size_t i = 0, j = 0;
    while (i < p) {
        if (j < h && pivot[i] == hyp.tokens[j] && d[i][j] == d[i + 1][j + 1]) {
            slots[i] = {true, hyp.tokens[j], hyp.confs[j]};
            ++i, ++j;
        } else if (j < h && pivot[i] != hyp.tokens[j] && d[i][j] == d[i + 1][j + 1] + 1) {
            slots[i] = {true, hyp.tokens[j], hyp.confs[j]};
            ++i, ++j;
        } else if (d[i][j] == d[i + 1][j] + 1) {
            ++i;
        } else {
            ++j;
        }
    }
    return slots;
}

} // namespace detail

inline AlignmentGrid align_hypotheses(const std::vector<Hypothesis> & hyps) {
    if (hyps.empty()) {
        throw InputError("align: no hypotheses");
    }
    for (const auto & h : hyps) {
        if (h.tokens.empty()) {
            throw InputError("align: hypothesis '" + h.system + "' has no tokens");
        }
        if (h.confs.size() != h.tokens.size()) {
            throw InputError("align: hypothesis '" + h.system + "' token/confidence mismatch");
        }
    }
    AlignmentGrid grid;
    double best = -1.0;
    for (size_t m = 0; m < hyps.size(); ++m) {
        double mc = detail::mean_conf(hyps[m]);
        if (mc > best) {
            best = mc;
            grid.pivot = m;
        }
    }
    grid.pivot_tokens = hyps[grid.pivot].tokens;
    grid.rows.resize(hyps.size());
    for (size_t m = 0; m < hyps.size(); ++m) {
        if (m == grid.pivot) {
            grid.rows[m].resize(grid.pivot_tokens.size());
            for (size_t t = 0; t < grid.pivot_tokens.size(); ++t) {
                grid.rows[m][t] = {true, hyps[m].tokens[t], hyps[m].confs[t]};
            }
        } else {
            grid.rows[m] = detail::align_to_pivot(grid.pivot_tokens, hyps[m]);
        }
    }
    return grid;
}

// ---- fusion ----

struct FusedTranscript {
    std::vector<std::string> tokens;
    std::vector<double> confs;
    double mean_conf = 0.0;
    bool kept = false;
};

// Token confidence is the mean over systems of confidence times agreement
// with the pivot token; a missing slot counts as zero agreement.
inline FusedTranscript fuse(const AlignmentGrid & grid, double theta_conf) {
    FusedTranscript out;
    out.tokens = grid.pivot_tokens;
    out.confs.resize(out.tokens.size(), 0.0);
    const double systems = (double) grid.rows.size();
    double total = 0.0;
    for (size_t t = 0; t < out.tokens.size(); ++t) {
        double s = 0.0;
        for (const auto & row : grid.rows) {
            const AlignSlot & slot = row[t];
            if (slot.present && slot.token == out.tokens[t]) s += slot.conf;
        }
        out.confs[t] = s / systems;
        total += out.confs[t];
    }
    out.mean_conf = out.tokens.empty() ? 0.0 : total / (double) out.tokens.size();
    out.kept = out.mean_conf >= theta_conf;
    return out;
}

// ---- quality gate ----

struct FilterDecision {
    bool keep = true;
    std::string reason;
};

struct QualityThresholds {
    double min_mos = 3.0;
    double min_energy = 0.1;
    double min_pitch_stability = 0.5;
    double max_noise_ratio = 0.3;
};

// Gates run in a fixed order and the first offense names the drop reason;
// an absent metric at its gate reports missing_metric.
inline FilterDecision quality_filter(const SegmentRecord & rec, const QualityThresholds & th) {
    struct Gate {
        const char * name;
        double value;
        double threshold;
        bool upper;
    };
    const Gate gates[4] = {
        {"mos_like", rec.quality.mos_like, th.min_mos, false},
        {"energy", rec.quality.energy, th.min_energy, false},
        {"pitch_stability", rec.quality.pitch_stability, th.min_pitch_stability, false},
        {"noise_ratio", rec.quality.noise_ratio, th.max_noise_ratio, true},
    };
    for (const Gate & g : gates) {
        if (std::isnan(g.value)) {
            return {false, "missing_metric"};
        }
        if (g.upper ? g.value > g.threshold : g.value < g.threshold) {
            return {false, g.name};
        }
    }
    return {true, ""};
}

// ---- dedup and balance ----

inline std::string normalize_transcript(const std::vector<std::string> & tokens) {
    std::string out;
    for (const auto & tok : tokens) {
        std::string word;
        for (char ch : tok) {
            unsigned char u = (unsigned char) ch;
            if (std::ispunct(u)) continue;
            word += (char) std::tolower(u);
        }
        if (word.empty()) continue;
        if (!out.empty()) out += ' ';
        out += word;
    }
    return out;
}

inline std::string dedup_key(const std::vector<std::string> & tokens, double duration_s,
                             double bucket_s) {
    long bucket = (long) std::floor(duration_s / bucket_s);
    return normalize_transcript(tokens) + "|" + std::to_string(bucket);
}

// First occurrence of a key survives, later ones drop.
inline std::vector<SegmentRecord> dedup(const std::vector<SegmentRecord> & records,
                                        double bucket_s) {
    std::unordered_set<std::string> seen;
    std::vector<SegmentRecord> out;
    for (const auto & rec : records) {
        std::string key = dedup_key(rec.hypotheses.at(0).tokens, rec.duration_s, bucket_s);
        if (seen.insert(key).second) out.push_back(rec);
    }
    return out;
}

// Caps every (style, gender, language) bucket at cap_ratio times the
// smallest non-empty bucket. Survivors within an over-cap bucket are chosen
// by a shuffle keyed on the bucket tag and record ids, so the choice does not
// depend on input order; output keeps input order.
inline std::vector<SegmentRecord> balance(const std::vector<SegmentRecord> & records,
                                          double cap_ratio, uint64_t seed) {
    if (records.empty()) return {};
    std::map<std::string, std::vector<size_t>> buckets;
    for (size_t i = 0; i < records.size(); ++i) {
        const SegmentTags & t = records[i].tags;
        buckets[t.style + "\x1f" + t.gender + "\x1f" + t.language].push_back(i);
    }
    size_t smallest = records.size();
    for (const auto & [key, members] : buckets) smallest = std::min(smallest, members.size());
    size_t cap = (size_t) std::floor(cap_ratio * (double) smallest);
    cap = std::max<size_t>(cap, 1);
    std::unordered_set<size_t> keep;
    for (const auto & [key, members] : buckets) {
        if (members.size() <= cap) {
            keep.insert(members.begin(), members.end());
            continue;
        }
        std::vector<size_t> order = members;
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
            return records[a].id < records[b].id;
        });
        Rng rng = Rng(seed).split("balance").split(key);
        rng.shuffle(order);
        for (size_t k = 0; k < cap; ++k) keep.insert(order[k]);
    }
    std::vector<SegmentRecord> out;
    for (size_t i = 0; i < records.size(); ++i) {
        if (keep.count(i)) out.push_back(records[i]);
    }
    return out;
}

// ---- manifest io ----

using nlohmann::json;

inline json record_to_json(const SegmentRecord & rec) {
    json j;
    j["id"] = rec.id;
    j["audio_path"] = rec.audio_path;
    j["duration_s"] = rec.duration_s;
    json hyps = json::array();
    for (const auto & h : rec.hypotheses) {
        json hj;
        hj["system"] = h.system;
        hj["tokens"] = h.tokens;
        hj["confs"] = h.confs;
        hyps.push_back(std::move(hj));
    }
    j["hypotheses"] = std::move(hyps);
    json q;
    auto put = [&](const char * name, double v) {
        if (std::isnan(v)) {
            q[name] = nullptr;
        } else {
            q[name] = v;
        }
    };
    put("mos_like", rec.quality.mos_like);
    put("energy", rec.quality.energy);
    put("pitch_stability", rec.quality.pitch_stability);
    put("noise_ratio", rec.quality.noise_ratio);
    j["quality"] = std::move(q);
    j["tags"] = {{"style", rec.tags.style},
                 {"gender", rec.tags.gender},
                 {"language", rec.tags.language}};
    return j;
}

inline SegmentRecord record_from_json(const json & j) {
    SegmentRecord rec;
    rec.id = j.at("id").get<std::string>();
    rec.audio_path = j.value("audio_path", std::string());
    rec.duration_s = j.at("duration_s").get<double>();
    for (const auto & hj : j.at("hypotheses")) {
        Hypothesis h;
        h.system = hj.at("system").get<std::string>();
        h.tokens = hj.at("tokens").get<std::vector<std::string>>();
        h.confs = hj.at("confs").get<std::vector<double>>();
        rec.hypotheses.push_back(std::move(h));
    }
    if (j.contains("quality")) {
        const json & q = j.at("quality");
        auto get = [&](const char * name) {
            if (!q.contains(name) || q.at(name).is_null()) {
                return std::numeric_limits<double>::quiet_NaN();
            }
            return q.at(name).get<double>();
        };
        rec.quality.mos_like = get("mos_like");
        rec.quality.energy = get("energy");
        rec.quality.pitch_stability = get("pitch_stability");
        rec.quality.noise_ratio = get("noise_ratio");
    }
    if (j.contains("tags")) {
        const json & t = j.at("tags");
        rec.tags.style = t.value("style", std::string());
        rec.tags.gender = t.value("gender", std::string());
        rec.tags.language = t.value("language", std::string());
    }
    return rec;
}

inline std::vector<SegmentRecord> load_manifest(const std::string & path) {
    std::ifstream is(path);
    if (!is) {
        throw IoError("cannot open manifest '" + path + "'");
    }
    std::vector<SegmentRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(record_from_json(json::parse(line)));
        } catch (const json::exception & e) {
            throw IoError("'" + path + "' line " + std::to_string(lineno) + ": " + e.what());
        }
        validate_record(out.back());
    }
    return out;
}

inline void save_manifest(const std::string & path, const std::vector<SegmentRecord> & records) {
    std::ofstream os(path);
    if (!os) {
        throw IoError("cannot open '" + path + "' for writing");
    }
    for (const auto & rec : records) os << record_to_json(rec).dump() << "\n";
    if (!os) {
        throw IoError("write failed for '" + path + "'");
    }
}

// ---- pipeline ----

struct PipelineOptions {
    double theta_conf = 0.8;
    QualityThresholds thresholds;
    double cap_ratio = 3.0;
    double bucket_s = 0.5;
    uint64_t seed = 1;
};

struct PipelineResult {
    std::vector<SegmentRecord> records;
    json report;
};

inline SegmentRecord separate_vocals(const SegmentRecord & rec) { return rec; }
inline SegmentRecord refine_transcripts(const SegmentRecord & rec) { return rec; }

inline PipelineResult run_pipeline(const std::vector<SegmentRecord> & input,
                                   const PipelineOptions & opt) {
    for (const auto & rec : input) validate_record(rec);

    std::vector<SegmentRecord> stage;
    stage.reserve(input.size());
    for (const auto & rec : input) stage.push_back(refine_transcripts(separate_vocals(rec)));

    int fusion_dropped = 0;
    std::vector<SegmentRecord> fused;
    for (const auto & rec : stage) {
        AlignmentGrid grid = align_hypotheses(rec.hypotheses);
        FusedTranscript ft = fuse(grid, opt.theta_conf);
        if (!ft.kept) {
            ++fusion_dropped;
            continue;
        }
        SegmentRecord out = rec;
        out.hypotheses.clear();
        out.hypotheses.push_back({"fused", ft.tokens, ft.confs});
        fused.push_back(std::move(out));
    }

    std::map<std::string, int> drop_reasons;
    std::vector<SegmentRecord> filtered;
    for (const auto & rec : fused) {
        FilterDecision d = quality_filter(rec, opt.thresholds);
        if (d.keep) {
            filtered.push_back(rec);
        } else {
            ++drop_reasons[d.reason];
        }
    }

    std::vector<SegmentRecord> unique = dedup(filtered, opt.bucket_s);
    std::vector<SegmentRecord> balanced = balance(unique, opt.cap_ratio, opt.seed);

    json report;
    report["input"] = input.size();
    report["separation_passed"] = stage.size();
    report["refinement_passed"] = stage.size();
    report["fusion_kept"] = fused.size();
    report["fusion_dropped"] = fusion_dropped;
    report["filter_kept"] = filtered.size();
    json reasons = json::object();
    for (const auto & [name, count] : drop_reasons) reasons[name] = count;
    report["filter_dropped"] = std::move(reasons);
    report["dedup_removed"] = filtered.size() - unique.size();
    report["balance_removed"] = unique.size() - balanced.size();
    report["output"] = balanced.size();
    return {std::move(balanced), std::move(report)};
}

// Randomized manifest for demos and pipeline checks: a pool of base
// transcripts re-used with noisy per-system variants, occasional missing
// metrics and a skewed tag distribution.
inline std::vector<SegmentRecord> make_demo_manifest(int count, uint64_t seed) {
    static const char * words[] = {"river", "stone", "glass", "wind", "ember", "sail",
                                   "moss", "lantern", "echo", "drift", "harbor", "pine"};
    const int nwords = (int) (sizeof(words) / sizeof(words[0]));
    static const char * styles[] = {"ballad", "pop", "folk"};
    static const char * genders[] = {"f", "m"};
    static const char * langs[] = {"en", "es"};
    Rng rng = Rng(seed).split("demo_manifest");
    std::vector<SegmentRecord> out;
    for (int i = 0; i < count; ++i) {
        SegmentRecord rec;
        char id[32];
        std::snprintf(id, sizeof(id), "seg%05d", i);
        rec.id = id;
        rec.audio_path = std::string("audio/") + id + ".wav";
        rec.duration_s = rng.uniform(1.0, 20.0);
        std::vector<std::string> base;
        Rng text_rng = rng.split((uint64_t) (i % std::max(1, count / 4)));
        int len = 3 + text_rng.uniform_int(6);
        for (int t = 0; t < len; ++t) base.push_back(words[text_rng.uniform_int(nwords)]);
        int systems = 2 + rng.uniform_int(2);
        for (int m = 0; m < systems; ++m) {
            Hypothesis h;
            h.system = "asr" + std::to_string(m);
            for (const auto & w : base) {
                if (rng.uniform() < 0.08) continue;
                std::string tok = w;
                if (rng.uniform() < 0.1) tok = words[rng.uniform_int(nwords)];
                h.tokens.push_back(tok);
                h.confs.push_back(rng.uniform(0.55, 1.0));
            }
            if (h.tokens.empty()) {
                h.tokens.push_back(base[0]);
                h.confs.push_back(rng.uniform(0.55, 1.0));
            }
            rec.hypotheses.push_back(std::move(h));
        }
        auto metric = [&](double lo, double hi, double miss_p) {
            if (rng.uniform() < miss_p) return std::numeric_limits<double>::quiet_NaN();
            return rng.uniform(lo, hi);
        };
        rec.quality.mos_like = metric(2.0, 5.0, 0.03);
        rec.quality.energy = metric(0.0, 1.0, 0.03);
        rec.quality.pitch_stability = metric(0.0, 1.0, 0.03);
        rec.quality.noise_ratio = metric(0.0, 0.6, 0.03);
        rec.tags.style = styles[rng.uniform_int(i % 3 == 0 ? 3 : 1)];
        rec.tags.gender = genders[rng.uniform_int(2)];
        rec.tags.language = langs[rng.uniform_int(rng.uniform() < 0.8 ? 1 : 2)];
        out.push_back(std::move(rec));
    }
    return out;
}

} // namespace s2v
