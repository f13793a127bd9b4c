#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ar_model.hpp"
#include "config.hpp"
#include "dpo.hpp"
#include "flow.hpp"
#include "rng.hpp"

namespace s2v {

using nlohmann::json;

// Synthetic transduction task. Content tokens map to target tokens by a
// per-style additive offset; two of the four styles share an offset and
// differ only through a duplication rule, so telling them apart requires
// fine-grained use of the reference, not just its average. Style references
// are noisy frames around per-style prototypes; two prototypes form a close
// pair separated by task.style_gap. The flow stage renders each target token
// as a frame at a per-token anchor shifted by a per-speaker offset.

struct TaskSpec {
    int content_vocab = 32;
    int target_vocab = 64;
    int styles = 4;
    int speakers = 8;
    int style_dim = 8;
    int frame_dim = 2;
    int content_min = 4;
    int content_max = 8;
    int ref_frames_min = 6;
    int ref_frames_max = 10;
    double ref_noise = 0.2;
    double style_gap = 0.8;
    double frame_noise = 0.05;
    std::vector<int> offsets;
    int dup_style = 3;
    int dup_stride = 3;
    Matrix style_protos;
    Matrix mu;
    Matrix delta;

    int terminator() const { return target_vocab - 1; }

    static TaskSpec build(const RunConfig & rc) {
        TaskSpec ts;
        ts.content_vocab = rc.task_content_vocab;
        ts.target_vocab = rc.task_target_vocab;
        ts.styles = rc.task_styles;
        ts.speakers = rc.task_speakers;
        ts.style_dim = rc.task_style_dim;
        ts.frame_dim = rc.task_frame_dim;
        ts.content_min = rc.task_content_min;
        ts.content_max = rc.task_content_max;
        ts.ref_frames_min = rc.task_ref_frames_min;
        ts.ref_frames_max = rc.task_ref_frames_max;
        ts.ref_noise = rc.task_ref_noise;
        ts.style_gap = rc.task_style_gap;
        ts.frame_noise = rc.task_frame_noise;
        ts.offsets = {3, 17, 27, 27};
        int max_off = 0;
        for (int o : ts.offsets) max_off = std::max(max_off, o);
        if (ts.content_vocab - 1 + max_off >= ts.terminator()) {
            throw ConfigError("task: content vocab too large, transduced tokens would collide "
                              "with the terminator id");
        }
        Rng rng = Rng(rc.seed).split("task");
        ts.style_protos = Matrix(ts.styles, ts.style_dim);
        Rng proto_rng = rng.split("protos");
        for (int j = 0; j < ts.style_dim; ++j) {
            ts.style_protos.at(0, j) = (float) (1.2 * proto_rng.gaussian());
        }
        for (int j = 0; j < ts.style_dim; ++j) {
            ts.style_protos.at(1, j) = (float) (1.2 * proto_rng.gaussian());
        }
        std::vector<double> base(ts.style_dim), dir(ts.style_dim);
        double norm = 0.0;
        for (int j = 0; j < ts.style_dim; ++j) {
            base[(size_t) j] = 1.2 * proto_rng.gaussian();
            dir[(size_t) j] = proto_rng.gaussian();
            norm += dir[(size_t) j] * dir[(size_t) j];
        }
        norm = std::sqrt(norm);
        for (int j = 0; j < ts.style_dim; ++j) {
            double d = dir[(size_t) j] / norm * (ts.style_gap / 2.0);
            ts.style_protos.at(2, j) = (float) (base[(size_t) j] + d);
            ts.style_protos.at(3, j) = (float) (base[(size_t) j] - d);
        }
        ts.mu = Matrix(ts.target_vocab, ts.frame_dim);
        Rng mu_rng = rng.split("mu");
        mu_rng.fill_uniform(ts.mu, -1.0, 1.0);
        ts.delta = Matrix(ts.speakers, ts.frame_dim);
        Rng delta_rng = rng.split("delta");
        delta_rng.fill_uniform(ts.delta, -0.75, 0.75);
        return ts;
    }

    // Target token sequence for a content sequence under a style, terminator
    // appended. The duplication style re-emits every dup_stride-th output.
    std::vector<int> transduce(const std::vector<int> & content, int style) const {
        if (style < 0 || style >= styles) {
            throw InputError("transduce: style " + std::to_string(style) + " out of range");
        }
        std::vector<int> out;
        for (size_t i = 0; i < content.size(); ++i) {
            int c = content[i];
            if (c < 0 || c >= content_vocab) {
                throw InputError("transduce: content token out of range");
            }
            int t = (c + offsets[(size_t) style]) % target_vocab;
            out.push_back(t);
            if (style == dup_style && (int) (i % (size_t) dup_stride) == dup_stride - 1) {
                out.push_back(t);
            }
        }
        out.push_back(terminator());
        return out;
    }

    Matrix sample_reference(int style, Rng & rng) const {
        if (style < 0 || style >= styles) {
            throw InputError("sample_reference: style out of range");
        }
        int m = ref_frames_min + rng.uniform_int(ref_frames_max - ref_frames_min + 1);
        Matrix frames(m, style_dim);
        for (int i = 0; i < m; ++i) {
            for (int j = 0; j < style_dim; ++j) {
                frames.at(i, j) = (float) ((double) style_protos.at(style, j) + ref_noise * rng.gaussian());
            }
        }
        return frames;
    }

    // Frames for core tokens (no terminator).
    Matrix render_frames(const std::vector<int> & tokens, int speaker, Rng & rng) const {
        if (speaker < 0 || speaker >= speakers) {
            throw InputError("render_frames: speaker out of range");
        }
        Matrix frames((int) tokens.size(), frame_dim);
        for (size_t i = 0; i < tokens.size(); ++i) {
            if (tokens[i] < 0 || tokens[i] >= target_vocab) {
                throw InputError("render_frames: token out of range");
            }
            for (int j = 0; j < frame_dim; ++j) {
                frames.at((int) i, j) = (float) ((double) mu.at(tokens[i], j) +
                                                 (double) delta.at(speaker, j) +
                                                 frame_noise * rng.gaussian());
            }
        }
        return frames;
    }

    json to_json() const;
    static TaskSpec from_json(const json & j);
};

inline json matrix_to_json(const Matrix & m) {
    json rows = json::array();
    for (int i = 0; i < m.rows; ++i) {
        json row = json::array();
        for (int j = 0; j < m.cols; ++j) row.push_back((double) m.at(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Matrix matrix_from_json(const json & j) {
    if (!j.is_array() || j.empty() || !j[0].is_array()) {
        throw IoError("expected a 2d array");
    }
    Matrix m((int) j.size(), (int) j[0].size());
    for (int i = 0; i < m.rows; ++i) {
        if ((int) j[(size_t) i].size() != m.cols) {
            throw IoError("ragged 2d array");
        }
        for (int c = 0; c < m.cols; ++c) {
            m.at(i, c) = (float) j[(size_t) i][(size_t) c].get<double>();
        }
    }
    return m;
}

inline json TaskSpec::to_json() const {
    json j;
    j["content_vocab"] = content_vocab;
    j["target_vocab"] = target_vocab;
    j["styles"] = styles;
    j["speakers"] = speakers;
    j["style_dim"] = style_dim;
    j["frame_dim"] = frame_dim;
    j["content_min"] = content_min;
    j["content_max"] = content_max;
    j["ref_frames_min"] = ref_frames_min;
    j["ref_frames_max"] = ref_frames_max;
    j["ref_noise"] = ref_noise;
    j["style_gap"] = style_gap;
    j["frame_noise"] = frame_noise;
    j["offsets"] = offsets;
    j["dup_style"] = dup_style;
    j["dup_stride"] = dup_stride;
    j["style_protos"] = matrix_to_json(style_protos);
    j["mu"] = matrix_to_json(mu);
    j["delta"] = matrix_to_json(delta);
    return j;
}

inline TaskSpec TaskSpec::from_json(const json & j) {
    TaskSpec ts;
    ts.content_vocab = j.at("content_vocab").get<int>();
    ts.target_vocab = j.at("target_vocab").get<int>();
    ts.styles = j.at("styles").get<int>();
    ts.speakers = j.at("speakers").get<int>();
    ts.style_dim = j.at("style_dim").get<int>();
    ts.frame_dim = j.at("frame_dim").get<int>();
    ts.content_min = j.at("content_min").get<int>();
    ts.content_max = j.at("content_max").get<int>();
    ts.ref_frames_min = j.at("ref_frames_min").get<int>();
    ts.ref_frames_max = j.at("ref_frames_max").get<int>();
    ts.ref_noise = j.at("ref_noise").get<double>();
    ts.style_gap = j.at("style_gap").get<double>();
    ts.frame_noise = j.at("frame_noise").get<double>();
    ts.offsets = j.at("offsets").get<std::vector<int>>();
    ts.dup_style = j.at("dup_style").get<int>();
    ts.dup_stride = j.at("dup_stride").get<int>();
    ts.style_protos = matrix_from_json(j.at("style_protos"));
    ts.mu = matrix_from_json(j.at("mu"));
    ts.delta = matrix_from_json(j.at("delta"));
    return ts;
}

// ---- frame csv ----

inline void write_frames_csv(const std::string & path, const Matrix & m) {
    std::ofstream os(path);
    if (!os) {
        throw IoError("cannot open '" + path + "' for writing");
    }
    char buf[64];
    for (int i = 0; i < m.rows; ++i) {
        for (int j = 0; j < m.cols; ++j) {
            std::snprintf(buf, sizeof(buf), "%.9g", (double) m.at(i, j));
            os << (j ? "," : "") << buf;
        }
        os << "\n";
    }
    if (!os) {
        throw IoError("write failed for '" + path + "'");
    }
}

inline Matrix read_frames_csv(const std::string & path) {
    std::ifstream is(path);
    if (!is) {
        throw IoError("cannot open '" + path + "'");
    }
    std::vector<std::vector<float>> rows;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<float> row;
        size_t pos = 0;
        while (pos <= line.size()) {
            size_t comma = line.find(',', pos);
            std::string cell = line.substr(pos, comma == std::string::npos ? std::string::npos
                                                                           : comma - pos);
            try {
                row.push_back(std::stof(cell));
            } catch (const std::exception &) {
                throw IoError("'" + path + "': bad number '" + cell + "'");
            }
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (!rows.empty() && row.size() != rows[0].size()) {
            throw IoError("'" + path + "': ragged rows");
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) {
        throw IoError("'" + path + "': no frames");
    }
    Matrix m((int) rows.size(), (int) rows[0].size());
    for (int i = 0; i < m.rows; ++i) {
        for (int j = 0; j < m.cols; ++j) m.at(i, j) = rows[(size_t) i][(size_t) j];
    }
    return m;
}

// ---- dataset io ----

inline void write_ar_dataset(const std::string & path, const std::vector<ArExample> & data) {
    std::ofstream os(path);
    if (!os) {
        throw IoError("cannot open '" + path + "' for writing");
    }
    for (const auto & ex : data) {
        json j;
        j["content"] = ex.content;
        j["style_id"] = ex.style_id;
        j["style_frames"] = matrix_to_json(ex.style_frames);
        j["target"] = ex.target;
        os << j.dump() << "\n";
    }
}

inline std::vector<ArExample> load_ar_dataset(const std::string & path) {
    std::ifstream is(path);
    if (!is) {
        throw IoError("cannot open '" + path + "'");
    }
    std::vector<ArExample> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            ArExample ex;
            ex.content = j.at("content").get<std::vector<int>>();
            ex.style_id = j.at("style_id").get<int>();
            ex.style_frames = matrix_from_json(j.at("style_frames"));
            ex.target = j.at("target").get<std::vector<int>>();
            out.push_back(std::move(ex));
        } catch (const json::exception & e) {
            throw IoError("'" + path + "' line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (out.empty()) {
        throw IoError("'" + path + "': no examples");
    }
    return out;
}

inline void write_flow_dataset(const std::string & path, const std::vector<FlowExample> & data) {
    std::ofstream os(path);
    if (!os) {
        throw IoError("cannot open '" + path + "' for writing");
    }
    for (const auto & ex : data) {
        json j;
        j["tokens"] = ex.tokens;
        j["speaker"] = ex.speaker;
        j["frames"] = matrix_to_json(ex.frames);
        os << j.dump() << "\n";
    }
}

inline std::vector<FlowExample> load_flow_dataset(const std::string & path) {
    std::ifstream is(path);
    if (!is) {
        throw IoError("cannot open '" + path + "'");
    }
    std::vector<FlowExample> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            FlowExample ex;
            ex.tokens = j.at("tokens").get<std::vector<int>>();
            ex.speaker = j.at("speaker").get<int>();
            ex.frames = matrix_from_json(j.at("frames"));
            out.push_back(std::move(ex));
        } catch (const json::exception & e) {
            throw IoError("'" + path + "' line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (out.empty()) {
        throw IoError("'" + path + "': no examples");
    }
    return out;
}

inline void write_pref_dataset(const std::string & path, const std::vector<PreferencePair> & data) {
    std::ofstream os(path);
    if (!os) {
        throw IoError("cannot open '" + path + "' for writing");
    }
    for (const auto & p : data) {
        json j;
        j["input_tokens"] = p.input_tokens;
        j["style_ref_path"] = p.style_ref_path;
        j["pos_tokens"] = p.pos_tokens;
        j["neg_tokens"] = p.neg_tokens;
        j["degradation_kind"] = p.degradation_kind;
        os << j.dump() << "\n";
    }
}

// Frames are loaded through each pair's style_ref_path, resolved relative to
// the manifest location.
inline std::vector<PreferencePair> load_pref_dataset(const std::string & path) {
    std::ifstream is(path);
    if (!is) {
        throw IoError("cannot open '" + path + "'");
    }
    std::filesystem::path base = std::filesystem::path(path).parent_path();
    std::vector<PreferencePair> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            json j = json::parse(line);
            PreferencePair p;
            p.input_tokens = j.at("input_tokens").get<std::vector<int>>();
            p.style_ref_path = j.at("style_ref_path").get<std::string>();
            p.pos_tokens = j.at("pos_tokens").get<std::vector<int>>();
            p.neg_tokens = j.at("neg_tokens").get<std::vector<int>>();
            p.degradation_kind = j.at("degradation_kind").get<std::string>();
            p.style_frames = read_frames_csv((base / p.style_ref_path).string());
            out.push_back(std::move(p));
        } catch (const json::exception & e) {
            throw IoError("'" + path + "' line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (out.empty()) {
        throw IoError("'" + path + "': no pairs");
    }
    return out;
}

// ---- generation ----

struct GenDataSummary {
    int ar_train = 0, ar_val = 0, ar_test = 0;
    int flow_train = 0, flow_val = 0;
    int pref_train = 0, pref_val = 0;
    int pref_skipped = 0;
};

namespace detail {

inline std::vector<int> random_content(const TaskSpec & ts, Rng & rng) {
    int len = ts.content_min + rng.uniform_int(ts.content_max - ts.content_min + 1);
    std::vector<int> content((size_t) len);
    for (int & c : content) c = rng.uniform_int(ts.content_vocab);
    return content;
}

inline std::vector<ArExample> make_ar_split(const TaskSpec & ts, Rng rng, int count) {
    std::vector<ArExample> out;
    out.reserve((size_t) count);
    for (int i = 0; i < count; ++i) {
        ArExample ex;
        ex.content = random_content(ts, rng);
        ex.style_id = i % ts.styles;
        ex.style_frames = ts.sample_reference(ex.style_id, rng);
        ex.target = ts.transduce(ex.content, ex.style_id);
        out.push_back(std::move(ex));
    }
    return out;
}

inline std::vector<FlowExample> make_flow_split(const TaskSpec & ts, Rng rng, int count) {
    std::vector<FlowExample> out;
    out.reserve((size_t) count);
    for (int i = 0; i < count; ++i) {
        FlowExample ex;
        std::vector<int> content = random_content(ts, rng);
        int style = (i / ts.speakers) % ts.styles;
        ex.tokens = ts.transduce(content, style);
        ex.tokens.pop_back();
        ex.speaker = i % ts.speakers;
        ex.frames = ts.render_frames(ex.tokens, ex.speaker, rng);
        out.push_back(std::move(ex));
    }
    return out;
}

} // namespace detail

// Writes task.json, the token/frame/preference datasets and reference csvs
// under out_dir. Everything is a pure function of the config.
inline GenDataSummary gen_synthetic(const RunConfig & rc, const std::string & out_dir) {
    TaskSpec ts = TaskSpec::build(rc);
    std::filesystem::create_directories(out_dir);
    std::filesystem::create_directories(out_dir + "/refs");
    {
        std::ofstream os(out_dir + "/task.json");
        if (!os) {
            throw IoError("cannot open '" + out_dir + "/task.json' for writing");
        }
        os << ts.to_json().dump(2) << "\n";
    }
    Rng root(rc.seed);
    GenDataSummary sum;

    auto ar_train = detail::make_ar_split(ts, root.split("ar_train"), rc.task_train);
    auto ar_val = detail::make_ar_split(ts, root.split("ar_val"), rc.task_val);
    auto ar_test = detail::make_ar_split(ts, root.split("ar_test"), rc.task_test);
    write_ar_dataset(out_dir + "/ar_train.jsonl", ar_train);
    write_ar_dataset(out_dir + "/ar_val.jsonl", ar_val);
    write_ar_dataset(out_dir + "/ar_test.jsonl", ar_test);
    sum.ar_train = (int) ar_train.size();
    sum.ar_val = (int) ar_val.size();
    sum.ar_test = (int) ar_test.size();

    auto flow_train = detail::make_flow_split(ts, root.split("flow_train"), rc.task_flow_train);
    auto flow_val = detail::make_flow_split(ts, root.split("flow_val"), rc.task_flow_val);
    write_flow_dataset(out_dir + "/flow_train.jsonl", flow_train);
    write_flow_dataset(out_dir + "/flow_val.jsonl", flow_val);
    sum.flow_train = (int) flow_train.size();
    sum.flow_val = (int) flow_val.size();

    const DegradationKind kinds[4] = {DegradationKind::truncate, DegradationKind::repeat,
                                      DegradationKind::jitter, DegradationKind::early_stop};
    auto make_pref = [&](const char * split, Rng rng, int count, int & written) {
        std::vector<PreferencePair> pairs;
        for (int i = 0; i < count; ++i) {
            PreferencePair p;
            p.input_tokens = detail::random_content(ts, rng);
            int style = i % ts.styles;
            p.style_frames = ts.sample_reference(style, rng);
            p.pos_tokens = ts.transduce(p.input_tokens, style);
            DegradationSpec spec;
            spec.strength = rng.uniform(0.4, 0.8);
            NegativeResult neg;
            for (int attempt = 0; attempt < 4; ++attempt) {
                spec.kind = kinds[(i + attempt) % 4];
                neg = make_negatives(p.pos_tokens, spec, rng, ts.target_vocab, ts.terminator());
                if (neg.tokens) break;
            }
            if (!neg.tokens) {
                ++sum.pref_skipped;
                continue;
            }
            p.neg_tokens = *neg.tokens;
            p.degradation_kind = degradation_name(spec.kind);
            char name[64];
            std::snprintf(name, sizeof(name), "refs/%s_%05d.csv", split, i);
            p.style_ref_path = name;
            write_frames_csv(out_dir + "/" + p.style_ref_path, p.style_frames);
            pairs.push_back(std::move(p));
        }
        char manifest[64];
        std::snprintf(manifest, sizeof(manifest), "/pref_%s.jsonl", split);
        write_pref_dataset(out_dir + manifest, pairs);
        written = (int) pairs.size();
    };
    make_pref("train", root.split("pref_train"), rc.task_pref_train, sum.pref_train);
    make_pref("val", root.split("pref_val"), rc.task_pref_val, sum.pref_val);
    return sum;
}

} // namespace s2v
