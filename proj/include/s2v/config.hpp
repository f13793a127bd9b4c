#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "ar_model.hpp"
#include "errors.hpp"
#include "flow.hpp"

namespace s2v {

// Flat key=value run configuration with dotted key names. Parsing collects
// every problem (unknown key, bad value, failed range check) and reports them
// in one error, so a bad file surfaces all offenses at once.

namespace detail {

inline std::string trim(const std::string & s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

} // namespace detail

inline std::map<std::string, std::string> parse_config_text(const std::string & text) {
    std::map<std::string, std::string> out;
    std::vector<std::string> errors;
    size_t pos = 0;
    int lineno = 0;
    while (pos <= text.size()) {
        size_t end = text.find('\n', pos);
        std::string line = text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
        pos = end == std::string::npos ? text.size() + 1 : end + 1;
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos) {
            errors.push_back("line " + std::to_string(lineno) + ": expected key=value");
            continue;
        }
        std::string key = detail::trim(line.substr(0, eq));
        std::string val = detail::trim(line.substr(eq + 1));
        if (key.empty()) {
            errors.push_back("line " + std::to_string(lineno) + ": empty key");
            continue;
        }
        if (out.count(key)) {
            errors.push_back("duplicate key '" + key + "'");
            continue;
        }
        out[key] = val;
    }
    if (!errors.empty()) {
        std::string msg = "malformed config:";
        for (const auto & e : errors) msg += "\n  " + e;
        throw ConfigError(msg);
    }
    return out;
}

inline std::map<std::string, std::string> parse_config_file(const std::string & path) {
    std::ifstream is(path);
    if (!is) {
        throw ConfigError("cannot open config file '" + path + "'");
    }
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return parse_config_text(text);
}

struct RunConfig {
    uint64_t seed = 1;

    int task_content_vocab = 32;
    int task_target_vocab = 64;
    int task_styles = 4;
    int task_speakers = 8;
    int task_style_dim = 8;
    int task_frame_dim = 2;
    int task_content_min = 4;
    int task_content_max = 8;
    int task_ref_frames_min = 6;
    int task_ref_frames_max = 10;
    double task_ref_noise = 0.2;
    double task_style_gap = 0.8;
    double task_frame_noise = 0.05;
    int task_train = 2048;
    int task_val = 256;
    int task_test = 256;
    int task_flow_train = 1024;
    int task_flow_val = 128;
    int task_pref_train = 512;
    int task_pref_val = 64;

    int ar_layers = 2;
    int ar_width = 32;
    int ar_heads = 1;
    int ar_max_len = 48;
    int ar_max_positions = 96;
    bool ar_film = true;
    bool ar_xattn = true;
    bool ar_film_site1 = true;
    bool ar_film_site2 = true;
    bool ar_film_site3 = true;
    double ar_lr = 2e-5;
    int ar_steps = 10000;
    int ar_batch = 8;

    int flow_width = 32;
    int flow_layers = 2;
    int flow_spk_dim = 16;
    bool flow_spk = true;
    double flow_lr = 7e-6;
    int flow_steps = 20000;
    int flow_batch = 8;
    int flow_ode_steps = 32;

    double dpo_lr = 1e-6;
    double dpo_beta = 1.0;
    int dpo_steps = 400;
    int dpo_batch = 8;
    std::string dpo_score_norm = "sum";

    int eval_gen_samples = 500;
    double eval_temperature = 1.0;
    int eval_flow_samples = 256;

    std::string ablate_seeds = "1,2,3";
    int ablate_ar_steps = 0;
    int ablate_flow_steps = 0;
    int ablate_dpo_steps = 0;

    double pipe_theta_conf = 0.8;
    double pipe_min_mos = 3.0;
    double pipe_min_energy = 0.1;
    double pipe_min_pitch = 0.5;
    double pipe_max_noise = 0.3;
    double pipe_cap_ratio = 3.0;
    double pipe_bucket_s = 0.5;

    static RunConfig from_map(const std::map<std::string, std::string> & kv);
    static RunConfig from_file(const std::string & path) { return from_map(parse_config_file(path)); }

    ArConfig ar_config() const {
        ArConfig c;
        c.layers = ar_layers;
        c.width = ar_width;
        c.heads = ar_heads;
        c.content_vocab = task_content_vocab;
        c.target_vocab = task_target_vocab;
        c.style_dim = task_style_dim;
        c.max_len = ar_max_len;
        c.max_positions = ar_max_positions;
        c.film_on = ar_film;
        c.xattn_on = ar_xattn;
        c.film_site1 = ar_film_site1;
        c.film_site2 = ar_film_site2;
        c.film_site3 = ar_film_site3;
        return c;
    }

    FlowConfig flow_config() const {
        FlowConfig c;
        c.frame_dim = task_frame_dim;
        c.width = flow_width;
        c.layers = flow_layers;
        c.token_vocab = task_target_vocab;
        c.speakers = task_speakers;
        c.spk_dim = flow_spk_dim;
        c.spk_on = flow_spk;
        return c;
    }

    std::vector<uint64_t> ablate_seed_list() const {
        std::vector<uint64_t> seeds;
        std::string cur;
        for (char ch : ablate_seeds + ",") {
            if (ch == ',') {
                cur = detail::trim(cur);
                if (!cur.empty()) seeds.push_back((uint64_t) std::stoull(cur));
                cur.clear();
            } else {
                cur += ch;
            }
        }
        return seeds;
    }
};

inline RunConfig RunConfig::from_map(const std::map<std::string, std::string> & kv) {
    RunConfig rc;
    std::vector<std::string> errors;

    auto parse_int = [&](const std::string & key, const std::string & val, int & dst) {
        try {
            size_t used = 0;
            int v = std::stoi(val, &used);
            if (used != val.size()) throw std::invalid_argument("trailing");
            dst = v;
        } catch (const std::exception &) {
            errors.push_back("key '" + key + "': '" + val + "' is not an integer");
        }
    };
    auto parse_u64 = [&](const std::string & key, const std::string & val, uint64_t & dst) {
        try {
            size_t used = 0;
            unsigned long long v = std::stoull(val, &used);
            if (used != val.size()) throw std::invalid_argument("trailing");
            dst = v;
        } catch (const std::exception &) {
            errors.push_back("key '" + key + "': '" + val + "' is not an unsigned integer");
        }
    };
    auto parse_double = [&](const std::string & key, const std::string & val, double & dst) {
        try {
            size_t used = 0;
            double v = std::stod(val, &used);
            if (used != val.size()) throw std::invalid_argument("trailing");
            dst = v;
        } catch (const std::exception &) {
            errors.push_back("key '" + key + "': '" + val + "' is not a number");
        }
    };
    auto parse_bool = [&](const std::string & key, const std::string & val, bool & dst) {
        std::string v = val;
        std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
        if (v == "true" || v == "1" || v == "yes" || v == "on") {
            dst = true;
        } else if (v == "false" || v == "0" || v == "no" || v == "off") {
            dst = false;
        } else {
            errors.push_back("key '" + key + "': '" + val + "' is not a boolean");
        }
    };

    for (const auto & [key, val] : kv) {
        if (key == "seed") parse_u64(key, val, rc.seed);
        else if (key == "task.content_vocab") parse_int(key, val, rc.task_content_vocab);
        else if (key == "task.target_vocab") parse_int(key, val, rc.task_target_vocab);
        else if (key == "task.styles") parse_int(key, val, rc.task_styles);
        else if (key == "task.speakers") parse_int(key, val, rc.task_speakers);
        else if (key == "task.style_dim") parse_int(key, val, rc.task_style_dim);
        else if (key == "task.frame_dim") parse_int(key, val, rc.task_frame_dim);
        else if (key == "task.content_min") parse_int(key, val, rc.task_content_min);
        else if (key == "task.content_max") parse_int(key, val, rc.task_content_max);
        else if (key == "task.ref_frames_min") parse_int(key, val, rc.task_ref_frames_min);
        else if (key == "task.ref_frames_max") parse_int(key, val, rc.task_ref_frames_max);
        else if (key == "task.ref_noise") parse_double(key, val, rc.task_ref_noise);
        else if (key == "task.style_gap") parse_double(key, val, rc.task_style_gap);
        else if (key == "task.frame_noise") parse_double(key, val, rc.task_frame_noise);
        else if (key == "task.train") parse_int(key, val, rc.task_train);
        else if (key == "task.val") parse_int(key, val, rc.task_val);
        else if (key == "task.test") parse_int(key, val, rc.task_test);
        else if (key == "task.flow_train") parse_int(key, val, rc.task_flow_train);
        else if (key == "task.flow_val") parse_int(key, val, rc.task_flow_val);
        else if (key == "task.pref_train") parse_int(key, val, rc.task_pref_train);
        else if (key == "task.pref_val") parse_int(key, val, rc.task_pref_val);
        else if (key == "ar.layers") parse_int(key, val, rc.ar_layers);
        else if (key == "ar.width") parse_int(key, val, rc.ar_width);
        else if (key == "ar.heads") parse_int(key, val, rc.ar_heads);
        else if (key == "ar.max_len") parse_int(key, val, rc.ar_max_len);
        else if (key == "ar.max_positions") parse_int(key, val, rc.ar_max_positions);
        else if (key == "ar.film") parse_bool(key, val, rc.ar_film);
        else if (key == "ar.xattn") parse_bool(key, val, rc.ar_xattn);
        else if (key == "ar.film_site1") parse_bool(key, val, rc.ar_film_site1);
        else if (key == "ar.film_site2") parse_bool(key, val, rc.ar_film_site2);
        else if (key == "ar.film_site3") parse_bool(key, val, rc.ar_film_site3);
        else if (key == "ar.lr") parse_double(key, val, rc.ar_lr);
        else if (key == "ar.steps") parse_int(key, val, rc.ar_steps);
        else if (key == "ar.batch") parse_int(key, val, rc.ar_batch);
        else if (key == "flow.width") parse_int(key, val, rc.flow_width);
        else if (key == "flow.layers") parse_int(key, val, rc.flow_layers);
        else if (key == "flow.spk_dim") parse_int(key, val, rc.flow_spk_dim);
        else if (key == "flow.spk") parse_bool(key, val, rc.flow_spk);
        else if (key == "flow.lr") parse_double(key, val, rc.flow_lr);
        else if (key == "flow.steps") parse_int(key, val, rc.flow_steps);
        else if (key == "flow.batch") parse_int(key, val, rc.flow_batch);
        else if (key == "flow.ode_steps") parse_int(key, val, rc.flow_ode_steps);
        else if (key == "dpo.lr") parse_double(key, val, rc.dpo_lr);
        else if (key == "dpo.beta") parse_double(key, val, rc.dpo_beta);
        else if (key == "dpo.steps") parse_int(key, val, rc.dpo_steps);
        else if (key == "dpo.batch") parse_int(key, val, rc.dpo_batch);
        else if (key == "dpo.score_norm") rc.dpo_score_norm = val;
        else if (key == "eval.gen_samples") parse_int(key, val, rc.eval_gen_samples);
        else if (key == "eval.temperature") parse_double(key, val, rc.eval_temperature);
        else if (key == "eval.flow_samples") parse_int(key, val, rc.eval_flow_samples);
        else if (key == "ablate.seeds") rc.ablate_seeds = val;
        else if (key == "ablate.ar_steps") parse_int(key, val, rc.ablate_ar_steps);
        else if (key == "ablate.flow_steps") parse_int(key, val, rc.ablate_flow_steps);
        else if (key == "ablate.dpo_steps") parse_int(key, val, rc.ablate_dpo_steps);
        else if (key == "pipeline.theta_conf") parse_double(key, val, rc.pipe_theta_conf);
        else if (key == "pipeline.min_mos") parse_double(key, val, rc.pipe_min_mos);
        else if (key == "pipeline.min_energy") parse_double(key, val, rc.pipe_min_energy);
        else if (key == "pipeline.min_pitch_stability") parse_double(key, val, rc.pipe_min_pitch);
        else if (key == "pipeline.max_noise_ratio") parse_double(key, val, rc.pipe_max_noise);
        else if (key == "pipeline.cap_ratio") parse_double(key, val, rc.pipe_cap_ratio);
        else if (key == "pipeline.bucket_seconds") parse_double(key, val, rc.pipe_bucket_s);
        else errors.push_back("unknown key '" + key + "'");
    }

    auto chk = [&](bool ok, const std::string & msg) {
        if (!ok) errors.push_back(msg);
    };
    chk(rc.task_styles == 4, "key 'task.styles': the synthetic task is defined for exactly 4 styles");
    chk(rc.task_content_vocab >= 2, "key 'task.content_vocab': must be >= 2");
    chk(rc.task_target_vocab >= 8, "key 'task.target_vocab': must be >= 8");
    chk(rc.task_speakers >= 2, "key 'task.speakers': must be >= 2");
    chk(rc.task_content_min >= 1 && rc.task_content_max >= rc.task_content_min,
        "keys 'task.content_min'/'task.content_max': need 1 <= min <= max");
    chk(rc.task_ref_frames_min >= 2 && rc.task_ref_frames_max >= rc.task_ref_frames_min,
        "keys 'task.ref_frames_min'/'task.ref_frames_max': need 2 <= min <= max");
    chk(rc.task_ref_noise >= 0.0, "key 'task.ref_noise': must be >= 0");
    chk(rc.task_style_gap > 0.0, "key 'task.style_gap': must be > 0");
    chk(rc.task_frame_noise >= 0.0, "key 'task.frame_noise': must be >= 0");
    chk(rc.task_train >= 1 && rc.task_val >= 1 && rc.task_test >= 1,
        "keys 'task.train'/'task.val'/'task.test': must be >= 1");
    chk(rc.ar_lr >= 0.0, "key 'ar.lr': must be >= 0");
    chk(rc.ar_steps >= 0, "key 'ar.steps': must be >= 0");
    chk(rc.ar_batch >= 1, "key 'ar.batch': must be >= 1");
    chk(rc.flow_lr >= 0.0, "key 'flow.lr': must be >= 0");
    chk(rc.flow_steps >= 0, "key 'flow.steps': must be >= 0");
    chk(rc.flow_batch >= 1, "key 'flow.batch': must be >= 1");
    chk(rc.flow_ode_steps >= 1, "key 'flow.ode_steps': must be >= 1");
    chk(rc.dpo_lr >= 0.0, "key 'dpo.lr': must be >= 0");
    chk(rc.dpo_beta > 0.0, "key 'dpo.beta': must be > 0");
    chk(rc.dpo_steps >= 0, "key 'dpo.steps': must be >= 0");
    chk(rc.dpo_batch >= 1, "key 'dpo.batch': must be >= 1");
    chk(rc.dpo_score_norm == "sum" || rc.dpo_score_norm == "mean",
        "key 'dpo.score_norm': must be 'sum' or 'mean'");
    chk(rc.eval_gen_samples >= 1, "key 'eval.gen_samples': must be >= 1");
    chk(rc.eval_temperature > 0.0, "key 'eval.temperature': must be > 0");
    chk(rc.eval_flow_samples >= 1, "key 'eval.flow_samples': must be >= 1");
    chk(rc.pipe_theta_conf >= 0.0 && rc.pipe_theta_conf <= 1.0,
        "key 'pipeline.theta_conf': must lie in [0, 1]");
    chk(rc.pipe_cap_ratio >= 1.0, "key 'pipeline.cap_ratio': must be >= 1");
    chk(rc.pipe_bucket_s > 0.0, "key 'pipeline.bucket_seconds': must be > 0");
    try {
        auto seeds = rc.ablate_seed_list();
        chk(!seeds.empty(), "key 'ablate.seeds': must list at least one seed");
    } catch (const std::exception &) {
        errors.push_back("key 'ablate.seeds': malformed seed list '" + rc.ablate_seeds + "'");
    }

    if (errors.empty()) {
        try {
            rc.ar_config().validate();
            rc.flow_config().validate();
        } catch (const ConfigError & e) {
            errors.push_back(e.what());
        }
    }

    if (!errors.empty()) {
        std::string msg = "invalid config:";
        for (const auto & e : errors) msg += "\n  " + e;
        throw ConfigError(msg);
    }
    return rc;
}

} // namespace s2v
