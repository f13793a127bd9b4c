#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "s2v/harness.hpp"

using s2v::json;

namespace {

std::vector<int> parse_ids(const std::string & text) {
    std::vector<int> out;
    std::istringstream is(text);
    std::string tok;
    while (is >> tok) {
        try {
            size_t used = 0;
            out.push_back(std::stoi(tok, &used));
            if (used != tok.size()) throw std::invalid_argument("trailing");
        } catch (const std::exception &) {
            throw s2v::InputError("bad token id '" + tok + "'");
        }
    }
    if (out.empty()) {
        throw s2v::InputError("expected a space-separated id list");
    }
    return out;
}

void print_ids(const std::vector<int> & ids) {
    for (size_t i = 0; i < ids.size(); ++i) {
        std::printf("%s%d", i ? " " : "", ids[i]);
    }
    std::printf("\n");
}

void print_frames(const s2v::Matrix & m) {
    for (int r = 0; r < m.rows; ++r) {
        for (int c = 0; c < m.cols; ++c) {
            std::printf("%s%.9g", c ? "," : "", (double) m.at(r, c));
        }
        std::printf("\n");
    }
}

} // namespace

int main(int argc, char ** argv) {
    CLI::App app{"two-stage style-conditioned token/frame generator harness"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir = "runs/out";
    uint64_t seed_override = 0;
    bool seed_given = false;
    app.add_option("--config", config_path, "key=value config file")->configurable(false);
    app.add_option("--out-dir", out_dir, "run directory (default runs/out)");
    app.add_option_function<uint64_t>(
        "--seed",
        [&](const uint64_t & v) {
            seed_override = v;
            seed_given = true;
        },
        "override the config seed");

    auto load_rc = [&]() {
        s2v::RunConfig rc = config_path.empty() ? s2v::RunConfig()
                                                : s2v::RunConfig::from_file(config_path);
        if (seed_given) rc.seed = seed_override;
        return rc;
    };

    auto * gen = app.add_subcommand("gen-data", "generate the synthetic datasets");
    auto * train_ar = app.add_subcommand("train-ar", "supervised training of the token model");
    auto * train_flow = app.add_subcommand("train-flow", "train the frame decoder");
    auto * train_dpo = app.add_subcommand("train-dpo", "preference fine-tuning of the token model");

    auto * generate = app.add_subcommand("generate", "decode token sequences from a checkpoint");
    std::string gen_ckpt, gen_content, gen_ref;
    double gen_temperature = 0.0;
    int gen_samples = 1;
    generate->add_option("--ckpt", gen_ckpt, "checkpoint path (defaults to dpo, then sft_ar)");
    generate->add_option("--content", gen_content, "space-separated content token ids")
        ->required();
    generate->add_option("--ref", gen_ref, "style reference frames csv");
    generate->add_option("--temperature", gen_temperature,
                         "sampling temperature, 0 for greedy (default 0)");
    generate->add_option("--samples", gen_samples, "number of sequences to emit (default 1)");

    auto * sample_flow = app.add_subcommand("sample-flow", "draw frames from the flow decoder");
    std::string sf_ckpt, sf_tokens;
    int sf_speaker = 0, sf_samples = 1, sf_ode_steps = 0;
    sample_flow->add_option("--ckpt", sf_ckpt, "checkpoint path (defaults to sft_flow)");
    sample_flow->add_option("--tokens", sf_tokens, "space-separated token ids")->required();
    sample_flow->add_option("--speaker", sf_speaker, "speaker id (default 0)");
    sample_flow->add_option("--samples", sf_samples, "number of samples (default 1)");
    sample_flow->add_option("--ode-steps", sf_ode_steps, "integration steps (default from config)");

    auto * pipeline = app.add_subcommand("pipeline", "run the manifest curation pipeline");
    std::string pipe_in, pipe_out, pipe_report;
    int pipe_demo = 0;
    pipeline->add_option("--in", pipe_in, "input manifest (jsonl)");
    pipeline->add_option("--out-manifest", pipe_out, "curated manifest path");
    pipeline->add_option("--report", pipe_report, "pipeline report path");
    pipeline->add_option("--demo", pipe_demo, "generate N demo records as input first");

    auto * gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    double gc_step = 1e-3;
    int gc_coords = 64;
    double gc_tol = 1e-3;
    gradcheck->add_option("--step", gc_step, "finite-difference step (default 1e-3)");
    gradcheck->add_option("--coords", gc_coords, "sampled coordinates per tensor (default 64)");
    gradcheck->add_option("--tol", gc_tol, "max relative error to accept (default 1e-3)");

    auto * ablate = app.add_subcommand("ablate", "run the conditioning ablation ladder");
    auto * eval = app.add_subcommand("eval", "evaluate a trained checkpoint");
    std::string eval_tag = "sft";
    eval->add_option("--ckpt", eval_tag, "which token model to score: sft or dpo (default sft)");

    bool verbose = false;
    app.add_flag("-v,--verbose", verbose, "progress output on stderr");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            s2v::RunConfig rc = load_rc();
            json rep = s2v::run_gen_data(rc, out_dir);
            std::printf("%s\n", rep.dump(2).c_str());
        } else if (train_ar->parsed()) {
            s2v::RunConfig rc = load_rc();
            json rep = s2v::run_stage("sft_ar", rc, out_dir, verbose);
            std::printf("%s\n", rep.dump(2).c_str());
        } else if (train_flow->parsed()) {
            s2v::RunConfig rc = load_rc();
            json rep = s2v::run_stage("sft_flow", rc, out_dir, verbose);
            std::printf("%s\n", rep.dump(2).c_str());
        } else if (train_dpo->parsed()) {
            s2v::RunConfig rc = load_rc();
            json rep = s2v::run_stage("dpo", rc, out_dir, verbose);
            std::printf("%s\n", rep.dump(2).c_str());
        } else if (generate->parsed()) {
            s2v::RunConfig rc = load_rc();
            std::string ckpt = gen_ckpt;
            if (ckpt.empty()) {
                ckpt = s2v::ckpt_path(out_dir, "dpo");
                if (!std::filesystem::exists(ckpt)) ckpt = s2v::ckpt_path(out_dir, "sft_ar");
            }
            s2v::detail::require_file(ckpt, "train a token model first");
            s2v::ArModel model(rc.ar_config());
            model.init(rc.seed);
            model.load(ckpt);
            s2v::Matrix frames(1, rc.task_style_dim);
            if (model.needs_style()) {
                if (gen_ref.empty()) {
                    throw s2v::InputError(
                        "this checkpoint conditions on style, pass --ref frames.csv");
                }
                frames = s2v::read_frames_csv(gen_ref);
            }
            std::vector<int> content = parse_ids(gen_content);
            s2v::Rng rng = s2v::Rng(rc.seed).split("cli_generate");
            for (int i = 0; i < gen_samples; ++i) {
                s2v::GenResult g = model.generate_from_frames(
                    content, frames,
                    gen_temperature > 0.0 ? s2v::DecodeMode::sample : s2v::DecodeMode::greedy,
                    gen_temperature, &rng);
                print_ids(g.tokens);
            }
        } else if (sample_flow->parsed()) {
            s2v::RunConfig rc = load_rc();
            std::string ckpt = sf_ckpt.empty() ? s2v::ckpt_path(out_dir, "sft_flow") : sf_ckpt;
            s2v::detail::require_file(ckpt, "train the flow decoder first");
            s2v::FlowModel model(rc.flow_config());
            model.init(rc.seed);
            model.load(ckpt);
            std::vector<int> tokens = parse_ids(sf_tokens);
            int steps = sf_ode_steps > 0 ? sf_ode_steps : rc.flow_ode_steps;
            s2v::Rng rng = s2v::Rng(rc.seed).split("cli_sample_flow");
            for (int i = 0; i < sf_samples; ++i) {
                if (i) std::printf("\n");
                print_frames(model.ode_sample(tokens, sf_speaker, steps, rng));
            }
        } else if (pipeline->parsed()) {
            s2v::RunConfig rc = load_rc();
            std::filesystem::create_directories(out_dir);
            std::string in_path = pipe_in;
            if (pipe_demo > 0) {
                if (in_path.empty()) in_path = out_dir + "/manifest_demo.jsonl";
                s2v::save_manifest(in_path, s2v::make_demo_manifest(pipe_demo, rc.seed));
            }
            if (in_path.empty()) {
                throw s2v::InputError("pipeline needs --in or --demo N");
            }
            std::string out_path = pipe_out.empty() ? out_dir + "/manifest_curated.jsonl"
                                                    : pipe_out;
            std::string report_file =
                pipe_report.empty() ? s2v::report_path(out_dir, "pipeline") : pipe_report;
            s2v::PipelineOptions opt;
            opt.theta_conf = rc.pipe_theta_conf;
            opt.thresholds.min_mos = rc.pipe_min_mos;
            opt.thresholds.min_energy = rc.pipe_min_energy;
            opt.thresholds.min_pitch_stability = rc.pipe_min_pitch;
            opt.thresholds.max_noise_ratio = rc.pipe_max_noise;
            opt.cap_ratio = rc.pipe_cap_ratio;
            opt.bucket_s = rc.pipe_bucket_s;
            opt.seed = rc.seed;
            json rep = s2v::run_pipeline_files(in_path, out_path, report_file, opt);
            std::printf("%s\n", rep.dump(2).c_str());
        } else if (gradcheck->parsed()) {
            s2v::GradCheckReport rep = s2v::run_gradcheck(gc_step, gc_coords);
            std::printf("%s\n", rep.to_json().dump(2).c_str());
            if (!rep.pass(gc_tol)) {
                throw s2v::NumericError("gradient check exceeded tolerance");
            }
        } else if (ablate->parsed()) {
            s2v::RunConfig rc = load_rc();
            json table = s2v::run_ablation(rc, out_dir, verbose);
            std::printf("%-20s %8s %12s %14s %12s\n", "variant", "em", "probe_acc", "spk_shift",
                        "fail_any");
            for (const auto & v : table.at("variants")) {
                auto cell = [&](const char * name) {
                    const auto & x = v.at("median").at(name);
                    return x.is_null() ? std::string("-")
                                       : std::to_string(x.get<double>()).substr(0, 8);
                };
                std::printf("%-20s %8s %12s %14s %12s\n",
                            v.at("label").get<std::string>().c_str(), cell("em").c_str(),
                            cell("style_probe_acc").c_str(),
                            cell("flow_speaker_shift_err").c_str(), cell("fail_any").c_str());
            }
        } else if (eval->parsed()) {
            s2v::RunConfig rc = load_rc();
            s2v::MetricsReport rep = s2v::evaluate(rc, out_dir, eval_tag);
            std::printf("%s\n", rep.to_json().dump(2).c_str());
        }
    } catch (const s2v::ConfigError & e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 2;
    } catch (const s2v::DependencyError & e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 3;
    } catch (const s2v::NumericError & e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 4;
    } catch (const std::exception & e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 1;
    }
    return 0;
}
