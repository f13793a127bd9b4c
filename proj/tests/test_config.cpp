#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>

#include "s2v/config.hpp"

using namespace s2v;
namespace fs = std::filesystem;

namespace {

std::string error_text(const std::function<void()> & fn) {
    try {
        fn();
    } catch (const ConfigError & e) {
        return e.what();
    }
    FAIL("expected a config error");
    return "";
}

} // namespace

TEST_CASE("an empty map yields the documented defaults") {
    RunConfig rc = RunConfig::from_map({});
    CHECK(rc.seed == 1);
    CHECK(rc.task_styles == 4);
    CHECK(rc.task_target_vocab == 64);
    CHECK(rc.task_speakers == 8);
    CHECK(rc.ar_lr == 2e-5);
    CHECK(rc.ar_steps == 10000);
    CHECK(rc.flow_lr == 7e-6);
    CHECK(rc.flow_steps == 20000);
    CHECK(rc.flow_ode_steps == 32);
    CHECK(rc.dpo_lr == 1e-6);
    CHECK(rc.dpo_steps == 400);
    CHECK(rc.dpo_score_norm == "sum");
    CHECK(rc.eval_gen_samples == 500);
    CHECK(rc.eval_flow_samples == 256);
    CHECK(rc.pipe_theta_conf == 0.8);
    CHECK(rc.pipe_cap_ratio == 3.0);
    CHECK(rc.pipe_bucket_s == 0.5);
    CHECK(rc.ablate_seed_list() == std::vector<uint64_t>({1, 2, 3}));
    REQUIRE_NOTHROW(rc.ar_config().validate());
    REQUIRE_NOTHROW(rc.flow_config().validate());
}

TEST_CASE("config text handles comments, blanks, and spacing") {
    auto kv = parse_config_text("# a full comment line\n"
                                "\n"
                                "  seed = 9   # trailing comment\n"
                                "ar.width=16\n"
                                "  flow.lr =  1e-4  \n");
    REQUIRE(kv.size() == 3);
    CHECK(kv.at("seed") == "9");
    CHECK(kv.at("ar.width") == "16");
    CHECK(kv.at("flow.lr") == "1e-4");

    RunConfig rc = RunConfig::from_map(kv);
    CHECK(rc.seed == 9);
    CHECK(rc.ar_width == 16);
    CHECK(rc.flow_lr == 1e-4);
}

TEST_CASE("every malformed line is reported at once") {
    std::string msg = error_text([] {
        parse_config_text("justwords\n"
                          "= 5\n"
                          "seed = 1\n"
                          "seed = 2\n");
    });
    CHECK(msg.find("malformed config:") != std::string::npos);
    CHECK(msg.find("line 1") != std::string::npos);
    CHECK(msg.find("empty key") != std::string::npos);
    CHECK(msg.find("duplicate key 'seed'") != std::string::npos);
    int complaints = 0;
    for (size_t at = msg.find("\n  "); at != std::string::npos; at = msg.find("\n  ", at + 1)) {
        ++complaints;
    }
    CHECK(complaints == 3);
}

TEST_CASE("bad values and unknown keys are collected together") {
    std::map<std::string, std::string> kv = {{"ar.lr", "fast"},
                                             {"ar.steps", "12.5"},
                                             {"ar.film", "perhaps"},
                                             {"made.up", "1"},
                                             {"task.styles", "3"}};
    std::string msg = error_text([&] { RunConfig::from_map(kv); });
    CHECK(msg.find("invalid config:") != std::string::npos);
    CHECK(msg.find("'ar.lr'") != std::string::npos);
    CHECK(msg.find("'ar.steps'") != std::string::npos);
    CHECK(msg.find("'ar.film'") != std::string::npos);
    CHECK(msg.find("unknown key 'made.up'") != std::string::npos);
    CHECK(msg.find("exactly 4 styles") != std::string::npos);
}

TEST_CASE("numeric values reject trailing characters") {
    CHECK(error_text([] { RunConfig::from_map({{"ar.steps", "100x"}}); })
              .find("not an integer") != std::string::npos);
    CHECK(error_text([] { RunConfig::from_map({{"flow.lr", "1.5.2"}}); })
              .find("not a number") != std::string::npos);
    CHECK(error_text([] { RunConfig::from_map({{"seed", "12 "}}); })
              .find("not an unsigned integer") != std::string::npos);
    RunConfig ok = RunConfig::from_map({{"flow.lr", "2.5e-5"}, {"ar.steps", "250"}});
    CHECK(ok.flow_lr == 2.5e-5);
    CHECK(ok.ar_steps == 250);
}

TEST_CASE("booleans accept the usual spellings") {
    for (const char * word : {"true", "1", "yes", "on", "TRUE", "Yes"}) {
        CHECK(RunConfig::from_map({{"ar.film", word}}).ar_film);
    }
    for (const char * word : {"false", "0", "no", "off", "False"}) {
        CHECK_FALSE(RunConfig::from_map({{"ar.film", word}}).ar_film);
    }
    CHECK(error_text([] { RunConfig::from_map({{"ar.film", "2"}}); }).find("not a boolean") !=
          std::string::npos);
}

TEST_CASE("range checks catch out of bounds values") {
    CHECK(error_text([] { RunConfig::from_map({{"eval.temperature", "0"}}); })
              .find("eval.temperature") != std::string::npos);
    CHECK(error_text([] { RunConfig::from_map({{"pipeline.theta_conf", "1.5"}}); })
              .find("pipeline.theta_conf") != std::string::npos);
    CHECK(error_text([] { RunConfig::from_map({{"pipeline.cap_ratio", "0.5"}}); })
              .find("pipeline.cap_ratio") != std::string::npos);
    CHECK(error_text([] { RunConfig::from_map({{"dpo.beta", "0"}}); }).find("dpo.beta") !=
          std::string::npos);
    CHECK(error_text([] { RunConfig::from_map({{"dpo.score_norm", "median"}}); })
              .find("dpo.score_norm") != std::string::npos);
}

TEST_CASE("seed lists parse and validate") {
    RunConfig rc = RunConfig::from_map({{"ablate.seeds", "7, 9 ,11"}});
    CHECK(rc.ablate_seed_list() == std::vector<uint64_t>({7, 9, 11}));
    CHECK(error_text([] { RunConfig::from_map({{"ablate.seeds", ","}}); })
              .find("at least one seed") != std::string::npos);
    CHECK(error_text([] { RunConfig::from_map({{"ablate.seeds", "a,b"}}); })
              .find("malformed seed list") != std::string::npos);
}

TEST_CASE("model shape problems surface as config errors") {
    CHECK(error_text([] { RunConfig::from_map({{"ar.width", "7"}, {"ar.heads", "2"}}); })
              .find("invalid config:") != std::string::npos);
    CHECK(error_text([] { RunConfig::from_map({{"flow.width", "5"}}); })
              .find("invalid config:") != std::string::npos);
}

TEST_CASE("config files load and report open failures") {
    fs::path dir = fs::temp_directory_path() / "s2v_test_config";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream((dir / "run.cfg").string()) << "seed = 17\nar.steps = 42\n";
    RunConfig rc = RunConfig::from_file((dir / "run.cfg").string());
    CHECK(rc.seed == 17);
    CHECK(rc.ar_steps == 42);
    REQUIRE_THROWS_AS(RunConfig::from_file((dir / "nope.cfg").string()), ConfigError);
}
