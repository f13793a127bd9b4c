#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "s2v/ar_model.hpp"
#include "s2v/optim.hpp"
#include "s2v/rng.hpp"
#include "support/oracles.hpp"

using namespace s2v;

namespace {

ArConfig tiny_cfg() {
    ArConfig cfg;
    cfg.layers = 2;
    cfg.width = 8;
    cfg.heads = 2;
    cfg.content_vocab = 6;
    cfg.target_vocab = 16;
    cfg.style_dim = 4;
    cfg.max_len = 12;
    cfg.max_positions = 24;
    return cfg;
}

Matrix random_frames(int rows, int cols, uint64_t seed) {
    Matrix f(rows, cols);
    Rng(seed).fill_gaussian(f, 0.8);
    return f;
}

void zero_params(ParamStore & store) {
    for (const auto & name : store.names()) {
        Matrix & m = store.value(name);
        std::fill(m.data.begin(), m.data.end(), 0.0f);
    }
}

Matrix logits_for(ArModel & model, const std::vector<int> & content,
                  const std::vector<int> & prefix, const Matrix * frames) {
    Tape t(false);
    ArModel::Bound b = model.bind(t);
    int es = frames ? model.encode_style_node(t, b, *frames) : -1;
    return t.val(model.forward(t, b, content, prefix, es));
}

} // namespace

TEST_CASE("ar config validation rejects bad shapes") {
    ArConfig cfg = tiny_cfg();
    cfg.layers = -1;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_cfg();
    cfg.width = 7;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_cfg();
    cfg.heads = 3;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_cfg();
    cfg.max_positions = cfg.max_len;
    REQUIRE_THROWS_AS(cfg.validate(), ConfigError);
    REQUIRE_NOTHROW(tiny_cfg().validate());
}

TEST_CASE("ar forward input validation") {
    ArModel model(tiny_cfg());
    model.init(1);
    Matrix frames = random_frames(3, 4, 2);
    Tape t(false);
    ArModel::Bound b = model.bind(t);
    int es = model.encode_style_node(t, b, frames);
    REQUIRE_THROWS_AS(model.forward(t, b, {}, {1}, es), InputError);
    REQUIRE_THROWS_AS(model.forward(t, b, {0, 6}, {1}, es), InputError);
    REQUIRE_THROWS_AS(model.forward(t, b, {0, 1}, {16}, es), InputError);
    REQUIRE_THROWS_AS(model.forward(t, b, {0, 1}, std::vector<int>(30, 1), es), InputError);
    REQUIRE_THROWS_AS(model.forward(t, b, {0, 1}, {1}, -1), ContractError);
}

TEST_CASE("zero-depth model reduces to embeddings plus output head") {
    ArConfig cfg = tiny_cfg();
    cfg.layers = 0;
    cfg.film_on = false;
    cfg.xattn_on = false;
    ArModel model(cfg);
    model.init(3);
    std::vector<int> content = {1, 4, 2};
    std::vector<int> prefix = {7, 0, 12};
    Matrix logits = logits_for(model, content, prefix, nullptr);
    REQUIRE(logits.rows == 4);
    REQUIRE(logits.cols == cfg.target_vocab);

    const Matrix & te = model.params.value("ar.target_emb");
    const Matrix & se = model.params.value("ar.sep_emb");
    const Matrix & pe = model.params.value("ar.pos_emb");
    const Matrix & hw = model.params.value("ar.head.w");
    const Matrix & hb = model.params.value("ar.head.b");
    const int Tc = (int) content.size();
    for (int i = 0; i < logits.rows; ++i) {
        std::vector<double> h((size_t) cfg.width);
        const float * emb = i == 0 ? se.row(0) : te.row(prefix[(size_t) i - 1]);
        for (int j = 0; j < cfg.width; ++j) {
            h[(size_t) j] = (double) emb[j] + (double) pe.at(Tc + i, j);
        }
        auto row = oracle::matmul(h, std::vector<double>(hw.data.begin(), hw.data.end()), 1,
                                  cfg.width, cfg.target_vocab);
        for (int j = 0; j < cfg.target_vocab; ++j) {
            REQUIRE_THAT((double) logits.at(i, j),
                         Catch::Matchers::WithinAbs(row[(size_t) j] + (double) hb.at(0, j), 1e-5));
        }
    }
}

TEST_CASE("perturbing a prefix token never changes earlier logit rows") {
    ArModel model(tiny_cfg());
    model.init(5);
    Matrix frames = random_frames(3, 4, 6);
    std::vector<int> content = {1, 4, 2};
    std::vector<int> prefix = {7, 0, 12, 3, 9};
    Matrix base = logits_for(model, content, prefix, &frames);
    REQUIRE(base.rows == 6);
    for (size_t j = 0; j < prefix.size(); ++j) {
        for (int v = 0; v < model.cfg.target_vocab; ++v) {
            if (v == prefix[j]) continue;
            std::vector<int> bumped = prefix;
            bumped[j] = v;
            Matrix out = logits_for(model, content, bumped, &frames);
            for (int i = 0; i <= (int) j; ++i) {
                for (int c = 0; c < base.cols; ++c) {
                    REQUIRE(out.at(i, c) == base.at(i, c));
                }
            }
        }
    }
}

TEST_CASE("zeroed modulation heads and output projections reproduce the baseline bit-exactly") {
    ArConfig cond_cfg = tiny_cfg();
    ArConfig base_cfg = tiny_cfg();
    base_cfg.film_on = false;
    base_cfg.xattn_on = false;
    ArModel cond(cond_cfg), base(base_cfg);
    cond.init(11);
    base.init(11);

    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
        int tc = 1 + rng.uniform_int(3);
        int tp = rng.uniform_int(6);
        std::vector<int> content((size_t) tc), prefix((size_t) tp);
        for (int & c : content) c = rng.uniform_int(cond_cfg.content_vocab);
        for (int & p : prefix) p = rng.uniform_int(cond_cfg.target_vocab);
        Matrix frames(1 + rng.uniform_int(4), cond_cfg.style_dim);
        rng.fill_gaussian(frames, 1.1);

        Matrix a = logits_for(cond, content, prefix, &frames);
        Matrix b = logits_for(base, content, prefix, nullptr);
        REQUIRE(a.rows == b.rows);
        for (size_t i = 0; i < a.data.size(); ++i) {
            REQUIRE(a.data[i] == b.data[i]);
        }
    }
}

TEST_CASE("uniform logits give ln-vocab nll") {
    ArConfig cfg = tiny_cfg();
    cfg.target_vocab = 64;
    ArModel model(cfg);
    model.init(7);
    zero_params(model.params);
    ArExample ex;
    ex.content = {0, 3};
    ex.target = {5, 40, 63};
    ex.style_frames = random_frames(2, 4, 8);
    double nll = model.eval_nll({ex});
    REQUIRE_THAT(nll, Catch::Matchers::WithinAbs(std::log(64.0), 1e-5));
}

TEST_CASE("model nll matches per-row logsumexp recomputation") {
    ArModel model(tiny_cfg());
    model.init(9);
    ArExample ex;
    ex.content = {2, 0, 5};
    ex.target = {1, 14, 7, 15};
    ex.style_frames = random_frames(4, 4, 10);
    Matrix logits;
    double nll;
    {
        Tape t(false);
        ArModel::Bound b = model.bind(t);
        int es = model.encode_style_node(t, b, ex.style_frames);
        std::vector<int> prefix(ex.target.begin(), ex.target.end() - 1);
        int lg = model.forward(t, b, ex.content, prefix, es);
        logits = t.val(lg);
        nll = t.scalar(model.nll(t, b, ex, es));
    }
    double want = 0.0;
    for (size_t i = 0; i < ex.target.size(); ++i) {
        std::vector<double> row(logits.row((int) i), logits.row((int) i) + logits.cols);
        want += oracle::logsumexp(row) - row[(size_t) ex.target[i]];
    }
    want /= (double) ex.target.size();
    REQUIRE_THAT(nll, Catch::Matchers::WithinAbs(want, 1e-5));
}

TEST_CASE("sft step with zero learning rate leaves parameters bitwise unchanged") {
    ArModel model(tiny_cfg());
    model.init(13);
    std::vector<Matrix> before;
    for (const auto & name : model.params.names()) before.push_back(model.params.value(name));
    ArExample ex;
    ex.content = {1, 2};
    ex.target = {3, 15};
    ex.style_frames = random_frames(2, 4, 14);
    AdamOptimizer opt(model.params);
    model.sft_step({ex}, opt, 0.0);
    auto names = model.params.names();
    for (size_t n = 0; n < names.size(); ++n) {
        const Matrix & after = model.params.value(names[n]);
        for (size_t i = 0; i < after.data.size(); ++i) {
            REQUIRE(after.data[i] == before[n].data[i]);
        }
    }
}

TEST_CASE("one sft step on one example lowers that example's nll") {
    ArModel model(tiny_cfg());
    model.init(15);
    ArExample ex;
    ex.content = {4, 1, 3};
    ex.target = {9, 2, 15};
    ex.style_frames = random_frames(3, 4, 16);
    double before = model.eval_nll({ex});
    AdamOptimizer opt(model.params);
    model.sft_step({ex}, opt, 1e-3);
    double after = model.eval_nll({ex});
    REQUIRE(after < before);
}

TEST_CASE("identical seeds and batches give bitwise identical updates") {
    auto run = [] {
        ArModel model(tiny_cfg());
        model.init(17);
        AdamOptimizer opt(model.params);
        ArExample ex;
        ex.content = {0, 5};
        ex.target = {11, 4, 15};
        ex.style_frames = random_frames(2, 4, 18);
        for (int i = 0; i < 3; ++i) model.sft_step({ex}, opt, 1e-3);
        return model;
    };
    ArModel a = run();
    ArModel b = run();
    for (const auto & name : a.params.names()) {
        const Matrix & ma = a.params.value(name);
        const Matrix & mb = b.params.value(name);
        for (size_t i = 0; i < ma.data.size(); ++i) {
            REQUIRE(ma.data[i] == mb.data[i]);
        }
    }
}

TEST_CASE("non-finite loss aborts the sft step and names the batch entry") {
    ArModel model(tiny_cfg());
    model.init(19);
    model.params.value("ar.target_emb").at(2, 0) = std::numeric_limits<float>::quiet_NaN();
    ArExample ex;
    ex.content = {1};
    ex.target = {2, 15};
    ex.style_frames = random_frames(2, 4, 20);
    AdamOptimizer opt(model.params);
    REQUIRE_THROWS_AS(model.sft_step({ex}, opt, 1e-3), NumericError);
    try {
        model.sft_step({ex}, opt, 1e-3);
    } catch (const NumericError & e) {
        REQUIRE(std::string(e.what()).find("[0]") != std::string::npos);
    }
}

TEST_CASE("greedy decoding is deterministic and equals near-zero temperature sampling") {
    ArModel model(tiny_cfg());
    model.init(21);
    std::vector<int> content = {2, 4, 0};
    Matrix frames = random_frames(3, 4, 22);
    GenResult a = model.generate_from_frames(content, frames, DecodeMode::greedy, 0.0);
    GenResult b = model.generate_from_frames(content, frames, DecodeMode::greedy, 0.0);
    Rng rng(23);
    GenResult c = model.generate_from_frames(content, frames, DecodeMode::sample, 1e-12, &rng);
    REQUIRE(a.tokens == b.tokens);
    REQUIRE(a.truncated == b.truncated);
    REQUIRE(a.tokens == c.tokens);
}

TEST_CASE("generation stops at the terminator and keeps it") {
    ArConfig cfg = tiny_cfg();
    ArModel model(cfg);
    model.init(25);
    zero_params(model.params);
    model.params.value("ar.head.b").at(0, cfg.terminator()) = 5.0f;
    GenResult g = model.generate_from_frames({1, 2}, random_frames(2, 4, 26), DecodeMode::greedy,
                                             0.0);
    REQUIRE(g.tokens == std::vector<int>{cfg.terminator()});
    REQUIRE_FALSE(g.truncated);
}

TEST_CASE("generation without a terminator is cut at max_len and flagged") {
    ArConfig cfg = tiny_cfg();
    ArModel model(cfg);
    model.init(27);
    zero_params(model.params);
    model.params.value("ar.head.b").at(0, 3) = 5.0f;
    GenResult g = model.generate_from_frames({1}, random_frames(2, 4, 28), DecodeMode::greedy, 0.0);
    REQUIRE((int) g.tokens.size() == cfg.max_len);
    REQUIRE(g.truncated);
    for (int tok : g.tokens) REQUIRE(tok == 3);
}

TEST_CASE("sampling without an rng is rejected") {
    ArModel model(tiny_cfg());
    model.init(29);
    REQUIRE_THROWS_AS(model.generate_from_frames({1}, random_frames(2, 4, 30), DecodeMode::sample,
                                                 1.0),
                      InputError);
}

TEST_CASE("generate validates the style embedding width") {
    ArModel model(tiny_cfg());
    model.init(31);
    Matrix bad(2, 5);
    REQUIRE_THROWS_AS(model.generate({1}, bad, DecodeMode::greedy, 0.0), InputError);
}

TEST_CASE("sampled decoding with a shared rng stream reproduces itself") {
    ArModel model(tiny_cfg());
    model.init(33);
    std::vector<int> content = {3, 1};
    Matrix frames = random_frames(2, 4, 34);
    Rng r1(35), r2(35);
    GenResult a = model.generate_from_frames(content, frames, DecodeMode::sample, 1.0, &r1);
    GenResult b = model.generate_from_frames(content, frames, DecodeMode::sample, 1.0, &r2);
    REQUIRE(a.tokens == b.tokens);
    REQUIRE(a.truncated == b.truncated);
}
