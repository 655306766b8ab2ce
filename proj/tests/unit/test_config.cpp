#include <doctest.h>

#include "flexdiff/config.hpp"
#include "flexdiff/error.hpp"

#include <cstdio>
#include <fstream>

using namespace flexdiff;

namespace {

ErrorKind kind_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    return ErrorKind::Internal;
}

}  // namespace

TEST_CASE("flex and train configs round trip through text") {
    for (const auto& name : preset_names()) {
        FlexConfig c = preset(name);
        const auto text = flex_config_to_text(c);
        CHECK(flex_config_to_text(flex_config_from_text(text)) == text);
    }
    FlexConfig mt = preset("tiny");
    mt.tasks = {Task::SR, Task::FC};
    mt.skip_fusion = SkipFusion::Add;
    auto back = flex_config_from_text(flex_config_to_text(mt));
    CHECK(back.tasks == mt.tasks);
    CHECK(back.skip_fusion == SkipFusion::Add);

    TrainConfig t;
    t.optimizer = OptimizerKind::AdamW;
    t.grad_mode = GradMode::Summed;
    t.seed = 0xffffffffffffULL;
    t.base_lr = 3.7e-4;
    const auto tt = train_config_to_text(t);
    CHECK(train_config_to_text(train_config_from_text(tt)) == tt);
    CHECK(train_config_from_text(tt).seed == t.seed);
}

TEST_CASE("run config canonical text") {
    RunConfig c;
    const auto text = run_config_to_text(c);
    CHECK(run_config_to_text(run_config_from_text(text)) == text);
    CHECK(text.find("\"schedule\"") < text.find("\"sim\""));
    CHECK(run_config_to_text(run_config_from_text("{}")) == text);

    auto partial = run_config_from_text(R"({"sim": {"viscosity": 0.01}, "model": {"preset": "desk", "vit_depth": 2}})");
    CHECK(partial.sim.viscosity == 0.01);
    CHECK(partial.sim.n == c.sim.n);
    CHECK(partial.model.preset == "desk");
    CHECK(partial.model.flex.vit_depth == 2);
    CHECK(partial.model.flex.enc_channels == preset("desk").enc_channels);
}

TEST_CASE("run config errors") {
    CHECK(kind_of([] { run_config_from_text("{not json"); }) == ErrorKind::Config);
    CHECK(kind_of([] { run_config_from_text(R"({"sim": {"viscosty": 1}})"); }) == ErrorKind::Config);
    CHECK(kind_of([] { run_config_from_text(R"({"bogus": {}})"); }) == ErrorKind::Config);
    CHECK(kind_of([] { run_config_from_text(R"({"sim": {"n": "big"}})"); }) == ErrorKind::Config);
    CHECK(kind_of([] { run_config_from_text(R"({"model": {"preset": "huge"}})"); }) == ErrorKind::Config);
    CHECK(kind_of([] { run_config_from_text(R"({"train": {"base_lr": -1}})"); }) == ErrorKind::Config);
    CHECK(kind_of([] { run_config_from_text(R"({"schedule": {"kind": "linear"}})"); }) == ErrorKind::Config);
    CHECK(kind_of([] { run_config_from_text(R"({"sample": {"grid": "random"}})"); }) == ErrorKind::Config);
    CHECK(kind_of([] { load_run_config("/nonexistent/cfg.json"); }) == ErrorKind::Io);
}

TEST_CASE("overrides") {
    RunConfig c;
    auto a = apply_override(c, "sim.viscosity", "0.02");
    CHECK(a.sim.viscosity == 0.02);
    auto b = apply_override(c, "train.optimizer", "adamw");
    CHECK(b.train.optimizer == OptimizerKind::AdamW);
    auto d = apply_override(apply_override(c, "model.vit_depth", "4"), "model.preset", "desk");
    CHECK(d.model.flex.vit_depth == preset("desk").vit_depth);
    auto e = apply_override(c, "model.tasks", R"(["sr","fc"])");
    CHECK(e.model.flex.tasks.size() == 2);
    CHECK(kind_of([&] { apply_override(c, "viscosity", "1"); }) == ErrorKind::Config);
    CHECK(kind_of([&] { apply_override(c, "sim.", "1"); }) == ErrorKind::Config);
    CHECK(kind_of([&] { apply_override(c, "nosuch.key", "1"); }) == ErrorKind::Config);
    CHECK(kind_of([&] { apply_override(c, "sim.nokey", "1"); }) == ErrorKind::Config);
}

TEST_CASE("config file load and hash") {
    {
        std::ofstream out("config_test.json");
        out << R"({"data": {"factor": 2}})";
    }
    CHECK(load_run_config("config_test.json").data.factor == 2);
    std::remove("config_test.json");

    // FNV-1a 64 reference values.
    CHECK(config_hash("") == "cbf29ce484222325");
    CHECK(config_hash("a") == "af63dc4c8601ec8c");
    CHECK(config_hash("foobar") == "85944171f73967e8");
    RunConfig c;
    CHECK(config_hash(run_config_to_text(c)) != config_hash(run_config_to_text(apply_override(c, "sim.seed", "2"))));
    CHECK(time_grid_from_string(to_string(TimeGrid::UniformLogSnr)) == TimeGrid::UniformLogSnr);
    CHECK_THROWS_AS(time_grid_from_string("x"), Error);
}
