#include <doctest.h>

#include "flexdiff/flexdiff.h"

#include <cmath>
#include <cstring>
#include <string>
#include <vector>

namespace {

void collect(void* user, const char* line) { static_cast<std::vector<std::string>*>(user)->push_back(line); }

}  // namespace

TEST_CASE("status names, exit codes and version") {
    CHECK(std::string(flexdiff_version()) == "0.1.0");
    CHECK(std::string(flexdiff_status_name(FLEXDIFF_ERR_BATCH_LAYOUT)) == "batch_layout");
    CHECK(flexdiff_exit_code(FLEXDIFF_OK) == 0);
    CHECK(flexdiff_exit_code(FLEXDIFF_ERR_USAGE) == 2);
    CHECK(flexdiff_exit_code(FLEXDIFF_ERR_CONFIG) == 2);
    CHECK(flexdiff_exit_code(FLEXDIFF_ERR_DATA) == 3);
    CHECK(flexdiff_exit_code(FLEXDIFF_ERR_IO) == 3);
    CHECK(flexdiff_exit_code(FLEXDIFF_ERR_DIVERGENCE) == 4);
    int threads = 0;
    CHECK(flexdiff_apply_thread_limit(&threads) == FLEXDIFF_OK);
    CHECK(threads == 1);
}

TEST_CASE("config handles") {
    flexdiff_config* c = nullptr;
    REQUIRE(flexdiff_config_default(&c) == FLEXDIFF_OK);
    char hash[17];
    REQUIRE(flexdiff_config_hash(c, hash) == FLEXDIFF_OK);
    CHECK(std::strlen(hash) == 16);
    CHECK(flexdiff_config_set(c, "sim.n", "32") == FLEXDIFF_OK);
    char hash2[17];
    flexdiff_config_hash(c, hash2);
    CHECK(std::string(hash) != hash2);
    CHECK(flexdiff_config_set(c, "sim.bogus", "1") == FLEXDIFF_ERR_CONFIG);
    CHECK(std::string(flexdiff_last_error()).find("bogus") != std::string::npos);
    CHECK(flexdiff_config_set(c, "model.preset", "nope") == FLEXDIFF_ERR_CONFIG);

    char* text = nullptr;
    REQUIRE(flexdiff_config_text(c, &text) == FLEXDIFF_OK);
    flexdiff_config* d = nullptr;
    REQUIRE(flexdiff_config_parse(text, &d) == FLEXDIFF_OK);
    char hash3[17];
    flexdiff_config_hash(d, hash3);
    CHECK(std::string(hash2) == hash3);
    flexdiff_string_free(text);
    flexdiff_config_free(d);

    CHECK(flexdiff_config_parse("{", &d) == FLEXDIFF_ERR_CONFIG);
    CHECK(flexdiff_config_load("/nonexistent.json", &d) == FLEXDIFF_ERR_IO);
    CHECK(flexdiff_config_default(nullptr) == FLEXDIFF_ERR_USAGE);

    char* names = nullptr;
    REQUIRE(flexdiff_preset_names(&names) == FLEXDIFF_OK);
    CHECK(std::string(names).find("tiny") != std::string::npos);
    flexdiff_string_free(names);
    flexdiff_config_free(c);
    flexdiff_config_free(nullptr);
}

TEST_CASE("schedule and metrics") {
    double a = 0, s = 0;
    REQUIRE(flexdiff_alpha_sigma(0.5, &a, &s) == FLEXDIFF_OK);
    CHECK(a == doctest::Approx(std::sqrt(0.5)));
    CHECK(s == doctest::Approx(std::sqrt(0.5)));
    CHECK(flexdiff_alpha_sigma(1.5, &a, &s) == FLEXDIFF_ERR_DOMAIN);

    std::vector<float> p{1, 2, 3, 4}, t{1, 2, 3, 5};
    double r = 0, c = 0;
    REQUIRE(flexdiff_rfne(p.data(), t.data(), 4, &r) == FLEXDIFF_OK);
    CHECK(r == doctest::Approx(1.0 / std::sqrt(39.0)));
    REQUIRE(flexdiff_pcc(p.data(), p.data(), 4, &c) == FLEXDIFF_OK);
    CHECK(c == doctest::Approx(1.0));
    std::vector<float> zero(4, 0.0f);
    CHECK(flexdiff_rfne(p.data(), zero.data(), 4, &r) == FLEXDIFF_ERR_UNDEFINED_METRIC);
}

TEST_CASE("pipeline through the C API") {
    std::vector<std::string> lines;
    flexdiff_config* c = nullptr;
    REQUIRE(flexdiff_config_default(&c) == FLEXDIFF_OK);
    for (auto [k, v] : {std::pair{"sim.n", "32"}, {"sim.steps", "10"}, {"sim.save_every", "5"}, {"sim.viscosity", "0.01"},
                        {"data.test_snapshots", "4"}, {"train.steps", "2"}, {"train.batch_size", "2"},
                        {"train.patch", "16"}})
        REQUIRE(flexdiff_config_set(c, k, v) == FLEXDIFF_OK);

    REQUIRE(flexdiff_simulate(c, "capi_a.flexds", collect, &lines) == FLEXDIFF_OK);
    flexdiff_config_set(c, "sim.seed", "2");
    REQUIRE(flexdiff_simulate(c, "capi_b.flexds", nullptr, nullptr) == FLEXDIFF_OK);
    CHECK(!lines.empty());

    flexdiff_dataset* ds = nullptr;
    REQUIRE(flexdiff_dataset_read("capi_a.flexds", &ds) == FLEXDIFF_OK);
    size_t count = 0;
    int64_t ny = 0, nx = 0;
    double norm = 0;
    REQUIRE(flexdiff_dataset_info(ds, &count, &ny, &nx, &norm) == FLEXDIFF_OK);
    CHECK(count == 11);
    CHECK(ny == 32);
    CHECK(nx == 32);
    std::vector<float> snap(32 * 32);
    CHECK(flexdiff_dataset_snapshot(ds, 0, snap.data(), snap.size()) == FLEXDIFF_OK);
    CHECK(flexdiff_dataset_snapshot(ds, 0, snap.data(), 10) == FLEXDIFF_ERR_SHAPE);
    CHECK(flexdiff_dataset_snapshot(ds, 99, snap.data(), snap.size()) != FLEXDIFF_OK);
    flexdiff_dataset_free(ds);
    CHECK(flexdiff_dataset_read("missing.flexds", &ds) == FLEXDIFF_ERR_IO);

    const char* trajs[] = {"capi_a.flexds", "capi_b.flexds"};
    REQUIRE(flexdiff_make_dataset(c, trajs, 2, "capi_data", nullptr, nullptr) == FLEXDIFF_OK);
    REQUIRE(flexdiff_train(c, "capi_data", "capi_train", nullptr, 0, nullptr, nullptr) == FLEXDIFF_OK);
    REQUIRE(flexdiff_sample(c, "capi_train/checkpoint.bin", "capi_data", "capi_sample", FLEXDIFF_TASK_SR, 0, nullptr,
                            nullptr) == FLEXDIFF_OK);
    REQUIRE(flexdiff_evaluate(c, "capi_sample/pred.flexds", "capi_sample/truth.flexds", nullptr,
                              "capi_sample/baseline.flexds", "capi_eval", nullptr, nullptr) == FLEXDIFF_OK);
    CHECK(flexdiff_sample(c, "capi_train/checkpoint.bin", "capi_data", "capi_x", FLEXDIFF_TASK_FC, 0, nullptr,
                          nullptr) == FLEXDIFF_ERR_CONFIG);

    flexdiff_model* m = nullptr;
    REQUIRE(flexdiff_model_load("capi_train/checkpoint.bin", 1, &m) == FLEXDIFF_OK);
    int64_t params = 0;
    flexdiff_model_parameter_count(m, &params);
    CHECK(params > 50000);
    std::vector<float> z(16 * 16, 0.1f), ctx_grid(16 * 16, 0.2f), out(16 * 16), out2(16 * 16);
    const float* snaps[] = {ctx_grid.data()};
    flexdiff_context ctx{FLEXDIFF_TASK_SR, snaps, 1, 500.0, 1, 4};
    REQUIRE(flexdiff_model_velocity(m, 0.5, z.data(), 16, 16, &ctx, out.data()) == FLEXDIFF_OK);
    CHECK(std::isfinite(out[7]));
    REQUIRE(flexdiff_model_sample(m, &ctx, 16, 16, 2, 3, out.data()) == FLEXDIFF_OK);
    REQUIRE(flexdiff_model_sample(m, &ctx, 16, 16, 2, 3, out2.data()) == FLEXDIFF_OK);
    CHECK(out == out2);
    CHECK(flexdiff_model_velocity(m, 0.5, z.data(), 15, 16, &ctx, out.data()) == FLEXDIFF_ERR_SHAPE);
    flexdiff_context empty{FLEXDIFF_TASK_SR, nullptr, 0, 0.0, 1, 4};
    CHECK(flexdiff_model_velocity(m, 0.5, z.data(), 16, 16, &empty, out.data()) == FLEXDIFF_ERR_CONTEXT);
    flexdiff_model_free(m);
    CHECK(flexdiff_model_load("missing.bin", 1, &m) == FLEXDIFF_ERR_IO);
    flexdiff_config_free(c);
}
