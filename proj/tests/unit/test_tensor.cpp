#include <doctest.h>

#include "flexdiff/context.hpp"
#include "flexdiff/error.hpp"
#include "flexdiff/tensor.hpp"

#include <cmath>
#include <limits>

using namespace flexdiff;

TEST_CASE("tensor construction and reshape") {
    Tensor t({2, 3}, 1.5f);
    CHECK(t.numel() == 6);
    CHECK(t.rank() == 2);
    CHECK(t[5] == 1.5f);
    auto r = t.reshaped({3, 2});
    CHECK(r.dim(0) == 3);
    CHECK_THROWS_AS(t.reshaped({4, 2}), Error);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>(3)), Error);
    CHECK(shape_str({2, 3}) == "[2,3]");
    CHECK(shape_numel({2, 3, 4}) == 24);
}

TEST_CASE("finite check and shape check") {
    Tensor t({4});
    CHECK(t.all_finite());
    t[2] = std::numeric_limits<float>::quiet_NaN();
    CHECK_FALSE(t.all_finite());
    CHECK_THROWS_AS(check_same_shape(Tensor({2}), Tensor({3}), "x"), Error);
    CHECK(max_abs_diff(Tensor({2}, {1, 2}), Tensor({2}, {1, 4})) == 2.0f);
}

TEST_CASE("task names round trip") {
    CHECK(task_from_string(to_string(Task::SR)) == Task::SR);
    CHECK(task_from_string(to_string(Task::FC)) == Task::FC);
    CHECK_THROWS_AS(task_from_string("xx"), Error);
}

TEST_CASE("conditioning context invariants") {
    ConditioningContext sr;
    sr.task = Task::SR;
    sr.upsample_factor = 4;
    CHECK_THROWS_AS(sr.validate(), Error);
    sr.snapshots.push_back(Tensor({8, 8}));
    CHECK_NOTHROW(sr.validate());
    sr.upsample_factor = 0;
    CHECK_THROWS_AS(sr.validate(), Error);

    ConditioningContext fc;
    fc.task = Task::FC;
    fc.snapshots = {Tensor({8, 8})};
    CHECK_THROWS_AS(fc.validate(), Error);
    fc.snapshots.push_back(Tensor({8, 8}));
    CHECK_NOTHROW(fc.validate());
    fc.step_index = 0;
    CHECK_THROWS_AS(fc.validate(), Error);
    fc.step_index = 1;
    fc.re_tag = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(fc.validate(), Error);
}

TEST_CASE("context vector encoding") {
    ConditioningContext sr;
    sr.task = Task::SR;
    sr.snapshots.push_back(Tensor({8, 8}));
    sr.upsample_factor = 8;
    sr.re_tag = 1000.0;
    auto v = context_vector(sr);
    CHECK(v[0] == doctest::Approx(std::log(1000.0) / 10));
    CHECK(v[1] == 0.0f);
    CHECK(v[2] == doctest::Approx(1.0));

    ConditioningContext fc;
    fc.task = Task::FC;
    fc.snapshots = {Tensor({8, 8}), Tensor({8, 8})};
    fc.step_index = 5;
    auto w = context_vector(fc);
    CHECK(w[1] == doctest::Approx(5.0 / kMaxForecastStep));
    CHECK(w[2] == 0.0f);
}
