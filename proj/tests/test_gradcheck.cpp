#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gradcheck_suite.hpp"

// Analytic gradients vs central finite differences (double, h = 1e-4),
// five seeds per op and per layer.

TEST_CASE("tensor op gradients match finite differences") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        for (const auto& c : emtest::run_op_gradchecks(seed)) {
            INFO("op=", c.name, " seed=", seed, " max_rel_error=", c.max_rel_error);
            CHECK(c.max_rel_error < 1e-4);
        }
    }
}

TEST_CASE("layer gradients match finite differences") {
    for (std::uint64_t seed = 11; seed <= 15; ++seed) {
        for (const auto& c : emtest::run_layer_gradchecks(seed)) {
            INFO("layer=", c.name, " seed=", seed, " max_rel_error=", c.max_rel_error);
            CHECK(c.max_rel_error < 1e-4);
        }
    }
}
