// Noise schedule construction and the forward/reverse diffusion steps,
// checked against independently coded closed forms in double precision.
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "usketch/rng.hpp"
#include "usketch/schedule.hpp"

using namespace usketch;

namespace {

using T = Tensor<double>;

T random_tensor(int c, int h, int w, Rng& rng) {
    T t(c, h, w);
    for (auto& x : t.v) x = rng.normal();
    return t;
}

// Running-product oracle for a linear beta ramp, kept separate from the
// library implementation.
std::vector<double> linear_alpha_bars(int T_, double b0, double b1) {
    std::vector<double> out(T_);
    double prod = 1.0;
    for (int i = 0; i < T_; ++i) {
        const double beta = T_ == 1 ? b0 : b0 + (b1 - b0) * i / (T_ - 1.0);
        prod *= 1.0 - beta;
        out[i] = prod;
    }
    return out;
}

}  // namespace

TEST_CASE("single-step linear schedule is the degenerate ramp", "[schedule]") {
    const auto s = make_schedule<double>(1, ScheduleKind::linear, 0.5, 0.5);
    REQUIRE(s.T == 1);
    REQUIRE(s.betas.size() == 1);
    REQUIRE(s.betas[0] == 0.5);
    REQUIRE(s.alpha_bars.size() == 1);
    REQUIRE(s.alpha_bars[0] == 0.5);
    REQUIRE(s.alpha_bar(0) == 1.0);  // the clean end of the chain
    REQUIRE(s.alpha_bar(1) == 0.5);
}

TEST_CASE("two-step linear schedule matches the hand-computed product", "[schedule]") {
    // betas = [0.1, 0.2]; alpha_bars = [0.9, 0.9 * 0.8].
    const auto s = make_schedule<double>(2, ScheduleKind::linear, 0.1, 0.2);
    REQUIRE(s.betas[0] == Catch::Approx(0.1).epsilon(1e-15));
    REQUIRE(s.betas[1] == Catch::Approx(0.2).epsilon(1e-15));
    REQUIRE(s.alpha_bars[0] == Catch::Approx(0.9).epsilon(1e-15));
    REQUIRE(s.alpha_bars[1] == Catch::Approx(0.72).epsilon(1e-15));
}

TEST_CASE("thousand-step linear schedule matches an independent loop", "[schedule]") {
    const auto s = make_schedule<double>(1000, ScheduleKind::linear, 1e-4, 0.02);
    const auto oracle = linear_alpha_bars(1000, 1e-4, 0.02);
    REQUIRE(s.alpha_bars.size() == 1000);
    for (int i = 0; i < 1000; ++i) {
        REQUIRE(s.alpha_bars[i] == Catch::Approx(oracle[i]).epsilon(1e-12));
    }
    // Strictly decreasing, and essentially fully noised by the end.
    for (int i = 1; i < 1000; ++i) REQUIRE(s.alpha_bars[i] < s.alpha_bars[i - 1]);
    REQUIRE(s.alpha_bars.back() < 1e-4);
    REQUIRE(s.alpha_bars.front() < 1.0);
    REQUIRE(s.alpha_bars.front() > 0.0);
}

TEST_CASE("schedule parameter validation names the offending bound", "[schedule]") {
    REQUIRE_THROWS_MATCHES(make_schedule<double>(0, ScheduleKind::linear, 0.1, 0.2), ConfigError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("T must be >= 1")));
    REQUIRE_THROWS_MATCHES(make_schedule<double>(10, ScheduleKind::linear, 0.0, 0.2), ConfigError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("beta_start")));
    REQUIRE_THROWS_MATCHES(make_schedule<double>(10, ScheduleKind::linear, -0.1, 0.2), ConfigError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("beta_start")));
    REQUIRE_THROWS_MATCHES(make_schedule<double>(10, ScheduleKind::linear, 0.1, 1.0), ConfigError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("beta_end")));
    REQUIRE_THROWS_MATCHES(make_schedule<double>(10, ScheduleKind::linear, 0.3, 0.2), ConfigError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("exceeds beta_end")));
    REQUIRE_THROWS_AS(schedule_kind_from_string("quadratic"), ConfigError);
    REQUIRE(schedule_kind_from_string("linear") == ScheduleKind::linear);
    REQUIRE(schedule_kind_from_string("cosine") == ScheduleKind::cosine);
}

TEST_CASE("alpha_bars decrease monotonically for random valid parameters", "[schedule]") {
    Rng rng(0x5EED);
    for (int trial = 0; trial < 50; ++trial) {
        const int T_ = static_cast<int>(rng.uniform_int(1, 200));
        const double b0 = rng.uniform(1e-6, 0.4);
        const double b1 = rng.uniform(b0, 0.9);
        const auto kind = trial % 2 == 0 ? ScheduleKind::linear : ScheduleKind::cosine;
        const auto s = make_schedule<double>(T_, kind, b0, b1);
        REQUIRE(static_cast<int>(s.alpha_bars.size()) == T_);
        double prev = 1.0;
        for (int i = 0; i < T_; ++i) {
            REQUIRE(s.alpha_bars[i] > 0.0);
            REQUIRE(s.alpha_bars[i] < prev);
            REQUIRE(s.betas[i] >= b0);
            REQUIRE(s.betas[i] <= b1);
            prev = s.alpha_bars[i];
        }
    }
}

TEST_CASE("cosine schedule keeps its shape inside a wide clip range", "[schedule]") {
    const auto s = make_schedule<double>(100, ScheduleKind::cosine, 1e-6, 0.999);
    // The squared-cosine cumulative curve: alpha_bar(t) ~ f(t)/f(0).
    const double eps = 0.008;
    auto f = [&](double t) {
        const double a = (t / 100.0 + eps) / (1.0 + eps) * (M_PI / 2.0);
        return std::cos(a) * std::cos(a);
    };
    int unclamped = 0;
    for (int t = 1; t <= 100; ++t) {
        // The very last betas hit the upper clip (the curve ends at zero
        // signal, i.e. beta -> 1); the closed form only holds before that.
        if (s.betas[t - 1] >= 0.999) break;
        REQUIRE(s.alpha_bars[t - 1] == Catch::Approx(f(t) / f(0)).margin(1e-9));
        ++unclamped;
    }
    REQUIRE(unclamped >= 90);
}

TEST_CASE("add_noise blends exactly per the closed form", "[schedule]") {
    const auto s = make_schedule<double>(2, ScheduleKind::linear, 0.1, 0.2);
    Rng rng(7);
    const T x0 = random_tensor(1, 4, 5, rng);
    const T eps = random_tensor(1, 4, 5, rng);
    const T zeros(1, 4, 5);

    SECTION("zero noise leaves only the signal scaling") {
        const T z = add_noise(x0, 2, zeros, s);
        for (size_t i = 0; i < z.v.size(); ++i) {
            REQUIRE(z.v[i] == Catch::Approx(std::sqrt(0.72) * x0.v[i]).epsilon(1e-12));
        }
    }
    SECTION("zero signal leaves only the noise scaling") {
        // alpha_bar = 0.36 makes the noise coefficient exactly 0.8.
        const auto s36 = make_schedule<double>(1, ScheduleKind::linear, 0.64, 0.64);
        const T z = add_noise(zeros, 1, eps, s36);
        for (size_t i = 0; i < z.v.size(); ++i) {
            REQUIRE(z.v[i] == Catch::Approx(0.8 * eps.v[i]).epsilon(1e-12));
        }
    }
    SECTION("general case matches the elementwise formula") {
        for (int t = 1; t <= 2; ++t) {
            const double ab = s.alpha_bars[t - 1];
            const T z = add_noise(x0, t, eps, s);
            for (size_t i = 0; i < z.v.size(); ++i) {
                const double want = std::sqrt(ab) * x0.v[i] + std::sqrt(1.0 - ab) * eps.v[i];
                REQUIRE(z.v[i] == Catch::Approx(want).epsilon(1e-12));
            }
        }
    }
    SECTION("steps outside [1, T] are rejected") {
        REQUIRE_THROWS_AS(add_noise(x0, 0, eps, s), InputError);
        REQUIRE_THROWS_AS(add_noise(x0, 3, eps, s), InputError);
        const T small(1, 2, 2);
        REQUIRE_THROWS_AS(add_noise(x0, 1, small, s), InputError);
    }
}

TEST_CASE("ddim_step matches an independently coded closed form", "[schedule]") {
    const auto s = make_schedule<double>(4, ScheduleKind::linear, 0.05, 0.3);
    Rng rng(11);
    const T z = random_tensor(2, 3, 3, rng);
    const T eps_hat = random_tensor(2, 3, 3, rng);

    SECTION("zero predicted noise rescales by the alpha_bar ratio") {
        const T zeros(2, 3, 3);
        for (int t = 1; t <= 4; ++t) {
            const double ratio = std::sqrt(s.alpha_bar(t - 1) / s.alpha_bar(t));
            const T out = ddim_step(z, zeros, t, s);
            for (size_t i = 0; i < out.v.size(); ++i) {
                REQUIRE(out.v[i] == Catch::Approx(ratio * z.v[i]).epsilon(1e-12));
            }
        }
    }
    SECTION("the final step returns the clean estimate itself") {
        const T out = ddim_step(z, eps_hat, 1, s);
        const double ab1 = s.alpha_bar(1);
        for (size_t i = 0; i < out.v.size(); ++i) {
            const double x0_hat = (z.v[i] - std::sqrt(1.0 - ab1) * eps_hat.v[i]) / std::sqrt(ab1);
            REQUIRE(out.v[i] == Catch::Approx(x0_hat).epsilon(1e-10));
        }
    }
    SECTION("general step agrees with the denoise-then-renoise formula") {
        for (int t = 2; t <= 4; ++t) {
            const double ab_t = s.alpha_bar(t), ab_p = s.alpha_bar(t - 1);
            const T out = ddim_step(z, eps_hat, t, s);
            for (size_t i = 0; i < out.v.size(); ++i) {
                const double x0_hat =
                    (z.v[i] - std::sqrt(1.0 - ab_t) * eps_hat.v[i]) / std::sqrt(ab_t);
                const double want = std::sqrt(ab_p) * x0_hat + std::sqrt(1.0 - ab_p) * eps_hat.v[i];
                REQUIRE(out.v[i] == Catch::Approx(want).epsilon(1e-9).margin(1e-12));
            }
        }
    }
    SECTION("steps outside [1, T] are rejected") {
        REQUIRE_THROWS_AS(ddim_step(z, eps_hat, 0, s), InputError);
        REQUIRE_THROWS_AS(ddim_step(z, eps_hat, 5, s), InputError);
    }
}

TEST_CASE("noising then reverse-stepping with the true noise is exact", "[schedule]") {
    const auto s = make_schedule<double>(8, ScheduleKind::linear, 0.02, 0.25);
    Rng rng(23);
    const T x0 = random_tensor(1, 6, 6, rng);
    const T eps = random_tensor(1, 6, 6, rng);
    for (int t = 1; t <= 8; ++t) {
        // With eps_hat equal to the true eps the clean estimate is exact, so
        // the reverse step lands on the forward-noised state one level down.
        const T z_t = add_noise(x0, t, eps, s);
        const T z_prev = ddim_step(z_t, eps, t, s);
        const T want = t == 1 ? x0 : add_noise(x0, t - 1, eps, s);
        for (size_t i = 0; i < want.v.size(); ++i) {
            REQUIRE(z_prev.v[i] == Catch::Approx(want.v[i]).epsilon(1e-9).margin(1e-12));
        }
    }
}

TEST_CASE("schedule construction is deterministic", "[schedule]") {
    const auto a = make_schedule<float>(50, ScheduleKind::linear, 1e-4, 0.02);
    const auto b = make_schedule<float>(50, ScheduleKind::linear, 1e-4, 0.02);
    REQUIRE(a.betas == b.betas);
    REQUIRE(a.alpha_bars == b.alpha_bars);
}
