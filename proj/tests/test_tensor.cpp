#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "absorber/gradcheck.hpp"
#include "absorber/tensor.hpp"

using namespace absorber;

using FT = Tensor<float>;
using DT = Tensor<double>;

TEST_CASE("matmul identity, hand-computed and annihilator cases") {
    FT eye = FT::leaf({2, 2}, {1, 0, 0, 1});
    FT m = FT::leaf({2, 2}, {5, 6, 7, 8});
    CHECK(matmul(eye, m).value() == m.value());

    FT a = FT::leaf({2, 2}, {1, 2, 3, 4});
    FT b = FT::leaf({2, 2}, {5, 6, 7, 8});
    auto c = matmul(a, b);
    CHECK(c.value() == std::vector<float>{19, 22, 43, 50});

    FT z = FT::zeros({2, 2});
    auto cz = matmul(z, m);
    for (float v : cz.value()) CHECK(v == 0.0f);
}

TEST_CASE("matmul shape errors") {
    FT a = FT::leaf({2, 3}, std::vector<float>(6, 1.f));
    FT b = FT::leaf({2, 2}, std::vector<float>(4, 1.f));
    CHECK_THROWS_AS(matmul(a, b), DimensionError);
    FT v = FT::leaf({3}, {1, 2, 3});
    CHECK_THROWS_AS(matmul(a, v), DimensionError);
}

TEST_CASE("batched matmul with broadcast matches brute-force oracle") {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> dist(-1, 1);
    const std::int64_t B = 3, M = 2, K = 4, N = 5;
    std::vector<double> av(std::size_t(B * M * K)), bv(std::size_t(K * N));
    for (auto& x : av) x = dist(rng);
    for (auto& x : bv) x = dist(rng);
    DT a = DT::leaf({B, M, K}, av);
    DT b = DT::leaf({K, N}, bv); // broadcast over the batch dim
    auto c = matmul(a, b);
    REQUIRE(c.shape() == Shape{B, M, N});
    for (std::int64_t bi = 0; bi < B; ++bi)
        for (std::int64_t i = 0; i < M; ++i)
            for (std::int64_t j = 0; j < N; ++j) {
                double acc = 0;
                for (std::int64_t k = 0; k < K; ++k)
                    acc += av[std::size_t((bi * M + i) * K + k)] * bv[std::size_t(k * N + j)];
                CHECK(c.value()[std::size_t((bi * M + i) * N + j)] == doctest::Approx(acc).epsilon(1e-12));
            }
}

TEST_CASE("softmax closed forms") {
    FT x = FT::leaf({3}, {0, 0, 0});
    auto s = softmax_lastdim(x);
    for (float v : s.value()) CHECK(v == doctest::Approx(1.0f / 3.0f));

    FT y = FT::leaf({2}, {0.0f, std::log(2.0f)});
    auto sy = softmax_lastdim(y);
    CHECK(sy.value()[0] == doctest::Approx(1.0f / 3.0f));
    CHECK(sy.value()[1] == doctest::Approx(2.0f / 3.0f));
}

TEST_CASE("softmax rows sum to one within 1e-6") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<float> dist(-8, 8);
    for (int rep = 0; rep < 100; ++rep) {
        std::vector<float> v(8);
        for (auto& x : v) x = dist(rng);
        auto s = softmax_lastdim(FT::leaf({8}, v));
        double sum = 0;
        for (float p : s.value()) sum += p;
        CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("softmax empty last dim rejected") {
    CHECK_THROWS_AS(softmax_lastdim(FT::leaf({2, 0}, {})), DimensionError);
}

TEST_CASE("l1_loss identity, closed form, brute-force oracle") {
    FT a = FT::leaf({2, 2}, {1, 2, 3, 4});
    CHECK(l1_loss(a, a, LossNormalize::per_element).item() == 0.0f);

    FT p = FT::leaf({2}, {1, 2});
    FT q = FT::leaf({2}, {0, 0});
    CHECK(l1_loss(p, q, LossNormalize::per_element).item() == doctest::Approx(1.5f));

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> dist(-2, 2);
    std::vector<double> av(12), bv(12);
    for (auto& x : av) x = dist(rng);
    for (auto& x : bv) x = dist(rng);
    DT da = DT::leaf({3, 4}, av), db = DT::leaf({3, 4}, bv);
    double acc = 0;
    for (int i = 0; i < 12; ++i) acc += std::abs(av[i] - bv[i]);
    CHECK(l1_loss(da, db, LossNormalize::per_position).item() == doctest::Approx(acc / 3.0));
    CHECK(l1_loss(da, db, LossNormalize::per_element).item() == doctest::Approx(acc / 12.0));

    CHECK_THROWS_AS(l1_loss(p, a, LossNormalize::per_element), DimensionError);
}

TEST_CASE("l2_loss is squared error under the same aggregation") {
    DT a = DT::leaf({2, 2}, {1, 2, 3, 4});
    DT b = DT::leaf({2, 2}, {0, 0, 0, 0});
    // sums of squares: 1+4+9+16 = 30
    CHECK(l2_loss(a, b, LossNormalize::per_position).item() == doctest::Approx(15.0));
    CHECK(l2_loss(a, b, LossNormalize::per_element).item() == doctest::Approx(7.5));
}

TEST_CASE("backward: sum gives ones, x*x gives 2x") {
    FT w = FT::leaf({4}, {1, 2, 3, 4}, true);
    backward(reduce_sum(w));
    for (float g : w.grad()) CHECK(g == 1.0f);

    FT x = FT::scalar(3.0f, true);
    backward(mul(x, x));
    CHECK(x.grad()[0] == doctest::Approx(6.0f));
}

TEST_CASE("backward requires a scalar loss") {
    FT x = FT::leaf({2}, {1, 2}, true);
    CHECK_THROWS_AS(backward(scale(x, 2.0f)), ContractError);
}

TEST_CASE("grad accumulates across multiple uses") {
    FT x = FT::scalar(2.0f, true);
    auto y = add(mul(x, x), x); // y = x^2 + x, dy/dx = 2x + 1 = 5
    backward(y);
    CHECK(x.grad()[0] == doctest::Approx(5.0f));
}

TEST_CASE("kl divergence closed forms and brute force") {
    DT a = DT::leaf({1, 3}, {0.3, -1.0, 0.7});
    CHECK(kl_divergence_lastdim(a, a).item() == doctest::Approx(0.0));

    // one-hot oracle vs uniform student over vocab 2: KL -> ln 2 in the
    // limit; use strongly peaked logits and compare against the brute force.
    DT peaked = DT::leaf({1, 2}, {50.0, 0.0});
    DT uniform = DT::leaf({1, 2}, {0.0, 0.0});
    CHECK(kl_divergence_lastdim(peaked, uniform).item() == doctest::Approx(std::log(2.0)).epsilon(1e-6));

    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> dist(-2, 2);
    std::vector<double> pv(8), qv(8);
    for (auto& x : pv) x = dist(rng);
    for (auto& x : qv) x = dist(rng);
    DT p = DT::leaf({2, 4}, pv), q = DT::leaf({2, 4}, qv);
    double want = 0;
    for (int r = 0; r < 2; ++r) {
        double zp = 0, zq = 0;
        for (int i = 0; i < 4; ++i) {
            zp += std::exp(pv[std::size_t(r * 4 + i)]);
            zq += std::exp(qv[std::size_t(r * 4 + i)]);
        }
        for (int i = 0; i < 4; ++i) {
            const double pp = std::exp(pv[std::size_t(r * 4 + i)]) / zp;
            const double qq = std::exp(qv[std::size_t(r * 4 + i)]) / zq;
            want += pp * (std::log(pp) - std::log(qq));
        }
    }
    want /= 2.0;
    CHECK(kl_divergence_lastdim(p, q).item() == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("cross entropy matches per-row oracle") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> dist(-2, 2);
    std::vector<double> lv(12);
    for (auto& x : lv) x = dist(rng);
    std::vector<std::int32_t> tgt{2, 0, 3};
    DT logits = DT::leaf({3, 4}, lv);
    double want = 0;
    for (int r = 0; r < 3; ++r) {
        double z = 0;
        for (int i = 0; i < 4; ++i) z += std::exp(lv[std::size_t(r * 4 + i)]);
        want += std::log(z) - lv[std::size_t(r * 4 + tgt[std::size_t(r)])];
    }
    CHECK(cross_entropy(logits, tgt).item() == doctest::Approx(want / 3.0).epsilon(1e-10));
}

TEST_CASE("rms_norm output has unit root-mean-square pre-gain") {
    std::mt19937_64 rng(13);
    std::normal_distribution<float> dist(0.0f, 1.5f);
    FT gain = FT::full({16}, 1.0f);
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<float> v(16);
        for (auto& x : v) x = dist(rng);
        auto y = rms_norm(FT::leaf({1, 16}, v), gain);
        double ms = 0;
        for (float o : y.value()) ms += double(o) * double(o);
        CHECK(std::abs(std::sqrt(ms / 16.0) - 1.0) < 1e-6);
    }
}

TEST_CASE("non-finite op output raises NumericError naming the op") {
    FT big = FT::full({4}, 3e38f);
    CHECK_THROWS_WITH_AS(add(big, big), doctest::Contains("add"), NumericError);
    FT neg = FT::full({2}, -3e38f);
    CHECK_THROWS_WITH_AS(mul(neg, neg), doctest::Contains("mul"), NumericError);
    CHECK_THROWS_AS(FT::leaf({1}, {std::numeric_limits<float>::quiet_NaN()}), NumericError);
}

TEST_CASE("shape/data consistency enforced at construction") {
    CHECK_THROWS_AS(FT::leaf({2, 2}, {1, 2, 3}), DimensionError);
}

TEST_CASE("grad shape matches value shape after backward") {
    FT a = FT::leaf({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    FT b = FT::leaf({3, 2}, {1, 0, 0, 1, 1, 1}, true);
    backward(reduce_sum(matmul(a, b)));
    CHECK(a.grad().size() == a.value().size());
    CHECK(b.grad().size() == b.value().size());
}

TEST_CASE("identical inputs produce bitwise-identical outputs") {
    auto run = [] {
        std::mt19937_64 rng(42);
        std::uniform_real_distribution<float> dist(-1, 1);
        std::vector<float> av(24), bv(24);
        for (auto& x : av) x = dist(rng);
        for (auto& x : bv) x = dist(rng);
        FT a = FT::leaf({2, 3, 4}, av, true);
        FT b = FT::leaf({2, 4, 3}, bv);
        auto out = softmax_lastdim(matmul(a, b));
        backward(reduce_sum(out));
        return std::make_pair(out.value(), a.grad());
    };
    auto r1 = run();
    auto r2 = run();
    CHECK(r1.first == r2.first);
    CHECK(r1.second == r2.second);
}

TEST_CASE("transpose, slice, concat round structure") {
    FT x = FT::leaf({2, 3}, {1, 2, 3, 4, 5, 6});
    auto t = transpose(x, 0, 1);
    CHECK(t.shape() == Shape{3, 2});
    CHECK(t.value() == std::vector<float>{1, 4, 2, 5, 3, 6});

    auto s = slice(x, 1, 1, 2);
    CHECK(s.shape() == Shape{2, 2});
    CHECK(s.value() == std::vector<float>{2, 3, 5, 6});

    auto c = concat<float>({slice(x, 1, 0, 1), s}, 1);
    CHECK(c.value() == x.value());

    CHECK_THROWS_AS(slice(x, 1, 2, 3), DimensionError);
    CHECK_THROWS_AS(transpose(x, 0, 5), DimensionError);
}

TEST_CASE("gradient suite: every primitive matches central finite differences") {
    auto results = run_gradient_suite(1234, 100);
    for (const auto& r : results) {
        INFO(r.op, " max_rel_err=", r.max_rel_err);
        CHECK(r.pass);
    }
    CHECK(all_passed(results));
}
