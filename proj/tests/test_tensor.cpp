#include <doctest.h>

#include <cmath>
#include <limits>

#include "diracnet/errors.hpp"
#include "diracnet/rng.hpp"
#include "diracnet/tensor.hpp"

using namespace diracnet;

TEST_SUITE("tensor") {

TEST_CASE("construction zero-fills") {
    Tensor t({2, 3});
    REQUIRE(t.rank() == 2);
    REQUIRE(t.numel() == 6);
    for (std::size_t i = 0; i < t.numel(); ++i) CHECK(t[i] == 0.0f);
}

TEST_CASE("fill constructor and fill()") {
    Tensor t({4}, 2.5f);
    CHECK(t[3] == 2.5f);
    t.fill(-1.0f);
    CHECK(t[0] == -1.0f);
}

TEST_CASE("initializer list and vector data") {
    Tensor t({2, 2}, {1.0f, 2.0f, 3.0f, 4.0f});
    CHECK(t.at2(1, 0) == 3.0f);
    CHECK_THROWS_AS(Tensor({2, 2}, {1.0f}), ShapeError);
}

TEST_CASE("rank-4 indexing is row-major NCHW") {
    Tensor t({2, 3, 4, 5});
    t.at4(1, 2, 3, 4) = 7.0f;
    // flat index n*CHW + c*HW + h*W + w
    CHECK(t[1 * 60 + 2 * 20 + 3 * 5 + 4] == 7.0f);
}

TEST_CASE("zero-sized dims are rejected") {
    CHECK_THROWS_AS(Tensor({2, 0, 3}), ShapeError);
}

TEST_CASE("scalar helper") {
    Tensor s = Tensor::scalar(3.0f);
    CHECK(s.rank() == 1);
    CHECK(s.numel() == 1);
    CHECK(s[0] == 3.0f);
}

TEST_CASE("reshaped preserves contents and checks numel") {
    Tensor t({2, 3}, {0, 1, 2, 3, 4, 5});
    Tensor r = t.reshaped({3, 2});
    CHECK(r.at2(2, 1) == 5.0f);
    CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
}

TEST_CASE("cast between precisions") {
    Tensor t({3}, {0.5f, -1.25f, 2.0f});
    Tensor64 d = t.cast<double>();
    CHECK(d[1] == doctest::Approx(-1.25));
    Tensor back = d.cast<float>();
    CHECK(back[2] == 2.0f);
}

TEST_CASE("ensure_finite accepts finite data") {
    Tensor t({128}, 1.0f);
    CHECK_NOTHROW(ensure_finite(t, "t"));
}

TEST_CASE("ensure_finite rejects NaN and Inf") {
    Tensor t({100}, 1.0f);
    t[57] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(ensure_finite(t, "t"), NumericError);
    t[57] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(ensure_finite(t, "t"), NumericError);
}

TEST_CASE("max_abs_diff and allclose") {
    Tensor a({3}, {1.0f, 2.0f, 3.0f});
    Tensor b({3}, {1.0f, 2.0f, 3.5f});
    CHECK(max_abs_diff(a, b) == doctest::Approx(0.5));
    CHECK(allclose(a, a, 0.0, 0.0));
    CHECK(allclose(a, b, 0.0, 0.6));
    CHECK_FALSE(allclose(a, b, 1e-3, 1e-3));
    Tensor c({4});
    CHECK_THROWS_AS(max_abs_diff(a, c), ShapeError);
}

TEST_CASE("splitmix64 matches the published algorithm") {
    // Widely quoted first output of the reference generator seeded with 0.
    CHECK(splitmix64(0x0ull) == 0xe220a8397b1dcdafull);
    // Stateful form of the reference generator; splitmix64(state) must equal
    // next() whenever state holds the pre-increment value.
    std::uint64_t state = 0x123456789abcdef0ull;
    auto next = [&state]() {
        std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    };
    for (int i = 0; i < 8; ++i) {
        std::uint64_t pre = state;
        CHECK(splitmix64(pre) == next());
    }
}

TEST_CASE("derive_seed separates streams and indices") {
    CHECK(derive_seed(1, 0) != derive_seed(1, 1));
    CHECK(derive_seed(1, 0, 0) != derive_seed(1, 0, 1));
    CHECK(derive_seed(1, 2, 3) == derive_seed(1, 2, 3));
}

TEST_CASE("rng reproducibility") {
    Rng a(42), b(42);
    for (int i = 0; i < 16; ++i) CHECK(a.normal() == b.normal());
    Rng c(43);
    bool same = true;
    for (int i = 0; i < 16; ++i) same = same && (a.uniform() == c.uniform());
    CHECK_FALSE(same);
}

}  // TEST_SUITE
