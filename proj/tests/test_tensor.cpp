#include "doctest.h"

#include <cmath>
#include <cstring>
#include <functional>
#include <numbers>
#include <vector>

#include "procformer/errors.hpp"
#include "procformer/rng.hpp"
#include "procformer/tensor.hpp"

using namespace procformer;

namespace {

struct BuildOut {
    Tensor loss;
    std::vector<Tensor> leaves;
};

// Builds a scalar loss from a flat vector of leaf values. Called repeatedly
// with perturbed inputs for central finite differences.
using Builder = std::function<BuildOut(Tape&, const std::vector<double>&, bool)>;

void check_grad(const std::vector<double>& x0, const Builder& build, uint64_t seed,
                int samples = 25, double h = 1e-5, double tol = 1e-4) {
    Tape tape;
    BuildOut bo = build(tape, x0, true);
    tape.backward(bo.loss);
    std::vector<double> g;
    for (const auto& t : bo.leaves) g.insert(g.end(), t.grad->begin(), t.grad->end());
    REQUIRE(g.size() == x0.size());

    auto eval = [&](const std::vector<double>& v) {
        Tape t;
        return (*build(t, v, false).loss.val)[0];
    };
    Rng rng(seed);
    int n = static_cast<int>(x0.size());
    for (int s = 0; s < samples; ++s) {
        int i = static_cast<int>(rng.below(static_cast<uint64_t>(n)));
        auto xp = x0;
        xp[static_cast<size_t>(i)] += h;
        auto xm = x0;
        xm[static_cast<size_t>(i)] -= h;
        double fd = (eval(xp) - eval(xm)) / (2.0 * h);
        double denom = std::max({std::abs(fd), std::abs(g[static_cast<size_t>(i)]), 1e-2});
        CHECK(std::abs(fd - g[static_cast<size_t>(i)]) <= tol * denom);
    }
}

std::vector<double> random_vec(Rng& rng, size_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

// Slices a flat buffer into consecutive leaf tensors.
struct Cutter {
    const std::vector<double>& v;
    size_t pos = 0;
    std::vector<double> take(int64_t n) {
        std::vector<double> out(v.begin() + pos, v.begin() + pos + static_cast<size_t>(n));
        pos += static_cast<size_t>(n);
        return out;
    }
};

} // namespace

TEST_CASE("tensor construction validates shape and element count") {
    CHECK_THROWS_AS(Tensor::make({2, 2}, {1.0, 2.0, 3.0}), ShapeMismatch);
    CHECK_THROWS_AS(Tensor::make({0}, {}), ShapeMismatch);
    CHECK_THROWS_AS(Tensor::make({2, -1}, {1.0, 2.0}), ShapeMismatch);
    Tensor t = Tensor::make({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(t.size() == 6);
    CHECK(t.grad == nullptr);
    Tensor g = Tensor::zeros({4}, true);
    CHECK(g.grad->size() == 4);
}

TEST_CASE("softmax over equal logits is uniform") {
    Tape tp;
    Tensor x = Tensor::make({2}, {0.0, 0.0});
    Tensor y = tp.softmax_last_axis(x, Mask::all(2));
    CHECK((*y.val)[0] == 0.5);
    CHECK((*y.val)[1] == 0.5);
}

TEST_CASE("masked softmax zeroes dropped positions exactly") {
    Tape tp;
    Tensor x = Tensor::make({3}, {1.0, 2.0, 3.0});
    Mask keep_last{{3}, {0, 0, 1}};
    Tensor y = tp.softmax_last_axis(x, keep_last);
    CHECK((*y.val)[0] == 0.0);
    CHECK((*y.val)[1] == 0.0);
    CHECK((*y.val)[2] == 1.0);

    Mask keep_ends{{3}, {1, 0, 1}};
    Tensor z = tp.softmax_last_axis(x, keep_ends);
    double e1 = std::exp(1.0 - 3.0), e3 = std::exp(0.0);
    CHECK((*z.val)[0] == doctest::Approx(e1 / (e1 + e3)).epsilon(1e-14));
    CHECK((*z.val)[1] == 0.0);
    CHECK((*z.val)[2] == doctest::Approx(e3 / (e1 + e3)).epsilon(1e-14));
}

TEST_CASE("softmax rows sum to one under random masks") {
    Rng rng(41);
    Tape tp;
    for (int trial = 0; trial < 20; ++trial) {
        int64_t b = 3, q = 4, n = 6;
        Tensor x = Tensor::make({b, q, n}, random_vec(rng, static_cast<size_t>(b * q * n), -8, 8));
        Mask m;
        m.shape = {b, n};
        m.keep.assign(static_cast<size_t>(b * n), 0);
        for (int64_t i = 0; i < b; ++i) {
            int64_t kept = 1 + static_cast<int64_t>(rng.below(static_cast<uint64_t>(n)));
            std::vector<int64_t> idx(static_cast<size_t>(n));
            for (int64_t j = 0; j < n; ++j) idx[static_cast<size_t>(j)] = j;
            rng.shuffle(idx);
            for (int64_t j = 0; j < kept; ++j) m.keep[static_cast<size_t>(i * n + idx[static_cast<size_t>(j)])] = 1;
        }
        Tensor y = tp.softmax_last_axis(x, m);
        for (int64_t bi = 0; bi < b; ++bi) {
            for (int64_t qi = 0; qi < q; ++qi) {
                double sum = 0.0;
                for (int64_t j = 0; j < n; ++j) {
                    double v = (*y.val)[static_cast<size_t>((bi * q + qi) * n + j)];
                    CHECK(v >= 0.0);
                    CHECK(v <= 1.0);
                    if (!m.keep[static_cast<size_t>(bi * n + j)]) CHECK(v == 0.0);
                    sum += v;
                }
                CHECK(std::abs(sum - 1.0) <= 1e-12);
            }
        }
    }
}

TEST_CASE("softmax with a fully dropped row reports AllMasked") {
    Tape tp;
    Tensor x = Tensor::make({2, 3}, {1, 2, 3, 4, 5, 6});
    Mask m{{2, 3}, {1, 1, 1, 0, 0, 0}};
    CHECK_THROWS_AS(tp.softmax_last_axis(x, m), AllMasked);
}

TEST_CASE("softmax gradient matches finite differences") {
    Rng rng(17);
    auto x0 = random_vec(rng, 12, -3, 3);
    Builder build = [](Tape& tp, const std::vector<double>& v, bool rg) -> BuildOut {
        Tensor x = Tensor::make({3, 4}, v, rg);
        Mask m{{3, 4}, {1, 1, 1, 1, 1, 0, 1, 0, 0, 1, 0, 0}};
        Tensor y = tp.softmax_last_axis(x, m);
        Tensor coef = Tensor::make({3, 4}, {0.3, -1.2, 0.7, 2.0, 1.1, 9.9, -0.4, 9.9,
                                            9.9, 0.8, 9.9, 9.9});
        return {tp.sum_all(tp.mul(y, coef)), {x}};
    };
    check_grad(x0, build, 5, 12);

    // Dropped logits get exactly zero gradient.
    Tape tp;
    Tensor x = Tensor::make({4}, {1.0, 2.0, 3.0, 4.0}, true);
    Mask m{{4}, {1, 0, 1, 0}};
    Tensor y = tp.softmax_last_axis(x, m);
    tp.backward(tp.sum_all(tp.mul(y, Tensor::make({4}, {1.0, 2.0, 3.0, 4.0}))));
    CHECK((*x.grad)[1] == 0.0);
    CHECK((*x.grad)[3] == 0.0);
    CHECK((*x.grad)[0] != 0.0);
}

TEST_CASE("layer_norm normalizes a two-element row") {
    Tape tp;
    Tensor x = Tensor::make({2}, {1.0, 3.0});
    Tensor gain = Tensor::make({2}, {1.0, 1.0});
    Tensor bias = Tensor::make({2}, {0.0, 0.0});
    Tensor y = tp.layer_norm_last_axis(x, gain, bias, 1e-12);
    CHECK(std::abs((*y.val)[0] - -1.0) < 1e-9);
    CHECK(std::abs((*y.val)[1] - 1.0) < 1e-9);

    Tensor g2 = Tensor::make({2}, {2.0, 0.5});
    Tensor b2 = Tensor::make({2}, {10.0, -1.0});
    Tensor z = tp.layer_norm_last_axis(x, g2, b2, 1e-12);
    CHECK(std::abs((*z.val)[0] - 8.0) < 1e-8);
    CHECK(std::abs((*z.val)[1] - -0.5) < 1e-8);
}

TEST_CASE("layer_norm rows have zero mean and unit variance before affine") {
    Rng rng(23);
    int64_t rows = 8, d = 36;
    auto vals = random_vec(rng, static_cast<size_t>(rows * d), -3, 3);
    // Scale every row to population variance 4 so eps cannot matter.
    for (int64_t r = 0; r < rows; ++r) {
        double* p = vals.data() + r * d;
        double mean = 0.0;
        for (int64_t i = 0; i < d; ++i) mean += p[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t i = 0; i < d; ++i) var += (p[i] - mean) * (p[i] - mean);
        var /= static_cast<double>(d);
        REQUIRE(var > 0.0);
        double s = 2.0 / std::sqrt(var);
        for (int64_t i = 0; i < d; ++i) p[i] *= s;
    }
    Tape tp;
    Tensor x = Tensor::make({rows, d}, vals);
    Tensor gain = Tensor::make({d}, std::vector<double>(static_cast<size_t>(d), 1.0));
    Tensor bias = Tensor::make({d}, std::vector<double>(static_cast<size_t>(d), 0.0));
    Tensor y = tp.layer_norm_last_axis(x, gain, bias);
    for (int64_t r = 0; r < rows; ++r) {
        const double* p = y.val->data() + r * d;
        double mean = 0.0;
        for (int64_t i = 0; i < d; ++i) mean += p[i];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t i = 0; i < d; ++i) var += (p[i] - mean) * (p[i] - mean);
        var /= static_cast<double>(d);
        CHECK(std::abs(mean) <= 1e-9);
        CHECK(std::abs(var - 1.0) <= 1e-6);
    }
}

TEST_CASE("layer_norm gradient matches finite differences") {
    Rng rng(31);
    // 2x4 input + gain(4) + bias(4)
    auto x0 = random_vec(rng, 8, -2, 2);
    auto g0 = random_vec(rng, 4, 0.5, 1.5);
    auto b0 = random_vec(rng, 4, -0.5, 0.5);
    std::vector<double> all = x0;
    all.insert(all.end(), g0.begin(), g0.end());
    all.insert(all.end(), b0.begin(), b0.end());
    Builder build = [](Tape& tp, const std::vector<double>& v, bool rg) -> BuildOut {
        Cutter c{v};
        Tensor x = Tensor::make({2, 4}, c.take(8), rg);
        Tensor g = Tensor::make({4}, c.take(4), rg);
        Tensor b = Tensor::make({4}, c.take(4), rg);
        Tensor y = tp.layer_norm_last_axis(x, g, b);
        Tensor coef = Tensor::make({2, 4}, {1.0, -0.5, 0.25, 2.0, -1.5, 0.75, 0.1, 1.3});
        return {tp.sum_all(tp.mul(y, coef)), {x, g, b}};
    };
    check_grad(all, build, 9, 16);
}

TEST_CASE("relu forward and gradient") {
    Tape tp;
    Tensor x = Tensor::make({4}, {-2.0, -0.0, 0.5, 3.0}, true);
    Tensor y = tp.relu(x);
    CHECK((*y.val)[0] == 0.0);
    CHECK(!std::signbit((*y.val)[1]));
    CHECK((*y.val)[2] == 0.5);
    tp.backward(tp.sum_all(y));
    CHECK((*x.grad)[0] == 0.0);
    CHECK((*x.grad)[1] == 0.0);
    CHECK((*x.grad)[2] == 1.0);
    CHECK((*x.grad)[3] == 1.0);

    Rng rng(3);
    std::vector<double> x0(10);
    for (auto& v : x0) v = (rng.below(2) ? 1.0 : -1.0) * rng.uniform(0.2, 1.5);
    Builder build = [](Tape& t, const std::vector<double>& v, bool rg) -> BuildOut {
        Tensor x = Tensor::make({10}, v, rg);
        Tensor coef = Tensor::make({10}, {1, 2, 3, 4, 5, -1, -2, -3, -4, -5});
        return {t.sum_all(t.mul(t.relu(x), coef)), {x}};
    };
    check_grad(x0, build, 11, 10);
}

TEST_CASE("add broadcasts a trailing suffix") {
    Tape tp;
    Tensor a = Tensor::make({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor b = Tensor::make({3}, {10, 20, 30});
    Tensor y = tp.add(a, b);
    std::vector<double> want{11, 22, 33, 14, 25, 36};
    CHECK(*y.val == want);

    CHECK_THROWS_AS(tp.add(a, Tensor::make({2}, {1, 2})), ShapeMismatch);
    CHECK_THROWS_AS(tp.add(a, Tensor::make({2, 2}, {1, 2, 3, 4})), ShapeMismatch);

    Rng rng(13);
    auto all = random_vec(rng, 9);
    Builder build = [](Tape& t, const std::vector<double>& v, bool rg) -> BuildOut {
        Cutter c{v};
        Tensor a = Tensor::make({2, 3}, c.take(6), rg);
        Tensor b = Tensor::make({3}, c.take(3), rg);
        Tensor coef = Tensor::make({2, 3}, {0.5, -1, 2, 1.5, -0.5, 1});
        return {t.sum_all(t.mul(t.add(a, b), coef)), {a, b}};
    };
    check_grad(all, build, 21, 9);
}

TEST_CASE("matmul matches hand products and supports batching") {
    Tape tp;
    Tensor a = Tensor::make({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::make({2, 2}, {5, 6, 7, 8});
    Tensor c = tp.matmul(a, b);
    CHECK(*c.val == std::vector<double>{19, 22, 43, 50});

    CHECK_THROWS_AS(tp.matmul(a, Tensor::make({3, 2}, {1, 2, 3, 4, 5, 6})), ShapeMismatch);
    CHECK_THROWS_AS(tp.matmul(Tensor::make({2}, {1, 2}), b), ShapeMismatch);

    // Shared right operand equals a per-batch loop.
    Rng rng(29);
    int64_t B = 3, m = 4, k = 5, n = 2;
    Tensor x3 = Tensor::make({B, m, k}, random_vec(rng, static_cast<size_t>(B * m * k)));
    Tensor w = Tensor::make({k, n}, random_vec(rng, static_cast<size_t>(k * n)));
    Tensor fused = tp.matmul(x3, w);
    for (int64_t bt = 0; bt < B; ++bt) {
        std::vector<double> slice(x3.val->begin() + bt * m * k,
                                  x3.val->begin() + (bt + 1) * m * k);
        Tensor xb = Tensor::make({m, k}, slice);
        Tensor yb = tp.matmul(xb, w);
        for (int64_t i = 0; i < m * n; ++i) {
            CHECK((*fused.val)[static_cast<size_t>(bt * m * n + i)] ==
                  (*yb.val)[static_cast<size_t>(i)]);
        }
    }

    // Batched x batched against a naive loop.
    Tensor y3 = Tensor::make({B, k, n}, random_vec(rng, static_cast<size_t>(B * k * n)));
    Tensor bmm = tp.matmul(x3, y3);
    for (int64_t bt = 0; bt < B; ++bt) {
        for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (int64_t p = 0; p < k; ++p) {
                    acc += (*x3.val)[static_cast<size_t>((bt * m + i) * k + p)] *
                           (*y3.val)[static_cast<size_t>((bt * k + p) * n + j)];
                }
                CHECK((*bmm.val)[static_cast<size_t>((bt * m + i) * n + j)] ==
                      doctest::Approx(acc).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("matmul gradients match finite differences in all three modes") {
    Rng rng(37);
    SUBCASE("rank2 x rank2") {
        auto all = random_vec(rng, 12);
        Builder build = [](Tape& t, const std::vector<double>& v, bool rg) -> BuildOut {
            Cutter c{v};
            Tensor a = Tensor::make({2, 3}, c.take(6), rg);
            Tensor b = Tensor::make({3, 2}, c.take(6), rg);
            Tensor coef = Tensor::make({2, 2}, {1.0, -2.0, 0.5, 1.5});
            return {t.sum_all(t.mul(t.matmul(a, b), coef)), {a, b}};
        };
        check_grad(all, build, 43, 12);
    }
    SUBCASE("rank3 x rank2") {
        auto all = random_vec(rng, 2 * 2 * 3 + 6);
        Builder build = [](Tape& t, const std::vector<double>& v, bool rg) -> BuildOut {
            Cutter c{v};
            Tensor a = Tensor::make({2, 2, 3}, c.take(12), rg);
            Tensor b = Tensor::make({3, 2}, c.take(6), rg);
            Tensor coef = Tensor::make({2, 2, 2}, {1, -1, 0.5, 2, -0.25, 1.5, 0.75, -2});
            return {t.sum_all(t.mul(t.matmul(a, b), coef)), {a, b}};
        };
        check_grad(all, build, 47, 18);
    }
    SUBCASE("rank3 x rank3") {
        auto all = random_vec(rng, 2 * 2 * 3 + 2 * 3 * 2);
        Builder build = [](Tape& t, const std::vector<double>& v, bool rg) -> BuildOut {
            Cutter c{v};
            Tensor a = Tensor::make({2, 2, 3}, c.take(12), rg);
            Tensor b = Tensor::make({2, 3, 2}, c.take(12), rg);
            Tensor coef = Tensor::make({2, 2, 2}, {2, -1, 1, 0.5, -1.5, 1, 0.25, -0.75});
            return {t.sum_all(t.mul(t.matmul(a, b), coef)), {a, b}};
        };
        check_grad(all, build, 53, 24);
    }
}

TEST_CASE("transpose_last_two round-trips and backpropagates") {
    Tape tp;
    Tensor x = Tensor::make({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor t1 = tp.transpose_last_two(x);
    CHECK(t1.shape == Shape{3, 2});
    CHECK(*t1.val == std::vector<double>{1, 4, 2, 5, 3, 6});
    Tensor t2 = tp.transpose_last_two(t1);
    CHECK(*t2.val == *x.val);

    Rng rng(59);
    auto x0 = random_vec(rng, 12);
    Builder build = [](Tape& t, const std::vector<double>& v, bool rg) -> BuildOut {
        Tensor x = Tensor::make({2, 2, 3}, v, rg);
        Tensor coef = Tensor::make({2, 3, 2}, {1, -1, 2, 0.5, -2, 1.5, 0.25, 1, -0.5, 2, 1, -1});
        return {t.sum_all(t.mul(t.transpose_last_two(x), coef)), {x}};
    };
    check_grad(x0, build, 61, 12);
}

TEST_CASE("concat_last_axis stitches rows and splits gradients") {
    Tape tp;
    Tensor a = Tensor::make({2, 2}, {1, 2, 5, 6});
    Tensor b = Tensor::make({2, 3}, {3, 4, 9, 7, 8, 9});
    Tensor y = tp.concat_last_axis(a, b);
    CHECK(y.shape == Shape{2, 5});
    CHECK(*y.val == std::vector<double>{1, 2, 3, 4, 9, 5, 6, 7, 8, 9});
    CHECK_THROWS_AS(tp.concat_last_axis(a, Tensor::make({3, 1}, {1, 2, 3})), ShapeMismatch);

    Rng rng(67);
    auto all = random_vec(rng, 10);
    Builder build = [](Tape& t, const std::vector<double>& v, bool rg) -> BuildOut {
        Cutter c{v};
        Tensor a = Tensor::make({2, 2}, c.take(4), rg);
        Tensor b = Tensor::make({2, 3}, c.take(6), rg);
        Tensor coef = Tensor::make({2, 5}, {1, -1, 2, 0.5, 1, -2, 1.5, 0.25, 1, -0.5});
        return {t.sum_all(t.mul(t.concat_last_axis(a, b), coef)), {a, b}};
    };
    check_grad(all, build, 71, 10);
}

TEST_CASE("embedding_lookup copies rows and accumulates scattered gradients") {
    Tape tp;
    Tensor table = Tensor::make({3, 4}, {0, 1, 2, 3, 10, 11, 12, 13, 20, 21, 22, 23}, true);
    std::vector<int64_t> ids{0, 1, 0};
    Tensor y = tp.embedding_lookup(table, ids, {3});
    CHECK(y.shape == Shape{3, 4});
    CHECK((*y.val)[0] == 0.0);
    CHECK((*y.val)[4] == 10.0);
    CHECK((*y.val)[8] == 0.0);
    CHECK((*y.val)[11] == 3.0);

    tp.backward(tp.sum_all(y));
    for (int i = 0; i < 4; ++i) {
        CHECK((*table.grad)[static_cast<size_t>(i)] == 2.0);      // id 0 used twice
        CHECK((*table.grad)[static_cast<size_t>(4 + i)] == 1.0);  // id 1 used once
        CHECK((*table.grad)[static_cast<size_t>(8 + i)] == 0.0);  // id 2 unused
    }

    CHECK_THROWS_AS(tp.embedding_lookup(table, {3}, {1}), ShapeMismatch);
    CHECK_THROWS_AS(tp.embedding_lookup(table, {-1}, {1}), ShapeMismatch);
}

TEST_CASE("max_over_axis pools kept positions only") {
    Tape tp;
    // batch 1, len 3, dim 2; the dropped third position holds the largest values
    Tensor x = Tensor::make({1, 3, 2}, {1, 5, 2, 4, 99, 99}, true);
    Mask m{{1, 3}, {1, 1, 0}};
    Tensor y = tp.max_over_axis(x, 1, m);
    CHECK(y.shape == Shape{1, 2});
    CHECK((*y.val)[0] == 2.0);
    CHECK((*y.val)[1] == 5.0);

    tp.backward(tp.sum_all(y));
    std::vector<double> want{0, 1, 1, 0, 0, 0};
    CHECK(*x.grad == want);

    // Altering dropped content never changes the result.
    Tensor x2 = Tensor::make({1, 3, 2}, {1, 5, 2, 4, -123, 7e9});
    Tensor y2 = tp.max_over_axis(x2, 1, m);
    CHECK(*y2.val == *y.val);

    Mask empty{{1, 3}, {0, 0, 0}};
    CHECK_THROWS_AS(tp.max_over_axis(x2, 1, empty), AllMasked);

    // Ties resolve to the earliest kept position.
    Tensor xt = Tensor::make({1, 3, 1}, {7, 7, 7}, true);
    Tape tp2;
    Tensor yt = tp2.max_over_axis(xt, 1, Mask::all(3));
    tp2.backward(tp2.sum_all(yt));
    CHECK(*xt.grad == std::vector<double>{1, 0, 0});
}

TEST_CASE("max_over_axis gradient matches finite differences") {
    Rng rng(73);
    auto x0 = random_vec(rng, 2 * 3 * 4, -2, 2);
    Builder build = [](Tape& t, const std::vector<double>& v, bool rg) -> BuildOut {
        Tensor x = Tensor::make({2, 3, 4}, v, rg);
        Mask m{{2, 3}, {1, 1, 0, 1, 1, 1}};
        Tensor coef = Tensor::make({2, 4}, {1, -2, 0.5, 1.5, -1, 2, 0.25, -0.75});
        return {t.sum_all(t.mul(t.max_over_axis(x, 1, m), coef)), {x}};
    };
    check_grad(x0, build, 79, 16);
}

TEST_CASE("sum_all gradient is ones") {
    Tape tp;
    Tensor x = Tensor::make({3}, {5.0, -2.0, 7.0}, true);
    Tensor s = tp.sum_all(x);
    CHECK((*s.val)[0] == 10.0);
    tp.backward(s);
    CHECK(*x.grad == std::vector<double>{1, 1, 1});
}

TEST_CASE("sum of elementwise square has gradient 2x") {
    Tape tp;
    Tensor x = Tensor::make({2}, {2.0, -1.0}, true);
    tp.backward(tp.sum_all(tp.mul(x, x)));
    CHECK(*x.grad == std::vector<double>{4.0, -2.0});
}

TEST_CASE("backward accumulates across tapes") {
    Tensor x = Tensor::make({3}, {1.0, 2.0, 3.0}, true);
    {
        Tape tp;
        tp.backward(tp.sum_all(x));
    }
    {
        Tape tp;
        tp.backward(tp.sum_all(x));
    }
    CHECK(*x.grad == std::vector<double>{2, 2, 2});
}

TEST_CASE("backward rejects non-scalar losses") {
    Tape tp;
    Tensor x = Tensor::make({2}, {1.0, 2.0}, true);
    Tensor y = tp.relu(x);
    CHECK_THROWS_AS(tp.backward(y), NonScalarLoss);
}

TEST_CASE("mul_scalar scales values and gradients") {
    Tape tp;
    Tensor x = Tensor::make({3}, {1.0, -2.0, 3.0}, true);
    Tensor y = tp.mul_scalar(x, 0.5);
    CHECK(*y.val == std::vector<double>{0.5, -1.0, 1.5});
    tp.backward(tp.sum_all(y));
    CHECK(*x.grad == std::vector<double>{0.5, 0.5, 0.5});
}

TEST_CASE("cross_entropy reproduces hand-computed values") {
    Tape tp;
    SUBCASE("uniform logits over four classes") {
        Tensor z = Tensor::make({1, 4}, {0.7, 0.7, 0.7, 0.7});
        Tensor l = tp.cross_entropy(z, {2});
        CHECK(std::abs((*l.val)[0] - std::log(4.0)) <= 1e-12);
    }
    SUBCASE("two-class example") {
        Tensor z = Tensor::make({1, 2}, {1.0, 0.0});
        Tensor l = tp.cross_entropy(z, {0});
        CHECK(std::abs((*l.val)[0] - std::log1p(std::exp(-1.0))) <= 1e-12);
        CHECK((*l.val)[0] == doctest::Approx(0.313262).epsilon(1e-5));
    }
    SUBCASE("confident-correct limit") {
        Tensor z = Tensor::make({1, 3}, {80.0, 0.0, 0.0});
        Tensor l = tp.cross_entropy(z, {0});
        CHECK((*l.val)[0] >= 0.0);
        CHECK((*l.val)[0] < 1e-12);
    }
    SUBCASE("bad target ids") {
        Tensor z = Tensor::make({2, 3}, {1, 2, 3, 4, 5, 6});
        CHECK_THROWS_AS(tp.cross_entropy(z, {0, 3}), BadTargetId);
        CHECK_THROWS_AS(tp.cross_entropy(z, {-1, 0}), BadTargetId);
    }
    SUBCASE("huge logits stay finite") {
        Tensor z = Tensor::make({1, 2}, {5000.0, -5000.0});
        Tensor l = tp.cross_entropy(z, {1});
        CHECK(std::isfinite((*l.val)[0]));
        CHECK((*l.val)[0] == doctest::Approx(10000.0).epsilon(1e-9));
    }
}

TEST_CASE("cross_entropy weighting normalizes by applied weights") {
    Tape tp;
    Tensor z = Tensor::make({3, 3}, {1, 0, -1, 0.5, 2, 0, -2, 1, 1}, false);
    std::vector<int64_t> t{0, 1, 2};
    double plain = (*tp.cross_entropy(z, t).val)[0];

    double ones = (*tp.cross_entropy(z, t, {1.0, 1.0, 1.0}).val)[0];
    CHECK(ones == plain);

    double halves = (*tp.cross_entropy(z, t, {2.5, 2.5, 2.5}).val)[0];
    CHECK(std::abs(halves - plain) <= 1e-12);

    // Manual two-row weighted mean.
    Tensor z2 = Tensor::make({2, 2}, {1, 0, 0, 1});
    double l0 = std::log1p(std::exp(-1.0)); // row 0 target 0
    double l1 = std::log1p(std::exp(-1.0)); // row 1 target 1
    double got = (*tp.cross_entropy(z2, {0, 1}, {3.0, 1.0}).val)[0];
    CHECK(std::abs(got - (3.0 * l0 + 1.0 * l1) / 4.0) <= 1e-12);

    CHECK_THROWS_AS(tp.cross_entropy(z2, {0, 1}, {1.0, 0.0}), EngineError);
    CHECK_THROWS_AS(tp.cross_entropy(z2, {0, 1}, {1.0}), ShapeMismatch);
}

TEST_CASE("cross_entropy gradient matches finite differences") {
    Rng rng(83);
    auto x0 = random_vec(rng, 12, -2, 2);
    Builder build = [](Tape& t, const std::vector<double>& v, bool rg) -> BuildOut {
        Tensor z = Tensor::make({4, 3}, v, rg);
        return {t.cross_entropy(z, {0, 2, 1, 1}, {1.5, 0.5, 2.0}), {z}};
    };
    check_grad(x0, build, 89, 12);
}

TEST_CASE("log_cosh reproduces hand-computed values") {
    Tape tp;
    Tensor p = Tensor::make({3}, {1.0, 2.0, 3.0});
    Tensor q = Tensor::make({3}, {1.0, 2.0, 3.0});
    CHECK((*tp.log_cosh(p, q).val)[0] == 0.0);

    Tensor a = Tensor::make({1}, {1.0});
    Tensor b = Tensor::make({1}, {0.0});
    double v = (*tp.log_cosh(a, b).val)[0];
    CHECK(std::abs(v - std::log(std::cosh(1.0))) <= 1e-12);
    CHECK(v == doctest::Approx(0.433781).epsilon(1e-5));

    Tensor big = Tensor::make({1}, {100.0});
    double w = (*tp.log_cosh(big, b).val)[0];
    CHECK(std::isfinite(w));
    CHECK(std::abs(w - (100.0 - std::numbers::ln2)) <= 1e-12);

    // Identity agrees with the naive formula where cosh does not overflow.
    Rng rng(97);
    for (int i = 0; i < 50; ++i) {
        double x = rng.uniform(-5.0, 5.0);
        Tensor pp = Tensor::make({1}, {x});
        Tensor tt = Tensor::make({1}, {0.0});
        CHECK(std::abs((*tp.log_cosh(pp, tt).val)[0] - std::log(std::cosh(x))) <= 1e-12);
    }
    CHECK_THROWS_AS(tp.log_cosh(p, Tensor::make({2}, {1.0, 2.0})), ShapeMismatch);
}

TEST_CASE("log_cosh gradient matches finite differences") {
    Rng rng(101);
    auto x0 = random_vec(rng, 6, -3, 3);
    Builder build = [](Tape& t, const std::vector<double>& v, bool rg) -> BuildOut {
        Tensor p = Tensor::make({6}, v, rg);
        Tensor q = Tensor::make({6}, {0.5, -1.0, 2.0, 0.0, 1.5, -2.5});
        return {t.log_cosh(p, q), {p}};
    };
    check_grad(x0, build, 103, 6);

    // Gradient on the target mirrors the prediction gradient.
    Tape tp;
    Tensor p = Tensor::make({2}, {1.0, -2.0}, true);
    Tensor q = Tensor::make({2}, {0.5, 0.5}, true);
    tp.backward(tp.log_cosh(p, q));
    CHECK((*p.grad)[0] == doctest::Approx(-(*q.grad)[0]).epsilon(1e-15));
    CHECK((*p.grad)[1] == doctest::Approx(-(*q.grad)[1]).epsilon(1e-15));
}

TEST_CASE("dropout is identity when not training") {
    Tape tp;
    Rng rng(5);
    Rng before = rng;
    Tensor x = Tensor::make({5}, {1, -2, 3, -4, 5}, true);
    Tensor y = tp.dropout(x, 0.1, false, rng);
    CHECK(std::memcmp(y.val->data(), x.val->data(), 5 * sizeof(double)) == 0);
    // The generator is untouched, so later draws are unaffected.
    CHECK(rng.next_u64() == before.next_u64());

    tp.backward(tp.sum_all(y));
    CHECK(*x.grad == std::vector<double>{1, 1, 1, 1, 1});

    Rng rng2(5);
    Tensor z = tp.dropout(x, 0.0, true, rng2);
    CHECK(std::memcmp(z.val->data(), x.val->data(), 5 * sizeof(double)) == 0);

    CHECK_THROWS_AS(tp.dropout(x, 1.0, true, rng2), EngineError);
    CHECK_THROWS_AS(tp.dropout(x, -0.1, true, rng2), EngineError);
}

TEST_CASE("dropout preserves expectation and routes gradients by kept mask") {
    Tape tp;
    Rng rng(1234);
    size_t n = 100000;
    double rate = 0.1;
    Tensor x = Tensor::make({static_cast<int64_t>(n)}, std::vector<double>(n, 1.0), true);
    Tensor y = tp.dropout(x, rate, true, rng);
    double scale = 1.0 / (1.0 - rate);
    double mean = 0.0;
    size_t dropped = 0;
    for (size_t i = 0; i < n; ++i) {
        double v = (*y.val)[i];
        CHECK((v == 0.0 || v == scale));
        if (v == 0.0) ++dropped;
        mean += v;
    }
    mean /= static_cast<double>(n);
    CHECK(std::abs(mean - 1.0) <= 0.01);
    CHECK(static_cast<double>(dropped) / static_cast<double>(n) ==
          doctest::Approx(rate).epsilon(0.15));

    tp.backward(tp.sum_all(y));
    for (size_t i = 0; i < n; i += 997) {
        CHECK((*x.grad)[i] == ((*y.val)[i] == 0.0 ? 0.0 : scale));
    }
}

TEST_CASE("with_grad_sink reroutes gradient accumulation") {
    Tensor param = Tensor::make({3}, {1.0, 2.0, 3.0}, true);
    auto sink = std::make_shared<std::vector<double>>();
    Tensor bound = param.with_grad_sink(sink);
    CHECK(bound.val == param.val); // values shared, no copy

    Tape tp;
    tp.backward(tp.sum_all(bound));
    CHECK(*sink == std::vector<double>{1, 1, 1});
    CHECK(*param.grad == std::vector<double>{0, 0, 0});
}

TEST_CASE("attention-style composition passes finite differences") {
    // Two-head self-attention block over a [2, 3, 8] input: projections,
    // masked softmax, concat, output projection, residual + layer norm,
    // position-wise feed-forward, second residual + layer norm.
    const int64_t B = 2, L = 3, D = 8, H = 2, K = 4, F = 16;
    const int64_t sizes[] = {B * L * D,                    // x
                             D * K, D * K, D * K,          // head 0
                             D * K, D * K, D * K,          // head 1
                             D * D,                        // Wo
                             D, D,                         // ln1 gain/bias
                             D * F, F, F * D, D,           // ffn
                             D, D};                        // ln2 gain/bias
    Rng rng(271828);
    std::vector<double> x0;
    int idx = 0;
    for (int64_t s : sizes) {
        bool is_gain = (idx == 8 || idx == 14);
        for (int64_t i = 0; i < s; ++i) {
            x0.push_back(rng.uniform(-0.4, 0.4) + (is_gain ? 1.0 : 0.0));
        }
        ++idx;
    }

    Builder build = [&](Tape& tp, const std::vector<double>& v, bool rg) -> BuildOut {
        Cutter c{v};
        std::vector<Tensor> leaves;
        auto leaf = [&](Shape s) {
            Tensor t = Tensor::make(s, c.take(shape_size(s)), rg);
            leaves.push_back(t);
            return t;
        };
        Tensor x = leaf({B, L, D});
        Mask mask{{B, L}, {1, 1, 0, 1, 1, 1}};

        std::vector<Tensor> heads;
        for (int64_t h = 0; h < H; ++h) {
            Tensor wq = leaf({D, K}), wk = leaf({D, K}), wv = leaf({D, K});
            Tensor q = tp.matmul(x, wq);
            Tensor k = tp.matmul(x, wk);
            Tensor vv = tp.matmul(x, wv);
            Tensor scores = tp.mul_scalar(tp.matmul(q, tp.transpose_last_two(k)),
                                          1.0 / std::sqrt(static_cast<double>(K)));
            heads.push_back(tp.matmul(tp.softmax_last_axis(scores, mask), vv));
        }
        Tensor cat = tp.concat_last_axis(heads[0], heads[1]);
        Tensor wo = leaf({D, D});
        Tensor mha = tp.matmul(cat, wo);
        Tensor g1 = leaf({D}), b1 = leaf({D});
        Tensor y1 = tp.layer_norm_last_axis(tp.add(x, mha), g1, b1);
        Tensor w1 = leaf({D, F}), bb1 = leaf({F});
        Tensor w2 = leaf({F, D}), bb2 = leaf({D});
        Tensor hidden = tp.relu(tp.add(tp.matmul(y1, w1), bb1));
        Tensor ffn = tp.add(tp.matmul(hidden, w2), bb2);
        Tensor g2 = leaf({D}), b2 = leaf({D});
        Tensor y2 = tp.layer_norm_last_axis(tp.add(y1, ffn), g2, b2);

        std::vector<double> cv(static_cast<size_t>(B * L * D));
        for (size_t i = 0; i < cv.size(); ++i) {
            cv[i] = 0.05 * static_cast<double>(i % 13) - 0.3;
        }
        Tensor coef = Tensor::make({B, L, D}, cv);
        return {tp.sum_all(tp.mul(y2, coef)), leaves};
    };
    check_grad(x0, build, 314159, 60);
}
