#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gbgn/tape.hpp"

#include <cmath>
#include <random>

using namespace gbgn;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data) {
        const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
        v = lo + (hi - lo) * u;
    }
    return t;
}

} // namespace

TEST_CASE("relu follows its definition") {
    Tape tape;
    ValueId x = tape.constant(Tensor({3}, {-1.0, 0.0, 2.0}));
    ValueId y = tape.relu(x);
    CHECK(tape.value(y).data == std::vector<double>{0.0, 0.0, 2.0});
}

TEST_CASE("conv2d with an identity kernel reproduces the image") {
    std::mt19937_64 rng(7);
    Tensor img = random_tensor({2, 6, 8}, rng);
    Tensor kernel = Tensor::zeros({2, 2, 3, 3});
    kernel.data[(0 * 2 + 0) * 9 + 4] = 1.0; // center tap, channel 0 -> 0
    kernel.data[(1 * 2 + 1) * 9 + 4] = 1.0; // center tap, channel 1 -> 1
    Tape tape;
    ValueId y = tape.conv2d(tape.constant(img), tape.constant(kernel));
    CHECK(tape.value(y).data == img.data);
    CHECK(tape.value(y).shape == img.shape);
}

TEST_CASE("matmul against the identity") {
    Tape tape;
    ValueId a = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
    ValueId eye = tape.constant(Tensor({2, 2}, {1, 0, 0, 1}));
    ValueId c = tape.matmul(a, eye);
    CHECK(tape.value(c).data == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("backward of mean distributes uniformly") {
    ParamRegistry reg;
    reg.add("theta", Tensor({4}, {1, 2, 3, 4}), ParamTag::Shared);
    Tape tape(&reg);
    ValueId theta = tape.param(0);
    Gradients g = tape.backward(tape.mean(theta));
    for (double v : g) CHECK(v == 0.25);
}

TEST_CASE("backward of a sum of squares") {
    ParamRegistry reg;
    reg.add("theta", Tensor({2}, {1.0, -2.0}), ParamTag::Shared);
    Tape tape(&reg);
    ValueId theta = tape.param(0);
    ValueId sumsq = tape.scale(tape.mean(tape.mul(theta, theta)), 2.0); // mean * n = sum
    Gradients g = tape.backward(sumsq);
    CHECK(g[0] == doctest::Approx(2.0));
    CHECK(g[1] == doctest::Approx(-4.0));
}

TEST_CASE("gradients of parameters unused by the root are exactly zero") {
    ParamRegistry reg;
    reg.add("used", Tensor({2}, {1.0, 2.0}), ParamTag::Shared);
    reg.add("unused", Tensor({3}, {5.0, 6.0, 7.0}), ParamTag::Shared);
    Tape tape(&reg);
    ValueId used = tape.param(0);
    Gradients g = tape.backward(tape.mean(used));
    CHECK(g.size() == 5);
    CHECK(g[2] == 0.0);
    CHECK(g[3] == 0.0);
    CHECK(g[4] == 0.0);
}

TEST_CASE("shape mismatch raises a contract violation naming the kind") {
    Tape tape;
    ValueId a = tape.constant(Tensor({2}, {1, 2}));
    ValueId b = tape.constant(Tensor({3}, {1, 2, 3}));
    CHECK_THROWS_WITH_AS(tape.add(a, b), doctest::Contains("add"), ContractViolation);
}

TEST_CASE("non-finite outputs raise a numeric error") {
    Tape tape;
    ValueId x = tape.constant(Tensor({1}, {1000.0}));
    CHECK_THROWS_AS(tape.exp(x), NumericError);
}

TEST_CASE("bilinear warp with zero offset is the identity") {
    std::mt19937_64 rng(3);
    Tensor img = random_tensor({3, 4, 7}, rng);
    Tape tape;
    ValueId y = tape.bilinear_warp_1d(tape.constant(img), tape.constant(Tensor::zeros({1, 4, 7})));
    CHECK(tape.value(y).data == img.data);
}

TEST_CASE("warp offset derivative at integer offsets uses the left cell") {
    // Row values 0, 1, 4: at u = 1 the left cell's slope is 1 - 0 = 1, so
    // d(out)/d(d) = -1 at the pixel x = 2 sampling u = x - d = 1.
    ParamRegistry reg;
    reg.add("d", Tensor::full({1, 1, 3}, 1.0), ParamTag::Shared);
    Tape tape(&reg);
    ValueId right = tape.constant(Tensor({1, 1, 3}, {0.0, 1.0, 4.0}));
    ValueId warped = tape.bilinear_warp_1d(right, tape.param(0));
    // select pixel x=2: mean * 3 picks out each; use mask
    ValueId mask = tape.constant(Tensor({1, 1, 3}, {0.0, 0.0, 3.0}));
    Gradients g = tape.backward(tape.mean(tape.mul(warped, mask)));
    CHECK(g[2] == -1.0);
    // pixel x=1 samples u = 0: clamp plateau, derivative 0
    CHECK(g[1] == 0.0);
}

TEST_CASE("tapes replay deterministically") {
    std::mt19937_64 rng(11);
    ParamRegistry reg;
    reg.add("w", random_tensor({4, 3, 3, 3}, rng), ParamTag::Shared);
    Tape tape(&reg);
    ValueId x = tape.constant(random_tensor({1, 3, 8, 8}, rng));
    ValueId y = tape.mean(tape.relu(tape.conv2d(x, tape.param(0))));
    const std::vector<double> before = tape.value(y).data;
    Gradients g1 = tape.backward(y);
    tape.replay();
    CHECK(tape.value(y).data == before);
    CHECK(tape.backward(y) == g1);
}

TEST_CASE("adjoint is linear in the root combination") {
    std::mt19937_64 rng(1234);
    for (int trial = 0; trial < 8; ++trial) {
        ParamRegistry reg;
        reg.add("w", random_tensor({8}, rng), ParamTag::Shared);
        Tape tape(&reg);
        ValueId w = tape.param(0);
        ValueId f = tape.mean(tape.mul(w, w));
        ValueId g = tape.mean(tape.sigmoid(w));
        const double a = 0.5 + trial, b = 1.25 * trial - 2.0;
        ValueId combo = tape.add(tape.scale(f, a), tape.scale(g, b));
        Gradients gc = tape.backward(combo);
        Gradients gf = tape.backward(f);
        Gradients gg = tape.backward(g);
        for (size_t i = 0; i < gc.size(); ++i)
            CHECK(gc[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-12));
    }
}
