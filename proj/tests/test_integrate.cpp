#include <catch2/catch_amalgamated.hpp>

#include <cstring>

#include "recast/autograd.hpp"
#include "recast/integrate.hpp"
#include "recast/rng.hpp"
#include "support/finite_diff.hpp"

using namespace recast;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = rng.normal();
    return t;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
    return a.same_shape(b) &&
           std::memcmp(a.data(), b.data(), a.numel() * sizeof(double)) == 0;
}

} // namespace

TEST_CASE("combine_lora: identity and rank-1 update") {
    Rng rng(1);
    Tensor w = random_tensor({3, 4}, rng);
    REQUIRE(bit_equal(combine_lora(w, Tensor({3, 2}), Tensor({2, 4})), w));

    Tensor i2 = Tensor::identity(2);
    Tensor b({2, 1}, {1.0, 0.0});
    Tensor a({1, 2}, {0.0, 1.0});
    Tensor out = combine_lora(i2, b, a);
    REQUIRE(out(0, 0) == 1.0);
    REQUIRE(out(0, 1) == 1.0);
    REQUIRE(out(1, 0) == 0.0);
    REQUIRE(out(1, 1) == 1.0);

    REQUIRE_THROWS_AS(combine_lora(i2, Tensor({3, 1}), a), shape_error);
}

TEST_CASE("LoRA factor gradient matches finite differences through a task loss") {
    Rng rng(3);
    Tensor w = random_tensor({3, 3}, rng);
    Tensor b = random_tensor({3, 2}, rng);
    Tensor a = random_tensor({2, 3}, rng);
    Tensor x = random_tensor({4, 3}, rng);
    std::vector<std::size_t> labels = {0, 1, 2, 0};

    auto eval = [&](Tensor* grad_b) {
        Tape tape;
        Value wv = tape.constant(w);
        Value bv = tape.leaf(b);
        Value av = tape.leaf(a);
        Value merged = ops::add(wv, ops::matmul(bv, av));
        Value logits = ops::matmul(tape.constant(x), merged);
        Value loss = ops::softmax_cross_entropy(logits, labels);
        if (grad_b) {
            tape.backward(loss);
            *grad_b = tape.grad(bv);
        }
        return loss.val()[0];
    };

    Tensor grad_b;
    eval(&grad_b);
    for (std::size_t i = 0; i < b.numel(); ++i) {
        const double fd = testsupport::central_diff(b, i, [&] { return eval(nullptr); });
        REQUIRE(testsupport::rel_err(grad_b[i], fd) < 1e-5);
    }
}

TEST_CASE("combine_mask: identity, zero, and support law") {
    Rng rng(5);
    Tensor w = random_tensor({4, 4}, rng);
    REQUIRE(bit_equal(combine_mask(w, Tensor::full({4, 4}, 1.0)), w));

    Tensor zeroed = combine_mask(w, Tensor({4, 4}));
    for (std::size_t i = 0; i < 16; ++i) REQUIRE(zeroed[i] == 0.0);

    Tensor m({4, 4});
    for (std::size_t i = 0; i < 16; ++i) m[i] = rng.below(2) ? 1.0 : 0.0;
    Tensor out = combine_mask(w, m);
    for (std::size_t i = 0; i < 16; ++i) {
        REQUIRE((out[i] != 0.0) == (w[i] != 0.0 && m[i] != 0.0));
    }

    REQUIRE_THROWS_AS(combine_mask(w, Tensor::full({4, 4}, 0.5)), value_error);
}

TEST_CASE("combine_dora: fixed point, norm preservation, scaling audit") {
    Rng rng(7);
    Tensor w = random_tensor({4, 4}, rng);
    REQUIRE(bit_equal(combine_dora(w, Tensor({4, 2}), Tensor({2, 4})), w));

    Tensor b = random_tensor({4, 2}, rng);
    Tensor a = random_tensor({2, 4}, rng);
    Tensor out = combine_dora(w, b, a);
    REQUIRE(std::abs(frobenius_norm(out) - frobenius_norm(w)) < 1e-10);

    for (double t : {0.1, 1.0, 10.0}) {
        Tensor scaled = combine_dora(w, tensor_scale(b, t), a);
        REQUIRE(std::abs(frobenius_norm(scaled) - frobenius_norm(w)) < 1e-10);
    }

    REQUIRE_THROWS_AS(
        combine_dora(Tensor({2, 2}), Tensor({2, 1}), Tensor({1, 2})), numeric_error);
}

TEST_CASE("combine_rosa: identities and brute-force oracle") {
    Rng rng(9);
    Tensor w = random_tensor({3, 5}, rng);
    REQUIRE(bit_equal(
        combine_rosa(w, Tensor({3, 5}), Tensor({3, 2}), Tensor({2, 5})), w));

    Tensor doubled = combine_rosa(w, Tensor::full({3, 5}, 1.0), Tensor({3, 2}), Tensor({2, 5}));
    for (std::size_t i = 0; i < w.numel(); ++i) REQUIRE(doubled[i] == 2.0 * w[i]);

    Tensor s({3, 5});
    for (std::size_t i = 0; i < s.numel(); ++i) s[i] = rng.below(2) ? 1.0 : 0.0;
    Tensor b = random_tensor({3, 2}, rng);
    Tensor a = random_tensor({2, 5}, rng);
    Tensor out = combine_rosa(w, s, b, a);
    Tensor ba = tensor_matmul(b, a);
    for (std::size_t i = 0; i < w.numel(); ++i) {
        REQUIRE(std::abs(out[i] - (w[i] + s[i] * w[i] + ba[i])) < 1e-12);
    }

    REQUIRE_THROWS_AS(combine_rosa(w, tensor_scale(s, 0.3), b, a), value_error);
}

TEST_CASE("merged dense export matches the composed forward") {
    Rng rng(11);
    Tensor w = random_tensor({4, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    Tensor a = random_tensor({2, 4}, rng);
    Tensor x = random_tensor({3, 4}, rng);

    Tensor merged = combine_lora(w, b, a);
    Tensor via_merged = tensor_matmul(x, merged);
    Tensor composed = tensor_add(tensor_matmul(x, w), tensor_matmul(tensor_matmul(x, b), a));
    for (std::size_t i = 0; i < via_merged.numel(); ++i) {
        REQUIRE(std::abs(via_merged[i] - composed[i]) < 1e-12);
    }
}
