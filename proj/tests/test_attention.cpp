#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "support/checks.hpp"
#include "support/finite_diff.hpp"
#include "vlmoe/attention.hpp"

using namespace vlmoe;
using vlmoe::testing::random_tensor;

TEST_CASE("single-row sequence returns its value row", "[attention]") {
    Tape tape;
    Rng rng(3);
    Tensor q = random_tensor({1, 8}, rng);
    Tensor k = random_tensor({1, 8}, rng);
    Tensor v = random_tensor({1, 8}, rng);
    Tensor out = multi_head_attention(tape, q, k, v, 2, {0, 1});
    for (int j = 0; j < 8; ++j) CHECK(out.at(0, j) == Catch::Approx(v.at(0, j)).margin(1e-14));
}

TEST_CASE("uniform keys average the values", "[attention]") {
    Tape tape;
    Rng rng(4);
    Tensor q = random_tensor({3, 4}, rng);
    Tensor k({3, 4});  // zero keys: every dot is zero, softmax is uniform
    Tensor v = random_tensor({3, 4}, rng);
    Tensor out = multi_head_attention(tape, q, k, v, 1, {0, 3});
    for (int j = 0; j < 4; ++j) {
        double mean = (v.at(0, j) + v.at(1, j) + v.at(2, j)) / 3.0;
        for (int i = 0; i < 3; ++i) CHECK(out.at(i, j) == Catch::Approx(mean).margin(1e-14));
    }
}

TEST_CASE("sequences never attend across bounds", "[attention]") {
    Rng rng(9);
    Tensor q = random_tensor({5, 8}, rng);
    Tensor k = random_tensor({5, 8}, rng);
    Tensor v = random_tensor({5, 8}, rng);

    Tape t1;
    Tensor base = multi_head_attention(t1, q, k, v, 2, {0, 2, 5});

    // Perturb every row of the second sequence; the first must not move.
    Tensor k2 = k, v2 = v;
    for (int i = 2; i < 5; ++i)
        for (int j = 0; j < 8; ++j) {
            k2.data()[i * 8 + j] += 3.0;
            v2.data()[i * 8 + j] -= 2.0;
        }
    Tape t2;
    Tensor moved = multi_head_attention(t2, q, k2, v2, 2, {0, 2, 5});
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 8; ++j) CHECK(moved.at(i, j) == base.at(i, j));

    // Splitting into separate calls gives the same rows as one bounded call.
    Tape t3;
    Tensor merged = multi_head_attention(t3, q, k, v, 2, {0, 5});
    bool any_diff = false;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 8; ++j)
            if (std::abs(merged.at(i, j) - base.at(i, j)) > 1e-12) any_diff = true;
    CHECK(any_diff);  // bounds actually restrict the receptive field
}

TEST_CASE("heads act on disjoint column slices", "[attention]") {
    Rng rng(12);
    Tensor q = random_tensor({4, 8}, rng);
    Tensor k = random_tensor({4, 8}, rng);
    Tensor v = random_tensor({4, 8}, rng);
    Tape t1;
    Tensor two = multi_head_attention(t1, q, k, v, 2, {0, 4});

    // Head 0 of the 2-head result must match a 1-head pass on columns 0..3.
    auto slice_cols = [](const Tensor& t, int lo, int hi) {
        Tensor out({t.dim(0), hi - lo});
        for (int i = 0; i < t.dim(0); ++i)
            for (int j = lo; j < hi; ++j) out.data()[i * (hi - lo) + (j - lo)] = t.at(i, j);
        return out;
    };
    Tape t2;
    Tensor head0 = multi_head_attention(t2, slice_cols(q, 0, 4), slice_cols(k, 0, 4),
                                        slice_cols(v, 0, 4), 1, {0, 4});
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) CHECK(two.at(i, j) == Catch::Approx(head0.at(i, j)).margin(1e-14));
}

TEST_CASE("attention argument contracts", "[attention]") {
    Tape tape;
    Rng rng(2);
    Tensor q = random_tensor({4, 8}, rng);
    CHECK_THROWS_AS(multi_head_attention(tape, q, q, random_tensor({4, 6}, rng), 2, {0, 4}),
                    ShapeError);
    CHECK_THROWS_AS(multi_head_attention(tape, q, q, q, 3, {0, 4}), ContractError);
    CHECK_THROWS_AS(multi_head_attention(tape, q, q, q, 2, {0, 3}), ContractError);
    CHECK_THROWS_AS(multi_head_attention(tape, q, q, q, 2, {0, 2, 2, 4}), ContractError);
}

TEST_CASE("attention gradients match finite differences", "[attention][grad]") {
    Rng rng(31);
    Tensor q = random_tensor({5, 8}, rng);
    Tensor k = random_tensor({5, 8}, rng);
    Tensor v = random_tensor({5, 8}, rng);
    Tensor probe = vlmoe::testing::make_probe({5, 8}, rng);

    vlmoe::testing::GradCheck chk;
    chk.params = {&q, &k, &v};
    chk.build = [&](Tape& t) {
        Tensor out = multi_head_attention(t, q, k, v, 2, {0, 2, 5});
        return vlmoe::testing::probe_loss(t, out, probe);
    };
    CHECK(chk.max_rel_err() < 1e-5);
}
