#pragma once

#include "vlmoe/rng.hpp"
#include "vlmoe/tensor.hpp"

namespace vlmoe {

// Two-layer position-wise feed-forward: y = gelu(x W1) W2. Weights are stored
// input-major, so w1 is [d_model x d_inner] and w2 is [d_inner x d_model].
struct FfnParams {
    Tensor w1;
    Tensor w2;

    static FfnParams init(Rng& rng, int d_model, int d_inner, double init_std) {
        return FfnParams{Tensor::trunc_normal(rng, {d_model, d_inner}, init_std),
                         Tensor::trunc_normal(rng, {d_inner, d_model}, init_std)};
    }
};

inline Tensor ffn_forward(Tape& tape, const Tensor& x, const FfnParams& p) {
    return matmul(tape, gelu(tape, matmul(tape, x, p.w1)), p.w2);
}

}  // namespace vlmoe
