#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "vlmoe/tensor.hpp"

namespace vlmoe {

// Scaled dot-product attention over already-projected q/k/v, fused into one
// tape node. Rows are a batch of sequences laid out back to back; `bounds`
// holds the start offsets plus a final end offset, and attention never
// crosses a boundary. Heads are contiguous column slices of width d/n_heads.
inline Tensor multi_head_attention(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v,
                                   int n_heads, const std::vector<int>& bounds) {
    if (q.rank() != 2) throw ShapeError("attention: q must be rank 2");
    detail::require_same_shape(q, k, "attention");
    detail::require_same_shape(q, v, "attention");
    const int n = q.dim(0), d = q.dim(1);
    if (n_heads <= 0 || d % n_heads != 0)
        throw ContractError("attention: width " + std::to_string(d) + " not divisible by " +
                            std::to_string(n_heads) + " heads");
    if (bounds.size() < 2 || bounds.front() != 0 || bounds.back() != n)
        throw ContractError("attention: sequence bounds must cover all rows");
    const int dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor out({n, d});
    // Softmax probabilities, kept for backward: per sequence, per head, a
    // dense [len x len] block.
    auto probs = std::make_shared<std::vector<std::vector<double>>>();

    const int n_seq = static_cast<int>(bounds.size()) - 1;
    for (int s = 0; s < n_seq; ++s) {
        const int b = bounds[static_cast<size_t>(s)];
        const int len = bounds[static_cast<size_t>(s) + 1] - b;
        if (len <= 0) throw ContractError("attention: empty or negative-length sequence");
        for (int h = 0; h < n_heads; ++h) {
            std::vector<double> p(static_cast<size_t>(len) * len);
            for (int i = 0; i < len; ++i) {
                const double* qi = q.ptr() + (b + i) * d + h * dh;
                double* pi = p.data() + static_cast<size_t>(i) * len;
                for (int j = 0; j < len; ++j) {
                    const double* kj = k.ptr() + (b + j) * d + h * dh;
                    double dot = 0.0;
                    for (int c = 0; c < dh; ++c) dot += qi[c] * kj[c];
                    pi[j] = dot * scale;
                }
                softmax_row_inplace(pi, pi, len);
                double* oi = out.ptr() + (b + i) * d + h * dh;
                for (int j = 0; j < len; ++j) {
                    const double* vj = v.ptr() + (b + j) * d + h * dh;
                    for (int c = 0; c < dh; ++c) oi[c] += pi[j] * vj[c];
                }
            }
            probs->push_back(std::move(p));
        }
    }

    if (q.node >= 0 || k.node >= 0 || v.node >= 0) {
        out.node = tape.record(
            out.size(), {q.node, k.node, v.node},
            [q, k, v, probs, bounds, n_heads, dh, d, scale](Tape& t,
                                                            const std::vector<double>& g) {
                const int n_seq = static_cast<int>(bounds.size()) - 1;
                double* dq = q.node >= 0 ? t.grad_buffer(q.node).data() : nullptr;
                double* dk = k.node >= 0 ? t.grad_buffer(k.node).data() : nullptr;
                double* dv = v.node >= 0 ? t.grad_buffer(v.node).data() : nullptr;
                size_t block = 0;
                for (int s = 0; s < n_seq; ++s) {
                    const int b = bounds[static_cast<size_t>(s)];
                    const int len = bounds[static_cast<size_t>(s) + 1] - b;
                    for (int h = 0; h < n_heads; ++h, ++block) {
                        const std::vector<double>& p = (*probs)[block];
                        for (int i = 0; i < len; ++i) {
                            const double* gi = g.data() + (b + i) * d + h * dh;
                            const double* pi = p.data() + static_cast<size_t>(i) * len;
                            // dP_ij = dO_i . V_j, then softmax backward rows.
                            std::vector<double> dp(static_cast<size_t>(len));
                            double dot = 0.0;
                            for (int j = 0; j < len; ++j) {
                                const double* vj = v.ptr() + (b + j) * d + h * dh;
                                double acc = 0.0;
                                for (int c = 0; c < dh; ++c) acc += gi[c] * vj[c];
                                dp[static_cast<size_t>(j)] = acc;
                                dot += acc * pi[j];
                                if (dv) {
                                    double* dvj = dv + (b + j) * d + h * dh;
                                    for (int c = 0; c < dh; ++c) dvj[c] += pi[j] * gi[c];
                                }
                            }
                            for (int j = 0; j < len; ++j) {
                                const double ds = pi[j] * (dp[static_cast<size_t>(j)] - dot) * scale;
                                if (dq) {
                                    double* dqi = dq + (b + i) * d + h * dh;
                                    const double* kj = k.ptr() + (b + j) * d + h * dh;
                                    for (int c = 0; c < dh; ++c) dqi[c] += ds * kj[c];
                                }
                                if (dk) {
                                    double* dkj = dk + (b + j) * d + h * dh;
                                    const double* qi = q.ptr() + (b + i) * d + h * dh;
                                    for (int c = 0; c < dh; ++c) dkj[c] += ds * qi[c];
                                }
                            }
                        }
                    }
                }
            });
    }
    return out;
}

}  // namespace vlmoe
