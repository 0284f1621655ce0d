#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "vlmoe/ffn.hpp"
#include "vlmoe/rng.hpp"
#include "vlmoe/tensor.hpp"

namespace vlmoe {

// Gating matrix plus the routing-noise scale. noise_sigma = 0 disables noise
// exactly; the conventional default is 1/E.
struct RouterParams {
    Tensor w_g;  // [E x D]
    double noise_sigma = 0.0;

    int n_experts() const { return w_g.dim(0); }

    static RouterParams init(Rng& rng, int n_experts, int d_model, double init_std) {
        RouterParams r;
        r.w_g = Tensor::trunc_normal(rng, {n_experts, d_model}, init_std);
        r.noise_sigma = 1.0 / n_experts;
        return r;
    }
};

struct GateResult {
    Tensor gates;         // [n x E] softmax of the decision logits
    Tensor clean_logits;  // [n x E] tokens . W_g^T
    Tensor noisy_logits;  // clean + sampled perturbation during training
};

// Computes decision logits and gate weights. The noise sample is a constant
// offset; gradients reach W_g and the tokens through clean_logits only.
inline GateResult gate(Tape& tape, const RouterParams& router, const Tensor& tokens, bool training,
                       Rng& rng) {
    if (tokens.rank() != 2 || tokens.dim(1) != router.w_g.dim(1))
        throw ShapeError("gate: token width " + shape_str(tokens.shape()) +
                         " does not match gating matrix " + shape_str(router.w_g.shape()));
    GateResult r;
    r.clean_logits = matmul(tape, tokens, transpose(tape, router.w_g));
    if (training && router.noise_sigma > 0.0) {
        Tensor eps(r.clean_logits.shape());
        for (double& v : eps.data()) v = router.noise_sigma * rng.normal();
        r.noisy_logits = add(tape, r.clean_logits, eps);
    } else {
        r.noisy_logits = r.clean_logits;
    }
    r.gates = softmax_rows(tape, r.noisy_logits);
    return r;
}

// Per-expert buffer size: ceil(C * k * n / E), never below one slot.
inline int compute_capacity(int n_tokens, int n_experts, int top_k, double factor) {
    if (n_tokens <= 0 || n_experts <= 0 || top_k <= 0 || factor <= 0.0)
        throw ContractError("compute_capacity: all arguments must be positive");
    const double raw = factor * top_k * n_tokens / n_experts;
    return std::max(1, static_cast<int>(std::ceil(raw)));
}

// One (token, expert) pairing of the plan. rank 0 is the token's strongest
// choice; slot is the claimed buffer index, -1 when dropped.
struct Assignment {
    int token;
    int expert;
    int rank;
    double gate;
    bool kept;
    int slot;
};

struct RoutingPlan {
    Tensor gates;
    Tensor clean_logits;
    Tensor noisy_logits;
    int n_tokens = 0;
    int n_experts = 0;
    int top_k = 0;
    std::vector<int> capacity;            // per expert
    std::vector<Assignment> assignments;  // claim order: rank-major, priority within rank
    std::vector<int> by_token;            // [n*k] index into assignments, token-major by rank

    const Assignment& choice(int token, int rank) const {
        return assignments[static_cast<size_t>(by_token[static_cast<size_t>(token) * top_k + rank])];
    }
};

namespace detail {

// The k column indices of the largest row entries, descending, ties toward
// the lower expert id.
inline void topk_row(const double* row, int e, int k, int* out) {
    std::vector<int> idx(static_cast<size_t>(e));
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [row](int a, int b) {
        if (row[a] != row[b]) return row[a] > row[b];
        return a < b;
    });
    std::copy(idx.begin(), idx.begin() + k, out);
}

inline RoutingPlan assign_impl(const Tensor& gates, int k, int capacity, bool priority_by_weight) {
    if (gates.rank() != 2) throw ShapeError("assign: gates must be rank 2");
    const int n = gates.dim(0), e = gates.dim(1);
    if (k < 1 || k > e) throw ContractError("assign: top_k " + std::to_string(k) +
                                            " outside [1, " + std::to_string(e) + "]");
    if (capacity < 1) throw ContractError("assign: capacity must be at least 1");

    RoutingPlan plan;
    plan.gates = gates;
    plan.n_tokens = n;
    plan.n_experts = e;
    plan.top_k = k;
    plan.capacity.assign(static_cast<size_t>(e), capacity);
    plan.assignments.reserve(static_cast<size_t>(n) * k);
    plan.by_token.assign(static_cast<size_t>(n) * k, -1);

    std::vector<int> choices(static_cast<size_t>(n) * k);
    for (int t = 0; t < n; ++t) topk_row(gates.ptr() + t * e, e, k, choices.data() + t * k);

    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    if (priority_by_weight) {
        std::vector<double> prio(static_cast<size_t>(n));
        for (int t = 0; t < n; ++t) {
            const double* row = gates.ptr() + t * e;
            prio[static_cast<size_t>(t)] = *std::max_element(row, row + e);
        }
        std::stable_sort(order.begin(), order.end(), [&prio](int a, int b) {
            return prio[static_cast<size_t>(a)] > prio[static_cast<size_t>(b)];
        });
    }

    std::vector<int> fill(static_cast<size_t>(e), 0);
    for (int r = 0; r < k; ++r) {
        for (int t : order) {
            const int ex = choices[static_cast<size_t>(t) * k + r];
            Assignment a;
            a.token = t;
            a.expert = ex;
            a.rank = r;
            a.gate = gates.at(t, ex);
            a.kept = fill[static_cast<size_t>(ex)] < capacity;
            a.slot = a.kept ? fill[static_cast<size_t>(ex)]++ : -1;
            plan.by_token[static_cast<size_t>(t) * k + r] =
                static_cast<int>(plan.assignments.size());
            plan.assignments.push_back(a);
        }
    }
    return plan;
}

}  // namespace detail

// Tokens claim expert slots in ascending token index, one rank round at a
// time; an assignment drops when its expert's buffer is already full.
inline RoutingPlan assign_vanilla(const Tensor& gates, int k, int capacity) {
    return detail::assign_impl(gates, k, capacity, false);
}

// Batch priority: within each rank round, tokens claim in descending order of
// their maximum gate weight, ties toward the lower token index.
inline RoutingPlan assign_bpr(const Tensor& gates, int k, int capacity) {
    return detail::assign_impl(gates, k, capacity, true);
}

// Full routing pass: gate, then capacity-bounded assignment.
inline RoutingPlan route(Tape& tape, const RouterParams& router, const Tensor& tokens, int k,
                         double capacity_factor, bool batch_priority, bool training, Rng& rng) {
    GateResult g = gate(tape, router, tokens, training, rng);
    const int cap = compute_capacity(tokens.dim(0), router.n_experts(), k, capacity_factor);
    RoutingPlan plan = batch_priority ? assign_bpr(g.gates, k, cap) : assign_vanilla(g.gates, k, cap);
    plan.clean_logits = g.clean_logits;
    plan.noisy_logits = g.noisy_logits;
    return plan;
}

// Sparse mixture application: every kept assignment contributes
// gate_weight * FFN_expert(token); dropped assignments contribute zero.
inline Tensor dispatch_combine(Tape& tape, const Tensor& tokens, const RoutingPlan& plan,
                               const std::vector<FfnParams>& experts) {
    if (tokens.dim(0) != plan.n_tokens)
        throw ContractError("dispatch_combine: plan built for " + std::to_string(plan.n_tokens) +
                            " tokens, got " + std::to_string(tokens.dim(0)));
    if (static_cast<int>(experts.size()) != plan.n_experts)
        throw ContractError("dispatch_combine: expert count mismatch");
    const int n = tokens.dim(0), d = tokens.dim(1);

    Tensor out;
    bool first = true;
    for (int e = 0; e < plan.n_experts; ++e) {
        std::vector<int> tok_idx;
        std::vector<int> col_idx;
        for (const Assignment& a : plan.assignments) {
            if (a.expert != e || !a.kept) continue;
            tok_idx.push_back(a.token);
            col_idx.push_back(a.expert);
        }
        if (tok_idx.empty()) continue;
        Tensor xs = gather_rows(tape, tokens, tok_idx);
        Tensor ys = ffn_forward(tape, xs, experts[static_cast<size_t>(e)]);
        Tensor ws = gather_elems(tape, plan.gates, tok_idx, col_idx);
        Tensor contrib = scatter_add_rows(tape, n, row_scale(tape, ys, ws), tok_idx);
        out = first ? contrib : add(tape, out, contrib);
        first = false;
    }
    if (first) out = Tensor({n, d});  // every assignment dropped
    return out;
}

struct DropStats {
    std::vector<int> kept_per_expert;
    int total = 0;
    int dropped = 0;
    double drop_rate = 0.0;
    double success_rate = 1.0;
};

inline DropStats drop_stats(const RoutingPlan& plan) {
    DropStats s;
    s.kept_per_expert.assign(static_cast<size_t>(plan.n_experts), 0);
    for (const Assignment& a : plan.assignments) {
        ++s.total;
        if (a.kept)
            ++s.kept_per_expert[static_cast<size_t>(a.expert)];
        else
            ++s.dropped;
    }
    if (s.total > 0) s.drop_rate = static_cast<double>(s.dropped) / s.total;
    s.success_rate = 1.0 - s.drop_rate;
    return s;
}

}  // namespace vlmoe
