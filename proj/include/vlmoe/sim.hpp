#pragma once

#include <algorithm>
#include <thread>
#include <vector>

#include "vlmoe/routing.hpp"
#include "vlmoe/tensor.hpp"

namespace vlmoe {

// Logical placement of experts onto workers. Experts per worker is exact;
// the default layout is contiguous: expert e lives on worker e / (E/W).
struct WorkerTopology {
    int n_workers = 1;
    std::vector<int> shard_map;  // expert id -> worker id

    static WorkerTopology contiguous(int n_experts, int n_workers) {
        if (n_workers < 1 || n_experts % n_workers != 0)
            throw ContractError("topology: worker count must divide expert count");
        WorkerTopology t;
        t.n_workers = n_workers;
        const int per = n_experts / n_workers;
        for (int e = 0; e < n_experts; ++e) t.shard_map.push_back(e / per);
        return t;
    }

    void validate(int n_experts) const {
        if (static_cast<int>(shard_map.size()) != n_experts)
            throw ContractError("topology: shard map covers " +
                                std::to_string(shard_map.size()) + " experts, plan has " +
                                std::to_string(n_experts));
        std::vector<int> owned(static_cast<size_t>(n_workers), 0);
        for (int w : shard_map) {
            if (w < 0 || w >= n_workers) throw ContractError("topology: worker id out of range");
            ++owned[static_cast<size_t>(w)];
        }
        for (int c : owned)
            if (c != n_experts / n_workers)
                throw ContractError("topology: experts per worker must be exactly E/W");
    }
};

// Tokens are sharded contiguously across workers by index.
inline int token_owner(int token, int n_tokens, int n_workers) {
    return static_cast<int>(static_cast<long long>(token) * n_workers / n_tokens);
}

// Communication record of one MoE layer under expert parallelism: who sent
// how many tokens where on the way out, what each worker computed, and the
// mirrored return traffic.
struct ExchangeTrace {
    int n_workers = 1;
    std::vector<std::vector<int>> dispatch;  // [source][dest] kept-token counts
    std::vector<std::vector<int>> comeback;  // [dest][source], mirror of dispatch
    std::vector<int> compute;                // kept tokens processed per worker
};

struct SimResult {
    Tensor output;
    ExchangeTrace trace;
};

// Replays one routed MoE layer as if experts were sharded across workers.
// Numerics are identical to dispatch_combine: the same expert computations
// run in the same ascending-expert order; only the bookkeeping differs.
// n_threads > 1 computes expert contributions concurrently, then merges them
// in the fixed order, so results and traces do not depend on thread count.
inline SimResult simulate_layer(const Tensor& tokens, const RoutingPlan& plan,
                                const std::vector<FfnParams>& experts,
                                const WorkerTopology& topo, int n_threads = 1) {
    topo.validate(plan.n_experts);
    if (tokens.dim(0) != plan.n_tokens)
        throw ContractError("simulate_layer: plan built for a different token count");
    const int n = plan.n_tokens, d = tokens.dim(1), e_count = plan.n_experts;
    const int w_count = topo.n_workers;

    SimResult res;
    res.trace.n_workers = w_count;
    res.trace.dispatch.assign(static_cast<size_t>(w_count),
                              std::vector<int>(static_cast<size_t>(w_count), 0));
    res.trace.comeback.assign(static_cast<size_t>(w_count),
                              std::vector<int>(static_cast<size_t>(w_count), 0));
    res.trace.compute.assign(static_cast<size_t>(w_count), 0);

    std::vector<std::vector<int>> tok_of(static_cast<size_t>(e_count));
    std::vector<std::vector<int>> col_of(static_cast<size_t>(e_count));
    for (const Assignment& a : plan.assignments) {
        if (!a.kept) continue;
        const int src = token_owner(a.token, n, w_count);
        const int dst = topo.shard_map[static_cast<size_t>(a.expert)];
        ++res.trace.dispatch[static_cast<size_t>(src)][static_cast<size_t>(dst)];
        ++res.trace.comeback[static_cast<size_t>(dst)][static_cast<size_t>(src)];
        ++res.trace.compute[static_cast<size_t>(dst)];
        tok_of[static_cast<size_t>(a.expert)].push_back(a.token);
        col_of[static_cast<size_t>(a.expert)].push_back(a.expert);
    }

    // Per-expert contributions, computed independently (possibly in
    // parallel), merged in ascending expert order exactly like the
    // single-process reference.
    std::vector<Tensor> contrib(static_cast<size_t>(e_count));
    auto run_expert = [&](int e) {
        if (tok_of[static_cast<size_t>(e)].empty()) return;
        Tape scratch;  // nothing records: all inputs are off-tape constants
        Tensor xs = gather_rows(scratch, tokens, tok_of[static_cast<size_t>(e)]);
        Tensor ys = ffn_forward(scratch, xs, experts[static_cast<size_t>(e)]);
        Tensor ws = gather_elems(scratch, plan.gates, tok_of[static_cast<size_t>(e)],
                                 col_of[static_cast<size_t>(e)]);
        contrib[static_cast<size_t>(e)] =
            scatter_add_rows(scratch, n, row_scale(scratch, ys, ws),
                             tok_of[static_cast<size_t>(e)]);
    };
    if (n_threads <= 1) {
        for (int e = 0; e < e_count; ++e) run_expert(e);
    } else {
        // Each thread takes a strided slice of workers; experts stay grouped
        // by owner so the per-expert work matches the modeled placement.
        const int pool_size = std::min(n_threads, w_count);
        std::vector<std::thread> pool;
        for (int t = 0; t < pool_size; ++t)
            pool.emplace_back([&, t] {
                for (int w = t; w < w_count; w += pool_size)
                    for (int e = 0; e < e_count; ++e)
                        if (topo.shard_map[static_cast<size_t>(e)] == w) run_expert(e);
            });
        for (auto& th : pool) th.join();
    }

    Tensor out;
    bool first = true;
    Tape scratch;
    for (int e = 0; e < e_count; ++e) {
        if (contrib[static_cast<size_t>(e)].size() == 0) continue;
        out = first ? contrib[static_cast<size_t>(e)]
                    : add(scratch, out, contrib[static_cast<size_t>(e)]);
        first = false;
    }
    if (first) out = Tensor({n, d});
    res.output = out;
    return res;
}

struct SimMetrics {
    double max_load_ratio = 1.0;  // max worker compute over mean worker compute
    double p95_transfer = 0.0;    // 95th pct of cross-worker pair volumes, both phases
    double step_time = 0.0;       // max compute + alpha * max per-worker transfer
};

inline SimMetrics imbalance_metrics(const ExchangeTrace& trace, double alpha = 0.1) {
    SimMetrics m;
    const int w = trace.n_workers;
    double total = 0.0;
    int max_compute = 0;
    for (int c : trace.compute) {
        total += c;
        max_compute = std::max(max_compute, c);
    }
    m.max_load_ratio = total > 0 ? max_compute / (total / w) : 1.0;

    std::vector<int> volumes;
    std::vector<int> per_worker(static_cast<size_t>(w), 0);
    for (int s = 0; s < w; ++s)
        for (int t = 0; t < w; ++t) {
            if (s == t) continue;
            const int d = trace.dispatch[static_cast<size_t>(s)][static_cast<size_t>(t)];
            const int r = trace.comeback[static_cast<size_t>(s)][static_cast<size_t>(t)];
            volumes.push_back(d);
            volumes.push_back(r);
            per_worker[static_cast<size_t>(s)] += d + r;
            per_worker[static_cast<size_t>(t)] += d + r;
        }
    if (!volumes.empty()) {
        std::sort(volumes.begin(), volumes.end());
        const size_t idx = static_cast<size_t>(
            std::max<long long>(0, static_cast<long long>(
                                       std::ceil(0.95 * volumes.size())) - 1));
        m.p95_transfer = volumes[idx];
    }
    const int max_transfer =
        per_worker.empty() ? 0 : *std::max_element(per_worker.begin(), per_worker.end());
    m.step_time = max_compute + alpha * max_transfer;
    return m;
}

}  // namespace vlmoe
