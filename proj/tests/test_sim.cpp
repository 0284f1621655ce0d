#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "support/checks.hpp"
#include "vlmoe/sim.hpp"

using namespace vlmoe;
using vlmoe::testing::random_tensor;

namespace {

// Deterministic plan sending each token to the expert of its row index
// modulo E, gates all 1.0, everything kept.
RoutingPlan round_robin_plan(int n, int e, int capacity) {
    Tensor gates({n, e});
    for (int t = 0; t < n; ++t) gates.data()[t * e + t % e] = 1.0;
    return assign_vanilla(gates, 1, capacity);
}

}  // namespace

TEST_CASE("token ownership shards contiguously", "[sim]") {
    CHECK(token_owner(0, 8, 4) == 0);
    CHECK(token_owner(1, 8, 4) == 0);
    CHECK(token_owner(2, 8, 4) == 1);
    CHECK(token_owner(7, 8, 4) == 3);
    // uneven split: 5 tokens on 2 workers puts 3 on worker 0
    CHECK(token_owner(2, 5, 2) == 0);
    CHECK(token_owner(3, 5, 2) == 1);
}

TEST_CASE("topology construction and validation", "[sim]") {
    WorkerTopology t = WorkerTopology::contiguous(8, 4);
    CHECK(t.shard_map == std::vector<int>({0, 0, 1, 1, 2, 2, 3, 3}));
    CHECK_NOTHROW(t.validate(8));
    CHECK_THROWS_AS(WorkerTopology::contiguous(6, 4), ContractError);
    CHECK_THROWS_AS(t.validate(6), ContractError);

    WorkerTopology lopsided;
    lopsided.n_workers = 2;
    lopsided.shard_map = {0, 0, 0, 1};
    CHECK_THROWS_AS(lopsided.validate(4), ContractError);
}

TEST_CASE("simulator output equals the reference layer over random cases", "[sim][properties]") {
    auto rep = vlmoe::testing::run_sim_equivalence(100);
    INFO("worst |sim - reference| = " << rep.worst_gap);
    CHECK(rep.cases == 100);
    CHECK(rep.worst_gap <= 1e-10);
    CHECK(rep.conservation_ok);
    CHECK(rep.single_worker_local);
}

TEST_CASE("thread count changes nothing", "[sim]") {
    Rng rng(31);
    const int n = 12, d = 8, e = 4;
    Tape tape;
    std::vector<FfnParams> experts;
    for (int i = 0; i < e; ++i) experts.push_back(FfnParams::init(rng, d, 4 * d, 0.3));
    RouterParams router = RouterParams::init(rng, e, d, 0.4);
    Tensor tokens = random_tensor({n, d}, rng);
    Rng noise(3);
    RoutingPlan plan = route(tape, router, tokens, 2, 1.05, true, true, noise);

    WorkerTopology topo = WorkerTopology::contiguous(e, 4);
    SimResult serial = simulate_layer(tokens, plan, experts, topo, 1);
    for (int threads : {2, 4, 8}) {
        SimResult threaded = simulate_layer(tokens, plan, experts, topo, threads);
        CHECK(threaded.output.data() == serial.output.data());
        CHECK(threaded.trace.dispatch == serial.trace.dispatch);
        CHECK(threaded.trace.compute == serial.trace.compute);
    }
}

TEST_CASE("all traffic to one expert maximizes the load ratio", "[sim]") {
    const int n = 8, e = 4;
    Tensor gates({n, e});
    for (int t = 0; t < n; ++t) gates.data()[t * e + 0] = 1.0;
    RoutingPlan plan = assign_vanilla(gates, 1, n);

    Rng rng(5);
    std::vector<FfnParams> experts;
    for (int i = 0; i < e; ++i) experts.push_back(FfnParams::init(rng, 4, 16, 0.3));
    Tensor tokens = random_tensor({n, 4}, rng);

    SimResult res = simulate_layer(tokens, plan, experts, WorkerTopology::contiguous(e, 4));
    SimMetrics m = imbalance_metrics(res.trace);
    CHECK(m.max_load_ratio == Catch::Approx(4.0));  // one of four workers does it all
    CHECK(res.trace.compute == std::vector<int>({8, 0, 0, 0}));

    // balanced round robin drives the ratio to one
    RoutingPlan even = round_robin_plan(n, e, n);
    SimResult balanced = simulate_layer(tokens, even, experts, WorkerTopology::contiguous(e, 4));
    CHECK(imbalance_metrics(balanced.trace).max_load_ratio == Catch::Approx(1.0));
}

TEST_CASE("trace metrics on a hand-built exchange", "[sim]") {
    ExchangeTrace trace;
    trace.n_workers = 2;
    trace.dispatch = {{3, 1}, {2, 4}};
    trace.comeback = {{3, 2}, {1, 4}};
    trace.compute = {5, 5};

    SimMetrics m = imbalance_metrics(trace, 0.1);
    CHECK(m.max_load_ratio == Catch::Approx(1.0));
    // cross volumes are {1, 2, 2, 1}; p95 by nearest rank is the max
    CHECK(m.p95_transfer == Catch::Approx(2.0));
    // each worker moves 1+2 outbound plus mirrored inbound = 6 total
    CHECK(m.step_time == Catch::Approx(5.0 + 0.1 * 6.0));

    ExchangeTrace idle;
    idle.n_workers = 1;
    idle.dispatch = {{0}};
    idle.comeback = {{0}};
    idle.compute = {0};
    SimMetrics zero = imbalance_metrics(idle);
    CHECK(zero.max_load_ratio == 1.0);
    CHECK(zero.p95_transfer == 0.0);
    CHECK(zero.step_time == 0.0);
}

TEST_CASE("single worker keeps every token local", "[sim]") {
    Rng rng(9);
    const int n = 10, d = 6, e = 4;
    std::vector<FfnParams> experts;
    for (int i = 0; i < e; ++i) experts.push_back(FfnParams::init(rng, d, 4 * d, 0.3));
    Tensor tokens = random_tensor({n, d}, rng);
    Tape tape;
    RouterParams router = RouterParams::init(rng, e, d, 0.4);
    Rng noise(4);
    RoutingPlan plan = route(tape, router, tokens, 1, 1.0, true, false, noise);

    SimResult res = simulate_layer(tokens, plan, experts, WorkerTopology::contiguous(e, 1));
    int kept = 0;
    for (const Assignment& a : plan.assignments)
        if (a.kept) ++kept;
    CHECK(res.trace.dispatch[0][0] == kept);
    CHECK(res.trace.compute[0] == kept);
    CHECK(imbalance_metrics(res.trace).p95_transfer == 0.0);

    CHECK_THROWS_AS(
        simulate_layer(random_tensor({n + 1, d}, rng), plan, experts,
                       WorkerTopology::contiguous(e, 1)),
        ContractError);
}

TEST_CASE("dropped assignments produce no traffic or compute", "[sim]") {
    const int n = 6, e = 2;
    Tensor gates({n, e});
    for (int t = 0; t < n; ++t) gates.data()[t * e + 0] = 1.0;  // everyone wants expert 0
    RoutingPlan plan = assign_bpr(gates, 1, 2);                 // only two fit

    Rng rng(6);
    std::vector<FfnParams> experts;
    for (int i = 0; i < e; ++i) experts.push_back(FfnParams::init(rng, 4, 16, 0.3));
    Tensor tokens = random_tensor({n, 4}, rng);
    SimResult res = simulate_layer(tokens, plan, experts, WorkerTopology::contiguous(e, 2));

    int total_compute = 0;
    for (int c : res.trace.compute) total_compute += c;
    CHECK(total_compute == 2);
    int traffic = 0;
    for (const auto& row : res.trace.dispatch)
        for (int v : row) traffic += v;
    CHECK(traffic == 2);
}
