#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vlmoe/harness.hpp"

namespace {

int thread_cap() {
    const char* env = std::getenv("VLMOE_THREADS");
    if (!env) return 1;
    const int v = std::atoi(env);
    return v < 1 ? 1 : v;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct Overrides {
    std::vector<uint64_t> seeds;
    int steps = -1;
    std::string out;
    bool no_wall = false;

    // Overrides invalidate the verbatim copy; the effective spec is
    // serialized instead so the run stays reproducible from its directory.
    bool apply(vlmoe::ExperimentSpec& spec) const {
        bool changed = false;
        if (!seeds.empty()) { spec.seeds = seeds; changed = true; }
        if (steps >= 0) { spec.steps = steps; changed = true; }
        if (!out.empty()) { spec.out = out; changed = true; }
        if (no_wall) { spec.wall_clock = false; changed = true; }
        return changed;
    }
};

void add_overrides(CLI::App* cmd, Overrides& ov) {
    cmd->add_option("--seed", ov.seeds, "seed list override");
    cmd->add_option("--steps", ov.steps, "step count override");
    cmd->add_option("--out", ov.out, "output directory override");
    cmd->add_flag("--no-wall-clock", ov.no_wall, "zero wall timings so logs are byte-stable");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Masked multimodal pretraining with sparse per-modality experts"};
    app.require_subcommand(1);

    std::string config_path, axis, run_dir;
    std::vector<int> workers{1, 2, 4};
    double alpha = -1.0;
    std::string scratch = "selftest-out";
    Overrides ov;

    auto* train = app.add_subcommand("train", "run pretraining for each seed");
    train->add_option("--config", config_path, "experiment spec (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    add_overrides(train, ov);

    auto* ablate = app.add_subcommand("ablate", "sweep one ablation axis with shared seeds");
    ablate->add_option("--config", config_path, "experiment spec (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    ablate->add_option("--axis", axis, "experts | strategy | aux | bpr");
    add_overrides(ablate, ov);

    auto* simulate = app.add_subcommand("simulate", "replay routing logs under expert sharding");
    simulate->add_option("run_dir", run_dir, "seed directory containing routing.jsonl")
        ->required();
    simulate->add_option("--workers", workers, "worker counts to model");
    simulate->add_option("--alpha", alpha, "transfer cost per token (default from spec)");

    auto* report = app.add_subcommand("report", "routing breakdowns and drop histograms");
    report->add_option("run_dir", run_dir, "seed directory containing logs")->required();

    auto* selftest = app.add_subcommand("selftest", "fast end-to-end smoke checks");
    selftest->add_option("--out", scratch, "scratch directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            vlmoe::ExperimentSpec spec = vlmoe::load_spec(config_path);
            const bool changed = ov.apply(spec);
            spec.validate();
            auto runs = vlmoe::cmd_train(spec, changed ? "" : read_file(config_path),
                                         thread_cap());
            for (const auto& r : runs)
                std::printf("seed %llu: val total %.4f -> %.4f, drop rate mean %.4f, dir %s\n",
                            static_cast<unsigned long long>(r.seed), r.baseline.total,
                            r.final_eval.total, r.mean_drop_rate, r.dir.c_str());
        } else if (ablate->parsed()) {
            vlmoe::ExperimentSpec spec = vlmoe::load_spec(config_path);
            ov.apply(spec);
            if (!axis.empty()) spec.axis = axis;
            spec.validate();
            vlmoe::cmd_ablate(spec, thread_cap());
            std::printf("%s", read_file(spec.out + "/table.md").c_str());
        } else if (simulate->parsed()) {
            vlmoe::ExperimentSpec spec = vlmoe::load_spec(run_dir + "/spec.json");
            auto out = vlmoe::cmd_simulate(run_dir, workers,
                                           alpha >= 0.0 ? alpha : spec.sim_alpha);
            for (const auto& w : out.at("by_workers"))
                std::printf("W=%d: mean max/mean load ratio %.3f, p95 transfer %.1f, "
                            "step time %.2f\n",
                            w.at("workers").get<int>(), w.at("mean_max_load_ratio").get<double>(),
                            w.at("mean_p95_transfer").get<double>(),
                            w.at("mean_step_time").get<double>());
            std::printf("trace written to %s/sim.json\n", run_dir.c_str());
        } else if (report->parsed()) {
            auto out = vlmoe::cmd_report(run_dir);
            std::printf("report written to %s/report.json (%zu metric rows, %zu layer groups)\n",
                        run_dir.c_str(), out.at("steps_logged").get<size_t>(),
                        out.at("breakdown").size());
        } else if (selftest->parsed()) {
            return vlmoe::cmd_selftest(scratch) ? 0 : 1;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
