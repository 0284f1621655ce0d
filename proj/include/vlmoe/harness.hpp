#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "vlmoe/checkpoint.hpp"
#include "vlmoe/config.hpp"
#include "vlmoe/data.hpp"
#include "vlmoe/report.hpp"
#include "vlmoe/sim.hpp"

namespace vlmoe {

namespace fs = std::filesystem;

struct TrainResult {
    uint64_t seed = 0;
    std::string dir;
    int steps = 0;
    EvalReport baseline;  // before any update
    EvalReport final_eval;
    double last_total = 0.0;
    double mean_drop_rate = 0.0;
    double max_drop_rate = 0.0;
    double rise_fraction = 0.0;  // steps whose total rose more than 5% over the previous
    double wall_ms_total = 0.0;
};

inline std::string fmt_fixed(double v, int prec = 4) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
    return buf;
}

// One seed, one directory: corpus, model, optimizer, logs, checkpoint.
inline TrainResult train_single_seed(const ExperimentSpec& spec, uint64_t seed,
                                     const std::string& dir, const std::string& spec_text) {
    fs::create_directories(dir);
    {
        std::ofstream sf(dir + "/spec.json");
        sf << (spec_text.empty() ? spec_to_json(spec).dump(2) + "\n" : spec_text);
    }

    const auto train = generate(Split::TRAIN, spec.train_samples, seed);
    const auto val = generate(Split::VAL, spec.val_samples, seed);

    Model model(spec.model, seed);
    AdamWConfig oc = spec.optimizer;
    oc.total_steps = std::max(spec.steps, 1);
    AdamW opt(oc);
    Rng run_rng = Rng(seed).fork("run");

    JsonlWriter metrics(dir + "/metrics.jsonl");
    JsonlWriter val_log(dir + "/val.jsonl");
    JsonlWriter routing(dir + "/routing.jsonl");

    TrainResult res;
    res.seed = seed;
    res.dir = dir;
    res.steps = spec.steps;
    res.baseline = evaluate(model, val, seed);
    val_log.write(eval_report_to_json(0, res.baseline));
    res.final_eval = res.baseline;

    auto pick_batch = [&](const Rng& bsel, uint64_t slot) {
        std::vector<const Sample*> batch;
        Rng r = bsel.fork("slot", slot);
        for (int i = 0; i < spec.batch; ++i)
            batch.push_back(&train[static_cast<size_t>(
                r.uniform_int(static_cast<int>(train.size())))]);
        return batch;
    };

    double prev_total = 0.0;
    int rises = 0;
    double drop_sum = 0.0;
    long long drop_obs = 0;
    for (int step = 1; step <= spec.steps; ++step) {
        Rng bsel = run_rng.fork("batch", static_cast<uint64_t>(step));
        auto text_b = spec.objectives.mlm ? pick_batch(bsel, 0) : std::vector<const Sample*>{};
        auto image_b = spec.objectives.mim ? pick_batch(bsel, 1) : std::vector<const Sample*>{};
        auto pair_b = spec.objectives.vlm ? pick_batch(bsel, 2) : std::vector<const Sample*>{};

        const bool log_routing = step == 1 || step % spec.routing_log_every == 0;
        std::vector<RoutingLogRow> rows;
        StepReport rep =
            pretrain_step(model, opt, text_b, image_b, pair_b, step, run_rng,
                          log_routing ? &rows : nullptr, spec.wall_clock, spec.objectives);
        metrics.write(step_report_to_json(rep));
        for (const auto& r : rows) routing.write(routing_row_to_json(step, r));

        if (step > 1 && rep.loss_total > prev_total * 1.05) ++rises;
        prev_total = rep.loss_total;
        res.last_total = rep.loss_total;
        res.wall_ms_total += rep.wall_ms;
        for (const auto& d : rep.drops) {
            drop_sum += d.rate;
            ++drop_obs;
            res.max_drop_rate = std::max(res.max_drop_rate, d.rate);
        }

        if (step % spec.eval_every == 0 || step == spec.steps) {
            res.final_eval = evaluate(model, val, seed);
            val_log.write(eval_report_to_json(step, res.final_eval));
        }
    }
    res.mean_drop_rate = drop_obs ? drop_sum / static_cast<double>(drop_obs) : 0.0;
    res.rise_fraction = spec.steps > 1 ? static_cast<double>(rises) / (spec.steps - 1) : 0.0;

    save_checkpoint(dir + "/checkpoint.bin", model.params());
    return res;
}

// Seeds are independent runs writing to disjoint directories, so they can
// execute on separate threads without changing any output byte.
inline std::vector<TrainResult> cmd_train(const ExperimentSpec& spec,
                                          const std::string& spec_text = "", int n_threads = 1) {
    spec.validate();
    fs::create_directories(spec.out);
    {
        std::ofstream sf(spec.out + "/spec.json");
        sf << (spec_text.empty() ? spec_to_json(spec).dump(2) + "\n" : spec_text);
    }

    const int n = static_cast<int>(spec.seeds.size());
    std::vector<TrainResult> results(static_cast<size_t>(n));
    std::vector<std::exception_ptr> errors(static_cast<size_t>(n));
    auto run_one = [&](int i) {
        const uint64_t seed = spec.seeds[static_cast<size_t>(i)];
        try {
            results[static_cast<size_t>(i)] = train_single_seed(
                spec, seed, spec.out + "/seed" + std::to_string(seed), spec_text);
        } catch (...) {
            errors[static_cast<size_t>(i)] = std::current_exception();
        }
    };
    const int pool_size = std::max(1, std::min(n_threads, n));
    if (pool_size == 1) {
        for (int i = 0; i < n; ++i) run_one(i);
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < pool_size; ++t)
            pool.emplace_back([&, t] {
                for (int i = t; i < n; i += pool_size) run_one(i);
            });
        for (auto& th : pool) th.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return results;
}

struct AblationCell {
    std::string label;
    ExperimentSpec spec;
};

inline std::vector<AblationCell> ablation_cells(const ExperimentSpec& base) {
    std::vector<AblationCell> cells;
    auto derived = [&](const std::string& label) {
        AblationCell c{label, base};
        c.spec.out = base.out + "/" + base.axis + "-" + label;
        return c;
    };
    if (base.axis == "experts") {
        for (int e : {1, 4, 8, 16, 32}) {
            auto c = derived(std::to_string(e));
            c.spec.model.experts = e;
            c.spec.model.top_k = std::min(base.model.top_k, e);
            c.spec.model.noise_sigma = -1.0;  // track 1/E
            cells.push_back(std::move(c));
        }
    } else if (base.axis == "strategy") {
        const std::pair<const char*, std::pair<bool, bool>> opts[] = {
            {"none", {false, false}}, {"T", {true, false}}, {"V", {false, true}},
            {"TV", {true, true}}};
        for (const auto& [label, tv] : opts) {
            auto c = derived(label);
            c.spec.model.scale_t = tv.first;
            c.spec.model.scale_v = tv.second;
            cells.push_back(std::move(c));
        }
    } else if (base.axis == "aux") {
        for (auto kind : {AuxLossKind::LOAD, AuxLossKind::VLOSS, AuxLossKind::ZLOSS}) {
            auto c = derived(aux_kind_name(kind));
            c.spec.model.image_aux = kind;
            cells.push_back(std::move(c));
        }
    } else if (base.axis == "bpr") {
        for (bool on : {true, false}) {
            auto c = derived(on ? "on" : "off");
            c.spec.model.batch_priority = on;
            cells.push_back(std::move(c));
        }
    } else {
        throw ContractError("ablate: spec must name an axis");
    }
    return cells;
}

// Every cell runs the same seeds; rows aggregate across seeds by mean.
inline json cmd_ablate(const ExperimentSpec& base, int n_threads = 1) {
    auto cells = ablation_cells(base);
    fs::create_directories(base.out);

    json table = json::array();
    std::vector<std::vector<std::string>> md_rows;
    for (auto& cell : cells) {
        cell.spec.validate();
        auto runs = cmd_train(cell.spec, "", n_threads);
        double mlm = 0, mim = 0, vlm = 0, total = 0, drop_mean = 0, drop_max = 0, stab = 0;
        for (const auto& r : runs) {
            mlm += r.final_eval.mlm;
            mim += r.final_eval.mim;
            vlm += r.final_eval.vlm;
            total += r.final_eval.total;
            drop_mean += r.mean_drop_rate;
            drop_max = std::max(drop_max, r.max_drop_rate);
            stab += r.rise_fraction + r.max_drop_rate;
        }
        const double n = static_cast<double>(runs.size());
        mlm /= n; mim /= n; vlm /= n; total /= n; drop_mean /= n; stab /= n;
        const long long pt_text = param_count_per_token(cell.spec.model, Modality::TEXT);
        const long long pt_image = param_count_per_token(cell.spec.model, Modality::IMAGE);
        json row{{"cell", cell.label},
                 {"val_mlm", mlm},
                 {"val_mim", mim},
                 {"val_vlm", vlm},
                 {"val_total", total},
                 {"drop_rate_mean", drop_mean},
                 {"drop_rate_max", drop_max},
                 {"params_per_token_text", pt_text},
                 {"params_per_token_image", pt_image},
                 {"instability", stab},
                 {"seeds", cell.spec.seeds}};
        table.push_back(row);
        md_rows.push_back({cell.label, fmt_fixed(mlm), fmt_fixed(mim), fmt_fixed(vlm),
                           fmt_fixed(total), fmt_fixed(drop_mean), fmt_fixed(drop_max),
                           std::to_string(pt_text), std::to_string(pt_image), fmt_fixed(stab)});
    }

    json out{{"axis", base.axis}, {"rows", table}};
    {
        std::ofstream jf(base.out + "/table.json");
        jf << out.dump(2) << "\n";
    }
    {
        std::ofstream mf(base.out + "/table.md");
        mf << "# Ablation: " << base.axis << "\n\n"
           << markdown_table({"cell", "val_mlm", "val_mim", "val_vlm", "val_total", "drop_mean",
                              "drop_max", "params/tok (T)", "params/tok (V)", "instability"},
                             md_rows);
    }
    return out;
}

// Replays the communication pattern of logged routing decisions for a list
// of worker counts. Token indices are ranks within each layer invocation:
// the log stores batch-row ids, the trace wants a dense 0..n-1 space.
inline json cmd_simulate(const std::string& run_dir, const std::vector<int>& worker_counts,
                         double alpha) {
    const std::string log_path = run_dir + "/routing.jsonl";
    if (!fs::exists(log_path))
        throw ContractError("simulate: no routing log at " + log_path);
    ExperimentSpec spec = load_spec(run_dir + "/spec.json");
    const auto rows = read_jsonl(log_path);
    if (rows.empty()) throw ContractError("simulate: routing log is empty: " + log_path);

    using Key = std::tuple<int, std::string, int, std::string>;  // step, objective, layer, modality
    struct Group {
        std::set<int> tokens;
        std::vector<std::pair<int, int>> kept;  // (token id, expert)
    };
    std::map<Key, Group> groups;
    for (const auto& r : rows) {
        Key k{r.at("step").get<int>(), r.at("objective").get<std::string>(),
              r.at("layer").get<int>(), r.at("modality").get<std::string>()};
        auto& g = groups[k];
        g.tokens.insert(r.at("token_id").get<int>());
        if (r.at("kept").get<bool>())
            g.kept.emplace_back(r.at("token_id").get<int>(), r.at("expert_id").get<int>());
    }

    json out{{"alpha", alpha}, {"experts", spec.model.experts}, {"by_workers", json::array()}};
    for (int w : worker_counts) {
        WorkerTopology topo = WorkerTopology::contiguous(spec.model.experts, w);
        json detail = json::array();
        double sum_ratio = 0, sum_p95 = 0, sum_time = 0;
        for (const auto& [key, g] : groups) {
            std::map<int, int> rank;
            int next = 0;
            for (int t : g.tokens) rank[t] = next++;
            const int n = next;

            ExchangeTrace trace;
            trace.n_workers = w;
            trace.dispatch.assign(static_cast<size_t>(w), std::vector<int>(static_cast<size_t>(w), 0));
            trace.comeback.assign(static_cast<size_t>(w), std::vector<int>(static_cast<size_t>(w), 0));
            trace.compute.assign(static_cast<size_t>(w), 0);
            for (const auto& [tok, expert] : g.kept) {
                const int src = token_owner(rank.at(tok), n, w);
                const int dst = topo.shard_map[static_cast<size_t>(expert)];
                ++trace.dispatch[static_cast<size_t>(src)][static_cast<size_t>(dst)];
                ++trace.comeback[static_cast<size_t>(dst)][static_cast<size_t>(src)];
                ++trace.compute[static_cast<size_t>(dst)];
            }
            SimMetrics m = imbalance_metrics(trace, alpha);
            detail.push_back(json{{"step", std::get<0>(key)},
                                  {"objective", std::get<1>(key)},
                                  {"layer", std::get<2>(key)},
                                  {"modality", std::get<3>(key)},
                                  {"tokens", n},
                                  {"kept", g.kept.size()},
                                  {"dispatch", trace.dispatch},
                                  {"compute", trace.compute},
                                  {"max_load_ratio", m.max_load_ratio},
                                  {"p95_transfer", m.p95_transfer},
                                  {"step_time", m.step_time}});
            sum_ratio += m.max_load_ratio;
            sum_p95 += m.p95_transfer;
            sum_time += m.step_time;
        }
        const double gn = static_cast<double>(groups.size());
        out["by_workers"].push_back(json{{"workers", w},
                                         {"mean_max_load_ratio", sum_ratio / gn},
                                         {"mean_p95_transfer", sum_p95 / gn},
                                         {"mean_step_time", sum_time / gn},
                                         {"layers", detail}});
    }
    std::ofstream jf(run_dir + "/sim.json");
    jf << out.dump(2) << "\n";
    return out;
}

// Routing-decision breakdowns and drop-rate curves from a finished run.
inline json cmd_report(const std::string& run_dir) {
    const std::string routing_path = run_dir + "/routing.jsonl";
    const std::string metrics_path = run_dir + "/metrics.jsonl";
    if (!fs::exists(routing_path))
        throw ContractError("report: no routing log at " + routing_path);
    if (!fs::exists(metrics_path))
        throw ContractError("report: no metrics log at " + metrics_path);
    const auto routing_rows = read_jsonl(routing_path);
    const auto metric_rows = read_jsonl(metrics_path);

    // expert -> token-kind counts, aggregated over the run per layer+modality
    struct ExpertStat {
        int total = 0, kept = 0;
        std::map<std::string, int> kinds;
    };
    std::map<std::pair<int, std::string>, std::map<int, ExpertStat>> agg;
    using ConsKey = std::tuple<int, std::string, int, std::string>;
    std::map<ConsKey, std::pair<int, std::set<int>>> cons;  // rows, distinct tokens
    for (const auto& r : routing_rows) {
        const int layer = r.at("layer").get<int>();
        const std::string mod = r.at("modality").get<std::string>();
        auto& st = agg[{layer, mod}][r.at("expert_id").get<int>()];
        ++st.total;
        if (r.at("kept").get<bool>()) ++st.kept;
        ++st.kinds[r.at("kind").get<std::string>()];
        auto& c = cons[ConsKey{r.at("step").get<int>(), r.at("objective").get<std::string>(),
                               layer, mod}];
        ++c.first;
        c.second.insert(r.at("token_id").get<int>());
    }

    json breakdown = json::array();
    for (const auto& [key, experts] : agg) {
        json ex = json::array();
        std::vector<std::string> labels;
        std::vector<double> totals;
        for (const auto& [eid, st] : experts) {
            ex.push_back(json{{"expert", eid},
                              {"total", st.total},
                              {"kept", st.kept},
                              {"kinds", st.kinds}});
            labels.push_back("e" + std::to_string(eid));
            totals.push_back(st.total);
        }
        breakdown.push_back(json{{"layer", key.first}, {"modality", key.second}, {"experts", ex}});
        svg::write_bar_chart(run_dir + "/routing_l" + std::to_string(key.first) + "_" +
                                 key.second + ".svg",
                             "Routing volume, layer " + std::to_string(key.first) + " (" +
                                 key.second + ")",
                             "assignments", labels, totals);
    }

    json conservation = json::array();
    for (const auto& [key, c] : cons)
        conservation.push_back(json{{"step", std::get<0>(key)},
                                    {"objective", std::get<1>(key)},
                                    {"layer", std::get<2>(key)},
                                    {"modality", std::get<3>(key)},
                                    {"assignments", c.first},
                                    {"distinct_tokens", c.second.size()}});

    // Drop-rate trajectories per layer+modality, plus the loss curves.
    std::map<std::pair<int, std::string>, svg::Series> drop_series;
    svg::Series total_s{"total", {}, {}}, mlm_s{"mlm", {}, {}}, mim_s{"mim", {}, {}},
        vlm_s{"vlm", {}, {}}, aux_s{"aux", {}, {}};
    json drop_summary = json::array();
    for (const auto& r : metric_rows) {
        const double step = r.at("step").get<double>();
        total_s.x.push_back(step); total_s.y.push_back(r.at("loss_total").get<double>());
        mlm_s.x.push_back(step); mlm_s.y.push_back(r.at("loss_mlm").get<double>());
        mim_s.x.push_back(step); mim_s.y.push_back(r.at("loss_mim").get<double>());
        vlm_s.x.push_back(step); vlm_s.y.push_back(r.at("loss_vlm").get<double>());
        aux_s.x.push_back(step); aux_s.y.push_back(r.at("loss_aux").get<double>());
        for (const auto& d : r.at("drops")) {
            auto key = std::make_pair(d.at("layer").get<int>(), d.at("modality").get<std::string>());
            auto& s = drop_series[key];
            if (s.name.empty())
                s.name = "L" + std::to_string(key.first) + " " + key.second;
            s.x.push_back(step);
            s.y.push_back(d.at("rate").get<double>());
        }
    }
    std::vector<svg::Series> drop_list;
    for (auto& [key, s] : drop_series) {
        double mean = 0;
        for (double v : s.y) mean += v;
        mean = s.y.empty() ? 0.0 : mean / static_cast<double>(s.y.size());
        drop_summary.push_back(json{{"layer", key.first},
                                    {"modality", key.second},
                                    {"mean_rate", mean},
                                    {"max_rate", s.y.empty() ? 0.0
                                                             : *std::max_element(s.y.begin(),
                                                                                 s.y.end())}});
        drop_list.push_back(s);
    }
    if (!drop_list.empty())
        svg::write_line_chart(run_dir + "/drops.svg", "Dropped-token rate by layer", "step",
                              "drop rate", drop_list);
    if (!metric_rows.empty())
        svg::write_line_chart(run_dir + "/losses.svg", "Training losses", "step", "loss",
                              {total_s, mlm_s, mim_s, vlm_s, aux_s});

    json out{{"breakdown", breakdown},
             {"conservation", conservation},
             {"drop_summary", drop_summary},
             {"steps_logged", metric_rows.size()}};
    std::ofstream jf(run_dir + "/report.json");
    jf << out.dump(2) << "\n";
    return out;
}

// Quick end-to-end exercise of the training stack; prints one line per check.
inline bool cmd_selftest(const std::string& scratch) {
    bool ok = true;
    auto check = [&](const char* name, bool pass, const std::string& detail = "") {
        std::printf("[%s] %s%s%s\n", pass ? "PASS" : "FAIL", name, detail.empty() ? "" : ": ",
                    detail.c_str());
        ok = ok && pass;
    };

    ExperimentSpec spec;
    spec.steps = 3;
    spec.seeds = {7};
    spec.batch = 4;
    spec.train_samples = 32;
    spec.val_samples = 8;
    spec.eval_every = 2;
    spec.routing_log_every = 1;
    spec.wall_clock = false;
    spec.out = scratch + "/selftest-a";

    try {
        auto runs = cmd_train(spec);
        const auto& r = runs.at(0);
        check("train finishes with finite losses", std::isfinite(r.last_total));

        auto metrics = read_jsonl(r.dir + "/metrics.jsonl");
        check("one metrics row per step", metrics.size() == 3);
        bool ledger_ok = true;
        for (const auto& m : metrics) {
            const double lhs = m.at("loss_total").get<double>();
            const double rhs = m.at("loss_mlm").get<double>() + m.at("loss_mim").get<double>() +
                               m.at("loss_vlm").get<double>() +
                               m.at("aux_weight").get<double>() * m.at("loss_aux").get<double>();
            ledger_ok = ledger_ok && std::abs(lhs - rhs) <= 1e-10;
        }
        check("total equals components plus weighted aux", ledger_ok);

        ExperimentSpec spec2 = spec;
        spec2.out = scratch + "/selftest-b";
        cmd_train(spec2);
        std::ifstream a(r.dir + "/metrics.jsonl"), b(spec2.out + "/seed7/metrics.jsonl");
        std::stringstream sa, sb;
        sa << a.rdbuf();
        sb << b.rdbuf();
        check("reruns are byte-identical", sa.str() == sb.str());

        Model reload(spec.model, 999);
        load_checkpoint(r.dir + "/checkpoint.bin", reload.params());
        Model fresh(spec.model, spec.seeds[0]);
        bool loaded_differs = false;
        auto fresh_params = fresh.params();
        auto got = reload.params();
        for (size_t i = 0; i < got.size(); ++i)
            if (got[i].tensor->data() != fresh_params[i].tensor->data()) loaded_differs = true;
        check("checkpoint holds trained weights", loaded_differs);

        json sim = cmd_simulate(r.dir, {1, 2}, spec.sim_alpha);
        check("simulate consumes routing logs", sim.at("by_workers").size() == 2);
        json rep = cmd_report(r.dir);
        check("report builds breakdowns", !rep.at("breakdown").empty());
    } catch (const std::exception& e) {
        check("selftest pipeline", false, e.what());
    }
    return ok;
}

}  // namespace vlmoe
