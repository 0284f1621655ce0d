#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "vlmoe/harness.hpp"

using namespace vlmoe;
namespace fs = std::filesystem;

namespace {

// Fresh scratch directory under /tmp, removed again when the test ends.
struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::path("/tmp") / ("vlmoe-harness-" + name)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
    std::string sub(const std::string& leaf) const { return (path / leaf).string(); }
};

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Two-layer model with the MoE sublayer on layer 2 and no fusion tail.
// Small enough that a full train step is milliseconds.
MoMEConfig tiny_model() {
    MoMEConfig m;
    m.layers = 2;
    m.fusion_layers = 0;
    m.d_model = 16;
    m.heads = 2;
    m.experts = 2;
    m.top_k = 1;
    m.moe_layers = {2};
    m.patch = 8;
    m.text_vocab = 64;
    m.visual_vocab = 8;
    m.max_text_len = 20;
    return m;
}

ExperimentSpec tiny_spec(const std::string& out) {
    ExperimentSpec s;
    s.model = tiny_model();
    s.steps = 2;
    s.seeds = {5};
    s.out = out;
    s.batch = 2;
    s.train_samples = 8;
    s.val_samples = 4;
    s.eval_every = 1;
    s.routing_log_every = 1;
    s.wall_clock = false;
    return s;
}

}  // namespace

TEST_CASE("experiment spec survives a json round trip", "[harness][config]") {
    ExperimentSpec a;
    a.model = tiny_model();
    a.model.capacity_train = 1.25;
    a.model.capacity_infer = 1.1;
    a.model.batch_priority = false;
    a.model.scale_t = false;
    a.model.init_std = 0.05;
    a.model.noise_sigma = 0.3;
    a.model.aux_weight = 0.02;
    a.model.text_aux = AuxLossKind::ZLOSS;
    a.model.image_aux = AuxLossKind::LOAD;
    a.steps = 17;
    a.seeds = {3, 9};
    a.objectives.mim = false;
    a.axis = "bpr";
    a.out = "runs/rt";
    a.batch = 3;
    a.train_samples = 12;
    a.val_samples = 5;
    a.eval_every = 7;
    a.routing_log_every = 9;
    a.sim_alpha = 0.25;
    a.wall_clock = false;
    a.optimizer.peak_lr = 2e-3;
    a.optimizer.beta1 = 0.8;
    a.optimizer.beta2 = 0.95;
    a.optimizer.eps = 1e-9;
    a.optimizer.weight_decay = 0.1;
    a.optimizer.warmup_frac = 0.1;
    a.optimizer.total_steps = 17;

    const ExperimentSpec b = spec_from_json(spec_to_json(a));
    REQUIRE(spec_to_json(b) == spec_to_json(a));
    REQUIRE(b.model.moe_layers == a.model.moe_layers);
    REQUIRE(b.model.image_aux == AuxLossKind::LOAD);
    REQUIRE(b.seeds == a.seeds);
    REQUIRE(b.objectives.mim == false);
    REQUIRE(b.objectives.vlm == true);
    REQUIRE(b.wall_clock == false);
    REQUIRE(b.optimizer.beta2 == 0.95);
}

TEST_CASE("unknown config fields are rejected at every scope", "[harness][config]") {
    json good = spec_to_json(ExperimentSpec{});

    json top = good;
    top["stepz"] = 3;
    REQUIRE_THROWS_AS(spec_from_json(top), ContractError);

    json model = good;
    model["model"]["layerz"] = 3;
    REQUIRE_THROWS_AS(spec_from_json(model), ContractError);

    json obj = good;
    obj["objectives"]["mlmx"] = true;
    REQUIRE_THROWS_AS(spec_from_json(obj), ContractError);

    json opt = good;
    opt["optimizer"]["lr"] = 1e-3;
    REQUIRE_THROWS_AS(spec_from_json(opt), ContractError);

    REQUIRE_THROWS_WITH(spec_from_json(top), Catch::Matchers::ContainsSubstring("unknown field"));
}

TEST_CASE("moe layers default from depth when the key is absent", "[harness][config]") {
    json j{{"layers", 6}, {"fusion_layers", 2}};
    const MoMEConfig c = config_from_json(j);
    REQUIRE(c.moe_layers == std::vector<int>{2, 4});

    json explicit_j{{"layers", 6}, {"fusion_layers", 2}, {"moe_layers", {3}}};
    REQUIRE(config_from_json(explicit_j).moe_layers == std::vector<int>{3});
}

TEST_CASE("spec validation rejects inconsistent settings", "[harness][config]") {
    const ExperimentSpec base = tiny_spec("/tmp/unused");
    base.validate();

    auto broken = [&](auto mutate) {
        ExperimentSpec s = base;
        mutate(s);
        REQUIRE_THROWS_AS(s.validate(), ContractError);
    };
    broken([](ExperimentSpec& s) { s.seeds.clear(); });
    broken([](ExperimentSpec& s) { s.axis = "expertz"; });
    broken([](ExperimentSpec& s) { s.batch = 16; });  // exceeds train_samples
    broken([](ExperimentSpec& s) { s.eval_every = 0; });
    broken([](ExperimentSpec& s) { s.sim_alpha = -0.1; });
    broken([](ExperimentSpec& s) { s.steps = -1; });
    broken([](ExperimentSpec& s) {
        s.objectives.mlm = s.objectives.mim = s.objectives.vlm = false;
    });
    broken([](ExperimentSpec& s) { s.optimizer.peak_lr = 0.0; });
}

TEST_CASE("zero-step training writes a baseline report and initial checkpoint",
          "[harness][train]") {
    TempDir tmp("zerostep");
    ExperimentSpec spec = tiny_spec(tmp.sub("run"));
    spec.steps = 0;

    const auto results = cmd_train(spec);
    REQUIRE(results.size() == 1);
    const std::string dir = results[0].dir;

    REQUIRE(fs::exists(dir + "/spec.json"));
    REQUIRE(read_jsonl(dir + "/metrics.jsonl").empty());

    const auto val = read_jsonl(dir + "/val.jsonl");
    REQUIRE(val.size() == 1);
    REQUIRE(val[0].at("step").get<int>() == 0);
    REQUIRE(val[0].at("val_total").get<double>() > 0.0);

    // No optimizer step ran, so the checkpoint is exactly the seed-5 init.
    Model fresh(spec.model, spec.seeds[0]);
    auto params = fresh.params();
    const auto stored = read_checkpoint(dir + "/checkpoint.bin");
    REQUIRE(stored.size() == params.size());
    for (const auto& p : params) {
        INFO(p.name);
        REQUIRE(stored.at(p.name).data() == p.tensor->data());
    }
}

TEST_CASE("same spec and seed reproduce byte-identical logs", "[harness][train]") {
    TempDir tmp("determinism");
    ExperimentSpec spec = tiny_spec(tmp.sub("a"));
    cmd_train(spec);
    spec.out = tmp.sub("b");
    cmd_train(spec);

    // spec.json differs by the out path; every produced artifact must not.
    for (const char* leaf :
         {"/metrics.jsonl", "/val.jsonl", "/routing.jsonl", "/checkpoint.bin"}) {
        INFO(leaf);
        REQUIRE(read_file(tmp.sub("a") + "/seed5" + leaf) ==
                read_file(tmp.sub("b") + "/seed5" + leaf));
    }
}

TEST_CASE("metrics rows satisfy the loss identity", "[harness][train]") {
    TempDir tmp("identity");
    ExperimentSpec spec = tiny_spec(tmp.sub("run"));
    spec.steps = 3;
    const auto results = cmd_train(spec);

    const auto rows = read_jsonl(results[0].dir + "/metrics.jsonl");
    REQUIRE(rows.size() == 3);
    for (const auto& r : rows) {
        REQUIRE(r.at("aux_weight").get<double>() == spec.model.aux_weight);
        const double recomposed =
            r.at("loss_mlm").get<double>() + r.at("loss_mim").get<double>() +
            r.at("loss_vlm").get<double>() +
            r.at("aux_weight").get<double>() * r.at("loss_aux").get<double>();
        REQUIRE(std::abs(r.at("loss_total").get<double>() - recomposed) <= 1e-10);
        REQUIRE(r.at("loss_aux").get<double>() > 0.0);
    }
}

TEST_CASE("ablation grids enumerate the documented cells", "[harness][ablate]") {
    ExperimentSpec base = tiny_spec("/tmp/unused-grid");
    base.model.top_k = 2;

    SECTION("experts axis sweeps five pool sizes") {
        base.axis = "experts";
        const auto cells = ablation_cells(base);
        REQUIRE(cells.size() == 5);
        const int expected[] = {1, 4, 8, 16, 32};
        for (size_t i = 0; i < cells.size(); ++i) {
            REQUIRE(cells[i].label == std::to_string(expected[i]));
            REQUIRE(cells[i].spec.model.experts == expected[i]);
            REQUIRE(cells[i].spec.model.top_k == std::min(2, expected[i]));
            REQUIRE(cells[i].spec.model.noise_sigma < 0.0);
            REQUIRE(cells[i].spec.out == base.out + "/experts-" + cells[i].label);
        }
    }

    SECTION("strategy axis toggles which modality pools scale") {
        base.axis = "strategy";
        const auto cells = ablation_cells(base);
        REQUIRE(cells.size() == 4);
        REQUIRE(cells[0].label == "none");
        REQUIRE((!cells[0].spec.model.scale_t && !cells[0].spec.model.scale_v));
        REQUIRE(cells[1].label == "T");
        REQUIRE((cells[1].spec.model.scale_t && !cells[1].spec.model.scale_v));
        REQUIRE(cells[2].label == "V");
        REQUIRE((!cells[2].spec.model.scale_t && cells[2].spec.model.scale_v));
        REQUIRE(cells[3].label == "TV");
        REQUIRE((cells[3].spec.model.scale_t && cells[3].spec.model.scale_v));
    }

    SECTION("aux axis swaps the image-pool balance loss") {
        base.axis = "aux";
        const auto cells = ablation_cells(base);
        REQUIRE(cells.size() == 3);
        REQUIRE(cells[0].label == "load");
        REQUIRE(cells[1].label == "vloss");
        REQUIRE(cells[2].label == "zloss");
        REQUIRE(cells[0].spec.model.image_aux == AuxLossKind::LOAD);
        REQUIRE(cells[1].spec.model.image_aux == AuxLossKind::VLOSS);
        REQUIRE(cells[2].spec.model.image_aux == AuxLossKind::ZLOSS);
    }

    SECTION("bpr axis toggles batch-priority routing") {
        base.axis = "bpr";
        const auto cells = ablation_cells(base);
        REQUIRE(cells.size() == 2);
        REQUIRE(cells[0].spec.model.batch_priority);
        REQUIRE_FALSE(cells[1].spec.model.batch_priority);
    }

    SECTION("an unnamed axis is a contract error") {
        base.axis = "";
        REQUIRE_THROWS_AS(ablation_cells(base), ContractError);
    }
}

TEST_CASE("per-token parameter count is invariant to expert count", "[harness][ablate]") {
    ExperimentSpec base = tiny_spec("/tmp/unused-pt");
    base.axis = "experts";
    const auto cells = ablation_cells(base);

    const long long pt_text = param_count_per_token(cells[0].spec.model, Modality::TEXT);
    const long long pt_image = param_count_per_token(cells[0].spec.model, Modality::IMAGE);
    long long prev_total = 0;
    for (const auto& c : cells) {
        REQUIRE(param_count_per_token(c.spec.model, Modality::TEXT) == pt_text);
        REQUIRE(param_count_per_token(c.spec.model, Modality::IMAGE) == pt_image);
        const long long total = param_count_total(c.spec.model);
        REQUIRE(total > prev_total);  // total capacity still grows with E
        prev_total = total;
    }
}

TEST_CASE("strategy ablation produces a four-row table", "[harness][ablate]") {
    TempDir tmp("ablate");
    ExperimentSpec base = tiny_spec(tmp.sub("grid"));
    base.axis = "strategy";
    base.steps = 1;
    base.val_samples = 2;

    const json table = cmd_ablate(base);
    REQUIRE(table.at("axis") == "strategy");
    const auto& rows = table.at("rows");
    REQUIRE(rows.size() == 4);
    const char* order[] = {"none", "T", "V", "TV"};
    for (size_t i = 0; i < 4; ++i) {
        const auto& r = rows[i];
        REQUIRE(r.at("cell") == order[i]);
        REQUIRE(r.at("val_total").get<double>() > 0.0);
        REQUIRE(r.at("params_per_token_text").get<long long>() > 0);
        REQUIRE(r.at("params_per_token_image").get<long long>() > 0);
        REQUIRE(std::isfinite(r.at("instability").get<double>()));
        REQUIRE(r.at("seeds") == json(base.seeds));
    }
    // Dense cells route nothing, so they pay no drops.
    REQUIRE(rows[0].at("drop_rate_max").get<double>() == 0.0);

    REQUIRE(fs::exists(tmp.sub("grid") + "/table.json"));
    const std::string md = read_file(tmp.sub("grid") + "/table.md");
    REQUIRE(md.find("| none") != std::string::npos);
    REQUIRE(md.find("instability") != std::string::npos);
}

// Pinned seeds, so the ranking is a deterministic regression check, not a
// statistical claim. Non-strict: vloss must not be less stable than the
// alternatives at this configuration.
TEST_CASE("combined balance loss is the most stable image-pool choice", "[harness][ablate]") {
    TempDir tmp("auxrank");
    ExperimentSpec base = tiny_spec(tmp.sub("grid"));
    base.model.experts = 4;
    base.axis = "aux";
    base.steps = 50;
    base.seeds = {1, 2};
    base.batch = 4;
    base.train_samples = 32;
    base.val_samples = 16;
    base.eval_every = 5;
    base.routing_log_every = 5;

    const json table = cmd_ablate(base);
    const auto& rows = table.at("rows");
    REQUIRE(rows.size() == 3);
    double load = -1.0, vloss = -1.0, zloss = -1.0;
    for (const auto& r : rows) {
        const double stab = r.at("instability").get<double>();
        REQUIRE(std::isfinite(stab));
        if (r.at("cell") == "load") load = stab;
        if (r.at("cell") == "vloss") vloss = stab;
        if (r.at("cell") == "zloss") zloss = stab;
    }
    REQUIRE(vloss >= 0.0);
    REQUIRE(vloss <= load);
    REQUIRE(vloss <= zloss);
}

TEST_CASE("run report aggregates routing logs with exact conservation", "[harness][report]") {
    TempDir tmp("report");
    ExperimentSpec spec = tiny_spec(tmp.sub("run"));
    const auto results = cmd_train(spec);
    const std::string dir = results[0].dir;

    const json rep = cmd_report(dir);
    REQUIRE(rep.at("steps_logged").get<int>() == spec.steps);
    REQUIRE_FALSE(rep.at("breakdown").empty());

    // top_k = 1: each token appears exactly once per MoE invocation.
    REQUIRE_FALSE(rep.at("conservation").empty());
    for (const auto& c : rep.at("conservation")) {
        REQUIRE(c.at("layer").get<int>() == 2);
        REQUIRE(c.at("assignments").get<int>() ==
                spec.model.top_k * c.at("distinct_tokens").get<int>());
    }

    std::set<std::string> modalities;
    for (const auto& b : rep.at("breakdown")) {
        modalities.insert(b.at("modality").get<std::string>());
        int assigned = 0;
        for (const auto& e : b.at("experts")) {
            REQUIRE(e.at("kept").get<int>() <= e.at("total").get<int>());
            assigned += e.at("total").get<int>();
        }
        REQUIRE(assigned > 0);
    }
    REQUIRE(modalities == std::set<std::string>{"image", "text"});

    for (const auto& d : rep.at("drop_summary")) {
        REQUIRE(d.at("mean_rate").get<double>() >= 0.0);
        REQUIRE(d.at("mean_rate").get<double>() <= d.at("max_rate").get<double>());
        REQUIRE(d.at("max_rate").get<double>() <= 1.0);
    }

    REQUIRE(fs::exists(dir + "/report.json"));
    REQUIRE(fs::exists(dir + "/losses.svg"));
    REQUIRE(fs::exists(dir + "/routing_l2_text.svg"));
    REQUIRE(fs::exists(dir + "/routing_l2_image.svg"));

    REQUIRE_THROWS_AS(cmd_report("/tmp/vlmoe-harness-nope"), ContractError);
}

TEST_CASE("simulator replay conserves tokens and keeps one worker local", "[harness][sim]") {
    TempDir tmp("simulate");
    ExperimentSpec spec = tiny_spec(tmp.sub("run"));
    const auto results = cmd_train(spec);
    const std::string dir = results[0].dir;

    const json sim = cmd_simulate(dir, {1, 2}, 0.1);
    REQUIRE(sim.at("alpha").get<double>() == 0.1);
    REQUIRE(sim.at("experts").get<int>() == spec.model.experts);
    REQUIRE(sim.at("by_workers").size() == 2);

    const auto& solo = sim.at("by_workers")[0];
    REQUIRE(solo.at("workers").get<int>() == 1);
    REQUIRE_FALSE(solo.at("layers").empty());
    for (const auto& d : solo.at("layers")) {
        REQUIRE(d.at("p95_transfer").get<double>() == 0.0);
        REQUIRE(d.at("max_load_ratio").get<double>() == 1.0);
    }

    const auto& duo = sim.at("by_workers")[1];
    REQUIRE(duo.at("workers").get<int>() == 2);
    for (const auto& d : duo.at("layers")) {
        int dispatched = 0;
        for (const auto& row : d.at("dispatch"))
            for (const auto& v : row) dispatched += v.get<int>();
        REQUIRE(dispatched == d.at("kept").get<int>());
        REQUIRE(d.at("kept").get<int>() <= d.at("tokens").get<int>() * spec.model.top_k);
        REQUIRE(std::isfinite(d.at("step_time").get<double>()));
    }
    REQUIRE(std::isfinite(duo.at("mean_max_load_ratio").get<double>()));
    REQUIRE(fs::exists(dir + "/sim.json"));

    REQUIRE_THROWS_AS(cmd_simulate("/tmp/vlmoe-harness-nope", {1}, 0.1), ContractError);
}

TEST_CASE("built-in selftest passes end to end", "[harness][selftest]") {
    TempDir tmp("selftest");
    REQUIRE(cmd_selftest(tmp.str()));
}
