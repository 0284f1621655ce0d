#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vlmoe/model.hpp"
#include "vlmoe/objectives.hpp"
#include "vlmoe/optimizer.hpp"

namespace vlmoe {

using nlohmann::json;

inline AuxLossKind aux_kind_from_string(const std::string& s) {
    if (s == "importance") return AuxLossKind::IMPORTANCE;
    if (s == "load") return AuxLossKind::LOAD;
    if (s == "zloss") return AuxLossKind::ZLOSS;
    if (s == "vloss") return AuxLossKind::VLOSS;
    throw ContractError("unknown aux loss kind '" + s + "'");
}

namespace detail {

// Strict field-by-field reader: unknown keys are configuration mistakes and
// fail loudly before any compute.
class FieldReader {
public:
    FieldReader(const json& j, std::string scope) : j_(j), scope_(std::move(scope)) {
        if (!j_.is_object()) throw ContractError(scope_ + ": expected a JSON object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (auto it = j_.find(key); it != j_.end()) {
            try {
                out = it->get<T>();
            } catch (const json::exception& e) {
                throw ContractError(scope_ + "." + key + ": " + e.what());
            }
        }
    }

    void get_aux(const char* key, AuxLossKind& out) {
        std::string s;
        bool present = j_.contains(key);
        get(key, s);
        if (present) out = aux_kind_from_string(s);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw ContractError(scope_ + ": unknown field '" + it.key() + "'");
    }

    const json& raw() const { return j_; }

private:
    const json& j_;
    std::string scope_;
    std::set<std::string> seen_;
};

}  // namespace detail

inline const char* aux_kind_key(AuxLossKind k) { return aux_kind_name(k); }

inline json config_to_json(const MoMEConfig& c) {
    return json{{"layers", c.layers},
                {"fusion_layers", c.fusion_layers},
                {"d_model", c.d_model},
                {"heads", c.heads},
                {"experts", c.experts},
                {"top_k", c.top_k},
                {"capacity_train", c.capacity_train},
                {"capacity_infer", c.capacity_infer},
                {"batch_priority", c.batch_priority},
                {"moe_layers", c.moe_layers},
                {"scale_t", c.scale_t},
                {"scale_v", c.scale_v},
                {"patch", c.patch},
                {"image_h", c.image_h},
                {"image_w", c.image_w},
                {"image_c", c.image_c},
                {"text_vocab", c.text_vocab},
                {"visual_vocab", c.visual_vocab},
                {"max_text_len", c.max_text_len},
                {"init_std", c.init_std},
                {"noise_sigma", c.noise_sigma},
                {"aux_weight", c.aux_weight},
                {"text_aux", aux_kind_key(c.text_aux)},
                {"image_aux", aux_kind_key(c.image_aux)}};
}

inline MoMEConfig config_from_json(const json& j, const std::string& scope = "model") {
    MoMEConfig c;
    detail::FieldReader r(j, scope);
    r.get("layers", c.layers);
    r.get("fusion_layers", c.fusion_layers);
    r.get("d_model", c.d_model);
    r.get("heads", c.heads);
    r.get("experts", c.experts);
    r.get("top_k", c.top_k);
    r.get("capacity_train", c.capacity_train);
    r.get("capacity_infer", c.capacity_infer);
    r.get("batch_priority", c.batch_priority);
    if (j.contains("moe_layers"))
        r.get("moe_layers", c.moe_layers);
    else
        c.moe_layers = MoMEConfig::default_moe_layers(c.layers, c.fusion_layers);
    r.get("scale_t", c.scale_t);
    r.get("scale_v", c.scale_v);
    r.get("patch", c.patch);
    r.get("image_h", c.image_h);
    r.get("image_w", c.image_w);
    r.get("image_c", c.image_c);
    r.get("text_vocab", c.text_vocab);
    r.get("visual_vocab", c.visual_vocab);
    r.get("max_text_len", c.max_text_len);
    r.get("init_std", c.init_std);
    r.get("noise_sigma", c.noise_sigma);
    r.get("aux_weight", c.aux_weight);
    r.get_aux("text_aux", c.text_aux);
    r.get_aux("image_aux", c.image_aux);
    r.finish();
    c.validate();
    return c;
}

struct ExperimentSpec {
    MoMEConfig model;
    int steps = 2000;
    std::vector<uint64_t> seeds = {1};
    ObjectiveToggles objectives;
    std::string axis;  // "", "experts", "strategy", "aux", "bpr"
    std::string out = "runs/out";
    int batch = 32;            // per objective
    int train_samples = 2048;
    int val_samples = 128;
    int eval_every = 100;
    int routing_log_every = 50;
    double sim_alpha = 0.1;
    bool wall_clock = true;
    AdamWConfig optimizer;

    void validate() const {
        model.validate();
        if (steps < 0) throw ContractError("spec: steps must be nonnegative");
        if (seeds.empty()) throw ContractError("spec: at least one seed");
        if (!objectives.any()) throw ContractError("spec: all objectives disabled");
        if (!axis.empty() && axis != "experts" && axis != "strategy" && axis != "aux" &&
            axis != "bpr")
            throw ContractError("spec: unknown ablation axis '" + axis + "'");
        if (out.empty()) throw ContractError("spec: output directory required");
        if (batch < 1 || train_samples < batch || val_samples < 1)
            throw ContractError("spec: batch/corpus sizes inconsistent");
        if (eval_every < 1 || routing_log_every < 1)
            throw ContractError("spec: logging cadence must be positive");
        if (sim_alpha < 0.0) throw ContractError("spec: sim_alpha must be nonnegative");
        if (optimizer.peak_lr <= 0.0 || optimizer.weight_decay < 0.0)
            throw ContractError("spec: optimizer hyperparameters out of range");
    }
};

inline json spec_to_json(const ExperimentSpec& s) {
    return json{{"model", config_to_json(s.model)},
                {"steps", s.steps},
                {"seeds", s.seeds},
                {"objectives",
                 {{"mlm", s.objectives.mlm}, {"mim", s.objectives.mim}, {"vlm", s.objectives.vlm}}},
                {"axis", s.axis},
                {"out", s.out},
                {"batch", s.batch},
                {"train_samples", s.train_samples},
                {"val_samples", s.val_samples},
                {"eval_every", s.eval_every},
                {"routing_log_every", s.routing_log_every},
                {"sim_alpha", s.sim_alpha},
                {"wall_clock", s.wall_clock},
                {"optimizer",
                 {{"peak_lr", s.optimizer.peak_lr},
                  {"beta1", s.optimizer.beta1},
                  {"beta2", s.optimizer.beta2},
                  {"eps", s.optimizer.eps},
                  {"weight_decay", s.optimizer.weight_decay},
                  {"warmup_frac", s.optimizer.warmup_frac}}}};
}

inline ExperimentSpec spec_from_json(const json& j) {
    ExperimentSpec s;
    detail::FieldReader r(j, "spec");
    json model_json;
    r.get("model", model_json);
    if (!model_json.is_null()) s.model = config_from_json(model_json);
    r.get("steps", s.steps);
    r.get("seeds", s.seeds);
    json obj_json;
    r.get("objectives", obj_json);
    if (!obj_json.is_null()) {
        detail::FieldReader ro(obj_json, "spec.objectives");
        ro.get("mlm", s.objectives.mlm);
        ro.get("mim", s.objectives.mim);
        ro.get("vlm", s.objectives.vlm);
        ro.finish();
    }
    r.get("axis", s.axis);
    r.get("out", s.out);
    r.get("batch", s.batch);
    r.get("train_samples", s.train_samples);
    r.get("val_samples", s.val_samples);
    r.get("eval_every", s.eval_every);
    r.get("routing_log_every", s.routing_log_every);
    r.get("sim_alpha", s.sim_alpha);
    r.get("wall_clock", s.wall_clock);
    json opt_json;
    r.get("optimizer", opt_json);
    if (!opt_json.is_null()) {
        detail::FieldReader ro(opt_json, "spec.optimizer");
        ro.get("peak_lr", s.optimizer.peak_lr);
        ro.get("beta1", s.optimizer.beta1);
        ro.get("beta2", s.optimizer.beta2);
        ro.get("eps", s.optimizer.eps);
        ro.get("weight_decay", s.optimizer.weight_decay);
        ro.get("warmup_frac", s.optimizer.warmup_frac);
        ro.finish();
    }
    r.finish();
    s.validate();
    return s;
}

inline ExperimentSpec load_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ContractError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ContractError("config parse error in " + path + ": " + e.what());
    }
    return spec_from_json(j);
}

}  // namespace vlmoe
