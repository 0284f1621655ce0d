#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "vlmoe/model.hpp"
#include "vlmoe/tensor.hpp"

namespace vlmoe {

struct AdamWConfig {
    double peak_lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;  // decoupled, matrices only
    double warmup_frac = 0.05;
    int total_steps = 2000;
};

// AdamW with linear warmup into cosine decay. Decay applies to rank >= 2
// tensors; vectors (norms, biases) update without decay. Frozen parameters
// are skipped outright, leaving both value and state untouched.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {
        if (cfg_.total_steps < 0) throw ContractError("optimizer: negative step budget");
        warmup_ = std::max(1, static_cast<int>(std::lround(cfg_.warmup_frac * cfg_.total_steps)));
    }

    double lr_at(int step) const {  // 1-based
        if (step <= warmup_) return cfg_.peak_lr * step / warmup_;
        if (cfg_.total_steps <= warmup_) return cfg_.peak_lr;
        const double t = static_cast<double>(step - warmup_) / (cfg_.total_steps - warmup_);
        return cfg_.peak_lr * 0.5 * (1.0 + std::cos(M_PI * std::min(t, 1.0)));
    }

    void step(const std::vector<ParamRef>& params, const Gradients& grads) {
        ++t_;
        const double lr = lr_at(t_);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (const ParamRef& p : params) {
            if (!p.trainable) continue;
            Tensor g = grads.at(*p.tensor);
            auto& m = state_[p.name].first;
            auto& v = state_[p.name].second;
            if (m.empty()) {
                m.assign(p.tensor->size(), 0.0);
                v.assign(p.tensor->size(), 0.0);
            }
            const bool decay = p.tensor->rank() >= 2;
            double* w = p.tensor->ptr();
            for (size_t i = 0; i < g.size(); ++i) {
                const double gi = g.data()[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
                double upd = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
                if (decay) upd += cfg_.weight_decay * w[i];
                w[i] -= lr * upd;
            }
        }
    }

    int steps_done() const { return t_; }
    const AdamWConfig& config() const { return cfg_; }

private:
    AdamWConfig cfg_;
    int warmup_ = 1;
    int t_ = 0;
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> state_;
};

}  // namespace vlmoe
