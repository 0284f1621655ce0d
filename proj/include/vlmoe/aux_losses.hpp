#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "vlmoe/routing.hpp"
#include "vlmoe/tensor.hpp"

namespace vlmoe {

enum class AuxLossKind { IMPORTANCE, LOAD, ZLOSS, VLOSS };

inline const char* aux_kind_name(AuxLossKind k) {
    switch (k) {
        case AuxLossKind::IMPORTANCE: return "importance";
        case AuxLossKind::LOAD: return "load";
        case AuxLossKind::ZLOSS: return "zloss";
        case AuxLossKind::VLOSS: return "vloss";
    }
    return "?";
}

// Squared coefficient of variation of per-expert total gate mass. Zero when
// every expert receives identical mass.
inline Tensor importance_loss(Tape& tape, const Tensor& gates) {
    if (gates.rank() != 2 || gates.dim(0) == 0)
        throw ContractError("importance_loss: needs a non-empty [n x E] gate matrix");
    return cv_squared(tape, sum_axis0(tape, gates), 0.0);
}

// k-th largest entry of each row, as a plain constant vector.
inline std::vector<double> kth_largest_rows(const Tensor& logits, int k) {
    const int n = logits.dim(0), e = logits.dim(1);
    if (k < 1 || k > e) throw ContractError("kth_largest_rows: k out of range");
    std::vector<double> eta(static_cast<size_t>(n));
    std::vector<double> row(static_cast<size_t>(e));
    for (int i = 0; i < n; ++i) {
        std::copy(logits.ptr() + i * e, logits.ptr() + (i + 1) * e, row.begin());
        std::nth_element(row.begin(), row.begin() + (k - 1), row.end(), std::greater<double>());
        eta[static_cast<size_t>(i)] = row[static_cast<size_t>(k - 1)];
    }
    return eta;
}

// p[i,e] = 1 - Phi((eta_i - clean[i,e]) / sigma): the probability that expert
// e clears the realized selection threshold under a fresh noise draw. eta is
// a constant; gradients flow through clean only.
inline Tensor load_fractions(Tape& tape, const Tensor& clean, const std::vector<double>& eta,
                             double sigma) {
    if (sigma <= 0.0) throw ContractError("load_fractions: sigma must be positive");
    const int n = clean.dim(0), e = clean.dim(1);
    if (static_cast<int>(eta.size()) != n)
        throw ContractError("load_fractions: one threshold per token required");
    Tensor p({n, e});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < e; ++j)
            p.data()[i * e + j] =
                1.0 - normal_cdf((eta[static_cast<size_t>(i)] - clean.at(i, j)) / sigma);
    if (clean.node >= 0) {
        p.node = tape.record(p.size(), {clean.node},
                             [clean, eta, sigma, n, e](Tape& t, const std::vector<double>& g) {
                                 auto& dc = t.grad_buffer(clean.node);
                                 for (int i = 0; i < n; ++i)
                                     for (int j = 0; j < e; ++j) {
                                         const double z =
                                             (eta[static_cast<size_t>(i)] - clean.at(i, j)) / sigma;
                                         dc[i * e + j] += g[i * e + j] * normal_pdf(z) / sigma;
                                     }
                             });
    }
    return p;
}

// Squared coefficient of variation of expected per-expert load under noise
// resampling, with the realized k-th-largest noisy logit per token as the
// fixed selection threshold.
inline Tensor load_loss(Tape& tape, const Tensor& clean_logits, const Tensor& noisy_logits, int k,
                        double sigma) {
    if (sigma <= 0.0) throw ContractError("load_loss: sigma must be positive");
    detail::require_same_shape(clean_logits, noisy_logits, "load_loss");
    const std::vector<double> eta = kth_largest_rows(noisy_logits, k);
    Tensor p = load_fractions(tape, clean_logits, eta, sigma);
    return cv_squared(tape, sum_axis0(tape, p), 1e-12);
}

// Mean squared log-sum-exp of the router logits, penalizing large
// activations.
inline Tensor z_loss(Tape& tape, const Tensor& clean_logits) {
    if (clean_logits.dim(0) < 1) throw ContractError("z_loss: needs at least one token");
    Tensor lse = logsumexp_rows(tape, clean_logits);
    return mean(tape, mul(tape, lse, lse));
}

inline Tensor v_loss(Tape& tape, const Tensor& gates, const Tensor& clean_logits,
                     const Tensor& noisy_logits, int k, double sigma) {
    Tensor half_imp = scale(tape, importance_loss(tape, gates), 0.5);
    Tensor half_load = scale(tape, load_loss(tape, clean_logits, noisy_logits, k, sigma), 0.5);
    return add(tape, half_imp, half_load);
}

inline Tensor aux_loss(Tape& tape, AuxLossKind kind, const RoutingPlan& plan, double sigma) {
    switch (kind) {
        case AuxLossKind::IMPORTANCE:
            return importance_loss(tape, plan.gates);
        case AuxLossKind::LOAD:
            return load_loss(tape, plan.clean_logits, plan.noisy_logits, plan.top_k, sigma);
        case AuxLossKind::ZLOSS:
            return z_loss(tape, plan.clean_logits);
        case AuxLossKind::VLOSS:
            return v_loss(tape, plan.gates, plan.clean_logits, plan.noisy_logits, plan.top_k,
                          sigma);
    }
    throw ContractError("aux_loss: unknown kind");
}

// Balancing term of the training objective: per-modality mean over MoE layer
// losses, modalities summed, then the combination weight.
inline Tensor total_aux(Tape& tape, const std::vector<Tensor>& text_losses,
                        const std::vector<Tensor>& image_losses, double weight) {
    auto mean_of = [&tape](const std::vector<Tensor>& ls) -> Tensor {
        Tensor acc = ls[0];
        for (size_t i = 1; i < ls.size(); ++i) acc = add(tape, acc, ls[i]);
        return scale(tape, acc, 1.0 / static_cast<double>(ls.size()));
    };
    if (text_losses.empty() && image_losses.empty()) return Tensor::scalar(0.0);
    Tensor total;
    if (!text_losses.empty()) total = mean_of(text_losses);
    if (!image_losses.empty()) {
        Tensor v = mean_of(image_losses);
        total = total.size() == 0 ? v : add(tape, total, v);
    }
    return scale(tape, total, weight);
}

}  // namespace vlmoe
