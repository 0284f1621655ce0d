#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "vlmoe/aux_losses.hpp"
#include "vlmoe/data.hpp"
#include "vlmoe/model.hpp"
#include "vlmoe/optimizer.hpp"

namespace vlmoe {

enum class TextReplacement { MASK_TOKEN, RANDOM_TOKEN, KEEP };

struct MaskPlan {
    std::vector<int> positions;                // sorted, sequence-local
    std::vector<TextReplacement> replacement;  // text plans only, per position
    std::vector<int> targets;                  // pre-corruption ids (text plans)
    std::vector<std::array<int, 4>> blocks;    // image plans: r0, c0, h, w per rectangle
};

// Uniform choice of round(ratio * maskable) positions, specials excluded;
// each chosen position becomes MASK with p=0.8, a uniform random vocabulary
// id with p=0.1, and stays itself with p=0.1.
inline std::pair<MaskPlan, std::vector<int>> mask_text(const std::vector<int>& ids, double ratio,
                                                       int vocab_size, Rng& rng) {
    if (ratio <= 0.0 || ratio >= 1.0) throw ContractError("mask_text: ratio outside (0,1)");
    std::vector<int> maskable;
    for (size_t i = 0; i < ids.size(); ++i)
        if (ids[i] >= kFirstWordId) maskable.push_back(static_cast<int>(i));
    const int m = static_cast<int>(maskable.size());
    const int n_mask = static_cast<int>(std::floor(ratio * m + 0.5));
    for (int i = 0; i < n_mask; ++i) {
        const int j = i + rng.uniform_int(m - i);
        std::swap(maskable[static_cast<size_t>(i)], maskable[static_cast<size_t>(j)]);
    }
    MaskPlan plan;
    plan.positions.assign(maskable.begin(), maskable.begin() + n_mask);
    std::sort(plan.positions.begin(), plan.positions.end());
    std::vector<int> corrupted = ids;
    for (int p : plan.positions) {
        plan.targets.push_back(ids[static_cast<size_t>(p)]);
        const double u = rng.uniform();
        if (u < 0.8) {
            plan.replacement.push_back(TextReplacement::MASK_TOKEN);
            corrupted[static_cast<size_t>(p)] = kTextMaskId;
        } else if (u < 0.9) {
            plan.replacement.push_back(TextReplacement::RANDOM_TOKEN);
            corrupted[static_cast<size_t>(p)] = rng.uniform_int(vocab_size);
        } else {
            plan.replacement.push_back(TextReplacement::KEEP);
        }
    }
    return {std::move(plan), std::move(corrupted)};
}

namespace detail {

// One candidate rectangle: target area and log-uniform aspect, rounded and
// clamped to the grid. May come out invalid (area < 4); callers resample.
inline std::array<int, 4> sample_block(int rows, int cols, Rng& rng) {
    const int total = rows * cols;
    const int max_area = std::max(4, total / 12);
    const int area = 4 + (max_area > 4 ? rng.uniform_int(max_area - 3) : 0);
    const double aspect = std::exp(rng.uniform(std::log(0.3), std::log(1.0 / 0.3)));
    int h = std::max(1, static_cast<int>(std::lround(std::sqrt(area * aspect))));
    int w = std::max(1, static_cast<int>(std::lround(std::sqrt(area / aspect))));
    h = std::min(h, rows);
    w = std::min(w, cols);
    const int r0 = rng.uniform_int(rows - h + 1);
    const int c0 = rng.uniform_int(cols - w + 1);
    return {r0, c0, h, w};
}

}  // namespace detail

// Unions random rectangles (area >= 4, aspect within [0.3, 1/0.3]) until the
// masked fraction reaches ratio, rejecting any block that would push the
// fraction past ratio + 0.1. Grids too small for a legal block fall back to
// single-patch masking.
inline MaskPlan mask_image_blockwise(int rows, int cols, double ratio, Rng& rng) {
    if (ratio <= 0.0 || ratio >= 1.0) throw ContractError("mask_image: ratio outside (0,1)");
    if (rows < 1 || cols < 1) throw ContractError("mask_image: empty grid");
    const int total = rows * cols;
    const int need = static_cast<int>(std::ceil(ratio * total - 1e-9));
    const int cap = std::max(need, static_cast<int>(std::floor((ratio + 0.1) * total + 1e-9)));
    MaskPlan plan;
    std::vector<uint8_t> masked(static_cast<size_t>(total), 0);
    int count = 0;

    if (total >= 4 && std::max(rows, cols) >= 2) {
        for (int attempt = 0; attempt < 10000 && count < need; ++attempt) {
            const auto blk = detail::sample_block(rows, cols, rng);
            if (blk[2] * blk[3] < 4) continue;
            const double a = static_cast<double>(blk[2]) / blk[3];
            if (a < 0.3 - 1e-12 || a > 1.0 / 0.3 + 1e-12) continue;
            int added = 0;
            for (int r = blk[0]; r < blk[0] + blk[2]; ++r)
                for (int c = blk[1]; c < blk[1] + blk[3]; ++c)
                    if (!masked[static_cast<size_t>(r * cols + c)]) ++added;
            if (count + added > cap) continue;
            for (int r = blk[0]; r < blk[0] + blk[2]; ++r)
                for (int c = blk[1]; c < blk[1] + blk[3]; ++c)
                    masked[static_cast<size_t>(r * cols + c)] = 1;
            count += added;
            plan.blocks.push_back(blk);
        }
    }
    while (count < need) {  // tiny grids, or pathological rejection streaks
        const int p = rng.uniform_int(total);
        if (masked[static_cast<size_t>(p)]) continue;
        masked[static_cast<size_t>(p)] = 1;
        plan.blocks.push_back({p / cols, p % cols, 1, 1});
        ++count;
    }
    for (int p = 0; p < total; ++p)
        if (masked[static_cast<size_t>(p)]) plan.positions.push_back(p);
    return plan;
}

// Per-patch mean intensity quantized into uniform bins over [0,1].
inline std::vector<int> visual_tokenize(const Tensor& pixels, int patch, int n_bins) {
    Tensor flat = patchify(pixels, patch);
    const int np = flat.dim(0), pv = flat.dim(1);
    std::vector<int> ids(static_cast<size_t>(np));
    for (int i = 0; i < np; ++i) {
        double mean = 0.0;
        for (int j = 0; j < pv; ++j) mean += flat.at(i, j);
        mean /= pv;
        ids[static_cast<size_t>(i)] =
            std::clamp(static_cast<int>(std::floor(mean * n_bins)), 0, n_bins - 1);
    }
    return ids;
}

struct ObjectiveResult {
    Tensor loss;  // scalar, on tape when parameters are bound
    int masked = 0;
    std::vector<LayerRouting> routing;
    std::vector<TokenKind> kinds;  // per batch row, for routing logs
};

namespace detail {

inline std::vector<int> inverse_rows(const std::vector<int>& rows, int n) {
    std::vector<int> inv(static_cast<size_t>(n), -1);
    for (size_t i = 0; i < rows.size(); ++i)
        inv[static_cast<size_t>(rows[i])] = static_cast<int>(i);
    return inv;
}

}  // namespace detail

// Masked language modeling on mono-modal text.
inline ObjectiveResult loss_mlm(Tape& tape, const Model& model,
                                const std::vector<const Sample*>& samples, double ratio,
                                bool training, Rng& rng) {
    std::vector<TokenBatch> seqs;
    std::vector<MaskPlan> plans;
    std::vector<int> starts;
    int start = 0;
    for (size_t i = 0; i < samples.size(); ++i) {
        Rng mask_rng = rng.fork("text-mask", i);
        auto [plan, corrupted] =
            mask_text(samples[i]->caption, ratio, model.cfg.text_vocab, mask_rng);
        seqs.push_back(model.embed_text(tape, corrupted));
        plans.push_back(std::move(plan));
        starts.push_back(start);
        start += seqs.back().length();
    }
    BatchInput batch = Model::make_batch(tape, seqs, Mode::TEXT_ONLY);
    Rng fwd = rng.fork("fwd");
    ForwardResult fr = model.forward(tape, batch, training, fwd);

    const int n_rows = static_cast<int>(fr.text_rows.size());
    std::vector<int> targets(static_cast<size_t>(n_rows), 0);
    std::vector<uint8_t> ignore(static_cast<size_t>(n_rows), 1);
    const std::vector<int> inv = detail::inverse_rows(fr.text_rows, batch.n_tokens());
    ObjectiveResult out;
    for (size_t i = 0; i < plans.size(); ++i) {
        for (size_t j = 0; j < plans[i].positions.size(); ++j) {
            const int row = starts[i] + 1 + plans[i].positions[j];  // +1 skips T_CLS
            const int idx = inv[static_cast<size_t>(row)];
            targets[static_cast<size_t>(idx)] = plans[i].targets[j];
            ignore[static_cast<size_t>(idx)] = 0;
            ++out.masked;
        }
    }
    out.loss = cross_entropy(tape, fr.text_logits, targets, ignore);
    out.routing = std::move(fr.routing);
    out.kinds = batch.kind;
    return out;
}

// Masked image modeling on mono-modal images: recover the quantized visual
// token of each masked patch.
inline ObjectiveResult loss_mim(Tape& tape, const Model& model,
                                const std::vector<const Sample*>& samples, double ratio,
                                bool training, Rng& rng) {
    const MoMEConfig& cfg = model.cfg;
    std::vector<TokenBatch> seqs;
    std::vector<MaskPlan> plans;
    std::vector<std::vector<int>> vis_ids;
    std::vector<int> starts;
    int start = 0;
    for (size_t i = 0; i < samples.size(); ++i) {
        Rng mask_rng = rng.fork("img-mask", i);
        MaskPlan plan = mask_image_blockwise(cfg.grid_h(), cfg.grid_w(), ratio, mask_rng);
        std::vector<uint8_t> flags(static_cast<size_t>(cfg.n_patches()), 0);
        for (int p : plan.positions) flags[static_cast<size_t>(p)] = 1;
        seqs.push_back(model.embed_image(tape, samples[i]->pixels, &flags));
        vis_ids.push_back(visual_tokenize(samples[i]->pixels, cfg.patch, cfg.visual_vocab));
        plans.push_back(std::move(plan));
        starts.push_back(start);
        start += seqs.back().length();
    }
    BatchInput batch = Model::make_batch(tape, seqs, Mode::IMAGE_ONLY);
    Rng fwd = rng.fork("fwd");
    ForwardResult fr = model.forward(tape, batch, training, fwd);

    const int n_rows = static_cast<int>(fr.image_rows.size());
    std::vector<int> targets(static_cast<size_t>(n_rows), 0);
    std::vector<uint8_t> ignore(static_cast<size_t>(n_rows), 1);
    const std::vector<int> inv = detail::inverse_rows(fr.image_rows, batch.n_tokens());
    ObjectiveResult out;
    for (size_t i = 0; i < plans.size(); ++i) {
        for (int p : plans[i].positions) {
            const int row = starts[i] + 1 + p;  // +1 skips I_CLS
            const int idx = inv[static_cast<size_t>(row)];
            targets[static_cast<size_t>(idx)] = vis_ids[i][static_cast<size_t>(p)];
            ignore[static_cast<size_t>(idx)] = 0;
            ++out.masked;
        }
    }
    out.loss = cross_entropy(tape, fr.visual_logits, targets, ignore);
    out.routing = std::move(fr.routing);
    out.kinds = batch.kind;
    return out;
}

// Masked vision-language modeling on pairs: heavier text masking plus
// image masking, one joint forward, text and image losses summed.
inline ObjectiveResult loss_vlm(Tape& tape, const Model& model,
                                const std::vector<const Sample*>& samples, double text_ratio,
                                double image_ratio, bool training, Rng& rng) {
    const MoMEConfig& cfg = model.cfg;
    std::vector<TokenBatch> seqs;
    std::vector<MaskPlan> tplans, iplans;
    std::vector<std::vector<int>> vis_ids;
    std::vector<int> starts, text_lens;
    int start = 0;
    for (size_t i = 0; i < samples.size(); ++i) {
        Rng trng = rng.fork("text-mask", i);
        Rng irng = rng.fork("img-mask", i);
        auto [tplan, corrupted] = mask_text(samples[i]->caption, text_ratio, cfg.text_vocab, trng);
        MaskPlan iplan = mask_image_blockwise(cfg.grid_h(), cfg.grid_w(), image_ratio, irng);
        std::vector<uint8_t> flags(static_cast<size_t>(cfg.n_patches()), 0);
        for (int p : iplan.positions) flags[static_cast<size_t>(p)] = 1;
        seqs.push_back(model.embed_pair(tape, corrupted, samples[i]->pixels, &flags));
        vis_ids.push_back(visual_tokenize(samples[i]->pixels, cfg.patch, cfg.visual_vocab));
        tplans.push_back(std::move(tplan));
        iplans.push_back(std::move(iplan));
        starts.push_back(start);
        text_lens.push_back(static_cast<int>(samples[i]->caption.size()) + 2);
        start += seqs.back().length();
    }
    BatchInput batch = Model::make_batch(tape, seqs, Mode::PAIR);
    Rng fwd = rng.fork("fwd");
    ForwardResult fr = model.forward(tape, batch, training, fwd);

    const std::vector<int> inv_t = detail::inverse_rows(fr.text_rows, batch.n_tokens());
    const std::vector<int> inv_v = detail::inverse_rows(fr.image_rows, batch.n_tokens());
    std::vector<int> t_targets(fr.text_rows.size(), 0), v_targets(fr.image_rows.size(), 0);
    std::vector<uint8_t> t_ignore(fr.text_rows.size(), 1), v_ignore(fr.image_rows.size(), 1);
    ObjectiveResult out;
    for (size_t i = 0; i < tplans.size(); ++i) {
        for (size_t j = 0; j < tplans[i].positions.size(); ++j) {
            const int row = starts[i] + 1 + tplans[i].positions[j];
            const int idx = inv_t[static_cast<size_t>(row)];
            t_targets[static_cast<size_t>(idx)] = tplans[i].targets[j];
            t_ignore[static_cast<size_t>(idx)] = 0;
            ++out.masked;
        }
        for (int p : iplans[i].positions) {
            const int row = starts[i] + text_lens[i] + 1 + p;
            const int idx = inv_v[static_cast<size_t>(row)];
            v_targets[static_cast<size_t>(idx)] = vis_ids[i][static_cast<size_t>(p)];
            v_ignore[static_cast<size_t>(idx)] = 0;
            ++out.masked;
        }
    }
    Tensor text_term = cross_entropy(tape, fr.text_logits, t_targets, t_ignore);
    Tensor image_term = cross_entropy(tape, fr.visual_logits, v_targets, v_ignore);
    out.loss = add(tape, text_term, image_term);
    out.routing = std::move(fr.routing);
    out.kinds = batch.kind;
    return out;
}

constexpr double kMlmRatio = 0.15;
constexpr double kMimRatio = 0.40;
constexpr double kVlmTextRatio = 0.50;

// Which of the three equally weighted objectives participate in training.
struct ObjectiveToggles {
    bool mlm = true;
    bool mim = true;
    bool vlm = true;

    bool any() const { return mlm || mim || vlm; }
};

struct LayerDropRate {
    int layer;
    Modality modality;
    int total = 0;
    int dropped = 0;
    double rate = 0.0;
};

struct RoutingLogRow {
    const char* objective;
    int layer;
    Modality modality;
    int expert;
    int token;
    TokenKind kind;
    double gate;
    bool kept;
};

struct StepReport {
    int step = 0;
    double loss_total = 0.0;  // task components plus weighted aux, as trained
    double loss_mlm = 0.0, loss_mim = 0.0, loss_vlm = 0.0;
    double loss_aux = 0.0;  // unweighted balancing term
    double aux_weight = 0.0;
    std::vector<LayerDropRate> drops;
    double wall_ms = 0.0;
    bool empty_mask_warning = false;
};

namespace detail {

inline void collect_routing(const char* objective, const ObjectiveResult& r,
                            std::vector<RoutingLogRow>* log) {
    if (!log) return;
    for (const LayerRouting& lr : r.routing)
        for (const Assignment& a : lr.plan.assignments) {
            const int batch_row = lr.token_rows[static_cast<size_t>(a.token)];
            log->push_back(RoutingLogRow{objective, lr.layer, lr.modality, a.expert, batch_row,
                                         r.kinds[static_cast<size_t>(batch_row)], a.gate, a.kept});
        }
}

inline void accumulate_drops(const ObjectiveResult& r,
                             std::map<std::pair<int, int>, LayerDropRate>& acc) {
    for (const LayerRouting& lr : r.routing) {
        DropStats s = drop_stats(lr.plan);
        LayerDropRate& d =
            acc[{lr.layer, lr.modality == Modality::IMAGE ? 0 : 1}];
        d.layer = lr.layer;
        d.modality = lr.modality;
        d.total += s.total;
        d.dropped += s.dropped;
    }
}

}  // namespace detail

// One combined optimization step over the three objectives. Loss values are
// recorded at the pre-update parameters.
inline StepReport pretrain_step(Model& model, AdamW& opt,
                                const std::vector<const Sample*>& text_batch,
                                const std::vector<const Sample*>& image_batch,
                                const std::vector<const Sample*>& pair_batch, int step_index,
                                const Rng& run_rng, std::vector<RoutingLogRow>* routing_log,
                                bool measure_wall = true, ObjectiveToggles toggles = {}) {
    if (!toggles.any()) throw ContractError("pretrain_step: every objective disabled");
    const auto t0 = std::chrono::steady_clock::now();
    Rng step_rng = run_rng.fork("step", static_cast<uint64_t>(step_index));
    Tape tape;
    model.bind(tape);

    Rng r_mlm = step_rng.fork("mlm"), r_mim = step_rng.fork("mim"), r_vlm = step_rng.fork("vlm");
    std::vector<std::pair<const char*, ObjectiveResult>> parts;
    if (toggles.mlm)
        parts.emplace_back("mlm", loss_mlm(tape, model, text_batch, kMlmRatio, true, r_mlm));
    if (toggles.mim)
        parts.emplace_back("mim", loss_mim(tape, model, image_batch, kMimRatio, true, r_mim));
    if (toggles.vlm)
        parts.emplace_back("vlm", loss_vlm(tape, model, pair_batch, kVlmTextRatio, kMimRatio,
                                           true, r_vlm));

    std::vector<Tensor> text_aux, image_aux;
    for (const auto& [name, r] : parts)
        for (const LayerRouting& lr : r.routing) {
            const bool img = lr.modality == Modality::IMAGE;
            (img ? image_aux : text_aux)
                .push_back(aux_loss(tape, img ? model.cfg.image_aux : model.cfg.text_aux, lr.plan,
                                    model.cfg.sigma()));
        }
    Tensor aux_raw = total_aux(tape, text_aux, image_aux, 1.0);
    Tensor task = parts[0].second.loss;
    for (size_t i = 1; i < parts.size(); ++i) task = add(tape, task, parts[i].second.loss);
    Tensor total = add(tape, task, scale(tape, aux_raw, model.cfg.aux_weight));

    StepReport rep;
    rep.step = step_index;
    rep.loss_total = total.item();
    rep.loss_aux = aux_raw.item();
    rep.aux_weight = model.cfg.aux_weight;
    for (const auto& [name, r] : parts) {
        const double v = r.loss.item();
        if (std::string_view(name) == "mlm")
            rep.loss_mlm = v;
        else if (std::string_view(name) == "mim")
            rep.loss_mim = v;
        else
            rep.loss_vlm = v;
        rep.empty_mask_warning = rep.empty_mask_warning || r.masked == 0;
    }
    if (!std::isfinite(rep.loss_total))
        throw TrainingError("non-finite loss at step " + std::to_string(step_index) + ": mlm=" +
                            std::to_string(rep.loss_mlm) + " mim=" + std::to_string(rep.loss_mim) +
                            " vlm=" + std::to_string(rep.loss_vlm) +
                            " aux=" + std::to_string(rep.loss_aux));

    std::map<std::pair<int, int>, LayerDropRate> acc;
    for (const auto& [name, r] : parts) detail::accumulate_drops(r, acc);
    for (auto& entry : acc) {
        LayerDropRate& d = entry.second;
        d.rate = d.total > 0 ? static_cast<double>(d.dropped) / d.total : 0.0;
        rep.drops.push_back(d);
    }
    for (const auto& [name, r] : parts) detail::collect_routing(name, r, routing_log);

    Gradients grads = backward(tape, total);
    opt.step(model.params(), grads);

    if (measure_wall) {
        const auto t1 = std::chrono::steady_clock::now();
        rep.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    return rep;
}

struct EvalReport {
    double mlm = 0.0, mim = 0.0, vlm = 0.0;
    double total = 0.0;
};

// Deterministic held-out loss: fixed masks from mask_seed, no routing noise,
// inference capacity. Chunked so memory stays flat; chunk means averaged.
inline EvalReport evaluate(const Model& model, const std::vector<Sample>& val, uint64_t mask_seed,
                           int chunk = 32) {
    if (val.empty()) throw ContractError("evaluate: empty validation set");
    Rng root(mask_seed);
    EvalReport rep;
    int n_chunks = 0;
    for (size_t begin = 0; begin < val.size(); begin += static_cast<size_t>(chunk), ++n_chunks) {
        std::vector<const Sample*> part;
        for (size_t i = begin; i < std::min(val.size(), begin + static_cast<size_t>(chunk)); ++i)
            part.push_back(&val[i]);
        Tape tape;  // parameters stay unbound; forward only
        Rng r_mlm = root.fork("val-mlm", begin), r_mim = root.fork("val-mim", begin),
            r_vlm = root.fork("val-vlm", begin);
        rep.mlm += loss_mlm(tape, model, part, kMlmRatio, false, r_mlm).loss.item();
        rep.mim += loss_mim(tape, model, part, kMimRatio, false, r_mim).loss.item();
        rep.vlm += loss_vlm(tape, model, part, kVlmTextRatio, kMimRatio, false, r_vlm).loss.item();
    }
    rep.mlm /= n_chunks;
    rep.mim /= n_chunks;
    rep.vlm /= n_chunks;
    rep.total = rep.mlm + rep.mim + rep.vlm;
    return rep;
}

}  // namespace vlmoe
