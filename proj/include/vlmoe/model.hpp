#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "vlmoe/attention.hpp"
#include "vlmoe/aux_losses.hpp"
#include "vlmoe/ffn.hpp"
#include "vlmoe/routing.hpp"
#include "vlmoe/tensor.hpp"

namespace vlmoe {

enum class Modality { IMAGE, TEXT };
enum class Mode { IMAGE_ONLY, TEXT_ONLY, PAIR };
enum class TokenKind { T_CLS, T_SEP, I_CLS, WORD, PATCH };

// Text vocabulary layout: three reserved ids, then real words.
constexpr int kTextClsId = 0;
constexpr int kTextSepId = 1;
constexpr int kTextMaskId = 2;
constexpr int kFirstWordId = 3;

struct MoMEConfig {
    int layers = 4;             // L
    int fusion_layers = 1;      // F: fused-modality FFN in the last F layers
    int d_model = 64;           // D
    int heads = 4;
    int experts = 4;            // E per modality pool
    int top_k = 1;
    double capacity_train = 1.05;
    double capacity_infer = 1.0;
    bool batch_priority = true;
    std::vector<int> moe_layers;  // 1-based layer indices carrying MoE sublayers
    bool scale_t = true;          // text FFN at moe_layers becomes a T-MoE
    bool scale_v = true;          // image FFN at moe_layers becomes a V-MoE
    int patch = 4;
    int image_h = 16, image_w = 16, image_c = 3;
    int text_vocab = 256;   // V_t
    int visual_vocab = 16;  // V_v
    int max_text_len = 32;  // M, specials included
    double init_std = 0.02;
    double noise_sigma = -1.0;  // negative: use 1/E
    double aux_weight = 0.01;
    AuxLossKind text_aux = AuxLossKind::LOAD;
    AuxLossKind image_aux = AuxLossKind::VLOSS;

    MoMEConfig() { moe_layers = default_moe_layers(layers, fusion_layers); }

    // Every second layer, skipping the fusion tail.
    static std::vector<int> default_moe_layers(int l, int f) {
        std::vector<int> out;
        for (int i = 2; i <= l - f; i += 2) out.push_back(i);
        return out;
    }

    double sigma() const { return noise_sigma < 0.0 ? 1.0 / experts : noise_sigma; }
    int grid_h() const { return image_h / patch; }
    int grid_w() const { return image_w / patch; }
    int n_patches() const { return grid_h() * grid_w(); }
    bool is_fusion(int layer) const { return layer > layers - fusion_layers; }
    bool is_moe_layer(int layer) const {
        return std::find(moe_layers.begin(), moe_layers.end(), layer) != moe_layers.end();
    }

    void validate() const {
        if (layers < 1 || fusion_layers < 0 || fusion_layers >= layers)
            throw ContractError("config: need 0 <= fusion_layers < layers");
        if (d_model < 1 || heads < 1 || d_model % heads != 0)
            throw ContractError("config: d_model must be a positive multiple of heads");
        if (experts < 1 || top_k < 1 || top_k > experts)
            throw ContractError("config: need 1 <= top_k <= experts");
        if (capacity_train <= 0.0 || capacity_infer <= 0.0)
            throw ContractError("config: capacity factors must be positive");
        for (int l : moe_layers)
            if (l < 1 || l > layers - fusion_layers)
                throw ContractError("config: moe layer " + std::to_string(l) +
                                    " outside [1, " + std::to_string(layers - fusion_layers) + "]");
        if (patch < 1 || image_h % patch != 0 || image_w % patch != 0 || image_c < 1)
            throw ContractError("config: image dimensions must divide by the patch size");
        if (text_vocab <= kFirstWordId || visual_vocab < 1)
            throw ContractError("config: vocabulary too small");
        if (max_text_len < 2) throw ContractError("config: max_text_len must fit the specials");
        if (aux_weight < 0.0) throw ContractError("config: aux_weight must be nonnegative");
    }
};

// One embedded sequence plus per-token metadata.
struct TokenBatch {
    Tensor embeddings;  // [len x D]
    std::vector<Modality> modality;
    std::vector<TokenKind> kind;
    std::vector<int> position;

    int length() const { return static_cast<int>(modality.size()); }
};

// Several sequences laid back to back for one forward pass.
struct BatchInput {
    Tensor embeddings;        // [n x D]
    std::vector<int> bounds;  // sequence start offsets plus final n
    std::vector<Modality> modality;
    std::vector<TokenKind> kind;
    Mode mode = Mode::TEXT_ONLY;

    int n_tokens() const { return static_cast<int>(modality.size()); }
};

struct LayerRouting {
    int layer;
    Modality modality;
    RoutingPlan plan;
    std::vector<int> token_rows;  // routed token's row in the full batch
};

struct ForwardResult {
    Tensor hidden;         // [n x D] after the final layernorm
    Tensor text_logits;    // [n_text x V_t], rows follow text_rows
    Tensor visual_logits;  // [n_image x V_v], rows follow image_rows
    std::vector<int> text_rows;
    std::vector<int> image_rows;
    std::vector<LayerRouting> routing;
};

struct ParamRef {
    std::string name;
    Tensor* tensor;
    bool trainable;
};

// Flattens an image into [n_patches x patch*patch*channels], patches in
// row-major grid order, pixels row-major within a patch.
inline Tensor patchify(const Tensor& pixels, int patch) {
    if (pixels.rank() != 3) throw ShapeError("patchify: pixels must be [H x W x C]");
    const int h = pixels.dim(0), w = pixels.dim(1), c = pixels.dim(2);
    if (h % patch != 0 || w % patch != 0)
        throw ShapeError("patchify: " + shape_str(pixels.shape()) + " not divisible by patch " +
                         std::to_string(patch));
    const int gh = h / patch, gw = w / patch;
    Tensor out({gh * gw, patch * patch * c});
    double* o = out.ptr();
    for (int pr = 0; pr < gh; ++pr)
        for (int pc = 0; pc < gw; ++pc)
            for (int y = 0; y < patch; ++y)
                for (int x = 0; x < patch; ++x)
                    for (int ch = 0; ch < c; ++ch)
                        *o++ = pixels.data()[((pr * patch + y) * w + (pc * patch + x)) * c + ch];
    return out;
}

class Model {
public:
    struct AttnParams {
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    };

    struct Block {
        Tensor ln1_g, ln1_b, ln2_g, ln2_b;
        AttnParams attn;
        bool t_moe = false, v_moe = false;
        FfnParams t_ffn, v_ffn;  // dense paths; absent tensors when moe
        RouterParams t_router, v_router;
        std::vector<FfnParams> t_experts, v_experts;
        bool has_vl = false;
        FfnParams vl_ffn;
    };

    MoMEConfig cfg;

    Tensor word_emb;    // [V_t x D]
    Tensor text_pos;    // [M x D]
    Tensor patch_proj;  // [P*P*C x D]
    Tensor patch_bias;  // [D]
    Tensor i_cls;       // [1 x D]
    Tensor image_mask;  // [1 x D] stand-in embedding for masked patches
    Tensor image_pos;   // [n_patches+1 x D]
    std::vector<Block> blocks;
    Tensor final_ln_g, final_ln_b;
    Tensor text_head_w, text_head_b;  // [D x V_t], [V_t]
    Tensor vis_head_w, vis_head_b;    // [D x V_v], [V_v]

    Model(const MoMEConfig& config, uint64_t seed) : cfg(config) {
        cfg.validate();
        Rng rng(seed);
        const int d = cfg.d_model;
        const double s = cfg.init_std;
        auto tn = [&](Shape shape) { return Tensor::trunc_normal(rng, std::move(shape), s); };

        word_emb = tn({cfg.text_vocab, d});
        text_pos = tn({cfg.max_text_len, d});
        patch_proj = tn({cfg.patch * cfg.patch * cfg.image_c, d});
        patch_bias = Tensor::zeros({d});
        i_cls = tn({1, d});
        image_mask = tn({1, d});
        image_pos = tn({cfg.n_patches() + 1, d});

        blocks.resize(static_cast<size_t>(cfg.layers));
        for (int l = 1; l <= cfg.layers; ++l) {
            Block& b = blocks[static_cast<size_t>(l - 1)];
            b.ln1_g = Tensor::full({d}, 1.0);
            b.ln1_b = Tensor::zeros({d});
            b.ln2_g = Tensor::full({d}, 1.0);
            b.ln2_b = Tensor::zeros({d});
            b.attn = AttnParams{tn({d, d}), Tensor::zeros({d}), tn({d, d}), Tensor::zeros({d}),
                                tn({d, d}), Tensor::zeros({d}), tn({d, d}), Tensor::zeros({d})};
            const bool moe_here = cfg.is_moe_layer(l);
            b.t_moe = moe_here && cfg.scale_t;
            b.v_moe = moe_here && cfg.scale_v;
            if (b.t_moe) {
                b.t_router = RouterParams::init(rng, cfg.experts, d, s);
                b.t_router.noise_sigma = cfg.sigma();
                for (int e = 0; e < cfg.experts; ++e)
                    b.t_experts.push_back(FfnParams::init(rng, d, 4 * d, s));
            } else {
                b.t_ffn = FfnParams::init(rng, d, 4 * d, s);
            }
            if (b.v_moe) {
                b.v_router = RouterParams::init(rng, cfg.experts, d, s);
                b.v_router.noise_sigma = cfg.sigma();
                for (int e = 0; e < cfg.experts; ++e)
                    b.v_experts.push_back(FfnParams::init(rng, d, 4 * d, s));
            } else {
                b.v_ffn = FfnParams::init(rng, d, 4 * d, s);
            }
            b.has_vl = cfg.is_fusion(l);
            if (b.has_vl) b.vl_ffn = FfnParams::init(rng, d, 4 * d, s);
        }
        final_ln_g = Tensor::full({d}, 1.0);
        final_ln_b = Tensor::zeros({d});
        text_head_w = tn({d, cfg.text_vocab});
        text_head_b = Tensor::zeros({cfg.text_vocab});
        vis_head_w = tn({d, cfg.visual_vocab});
        vis_head_b = Tensor::zeros({cfg.visual_vocab});
    }

    std::vector<ParamRef> params() {
        std::vector<ParamRef> out;
        auto push = [&](const std::string& name, Tensor& t) {
            out.push_back(ParamRef{name, &t, frozen_.count(name) == 0});
        };
        push("emb.word", word_emb);
        push("emb.text_pos", text_pos);
        push("emb.patch_proj", patch_proj);
        push("emb.patch_bias", patch_bias);
        push("emb.i_cls", i_cls);
        push("emb.image_mask", image_mask);
        push("emb.image_pos", image_pos);
        for (int l = 1; l <= cfg.layers; ++l) {
            Block& b = blocks[static_cast<size_t>(l - 1)];
            const std::string p = "blk" + std::to_string(l) + ".";
            push(p + "ln1.g", b.ln1_g);
            push(p + "ln1.b", b.ln1_b);
            push(p + "attn.wq", b.attn.wq);
            push(p + "attn.bq", b.attn.bq);
            push(p + "attn.wk", b.attn.wk);
            push(p + "attn.bk", b.attn.bk);
            push(p + "attn.wv", b.attn.wv);
            push(p + "attn.bv", b.attn.bv);
            push(p + "attn.wo", b.attn.wo);
            push(p + "attn.bo", b.attn.bo);
            push(p + "ln2.g", b.ln2_g);
            push(p + "ln2.b", b.ln2_b);
            if (b.t_moe) {
                push(p + "t_moe.router", b.t_router.w_g);
                for (int e = 0; e < cfg.experts; ++e) {
                    const std::string ep = p + "t_moe.expert" + std::to_string(e) + ".";
                    push(ep + "w1", b.t_experts[static_cast<size_t>(e)].w1);
                    push(ep + "w2", b.t_experts[static_cast<size_t>(e)].w2);
                }
            } else {
                push(p + "t_ffn.w1", b.t_ffn.w1);
                push(p + "t_ffn.w2", b.t_ffn.w2);
            }
            if (b.v_moe) {
                push(p + "v_moe.router", b.v_router.w_g);
                for (int e = 0; e < cfg.experts; ++e) {
                    const std::string ep = p + "v_moe.expert" + std::to_string(e) + ".";
                    push(ep + "w1", b.v_experts[static_cast<size_t>(e)].w1);
                    push(ep + "w2", b.v_experts[static_cast<size_t>(e)].w2);
                }
            } else {
                push(p + "v_ffn.w1", b.v_ffn.w1);
                push(p + "v_ffn.w2", b.v_ffn.w2);
            }
            if (b.has_vl) {
                push(p + "vl_ffn.w1", b.vl_ffn.w1);
                push(p + "vl_ffn.w2", b.vl_ffn.w2);
            }
        }
        push("final_ln.g", final_ln_g);
        push("final_ln.b", final_ln_b);
        push("head.text.w", text_head_w);
        push("head.text.b", text_head_b);
        push("head.vis.w", vis_head_w);
        push("head.vis.b", vis_head_b);
        return out;
    }

    // Marks every router and expert tensor non-trainable (finetune mode).
    void freeze_moe() {
        for (const ParamRef& p : params())
            if (p.name.find(".t_moe.") != std::string::npos ||
                p.name.find(".v_moe.") != std::string::npos)
                frozen_.insert(p.name);
    }

    const std::set<std::string>& frozen() const { return frozen_; }

    // Registers every parameter as a gradient root on a fresh step tape.
    void bind(Tape& tape) {
        for (ParamRef& p : params()) p.tensor->node = tape.leaf(*p.tensor).node;
    }

    TokenBatch embed_text(Tape& tape, const std::vector<int>& ids) const {
        if (static_cast<int>(ids.size()) > cfg.max_text_len - 2)
            throw ContractError("embed_text: " + std::to_string(ids.size()) +
                                " ids exceed max length " + std::to_string(cfg.max_text_len - 2));
        std::vector<int> full;
        full.push_back(kTextClsId);
        full.insert(full.end(), ids.begin(), ids.end());
        full.push_back(kTextSepId);
        const int len = static_cast<int>(full.size());
        std::vector<int> pos(static_cast<size_t>(len));
        std::iota(pos.begin(), pos.end(), 0);
        Tensor emb = add(tape, embedding_gather(tape, word_emb, full),
                         embedding_gather(tape, text_pos, pos));
        TokenBatch b;
        b.embeddings = emb;
        b.modality.assign(static_cast<size_t>(len), Modality::TEXT);
        b.kind.assign(static_cast<size_t>(len), TokenKind::WORD);
        b.kind.front() = TokenKind::T_CLS;
        b.kind.back() = TokenKind::T_SEP;
        b.position = pos;
        return b;
    }

    // masked_patches, when given, swaps those patches' projected embeddings
    // for the shared mask embedding before positions are added.
    TokenBatch embed_image(Tape& tape, const Tensor& pixels,
                           const std::vector<uint8_t>* masked_patches = nullptr) const {
        if (pixels.rank() != 3 || pixels.dim(0) != cfg.image_h || pixels.dim(1) != cfg.image_w ||
            pixels.dim(2) != cfg.image_c)
            throw ShapeError("embed_image: pixels " + shape_str(pixels.shape()) +
                             " do not match the configured image size");
        Tensor patches = patchify(pixels, cfg.patch);
        Tensor proj = add_rowvec(tape, matmul(tape, patches, patch_proj), patch_bias);
        if (masked_patches) {
            const int np = cfg.n_patches();
            if (static_cast<int>(masked_patches->size()) != np)
                throw ContractError("embed_image: mask flag per patch required");
            std::vector<int> keep, drop;
            for (int i = 0; i < np; ++i)
                ((*masked_patches)[static_cast<size_t>(i)] ? drop : keep).push_back(i);
            if (!drop.empty()) {
                Tensor mrows = embedding_gather(tape, image_mask,
                                                std::vector<int>(drop.size(), 0));
                Tensor mixed = scatter_add_rows(tape, np, mrows, drop);
                if (!keep.empty())
                    mixed = add(tape, mixed,
                                scatter_add_rows(tape, np, gather_rows(tape, proj, keep), keep));
                proj = mixed;
            }
        }
        Tensor emb = concat_rows(tape, {i_cls, proj});
        const int len = cfg.n_patches() + 1;
        std::vector<int> pos(static_cast<size_t>(len));
        std::iota(pos.begin(), pos.end(), 0);
        emb = add(tape, emb, embedding_gather(tape, image_pos, pos));
        TokenBatch b;
        b.embeddings = emb;
        b.modality.assign(static_cast<size_t>(len), Modality::IMAGE);
        b.kind.assign(static_cast<size_t>(len), TokenKind::PATCH);
        b.kind.front() = TokenKind::I_CLS;
        b.position = pos;
        return b;
    }

    // Text segment then image segment, one joint sequence.
    TokenBatch embed_pair(Tape& tape, const std::vector<int>& ids, const Tensor& pixels,
                          const std::vector<uint8_t>* masked_patches = nullptr) const {
        TokenBatch t = embed_text(tape, ids);
        TokenBatch v = embed_image(tape, pixels, masked_patches);
        TokenBatch b;
        b.embeddings = concat_rows(tape, {t.embeddings, v.embeddings});
        b.modality = t.modality;
        b.modality.insert(b.modality.end(), v.modality.begin(), v.modality.end());
        b.kind = t.kind;
        b.kind.insert(b.kind.end(), v.kind.begin(), v.kind.end());
        b.position = t.position;
        b.position.insert(b.position.end(), v.position.begin(), v.position.end());
        return b;
    }

    static BatchInput make_batch(Tape& tape, const std::vector<TokenBatch>& seqs, Mode mode) {
        if (seqs.empty()) throw ContractError("make_batch: no sequences");
        BatchInput b;
        b.mode = mode;
        b.bounds.push_back(0);
        std::vector<Tensor> parts;
        for (const TokenBatch& s : seqs) {
            parts.push_back(s.embeddings);
            b.modality.insert(b.modality.end(), s.modality.begin(), s.modality.end());
            b.kind.insert(b.kind.end(), s.kind.begin(), s.kind.end());
            b.bounds.push_back(b.bounds.back() + s.length());
        }
        b.embeddings = concat_rows(tape, parts);
        return b;
    }

    // One transformer block: shared pre-norm attention, then the
    // modality-routed FFN sublayer. Appends any routing plans produced.
    Tensor block_forward(Tape& tape, const Tensor& x, const BatchInput& meta, int layer,
                         bool training, Rng& rng, std::vector<LayerRouting>* routing) const {
        const Block& b = blocks[static_cast<size_t>(layer - 1)];
        const int n = x.dim(0);

        Tensor u = layernorm(tape, x, b.ln1_g, b.ln1_b);
        Tensor q = add_rowvec(tape, matmul(tape, u, b.attn.wq), b.attn.bq);
        Tensor k = add_rowvec(tape, matmul(tape, u, b.attn.wk), b.attn.bk);
        Tensor v = add_rowvec(tape, matmul(tape, u, b.attn.wv), b.attn.bv);
        Tensor ao = multi_head_attention(tape, q, k, v, cfg.heads, meta.bounds);
        Tensor h = add(tape, x, add_rowvec(tape, matmul(tape, ao, b.attn.wo), b.attn.bo));

        Tensor u2 = layernorm(tape, h, b.ln2_g, b.ln2_b);
        Tensor y;
        if (cfg.is_fusion(layer) && meta.mode == Mode::PAIR) {
            y = ffn_forward(tape, u2, b.vl_ffn);
        } else {
            std::vector<int> img_idx, txt_idx;
            for (int i = 0; i < n; ++i)
                (meta.modality[static_cast<size_t>(i)] == Modality::IMAGE ? img_idx : txt_idx)
                    .push_back(i);
            bool first = true;
            auto run_side = [&](const std::vector<int>& idx, Modality m) {
                if (idx.empty()) return;
                Tensor xs = gather_rows(tape, u2, idx);
                Tensor ys;
                const bool moe = m == Modality::IMAGE ? b.v_moe : b.t_moe;
                if (moe) {
                    const RouterParams& router = m == Modality::IMAGE ? b.v_router : b.t_router;
                    const auto& experts = m == Modality::IMAGE ? b.v_experts : b.t_experts;
                    Rng noise = rng.fork("route", static_cast<uint64_t>(layer),
                                         m == Modality::IMAGE ? 0u : 1u);
                    RoutingPlan plan =
                        route(tape, router, xs, cfg.top_k,
                              training ? cfg.capacity_train : cfg.capacity_infer,
                              cfg.batch_priority, training, noise);
                    ys = dispatch_combine(tape, xs, plan, experts);
                    if (routing) routing->push_back(LayerRouting{layer, m, std::move(plan), idx});
                } else {
                    ys = ffn_forward(tape, xs, m == Modality::IMAGE ? b.v_ffn : b.t_ffn);
                }
                Tensor scattered = scatter_add_rows(tape, n, ys, idx);
                y = first ? scattered : add(tape, y, scattered);
                first = false;
            };
            run_side(img_idx, Modality::IMAGE);
            run_side(txt_idx, Modality::TEXT);
            if (first) throw ContractError("block_forward: empty batch");
        }
        return add(tape, h, y);
    }

    ForwardResult forward(Tape& tape, const BatchInput& batch, bool training, Rng& rng) const {
        ForwardResult r;
        Tensor x = batch.embeddings;
        for (int l = 1; l <= cfg.layers; ++l)
            x = block_forward(tape, x, batch, l, training, rng, &r.routing);
        r.hidden = layernorm(tape, x, final_ln_g, final_ln_b);
        for (int i = 0; i < batch.n_tokens(); ++i)
            (batch.modality[static_cast<size_t>(i)] == Modality::IMAGE ? r.image_rows : r.text_rows)
                .push_back(i);
        if (!r.text_rows.empty()) {
            Tensor tx = gather_rows(tape, r.hidden, r.text_rows);
            r.text_logits = add_rowvec(tape, matmul(tape, tx, text_head_w), text_head_b);
        }
        if (!r.image_rows.empty()) {
            Tensor vx = gather_rows(tape, r.hidden, r.image_rows);
            r.visual_logits = add_rowvec(tape, matmul(tape, vx, vis_head_w), vis_head_b);
        }
        return r;
    }

private:
    std::set<std::string> frozen_;
};

// Parameter tally for the whole model; routers and all experts included.
inline long long param_count_total(const MoMEConfig& cfg) {
    const long long d = cfg.d_model;
    long long total = 0;
    total += static_cast<long long>(cfg.text_vocab) * d;       // word table
    total += static_cast<long long>(cfg.max_text_len) * d;     // text positions
    total += static_cast<long long>(cfg.patch) * cfg.patch * cfg.image_c * d + d;  // patch proj
    total += 2 * d;                                            // i_cls + patch mask embedding
    total += static_cast<long long>(cfg.n_patches() + 1) * d;  // image positions
    const long long ffn = 8 * d * d;
    for (int l = 1; l <= cfg.layers; ++l) {
        total += 4 * d;              // two layernorms
        total += 4 * d * d + 4 * d;  // attention
        const bool moe_here = cfg.is_moe_layer(l);
        total += moe_here && cfg.scale_t ? cfg.experts * ffn + cfg.experts * d : ffn;
        total += moe_here && cfg.scale_v ? cfg.experts * ffn + cfg.experts * d : ffn;
        if (cfg.is_fusion(l)) total += ffn;
    }
    total += 2 * d;                                             // final ln
    total += d * cfg.text_vocab + cfg.text_vocab;               // text head
    total += d * cfg.visual_vocab + cfg.visual_vocab;           // visual head
    return total;
}

// Parameters touched by one token of the given modality in mono-modal mode.
// MoE layers contribute top_k experts' worth regardless of E; the router's
// own matrix is excluded from the applied count.
inline long long param_count_per_token(const MoMEConfig& cfg, Modality m) {
    const long long d = cfg.d_model;
    long long count = 2 * d;  // content embedding row + position row
    const long long ffn = 8 * d * d;
    for (int l = 1; l <= cfg.layers; ++l) {
        count += 4 * d;
        count += 4 * d * d + 4 * d;
        const bool moe_here =
            cfg.is_moe_layer(l) && (m == Modality::IMAGE ? cfg.scale_v : cfg.scale_t);
        count += moe_here ? cfg.top_k * ffn : ffn;
    }
    count += 2 * d;
    count += m == Modality::IMAGE ? (d + 1) * static_cast<long long>(cfg.visual_vocab)
                                  : (d + 1) * static_cast<long long>(cfg.text_vocab);
    return count;
}

}  // namespace vlmoe
