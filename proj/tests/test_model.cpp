#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "support/checks.hpp"
#include "support/finite_diff.hpp"
#include "vlmoe/model.hpp"

using namespace vlmoe;
using vlmoe::testing::random_tensor;

namespace {

MoMEConfig toy_config() {
    MoMEConfig cfg;  // defaults are the 4-layer, 64-wide toy model
    return cfg;
}

Tensor random_pixels(const MoMEConfig& cfg, uint64_t seed) {
    Rng rng(seed);
    Tensor px({cfg.image_h, cfg.image_w, cfg.image_c});
    for (double& v : px.data()) v = rng.uniform();
    return px;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.size() == b.size());
    double worst = 0.0;
    for (size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    return worst;
}

}  // namespace

TEST_CASE("config validation rejects inconsistent settings", "[model]") {
    MoMEConfig ok = toy_config();
    CHECK_NOTHROW(ok.validate());

    auto broken = [](auto mutate) {
        MoMEConfig c;
        mutate(c);
        return c;
    };
    CHECK_THROWS_AS(broken([](MoMEConfig& c) { c.fusion_layers = c.layers; }).validate(),
                    ContractError);
    CHECK_THROWS_AS(broken([](MoMEConfig& c) { c.heads = 5; }).validate(), ContractError);
    CHECK_THROWS_AS(broken([](MoMEConfig& c) { c.top_k = c.experts + 1; }).validate(),
                    ContractError);
    CHECK_THROWS_AS(broken([](MoMEConfig& c) { c.moe_layers = {4}; }).validate(), ContractError);
    CHECK_THROWS_AS(broken([](MoMEConfig& c) { c.patch = 5; }).validate(), ContractError);
    CHECK_THROWS_AS(broken([](MoMEConfig& c) { c.text_vocab = 3; }).validate(), ContractError);
    CHECK_THROWS_AS(broken([](MoMEConfig& c) { c.capacity_train = 0.0; }).validate(),
                    ContractError);
}

TEST_CASE("moe layers default to even depths before the fusion tail", "[model]") {
    CHECK(MoMEConfig::default_moe_layers(4, 1) == std::vector<int>{2});
    CHECK(MoMEConfig::default_moe_layers(12, 3) == std::vector<int>({2, 4, 6, 8}));
    CHECK(MoMEConfig::default_moe_layers(2, 1) == std::vector<int>{});
    MoMEConfig cfg = toy_config();
    CHECK(cfg.sigma() == Catch::Approx(0.25));
    cfg.noise_sigma = 0.5;
    CHECK(cfg.sigma() == 0.5);
}

TEST_CASE("patchify lays out patches row-major", "[model]") {
    Tensor px({4, 4, 1});
    for (int i = 0; i < 16; ++i) px.data()[static_cast<size_t>(i)] = i;
    Tensor patches = patchify(px, 2);
    REQUIRE(patches.dim(0) == 4);
    REQUIRE(patches.dim(1) == 4);
    // top-left patch reads pixels (0,0),(0,1),(1,0),(1,1)
    CHECK(patches.at(0, 0) == 0.0);
    CHECK(patches.at(0, 1) == 1.0);
    CHECK(patches.at(0, 2) == 4.0);
    CHECK(patches.at(0, 3) == 5.0);
    // second patch of the top row starts at column 2
    CHECK(patches.at(1, 0) == 2.0);
    CHECK(patches.at(3, 3) == 15.0);
    CHECK_THROWS_AS(patchify(px, 3), ShapeError);
}

TEST_CASE("text embedding wraps ids in specials and adds positions", "[model]") {
    MoMEConfig cfg = toy_config();
    Model m(cfg, 3);
    Tape tape;

    TokenBatch empty = m.embed_text(tape, {});
    CHECK(empty.length() == 2);
    CHECK(empty.kind.front() == TokenKind::T_CLS);
    CHECK(empty.kind.back() == TokenKind::T_SEP);

    TokenBatch b = m.embed_text(tape, {5, 6, 7});
    REQUIRE(b.length() == 5);
    CHECK(b.position == std::vector<int>({0, 1, 2, 3, 4}));
    for (int j = 0; j < cfg.d_model; ++j) {
        CHECK(b.embeddings.at(0, j) ==
              Catch::Approx(m.word_emb.at(kTextClsId, j) + m.text_pos.at(0, j)).margin(1e-15));
        CHECK(b.embeddings.at(2, j) ==
              Catch::Approx(m.word_emb.at(6, j) + m.text_pos.at(2, j)).margin(1e-15));
    }

    std::vector<int> too_long(static_cast<size_t>(cfg.max_text_len - 1), 5);
    CHECK_THROWS_AS(m.embed_text(tape, too_long), ContractError);
}

TEST_CASE("image embedding prepends a cls token and honors the mask flags", "[model]") {
    MoMEConfig cfg = toy_config();
    Model m(cfg, 3);
    Tape tape;
    Tensor px = random_pixels(cfg, 40);

    TokenBatch b = m.embed_image(tape, px);
    CHECK(b.length() == cfg.n_patches() + 1);
    CHECK(b.kind.front() == TokenKind::I_CLS);
    CHECK(b.kind.back() == TokenKind::PATCH);
    CHECK(b.modality.front() == Modality::IMAGE);

    // masked patch rows read the shared mask embedding, not the pixels
    std::vector<uint8_t> flags(static_cast<size_t>(cfg.n_patches()), 0);
    flags[4] = 1;
    TokenBatch masked = m.embed_image(tape, px, &flags);
    Tensor other = random_pixels(cfg, 41);
    TokenBatch masked_other = m.embed_image(tape, other, &flags);
    for (int j = 0; j < cfg.d_model; ++j) {
        double want = m.image_mask.at(0, j) + m.image_pos.at(5, j);
        CHECK(masked.embeddings.at(5, j) == Catch::Approx(want).margin(1e-13));
        CHECK(masked.embeddings.at(5, j) == masked_other.embeddings.at(5, j));
    }
    // unmasked rows unchanged by the flags
    for (int j = 0; j < cfg.d_model; ++j)
        CHECK(masked.embeddings.at(3, j) == Catch::Approx(b.embeddings.at(3, j)).margin(1e-13));

    CHECK_THROWS_AS(m.embed_image(tape, Tensor({8, 8, 3})), ShapeError);
    std::vector<uint8_t> short_flags(3, 0);
    CHECK_THROWS_AS(m.embed_image(tape, px, &short_flags), ContractError);
}

TEST_CASE("pair embedding is text then image", "[model]") {
    MoMEConfig cfg = toy_config();
    Model m(cfg, 3);
    Tape tape;
    TokenBatch b = m.embed_pair(tape, {5, 6}, random_pixels(cfg, 42));
    REQUIRE(b.length() == 4 + cfg.n_patches() + 1);
    CHECK(b.modality[0] == Modality::TEXT);
    CHECK(b.modality[3] == Modality::TEXT);
    CHECK(b.modality[4] == Modality::IMAGE);
    CHECK(b.kind[4] == TokenKind::I_CLS);
}

TEST_CASE("make_batch concatenates sequences with bounds", "[model]") {
    MoMEConfig cfg = toy_config();
    Model m(cfg, 3);
    Tape tape;
    TokenBatch a = m.embed_text(tape, {5});
    TokenBatch b = m.embed_text(tape, {6, 7, 8});
    BatchInput batch = Model::make_batch(tape, {a, b}, Mode::TEXT_ONLY);
    CHECK(batch.bounds == std::vector<int>({0, 3, 8}));
    CHECK(batch.n_tokens() == 8);
    CHECK_THROWS_AS(Model::make_batch(tape, {}, Mode::TEXT_ONLY), ContractError);
}

TEST_CASE("image-only batches never touch text parameters", "[model][grad]") {
    MoMEConfig cfg = toy_config();
    Model m(cfg, 5);
    Tape tape;
    m.bind(tape);
    Rng rng(9);
    TokenBatch seq = m.embed_image(tape, random_pixels(cfg, 50));
    BatchInput batch = Model::make_batch(tape, {seq}, Mode::IMAGE_ONLY);
    Rng fwd_rng = rng.fork("fwd");
    ForwardResult r = m.forward(tape, batch, true, fwd_rng);
    REQUIRE(r.text_rows.empty());
    REQUIRE(static_cast<int>(r.image_rows.size()) == batch.n_tokens());

    Tensor probe = vlmoe::testing::make_probe(r.visual_logits.shape(), rng);
    Gradients g = backward(tape, vlmoe::testing::probe_loss(tape, r.visual_logits, probe));

    auto all_zero = [&](const Tensor& t) {
        Tensor gt = g.at(t);
        for (double v : gt.data())
            if (v != 0.0) return false;
        return true;
    };
    CHECK(all_zero(m.word_emb));
    CHECK(all_zero(m.text_pos));
    CHECK(all_zero(m.text_head_w));
    CHECK(all_zero(m.blocks[0].t_ffn.w1));
    CHECK(all_zero(m.blocks[1].t_router.w_g));
    CHECK_FALSE(all_zero(m.patch_proj));
    CHECK_FALSE(all_zero(m.blocks[0].v_ffn.w1));
    CHECK_FALSE(all_zero(m.blocks[1].v_router.w_g));
    CHECK_FALSE(all_zero(m.vis_head_w));
}

TEST_CASE("fused ffn runs only in the last layers and only for pairs", "[model]") {
    MoMEConfig cfg = toy_config();
    Model m(cfg, 5);
    Tensor px = random_pixels(cfg, 51);

    auto image_forward = [&]() {
        Tape tape;
        Rng rng(3);
        TokenBatch seq = m.embed_image(tape, px);
        BatchInput batch = Model::make_batch(tape, {seq}, Mode::IMAGE_ONLY);
        return m.forward(tape, batch, false, rng).hidden;
    };
    auto pair_forward = [&]() {
        Tape tape;
        Rng rng(3);
        TokenBatch seq = m.embed_pair(tape, {5, 6}, px);
        BatchInput batch = Model::make_batch(tape, {seq}, Mode::PAIR);
        return m.forward(tape, batch, false, rng).hidden;
    };

    Tensor img_before = image_forward();
    Tensor pair_before = pair_forward();

    REQUIRE(m.blocks[3].has_vl);
    for (double& v : m.blocks[3].vl_ffn.w1.data()) v += 0.05;

    CHECK(max_abs_diff(image_forward(), img_before) == 0.0);
    CHECK(max_abs_diff(pair_forward(), pair_before) > 0.0);

    // routing plans come from moe layers only; the fusion layer records none
    Tape tape;
    Rng rng(3);
    TokenBatch seq = m.embed_pair(tape, {5, 6}, px);
    BatchInput batch = Model::make_batch(tape, {seq}, Mode::PAIR);
    ForwardResult r = m.forward(tape, batch, false, rng);
    REQUIRE(r.routing.size() == 2);  // image pool and text pool at layer 2
    for (const LayerRouting& lr : r.routing) CHECK(lr.layer == 2);
}

TEST_CASE("one-expert moe equals the dense block it copies", "[model]") {
    MoMEConfig moe_cfg = toy_config();
    moe_cfg.experts = 1;
    moe_cfg.top_k = 1;
    MoMEConfig dense_cfg = moe_cfg;
    dense_cfg.scale_t = false;
    dense_cfg.scale_v = false;

    Model sparse(moe_cfg, 7);
    Model dense(dense_cfg, 7);

    // overwrite every sparse parameter with the dense model's values; the
    // single expert takes the dense ffn weights and the router is irrelevant
    std::map<std::string, Tensor*> dense_by_name;
    for (ParamRef p : dense.params()) dense_by_name[p.name] = p.tensor;
    for (ParamRef p : sparse.params()) {
        std::string src = p.name;
        auto swap_name = [&](const std::string& moe, const std::string& ffn) {
            size_t pos = src.find(moe);
            if (pos != std::string::npos) src = src.substr(0, pos) + ffn;
        };
        swap_name("t_moe.expert0.w1", "t_ffn.w1");
        swap_name("t_moe.expert0.w2", "t_ffn.w2");
        swap_name("v_moe.expert0.w1", "v_ffn.w1");
        swap_name("v_moe.expert0.w2", "v_ffn.w2");
        if (src.find("moe.router") != std::string::npos) continue;
        auto it = dense_by_name.find(src);
        REQUIRE(it != dense_by_name.end());
        p.tensor->data() = it->second->data();
    }

    Tensor px = random_pixels(moe_cfg, 60);
    auto run = [&](Model& m) {
        Tape tape;
        Rng rng(4);
        TokenBatch seq = m.embed_pair(tape, {5, 6, 7}, px);
        BatchInput batch = Model::make_batch(tape, {seq}, Mode::PAIR);
        return m.forward(tape, batch, false, rng);
    };
    ForwardResult rs = run(sparse), rd = run(dense);
    CHECK(max_abs_diff(rs.hidden, rd.hidden) <= 1e-10);
    CHECK(max_abs_diff(rs.text_logits, rd.text_logits) <= 1e-10);
    CHECK(max_abs_diff(rs.visual_logits, rd.visual_logits) <= 1e-10);
}

TEST_CASE("parameter counts", "[model]") {
    MoMEConfig cfg = toy_config();
    Model m(cfg, 7);
    long long actual = 0;
    for (const ParamRef& p : m.params()) actual += static_cast<long long>(p.tensor->size());
    CHECK(param_count_total(cfg) == actual);

    // scaling experts grows the total but not the per-token applied count
    MoMEConfig wide = cfg;
    wide.experts = 32;
    Model mw(wide, 7);
    long long wide_actual = 0;
    for (const ParamRef& p : mw.params()) wide_actual += static_cast<long long>(p.tensor->size());
    CHECK(param_count_total(wide) == wide_actual);
    CHECK(param_count_total(wide) > param_count_total(cfg));
    CHECK(param_count_per_token(wide, Modality::TEXT) == param_count_per_token(cfg, Modality::TEXT));
    CHECK(param_count_per_token(wide, Modality::IMAGE) ==
          param_count_per_token(cfg, Modality::IMAGE));
}

TEST_CASE("freeze_moe pins router and expert tensors only", "[model]") {
    Model m(toy_config(), 7);
    for (const ParamRef& p : m.params()) CHECK(p.trainable);
    m.freeze_moe();
    int frozen = 0;
    for (const ParamRef& p : m.params()) {
        const bool moe_param = p.name.find(".t_moe.") != std::string::npos ||
                               p.name.find(".v_moe.") != std::string::npos;
        CHECK(p.trainable == !moe_param);
        frozen += moe_param ? 1 : 0;
    }
    // per pool: 1 router + 4 experts x 2 tensors
    CHECK(frozen == 2 * (1 + 4 * 2));
}

TEST_CASE("initialization is seed-deterministic and truncated", "[model]") {
    MoMEConfig cfg = toy_config();
    Model a(cfg, 11), b(cfg, 11), c(cfg, 12);
    auto pa = a.params(), pb = b.params(), pc = c.params();
    REQUIRE(pa.size() == pb.size());
    bool all_same = true, any_diff_seed = false;
    for (size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].tensor->data() != pb[i].tensor->data()) all_same = false;
        if (pa[i].tensor->data() != pc[i].tensor->data()) any_diff_seed = true;
    }
    CHECK(all_same);
    CHECK(any_diff_seed);

    double lo = 0.0, hi = 0.0;
    for (double v : a.word_emb.data()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    CHECK(hi <= 2.0 * cfg.init_std);
    CHECK(lo >= -2.0 * cfg.init_std);
    CHECK(hi > 0.5 * cfg.init_std);  // not degenerate
    CHECK(lo < -0.5 * cfg.init_std);
}

TEST_CASE("full model gradients match finite differences on a tiny config", "[model][grad]") {
    MoMEConfig cfg;
    cfg.layers = 2;
    cfg.fusion_layers = 0;
    cfg.d_model = 8;
    cfg.heads = 2;
    cfg.experts = 2;
    cfg.moe_layers = {2};
    cfg.patch = 8;
    cfg.image_h = 16;
    cfg.image_w = 16;
    cfg.image_c = 1;
    cfg.text_vocab = 16;
    cfg.visual_vocab = 4;
    cfg.max_text_len = 8;
    cfg.init_std = 0.2;
    Model m(cfg, 13);
    Rng rng(14);
    Tensor px({cfg.image_h, cfg.image_w, cfg.image_c});
    for (double& v : px.data()) v = rng.uniform();
    Tensor t_probe, v_probe;

    vlmoe::testing::GradCheck chk;
    chk.params = {&m.word_emb, &m.patch_proj, &m.blocks[0].attn.wq, &m.blocks[0].t_ffn.w1,
                  &m.blocks[1].t_router.w_g, &m.blocks[1].t_experts[0].w1,
                  &m.blocks[1].v_experts[1].w2, &m.final_ln_g, &m.text_head_w};
    chk.build = [&](Tape& tape) {
        TokenBatch seq = m.embed_pair(tape, {5, 6, 7}, px);
        BatchInput batch = Model::make_batch(tape, {seq}, Mode::PAIR);
        Rng quiet(2);
        ForwardResult r = m.forward(tape, batch, false, quiet);
        if (t_probe.size() == 0) {
            t_probe = vlmoe::testing::make_probe(r.text_logits.shape(), rng);
            v_probe = vlmoe::testing::make_probe(r.visual_logits.shape(), rng);
        }
        return add(tape, vlmoe::testing::probe_loss(tape, r.text_logits, t_probe),
                   vlmoe::testing::probe_loss(tape, r.visual_logits, v_probe));
    };
    CHECK(chk.max_rel_err(60) < 1e-4);
}
