#include <doctest.h>

#include "dri/config.hpp"
#include "dri/experiments.hpp"
#include "dri/injection.hpp"
#include "dri/model.hpp"
#include "support/testing.hpp"

using namespace dri;
using namespace dri::testing;

namespace {

ViTConfig vit_small_backbone() {
    ViTConfig c;
    c.depth = 12;
    c.dim = 384;
    c.heads = 6;
    c.patch = 8;
    c.image_h = 32;
    c.image_w = 32;
    return c;
}

std::size_t enumerate(const std::vector<Parameter<float>*>& params, const std::string& prefix) {
    std::size_t n = 0;
    for (const auto* p : params)
        if (p->name.rfind(prefix, 0) == 0) n += p->tensor.size();
    return n;
}

/// Gives every modulator small random weights so deviations are non-zero.
template <typename T>
void randomize_modulators(ReidModel<T>& m, std::uint64_t seed, double scale = 0.2) {
    Gen g(seed);
    for (const auto& p : m.store().params())
        if (p->name.rfind("dri.mod.", 0) == 0) p->tensor.data = random_tensor<T>(p->tensor.shape, g, -scale, scale).data;
}

}  // namespace

TEST_CASE("domain representation under default encoder settings") {
    ModelConfig cfg;  // toy backbone, encoder depth 2 dim 64
    ReidModel<float> model(cfg);
    Gen g(1);
    const auto images = random_tensor<float>({2, 3, 32, 32}, g, 0, 1);
    Tape<float> t1, t2;
    const auto f1 = model.injector()->encode_domain(t1, images).value();
    const auto f2 = model.injector()->encode_domain(t2, images).value();
    CHECK(f1.shape == Shape{2, 64});
    CHECK(bit_equal(f1, f2));
    for (std::size_t b = 0; b < 2; ++b) {
        double mean = 0;
        for (std::size_t d = 0; d < 64; ++d) mean += f1.data[b * 64 + d];
        CHECK(std::abs(mean / 64) <= 1e-6);
    }
    Tape<float> t3;
    CHECK_THROWS_AS(model.injector()->encode_domain(t3, Tensor<float>(Shape{1, 3, 16, 16})), DimensionError);
}

TEST_CASE("modulator arithmetic") {
    ModelConfig cfg = tiny_model(PeftMode::Dri);
    ReidModel<double> model(cfg);
    const auto& inj = *model.injector();
    const std::size_t E = cfg.peft.dri.encoder.dim, D = cfg.backbone.dim;
    Gen g(4);

    Tape<double> t;
    auto f = t.input(random_tensor<double>({3, E}, g));
    for (const auto& m : inj.modulators()) {
        CHECK(std::all_of(m.first.weight->tensor.data.begin(), m.first.weight->tensor.data.end(), [](double v) { return v == 0; }));
        const auto out = m.first(t, f).value().data;
        CHECK(std::all_of(out.begin(), out.end(), [](double v) { return v == 0; }));
    }

    randomize_modulators(model, 5);
    const auto* mod = inj.find(1, Site::Mlp);
    REQUIRE(mod != nullptr);
    const auto f1 = random_tensor<double>({1, E}, g), f2 = random_tensor<double>({1, E}, g);
    const auto d1 = inj.modulate(t, t.input(f1), 1, Site::Mlp).value().data;
    const auto d2 = inj.modulate(t, t.input(f2), 1, Site::Mlp).value().data;
    const auto& W = mod->first.weight->tensor.data;
    for (std::size_t o = 0; o < D; ++o) {
        double expect = 0;
        for (std::size_t i = 0; i < E; ++i) expect += W[o * E + i] * (f1.data[i] - f2.data[i]);
        CHECK(std::abs((d1[o] - d2[o]) - expect) <= 1e-6);
    }

    // Leading identity block, zero bias, f_d = e1 -> e1 padded with zeros.
    auto& w = mod->first.weight->tensor.data;
    std::fill(w.begin(), w.end(), 0.0);
    for (std::size_t i = 0; i < E; ++i) w[i * E + i] = 1.0;
    std::fill(mod->first.bias->tensor.data.begin(), mod->first.bias->tensor.data.end(), 0.0);
    Tensor<double> e1(Shape{1, E}, 0.0);
    e1.data[0] = 1.0;
    std::vector<double> expect(D, 0.0);
    expect[0] = 1.0;
    CHECK(inj.modulate(t, t.input(e1), 1, Site::Mlp).value().data == expect);
}

TEST_CASE("a plan without a site has no modulator for it") {
    ModelConfig cfg = tiny_model(PeftMode::Dri);
    cfg.peft.dri.plan = InjectionPlan::parse("attn/post-norm");
    ReidModel<double> model(cfg);
    Tape<double> t;
    auto f = t.input(Tensor<double>(Shape{1, cfg.peft.dri.encoder.dim}));
    CHECK_THROWS_AS(model.injector()->modulate(t, f, 0, Site::Mlp), PlanError);
    CHECK_THROWS_AS(model.injector()->modulate(t, f, 0, Site::Attn, Slot::Residual), PlanError);
    CHECK_NOTHROW(model.injector()->modulate(t, f, 0, Site::Attn));
    for (const auto& d : model.injector()->deviations(t, f)) {
        CHECK(d.attn_delta.has_value());
        CHECK_FALSE(d.mlp_delta.has_value());
    }
    CHECK_THROWS_AS(InjectionPlan::parse("both/sideways"), ConfigError);
    CHECK_THROWS_AS(InjectionPlan::parse("neither/post-norm"), ConfigError);
    for (const auto& name : injection_grid_names()) CHECK(InjectionPlan::parse(name).name() == name);
}

TEST_CASE("fresh adaptations reproduce the frozen backbone bit for bit") {
    Gen g(12);
    const auto images = random_tensor<float>({4, 3, 16, 16}, g, 0, 1);
    ReidModel<float> frozen(tiny_model(PeftMode::Frozen));
    Tape<float> tf;
    const auto reference = frozen.embed(tf, images).value();
    for (PeftMode mode : {PeftMode::Dri, PeftMode::Lora, PeftMode::Adapter}) {
        for (const auto& plan : injection_grid_names()) {
            if (mode != PeftMode::Dri && plan != injection_grid_names().front()) continue;
            ModelConfig cfg = tiny_model(mode);
            cfg.peft.dri.plan = InjectionPlan::parse(plan);
            ReidModel<float> m(cfg);
            Tape<float> t;
            CAPTURE(to_string(mode));
            CAPTURE(plan);
            CHECK(bit_equal(m.embed(t, images).value(), reference));
            CHECK(bit_equal(m.embed_frozen(t, images).value(), reference));
        }
    }
}

TEST_CASE("attn-only plan leaves the mlp path untouched") {
    ModelConfig cfg = tiny_model(PeftMode::Dri);
    cfg.peft.dri.plan = InjectionPlan::parse("attn/post-norm");
    ReidModel<double> m(cfg);
    randomize_modulators(m, 9);
    Gen g(3);
    const auto images = random_tensor<double>({2, 3, 16, 16}, g, 0, 1);
    Tape<double> t;
    auto f_d = m.injector()->encode_domain(t, images);
    auto devs = m.injector()->deviations(t, f_d);
    // Recompute block 0 by hand: attention sub-layer with the deviation, plain MLP sub-layer.
    std::vector<Var<double>> taps;
    std::vector<BlockHooks<double>> hooks(devs.size());
    for (std::size_t l = 0; l < devs.size(); ++l) hooks[l].deviation = devs[l];
    m.backbone().forward(t, images, nullptr, hooks, &taps);
    const auto& blk = m.backbone().blocks()[1];
    const auto& x = taps[0];
    auto n1 = ops::add_per_sample(ops::layer_norm(x, t.param(*blk.norm1_weight), t.param(*blk.norm1_bias), 1e-6),
                                  *devs[1].attn_delta);
    auto x1 = ops::add(x, attention_forward(t, n1, blk, {}));
    auto n2 = ops::layer_norm(x1, t.param(*blk.norm2_weight), t.param(*blk.norm2_bias), 1e-6);
    auto y = ops::add(x1, blk.fc2(t, ops::gelu(blk.fc1(t, n2))));
    CHECK(bit_equal(y.value(), taps[1].value()));
}

TEST_CASE("uniform modulator output: pre-norm is inert, post-norm is not") {
    Gen g(21);
    const auto images = random_tensor<double>({2, 3, 16, 16}, g, 0, 1);
    std::vector<double> gaps;
    for (const char* plan : {"both/pre-norm", "both/post-norm"}) {
        ModelConfig cfg = tiny_model(PeftMode::Dri);
        cfg.peft.dri.plan = InjectionPlan::parse(plan);
        ReidModel<double> m(cfg);
        for (const auto& mod : m.injector()->modulators())
            std::fill(mod.first.bias->tensor.data.begin(), mod.first.bias->tensor.data.end(), 0.75);
        Tape<double> t;
        const auto injected = m.embed(t, images).value().data;
        gaps.push_back(max_abs_diff(injected, m.embed_frozen(t, images).value().data));
    }
    CHECK(gaps[0] <= 1e-12);
    CHECK(gaps[1] > 1e-3);
}

TEST_CASE("closed-form parameter counts") {
    CHECK(vit_block_params(64, 4) == 49'984);

    DriConfig dri;
    const ViTConfig bb = vit_small_backbone();
    CHECK(modulator_params(dri, bb) == 599'040);
    const std::size_t patch_embed = 8 * 8 * 3 * 64 + 64;
    CHECK(encoder_params(dri.encoder, bb) == patch_embed + 64 + 2 * 49'984 + 2 * 64);

    ParameterStore<float> store;
    Rng rng(1);
    DomainInjector<float> inj(dri, bb, store, rng);
    const auto params = inj.parameters();
    CHECK(enumerate(params, "dri.mod.") == 599'040);
    CHECK(enumerate(params, "dri.oe.block") == 99'968);
    CHECK(enumerate(params, "dri.oe.") == encoder_params(dri.encoder, bb));

    ModelConfig mc;
    mc.backbone = bb;
    mc.peft.dri = dri;
    const auto at2 = trainable_param_count(mc);
    mc.peft.dri.encoder.depth = 4;
    const auto at4 = trainable_param_count(mc);
    CHECK(at4.get("dri.oe") - at2.get("dri.oe") == 2 * vit_block_params(64, 4));
    mc.peft.dri.encoder.depth = 1;
    CHECK(at2.get("dri.oe") - trainable_param_count(mc).get("dri.oe") == vit_block_params(64, 4));

    ModelConfig frozen;
    frozen.backbone = bb;
    frozen.num_ids = 100;
    frozen.peft.mode = PeftMode::Frozen;
    const auto head = trainable_param_count(frozen);
    CHECK(head.get("head.classifier") == 38'400);
    CHECK(head.get("head.bn") == 384);
    CHECK(head.total() == 38'784);
}

TEST_CASE("residual variants allocate extra modulators") {
    DriConfig dri;
    const ViTConfig bb = tiny_backbone();
    std::map<std::string, std::size_t> counts;
    for (const auto& name : injection_grid_names()) {
        dri.plan = InjectionPlan::parse(name);
        counts[name] = modulator_params(dri, bb);
    }
    const std::size_t one = dri.encoder.dim * bb.dim + bb.dim;
    CHECK(counts["attn/post-norm"] == bb.depth * one);
    CHECK(counts["both/post-norm"] == 2 * bb.depth * one);
    CHECK(counts["both/residual-only"] == 2 * bb.depth * one);
    CHECK(counts["both/residual+post-norm"] == 4 * bb.depth * one);
    CHECK(counts["both/residual+pre-norm"] == 4 * bb.depth * one);
}

TEST_CASE("enumerated trainable parameters equal the closed form for every grid variant") {
    RunConfig base;
    base.model.backbone = tiny_backbone();
    base.model.num_ids = 5;
    for (const auto& grid : grid_names()) {
        for (const auto& v : grid_variants(grid, base)) {
            CAPTURE(grid);
            CAPTURE(v.label);
            ReidModel<float> m(v.cfg.model);
            const auto live = m.trainable_table();
            const auto closed = trainable_param_count(v.cfg.model);
            REQUIRE(live.items.size() == closed.items.size());
            for (std::size_t i = 0; i < live.items.size(); ++i) {
                CHECK(live.items[i].component == closed.items[i].component);
                CHECK(live.items[i].count == closed.items[i].count);
            }
            std::size_t flagged = 0;
            for (const auto& p : m.store().params()) flagged += p->trainable ? p->tensor.size() : 0;
            CHECK(flagged == closed.total());
        }
    }
}

TEST_CASE("training steps touch only the trainable set") {
    for (const char* plan : {"both/post-norm", "mlp/post-norm"}) {
        ModelConfig cfg = tiny_model(PeftMode::Dri);
        cfg.peft.dri.plan = InjectionPlan::parse(plan);
        ReidModel<float> m(cfg);
        std::map<std::string, std::vector<float>> before;
        for (const auto& p : m.store().params()) before[p->name] = p->tensor.data;

        Gen g(17);
        Sgd<float> opt(0.05f, 0.9f, 1e-4f);
        const std::vector<std::int64_t> labels{0, 0, 1, 1, 2, 2, 3, 3};
        for (int step = 0; step < 3; ++step) {
            m.store().zero_grad();
            Tape<float> t;
            const auto out = m.head().forward(t, m.embed(t, random_tensor<float>({8, 3, 16, 16}, g, 0, 1)), true);
            auto loss = total_loss<float>(out, labels, 0.3f);
            t.backward(loss.total);
            opt.step(m.store());
        }
        if (std::string(plan) == "mlp/post-norm") {
            for (const auto& p : m.store().params()) {
                const bool attn_modulator = p->name.rfind("dri.mod.", 0) == 0 && p->name.find(".attn") != std::string::npos;
                CHECK_FALSE(attn_modulator);
            }
        }
        bool modulator_moved = false;
        for (const auto& p : m.store().params()) {
            const bool same = std::memcmp(before[p->name].data(), p->tensor.data.data(), p->tensor.size() * 4) == 0;
            if (p->name.rfind("backbone.", 0) == 0) CHECK(same);
            if (p->name.rfind("dri.mod.", 0) == 0 && !same) modulator_moved = true;
        }
        CHECK(modulator_moved);
    }
}

TEST_CASE("retrieval loss gradients reach the encoder patch embedding") {
    ModelConfig cfg = tiny_model(PeftMode::Dri);
    ReidModel<double> m(cfg);
    randomize_modulators(m, 33);
    Gen g(2);
    auto* embed = m.store().find("dri.oe.patch_embed.weight");
    REQUIRE(embed != nullptr);

    SUBCASE("two images, identity loss") {
        const auto images = random_tensor<double>({2, 3, 16, 16}, g, 0, 1);
        const std::vector<std::int64_t> labels{0, 1};
        const double err = parameter_gradient_error(m.store(), {embed}, [&](Tape<double>& t, bool backward) {
            auto loss = ops::cross_entropy(m.head().forward(t, m.embed(t, images), true).logits, labels);
            if (backward) t.backward(loss);
            return loss.value()[0];
        });
        CHECK(err <= 1e-4);
    }
    SUBCASE("four images, triplet plus identity loss") {
        const auto images = random_tensor<double>({4, 3, 16, 16}, g, 0, 1);
        const std::vector<std::int64_t> labels{0, 0, 1, 1};
        const double err = parameter_gradient_error(m.store(), {embed}, [&](Tape<double>& t, bool backward) {
            auto loss = total_loss<double>(m.head().forward(t, m.embed(t, images), true), labels, 0.3);
            if (backward) t.backward(loss.total);
            return loss.total_value();
        });
        CHECK(err <= 1e-4);
    }
    CHECK(std::any_of(embed->tensor.grad.begin(), embed->tensor.grad.end(), [](double v) { return v != 0; }));
}
