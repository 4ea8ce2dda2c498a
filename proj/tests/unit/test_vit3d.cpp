#include "doctest.h"

#include <cmath>
#include <regex>

#include "helpers.hpp"
#include "oracles.hpp"
#include "promise/tensor_archive.hpp"
#include "promise/transplant.hpp"
#include "promise/vit3d.hpp"

using namespace promise;

namespace {

EncoderConfig small_encoder() { return testing::small_config().encoder; }

double max_abs_diff(const torch::Tensor &a, const torch::Tensor &b) { return (a - b).abs().max().item<double>(); }

// Per-slice 2D patch embedding by explicit summation, averaged over each depth patch.
torch::Tensor embed_oracle(const torch::Tensor &image, const torch::Tensor &w, const torch::Tensor &bias, int64_t p, int64_t dp) {
    const auto s = image.size(0), sh = image.size(1), sw = image.size(2), c = w.size(0);
    auto img = image.to(torch::kFloat64), wd = w.to(torch::kFloat64), bd = bias.to(torch::kFloat64);
    auto out = torch::zeros({s / dp, sh / p, sw / p, c}, torch::kFloat64);
    for (int64_t gz = 0; gz < s / dp; ++gz)
        for (int64_t gy = 0; gy < sh / p; ++gy)
            for (int64_t gx = 0; gx < sw / p; ++gx) {
                auto acc = torch::zeros({c}, torch::kFloat64);
                for (int64_t z = gz * dp; z < (gz + 1) * dp; ++z) {
                    auto patch = img.index({z, torch::indexing::Slice(gy * p, (gy + 1) * p),
                                            torch::indexing::Slice(gx * p, (gx + 1) * p)});
                    acc += (wd.index({torch::indexing::Slice(), 0}) * patch).sum({1, 2}) + bd;
                }
                out.index_put_({gz, gy, gx}, acc / static_cast<double>(dp));
            }
    return out;
}

} // namespace

TEST_SUITE("vit3d_encoder") {

TEST_CASE("config validation") {
    auto c = small_encoder();
    CHECK_NOTHROW(c.validate());
    c.tap_blocks = {1};
    CHECK_THROWS(c.validate());
    c = small_encoder();
    c.embed_dim = 33;
    CHECK_THROWS(c.validate());
    c = small_encoder();
    c.tap_blocks = {2, 1};
    CHECK_THROWS(c.validate());
}

TEST_CASE("pyramid shapes") {
    torch::manual_seed(0);
    Vit3dEncoder enc(small_encoder());
    const auto taps = enc->forward(torch::randn({2, 1, 32, 32, 32}));
    REQUIRE(taps.size() == 2);
    for (const auto &t : taps) {
        CHECK(t.tokens.sizes() == torch::IntArrayRef({2, 4, 4, 4, 32}));
        CHECK(t.grid_shape() == std::array<int64_t, 3>{4, 4, 4});
    }
    CHECK_THROWS_WITH_AS(enc->forward(torch::randn({1, 1, 30, 32, 32})), doctest::Contains("not divisible"),
                         std::invalid_argument);
}

TEST_CASE("embedding of a depth-constant volume reduces to the 2D patch embedding") {
    torch::manual_seed(1);
    auto cfg = small_encoder();
    Vit3dEncoder enc(cfg);
    auto slice = torch::randn({1, 32, 32});
    auto image = slice.expand({32, 32, 32}).contiguous();
    auto tokens = enc->embed(image.view({1, 1, 32, 32, 32})).tokens[0];
    auto pos = enc->patch_embed->positional(4, 4, 4)[0];
    auto oracle = embed_oracle(image, enc->patch_embed->spatial->weight, enc->patch_embed->spatial->bias, 8, 8);
    CHECK(max_abs_diff((tokens - pos).to(torch::kFloat64), oracle) < 1e-4);
    // every depth token of a column matches the single-slice embedding
    for (int64_t z = 1; z < 4; ++z) CHECK(max_abs_diff(oracle[z], oracle[0]) < 1e-9);
}

TEST_CASE("embedding of arbitrary volumes matches the averaged per-slice oracle") {
    torch::manual_seed(2);
    Vit3dEncoder enc(small_encoder());
    auto image = torch::randn({32, 32, 32});
    auto tokens = enc->embed(image.view({1, 1, 32, 32, 32})).tokens[0];
    auto pos = enc->patch_embed->positional(4, 4, 4)[0];
    auto oracle = embed_oracle(image, enc->patch_embed->spatial->weight, enc->patch_embed->spatial->bias, 8, 8);
    CHECK(max_abs_diff((tokens - pos).to(torch::kFloat64), oracle) < 1e-4);
}

TEST_CASE("fresh adapters are the identity") {
    torch::manual_seed(3);
    Adapter a(32, 8);
    auto x = torch::randn({1, 4, 4, 4, 32});
    CHECK(torch::equal(a->forward(x), x));
}

TEST_CASE("adapted encoder equals the adapter-free encoder at initialisation") {
    torch::manual_seed(4);
    auto cfg = small_encoder();
    Vit3dEncoder adapted(cfg);
    cfg.use_adapters = false;
    Vit3dEncoder plain(cfg);
    CHECK(copy_matching_parameters(*plain, *adapted) == static_cast<int64_t>(plain->parameters().size()));
    torch::NoGradGuard g;
    auto x = torch::randn({1, 1, 32, 32, 32});
    const auto a = adapted->forward(x), b = plain->forward(x);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(max_abs_diff(a[i].tokens, b[i].tokens) < 1e-6);
}

TEST_CASE("adapter perturbation is linear in the up-projection scale") {
    torch::manual_seed(5);
    auto cfg = small_encoder();
    Vit3dEncoder enc(cfg);
    torch::NoGradGuard g;
    auto x = torch::randn({1, 1, 32, 32, 32});
    const auto base = enc->forward(x).back().tokens.to(torch::kFloat64);
    std::vector<torch::Tensor> dirs;
    for (auto &item : enc->named_parameters())
        if (std::regex_match(item.key(), std::regex(R"(.*adapter\d\.up\.weight)"))) dirs.push_back(torch::randn_like(item.value()));
    REQUIRE(dirs.size() == 4);
    auto perturb = [&](double eps) {
        std::size_t k = 0;
        for (auto &item : enc->named_parameters())
            if (std::regex_match(item.key(), std::regex(R"(.*adapter\d\.up\.weight)"))) item.value().copy_(dirs[k++] * eps);
        return (enc->forward(x).back().tokens.to(torch::kFloat64) - base).norm().item<double>();
    };
    const double d1 = perturb(1e-3), d2 = perturb(2e-3);
    CHECK(d1 > 0);
    CHECK(d2 / d1 == doctest::Approx(2.0).epsilon(0.05));
}

TEST_CASE("second adapter flag controls the adapter count") {
    auto cfg = small_encoder();
    cfg.use_second_adapter = false;
    Vit3dEncoder one(cfg);
    int adapters = 0;
    for (const auto &item : one->named_parameters())
        if (item.key().find("adapter2") != std::string::npos) ++adapters;
    CHECK(adapters == 0);
}

TEST_CASE("partition freezes exactly the pretrained projections") {
    Vit3dEncoder enc(small_encoder());
    const auto p = enc->partition();
    CHECK(p.frozen.count("patch_embed.spatial.weight"));
    CHECK(p.frozen.count("patch_embed.pos_embed"));
    CHECK(p.frozen.count("blocks.0.attn.qkv.weight"));
    CHECK(p.frozen.count("blocks.1.mlp.lin2.bias"));
    CHECK(p.trainable.count("patch_embed.depth_proj.weight"));
    CHECK(p.trainable.count("patch_embed.depth_pos"));
    CHECK(p.trainable.count("blocks.0.norm1.weight"));
    CHECK(p.trainable.count("blocks.1.adapter2.up.weight"));
    for (const auto &item : enc->named_parameters()) CHECK(item.value().requires_grad() == !p.is_frozen(item.key()));
    CHECK(p.frozen.size() + p.trainable.size() == enc->named_parameters().size());
}

TEST_CASE("frozen parameters receive no gradient") {
    torch::manual_seed(6);
    Vit3dEncoder enc(small_encoder());
    enc->forward(torch::randn({1, 1, 32, 32, 32})).back().tokens.square().sum().backward();
    const auto p = enc->partition();
    for (const auto &item : enc->named_parameters()) {
        if (p.is_frozen(item.key())) CHECK(!item.value().grad().defined());
        else CHECK(item.value().grad().defined());
    }
}

TEST_CASE("attention is global over every token") {
    torch::manual_seed(7);
    Vit3dEncoder enc(small_encoder());
    auto attn = enc->blocks[0]->as<Block>()->attn;
    attn->probe = true;
    enc->forward(torch::randn({1, 1, 32, 32, 32}));
    CHECK(attn->last_attention_shape == std::vector<int64_t>{1, 2, 64, 64});
}

TEST_CASE("transplant maps every source key and sums the RGB kernel") {
    torch::manual_seed(8);
    auto cfg = small_encoder();
    Vit3dEncoder enc(cfg);
    const auto src = make_random_source_checkpoint(cfg, 11);
    const auto report = plan_transplant(src, *enc);
    CHECK(report.ok());
    int omitted = 0;
    for (const auto &e : report.entries) {
        if (e.status == "omitted") {
            ++omitted;
            CHECK(std::regex_match(e.source, std::regex(R"(.*(neck\..*|rel_pos_[hw]))")));
        }
    }
    CHECK(omitted == 1 + 2 * cfg.n_blocks);
    const auto partition = transplant_pretrained(src, *enc);
    const auto params = enc->named_parameters();
    CHECK(torch::equal(params["blocks.1.attn.qkv.weight"], src.at("image_encoder.blocks.1.attn.qkv.weight")));
    CHECK(torch::equal(params["blocks.0.norm2.bias"], src.at("image_encoder.blocks.0.norm2.bias")));
    CHECK(torch::allclose(params["patch_embed.spatial.weight"], src.at("image_encoder.patch_embed.proj.weight").sum(1, true)));
    CHECK(partition.frozen == enc->partition().frozen);

    // gray replicated to RGB through the source kernel equals the summed kernel on gray
    auto gray = torch::randn({1, 1, 8, 8});
    auto w3 = src.at("image_encoder.patch_embed.proj.weight");
    auto rgb = torch::conv2d(gray.expand({1, 3, 8, 8}), w3);
    auto one = torch::conv2d(gray, params["patch_embed.spatial.weight"]);
    CHECK(max_abs_diff(rgb, one) < 1e-5);
}

TEST_CASE("transplant resizes a larger positional grid and rejects wrong widths") {
    auto cfg = small_encoder();
    Vit3dEncoder enc(cfg);
    auto src_cfg = cfg;
    src_cfg.pos_grid = 8;
    auto src = make_random_source_checkpoint(src_cfg, 3);
    CHECK(plan_transplant(src, *enc).ok());
    transplant_pretrained(src, *enc);
    CHECK(enc->patch_embed->pos_embed.sizes() == torch::IntArrayRef({1, 4, 4, 32}));

    auto wide = cfg;
    wide.embed_dim = 64;
    wide.n_heads = 4;
    const auto bad = make_random_source_checkpoint(wide, 4);
    CHECK_FALSE(plan_transplant(bad, *enc).ok());
    CHECK_THROWS_WITH(transplant_pretrained(bad, *enc), doctest::Contains("shape_mismatch"));

    TensorArchive partial = src;
    partial.tensors.erase("image_encoder.blocks.0.mlp.lin1.weight");
    const auto rep = plan_transplant(partial, *enc);
    CHECK_FALSE(rep.ok());
    CHECK(rep.to_json().dump().find("blocks.0.mlp.lin1.weight") != std::string::npos);
}

TEST_CASE("depth-1 grid with fresh adapters reproduces the transplanted 2D transformer") {
    torch::manual_seed(9);
    auto cfg = small_encoder();
    Vit3dEncoder enc(cfg);
    auto src_cfg = cfg;
    src_cfg.pos_grid = 6;
    const auto src = make_random_source_checkpoint(src_cfg, 21);
    transplant_pretrained(src, *enc);
    torch::NoGradGuard g;
    const auto gray = torch::randn({32, 32});
    const auto volume = gray.expand({8, 32, 32}).contiguous().view({1, 1, 8, 32, 32});
    const auto taps = enc->forward(volume);
    const auto ref = oracle::vit2d_forward(src, gray, 8, cfg.n_blocks, cfg.n_heads);
    REQUIRE(taps.size() == ref.size());
    for (std::size_t i = 0; i < taps.size(); ++i) {
        CHECK(taps[i].grid_shape() == std::array<int64_t, 3>{1, 4, 4});
        CHECK(max_abs_diff(taps[i].tokens[0][0].to(torch::kFloat64), ref[i]) < 1e-5);
    }
}

TEST_CASE("ViT-B geometry parameter counts") {
    Vit3dEncoder enc(EncoderConfig::vit_b());
    int64_t frozen = 0, trainable = 0;
    const auto p = enc->partition();
    for (const auto &item : enc->named_parameters()) (p.is_frozen(item.key()) ? frozen : trainable) += item.value().numel();
    // 12 blocks of qkv, proj, lin1, lin2 plus the gray patch kernel and the 64x64 position table
    const int64_t c = 768, block = (c * 3 * c + 3 * c) + (c * c + c) + (c * 4 * c + 4 * c) + (4 * c * c + c);
    CHECK(frozen == 12 * block + (c * 16 * 16 + c) + 64 * 64 * c);
    CHECK(trainable < frozen / 4);
}

TEST_CASE("tensor archive round trip") {
    TensorArchive a;
    a.tensors["f"] = torch::randn({3, 4});
    a.tensors["d"] = torch::randn({2}, torch::kFloat64);
    a.tensors["i"] = torch::arange(5, torch::kInt64);
    a.tensors["u"] = torch::tensor(std::vector<uint8_t>{1, 2, 3}, torch::kUInt8);
    a.metadata["k"] = "v";
    const auto b = parse_tensor_archive(serialize_tensor_archive(a));
    CHECK(b.metadata == a.metadata);
    for (const auto &[k, t] : a.tensors) {
        CHECK(b.at(k).dtype() == t.dtype());
        CHECK(torch::equal(b.at(k), t));
    }
    CHECK_THROWS(parse_tensor_archive("abc"));
    CHECK_THROWS(b.at("missing"));
}

}
