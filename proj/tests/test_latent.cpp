#include <catch2/catch_amalgamated.hpp>

#include "icflow/image_io.hpp"
#include "icflow/latent.hpp"

#include <cmath>
#include <filesystem>

using namespace icflow;

namespace {

ImageTensor<float> random_image(Rng& rng, int c, int h, int w) {
    ImageTensor<float> img(c, h, w);
    for (auto& v : img.data)
        v = static_cast<float>(rng.uniform());
    return img;
}

}  // namespace

TEST_CASE("encode shape arithmetic", "[latent]") {
    ImageTensor<float> img(3, 8, 8, 0.25f);
    auto grid = encode(img, 4);
    CHECK(grid.grid_h == 2);
    CHECK(grid.grid_w == 2);
    CHECK(grid.latent_channels() == 48);
    CHECK(grid.count() == 4);
    // constant image -> identical tokens
    for (int i = 1; i < 4; ++i)
        CHECK(grid.tokens.row(i) == grid.tokens.row(0));
}

TEST_CASE("encode rejects indivisible dims", "[latent]") {
    ImageTensor<float> img(3, 9, 8);
    CHECK_THROWS_WITH(encode(img, 4),
                      Catch::Matchers::ContainsSubstring("9x8"));
}

TEST_CASE("round-trip is bit-exact over random shapes", "[latent]") {
    Rng rng(21);
    for (int iter = 0; iter < 40; ++iter) {
        int patch = 1 + static_cast<int>(rng.below(5));
        int c = 1 + static_cast<int>(rng.below(4));
        int gh = 1 + static_cast<int>(rng.below(6));
        int gw = 1 + static_cast<int>(rng.below(6));
        auto img = random_image(rng, c, gh * patch, gw * patch);
        auto back = decode(encode(img, patch), patch);
        REQUIRE(back.same_shape(img));
        REQUIRE(back.data == img.data);
    }
}

TEST_CASE("decode rejects channel arithmetic mismatch", "[latent]") {
    TokenGrid<float> g;
    g.grid_h = 1;
    g.grid_w = 1;
    g.tokens.resize(1, 10);  // 10 not divisible by 4
    g.tokens.setZero();
    CHECK_THROWS_AS(decode(g, 2), Error);
}

TEST_CASE("build_sequence with no contexts", "[latent]") {
    Rng rng(22);
    auto img = random_image(rng, 3, 8, 8);
    auto grid = encode(img, 4);
    auto seq = build_sequence(grid, {});
    CHECK(seq.tokens == grid.tokens);
    CHECK(seq.target_len == 4);
    for (const auto& p : seq.positions)
        CHECK(p.t == 0);
}

TEST_CASE("build_sequence lengths and positions", "[latent]") {
    Rng rng(23);
    TokenGrid<float> target, ctx;
    target.grid_h = target.grid_w = 2;
    target.tokens.resize(4, 12);
    rng.fill_normal(target.tokens);
    ctx.grid_h = ctx.grid_w = 3;
    ctx.tokens.resize(9, 12);
    rng.fill_normal(ctx.tokens);

    auto seq = build_sequence(target, {ctx});
    CHECK(seq.tokens.rows() == 13);
    CHECK(seq.target_len == 4);
    REQUIRE(seq.positions.size() == 13);
    // target block first (t=0), context block contiguous after it
    for (Eigen::Index i = 0; i < 13; ++i)
        CHECK(seq.positions[static_cast<size_t>(i)].t ==
              (i < seq.target_len ? 0 : 1));
    // values verbatim
    CHECK(seq.tokens.topRows(4) == target.tokens);
    CHECK(seq.tokens.bottomRows(9) == ctx.tokens);
}

TEST_CASE("build_sequence with two contexts reaches t=2", "[latent]") {
    TokenGrid<float> target, c1, c2;
    target.grid_h = target.grid_w = 1;
    target.tokens = Mat<float>::Zero(1, 4);
    c1.grid_h = 1;
    c1.grid_w = 2;
    c1.tokens = Mat<float>::Zero(2, 4);
    c2.grid_h = 2;
    c2.grid_w = 1;
    c2.tokens = Mat<float>::Zero(2, 4);
    auto seq = build_sequence(target, {c1, c2});
    int max_t = 0;
    for (const auto& p : seq.positions)
        max_t = std::max(max_t, p.t);
    CHECK(max_t == 2);
    // mixed aspect ratios are fine; channel mismatch is not
    TokenGrid<float> bad;
    bad.grid_h = bad.grid_w = 1;
    bad.tokens = Mat<float>::Zero(1, 8);
    CHECK_THROWS_AS(build_sequence(target, {bad}), Error);
}

TEST_CASE("psnr closed forms", "[latent]") {
    ImageTensor<float> zeros(3, 8, 8, 0.0f), ones(3, 8, 8, 1.0f);
    CHECK(std::isinf(psnr(zeros, zeros)));
    CHECK(psnr(zeros, ones) == Catch::Approx(0.0).margin(1e-12));
    ImageTensor<float> other(3, 8, 9);
    CHECK_THROWS_AS(psnr(zeros, other), Error);
}

TEST_CASE("ssim identity and symmetry", "[latent]") {
    Rng rng(24);
    auto a = random_image(rng, 3, 16, 16);
    auto b = random_image(rng, 3, 16, 16);
    CHECK(ssim(a, a) == Catch::Approx(1.0).margin(1e-9));
    CHECK(ssim(a, b) == Catch::Approx(ssim(b, a)).margin(1e-12));
    CHECK(ssim(a, b) < 1.0);
}

TEST_CASE("reconstruction_metrics on identical images", "[latent]") {
    Rng rng(25);
    auto a = random_image(rng, 3, 16, 16);
    auto m = reconstruction_metrics(a, a);
    CHECK(std::isinf(m.psnr_db));
    CHECK(m.ssim == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("latent stats and normalization round-trip", "[latent]") {
    Rng rng(26);
    std::vector<TokenGrid<float>> grids;
    for (int i = 0; i < 5; ++i) {
        TokenGrid<float> g;
        g.grid_h = 2;
        g.grid_w = 2;
        g.tokens.resize(4, 6);
        rng.fill_normal(g.tokens);
        g.tokens.array() *= 3.0f;
        g.tokens.array() += 0.7f;
        grids.push_back(g);
    }
    auto st = compute_latent_stats(grids);
    REQUIRE(st.mean.size() == 6);
    REQUIRE(st.stddev.size() == 6);

    // normalized corpus has ~zero mean, ~unit variance per channel
    std::vector<TokenGrid<float>> normed;
    for (const auto& g : grids)
        normed.push_back(normalize_tokens(g, st));
    auto st2 = compute_latent_stats(normed);
    for (int j = 0; j < 6; ++j) {
        CHECK(st2.mean[static_cast<size_t>(j)] ==
              Catch::Approx(0.0).margin(1e-5));
        CHECK(st2.stddev[static_cast<size_t>(j)] ==
              Catch::Approx(1.0).margin(1e-4));
    }

    // denormalize inverts normalize up to float rounding
    auto back = denormalize_tokens(normed[0], st);
    CHECK((back.tokens - grids[0].tokens).cwiseAbs().maxCoeff() < 1e-5f);
}

TEST_CASE("constant channels get unit scale", "[latent]") {
    TokenGrid<float> g;
    g.grid_h = 1;
    g.grid_w = 3;
    g.tokens.resize(3, 2);
    g.tokens.col(0).setConstant(0.5f);
    g.tokens.col(1) << 0.0f, 1.0f, 2.0f;
    auto st = compute_latent_stats<float>({g});
    CHECK(st.stddev[0] == 1.0);
    CHECK(st.stddev[1] > 0.5);
    LatentStats bad = st;
    bad.stddev[0] = 0.0;
    CHECK_THROWS_AS(bad.validate(2), Error);
    CHECK_THROWS_AS(st.validate(3), Error);
}

TEST_CASE("png round-trip at 8-bit resolution", "[latent]") {
    Rng rng(27);
    ImageTensor<float> img(3, 16, 16);
    // quantized values survive the 8-bit round trip exactly
    for (auto& v : img.data)
        v = static_cast<float>(rng.below(256)) / 255.0f;
    auto bytes = encode_png(img);
    auto back = decode_png(bytes);
    REQUIRE(back.same_shape(img));
    for (size_t i = 0; i < img.data.size(); ++i)
        REQUIRE(back.data[i] == Catch::Approx(img.data[i]).margin(1e-6));

    auto path = std::filesystem::temp_directory_path() / "icflow_rt.png";
    write_png(path.string(), img);
    auto loaded = read_png(path.string());
    CHECK(loaded.data == back.data);
    std::filesystem::remove(path);
}

TEST_CASE("png rejects non-rgb and bad bytes", "[latent]") {
    ImageTensor<float> gray(1, 4, 4, 0.5f);
    CHECK_THROWS_AS(encode_png(gray), Error);
    std::vector<unsigned char> junk = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    CHECK_THROWS_AS(decode_png(junk), Error);
}
