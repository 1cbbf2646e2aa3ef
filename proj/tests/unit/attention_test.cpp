#include <doctest.h>
#include <torch/torch.h>

#include <cmath>

#include "pulsediff/attention.hpp"
#include "pulsediff/common.hpp"
#include "support.hpp"

using namespace pulsediff;

namespace {

std::int64_t param_count(const torch::nn::Module& m) {
    std::int64_t n = 0;
    for (const auto& p : m.parameters()) n += p.numel();
    return n;
}

}  // namespace

TEST_SUITE("attention") {

TEST_CASE("sinusoidal embedding matches the formula reimplemented by hand") {
    const std::int64_t dim = 8;
    auto emb = sinusoidal_time_embedding(torch::tensor({17}, torch::kInt64), dim);
    CHECK(emb.sizes() == torch::IntArrayRef({1, dim}));
    for (std::int64_t j = 0; j < dim / 2; ++j) {
        double freq = std::exp(-std::log(10000.0) * j / (dim / 2.0));
        CHECK(emb[0][j].item<double>() == doctest::Approx(std::sin(17.0 * freq)).epsilon(1e-12));
        CHECK(emb[0][dim / 2 + j].item<double>() ==
              doctest::Approx(std::cos(17.0 * freq)).epsilon(1e-12));
    }
}

TEST_CASE("t=0 embeds to zeros and ones") {
    auto emb = sinusoidal_time_embedding(torch::tensor({0}, torch::kInt64), 6);
    CHECK(torch::equal(emb.slice(1, 0, 3), torch::zeros({1, 3}, torch::kFloat64)));
    CHECK(torch::equal(emb.slice(1, 3, 6), torch::ones({1, 3}, torch::kFloat64)));
}

TEST_CASE("embeddings are pairwise distinct over t < 1000") {
    auto t = torch::arange(1000, torch::kInt64);
    auto emb = sinusoidal_time_embedding(t, 16);
    auto d = torch::cdist(emb, emb);
    d.fill_diagonal_(1e9);
    CHECK(d.min().item<double>() > 1e-4);
}

TEST_CASE("odd embedding dims are rejected") {
    CHECK_THROWS_AS(sinusoidal_time_embedding(torch::tensor({1}, torch::kInt64), 7),
                    ValidationError);
}

TEST_CASE("single-key attention returns V exactly") {
    auto gen = cpu_generator(3);
    auto q = torch::randn({2, 5, 8}, gen);
    auto k = torch::randn({2, 1, 8}, gen);
    auto v = torch::randn({2, 1, 8}, gen);
    auto out = multihead_attention(q, k, v, 2);
    // softmax over one key is identically 1 for every query.
    CHECK(testsupport::max_abs_diff(out, v.expand({2, 5, 8})) == 0.0);
}

TEST_CASE("multihead attention matches a hand computation in double") {
    // One head, two queries, two keys, channel 2.
    auto q = torch::tensor({{{1.0, 0.0}, {0.0, 2.0}}}, torch::kFloat64);
    auto k = torch::tensor({{{1.0, 1.0}, {-1.0, 0.5}}}, torch::kFloat64);
    auto v = torch::tensor({{{2.0, -1.0}, {0.0, 3.0}}}, torch::kFloat64);
    auto out = multihead_attention(q, k, v, 1);
    const double scale = 1.0 / std::sqrt(2.0);
    for (int i = 0; i < 2; ++i) {
        double l0 = scale * (q[0][i][0].item<double>() * 1.0 + q[0][i][1].item<double>() * 1.0);
        double l1 = scale * (q[0][i][0].item<double>() * -1.0 + q[0][i][1].item<double>() * 0.5);
        double m = std::max(l0, l1);
        double w0 = std::exp(l0 - m), w1 = std::exp(l1 - m);
        double z = w0 + w1;
        double e0 = (w0 * 2.0 + w1 * 0.0) / z;
        double e1 = (w0 * -1.0 + w1 * 3.0) / z;
        CHECK(out[0][i][0].item<double>() == doctest::Approx(e0).epsilon(1e-12));
        CHECK(out[0][i][1].item<double>() == doctest::Approx(e1).epsilon(1e-12));
    }
}

TEST_CASE("a constant logit bias is a no-op, a one-hot bias selects its key") {
    auto gen = cpu_generator(4);
    auto q = torch::randn({1, 3, 4}, gen);
    auto k = torch::randn({1, 3, 4}, gen);
    auto v = torch::randn({1, 3, 4}, gen);
    auto plain = multihead_attention(q, k, v, 2);
    auto shifted = multihead_attention(q, k, v, 2, torch::full({2, 3, 3}, 5.0f));
    CHECK(testsupport::max_abs_diff(plain, shifted) < 1e-5);

    // A huge bias toward key 1 makes every output row v[1].
    auto bias = torch::zeros({2, 3, 3});
    bias.index_put_({torch::indexing::Slice(), torch::indexing::Slice(), 1}, 1e4f);
    auto forced = multihead_attention(q, k, v, 2, bias);
    CHECK(testsupport::max_abs_diff(forced, v.select(1, 1).unsqueeze(1).expand({1, 3, 4})) <
          1e-5);
}

TEST_CASE("norm_groups_for picks the largest power of two that divides") {
    CHECK(norm_groups_for(64) == 32);
    CHECK(norm_groups_for(48) == 16);
    CHECK(norm_groups_for(8) == 8);
    CHECK(norm_groups_for(6) == 2);
    CHECK(norm_groups_for(7) == 1);
    for (std::int64_t c = 1; c <= 128; ++c) {
        auto g = norm_groups_for(c);
        CHECK(c % g == 0);
        CHECK(g <= 32);
    }
}

TEST_CASE("factorized attention with zero image values equals the text branch") {
    torch::manual_seed(10);
    FactorizedCrossAttention attn(16, 12, 2);
    auto gen = cpu_generator(11);
    auto h = torch::randn({3, 7, 16}, gen);
    auto f_t = torch::randn({3, 4, 12}, gen);
    auto f_i = torch::randn({3, 5, 12}, gen);

    // kv_img->v is zero-initialized by construction, so the image branch
    // contributes exactly zero and the sum collapses to the text branch.
    auto full = attn->forward(h, f_t, f_i);
    auto text_only = attn->out(attn->text_branch(h, f_t));
    CHECK(testsupport::max_abs_diff(full, text_only) < 1e-6);
}

TEST_CASE("factorized attention with both value projections zeroed is exactly zero") {
    torch::manual_seed(12);
    FactorizedCrossAttention attn(16, 12, 2);
    {
        torch::NoGradGuard ng;
        attn->kv_text->v->weight.zero_();
    }
    auto gen = cpu_generator(13);
    auto out = attn->forward(torch::randn({2, 6, 16}, gen), torch::randn({2, 4, 12}, gen),
                             torch::randn({2, 5, 12}, gen));
    CHECK(torch::equal(out, torch::zeros_like(out)));
}

TEST_CASE("factorized attention is additive in each branch's values") {
    torch::manual_seed(14);
    FactorizedCrossAttention attn(8, 8, 2);
    {
        torch::NoGradGuard ng;
        attn->kv_img->v->weight.copy_(torch::randn({8, 8}, cpu_generator(15)));
    }
    auto gen = cpu_generator(16);
    auto h = torch::randn({1, 3, 8}, gen);
    auto f_t = torch::randn({1, 2, 8}, gen);
    auto f_i = torch::randn({1, 2, 8}, gen);

    auto both = attn->forward(h, f_t, f_i);
    auto text_part = attn->out(attn->text_branch(h, f_t));
    auto img_part = attn->out(attn->image_branch(h, f_i));
    // out is linear (bias-free) so the branch sum passes through it.
    CHECK(testsupport::max_abs_diff(both, text_part + img_part) < 1e-5);
}

TEST_CASE("factorized attention parameter count matches the hand-computed formula") {
    const std::int64_t C = 16, ctx = 12;
    FactorizedCrossAttention attn(C, ctx, 2);
    // Private Q per branch (C*C each, no bias), private K and V per branch
    // (ctx*C each, no bias), one shared bias-free output projection.
    const std::int64_t expected = 2 * C * C + 2 * 2 * ctx * C + C * C;
    CHECK(param_count(*attn) == expected);
}

TEST_CASE("context dims of the two branches must agree") {
    FactorizedCrossAttention attn(8, 8, 2);
    auto h = torch::randn({1, 3, 8});
    CHECK_THROWS_AS(attn->forward(h, torch::randn({1, 2, 8}), torch::randn({1, 2, 6})),
                    ValidationError);
}

TEST_CASE("spatial self-attention starts as the identity and keeps shape") {
    torch::manual_seed(17);
    SpatialSelfAttention attn(8, 2);
    auto x = torch::randn({3, 8, 4, 4}, cpu_generator(18));
    auto y = attn->forward(x);
    CHECK(y.sizes() == x.sizes());
    // proj is zero-initialized, so the residual passes x through untouched.
    CHECK(torch::equal(y, x));
}

TEST_CASE("temporal attention at init is the identity") {
    torch::manual_seed(19);
    TemporalSelfAttention attn(8, 2, 6);
    auto x = torch::randn({2 * 6, 8, 3, 3}, cpu_generator(20));
    auto y = attn->forward(x, 2, 6);
    CHECK(torch::equal(y, x));
}

TEST_CASE("temporal attention with uniform weights mixes toward the frame mean") {
    // Zero q/k projections give constant logits (uniform attention); with v
    // and proj forced to the identity the update adds the frame mean at
    // every position.
    const std::int64_t C = 4, F = 2;
    torch::manual_seed(21);
    TemporalSelfAttention attn(C, 1, F);
    {
        torch::NoGradGuard ng;
        auto params = attn->named_parameters();
        auto qkv_w = params["qkv.weight"];
        qkv_w.zero_();
        qkv_w.slice(0, 2 * C, 3 * C).copy_(torch::eye(C));
        params["proj.weight"].copy_(torch::eye(C));
        params["proj.bias"].zero_();
    }
    auto x = torch::randn({F, C, 1, 1}, cpu_generator(22));
    auto y = attn->forward(x, 1, F);

    auto tokens = x.reshape({F, C});
    auto normed = torch::layer_norm(tokens, {C});
    auto mean_v = normed.mean(0, true);  // uniform attention output for both frames
    auto expect = tokens + mean_v;
    CHECK(testsupport::max_abs_diff(y.reshape({F, C}), expect) < 1e-5);
}

TEST_CASE("relative position bias table covers 2F-1 offsets per head") {
    TemporalSelfAttention attn(8, 2, 5);
    auto named = attn->named_parameters();
    CHECK(named.contains("rel_bias"));
    CHECK(named["rel_bias"].sizes() == torch::IntArrayRef({9, 2}));
}

TEST_CASE("temporal attention rejects clips longer than max_frames") {
    TemporalSelfAttention attn(8, 2, 4);
    auto x = torch::randn({5, 8, 2, 2});
    CHECK_THROWS_AS(attn->forward(x, 1, 5), ValidationError);
    CHECK_THROWS_AS(attn->forward(x, 2, 2), ValidationError);  // folded batch mismatch
}

}  // TEST_SUITE
