#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "mtunet/attention.hpp"
#include "mtunet/gradcheck.hpp"

using namespace mtunet;

namespace {

template <typename S>
TensorPtr<S> random_tensor(Shape shape, std::mt19937_64& rng, S lo = S(-1), S hi = S(1)) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    std::vector<S> data(static_cast<std::size_t>(numel(shape)));
    for (auto& v : data) v = static_cast<S>(dist(rng));
    return make_tensor<S>(std::move(shape), std::move(data));
}

// Plain axial attention written independently of the fused kernel: explicit
// neighborhood gather, explicit softmax, no distance bias.
template <typename S>
std::vector<S> plain_axial_reference(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v,
                                     std::int64_t hg, std::int64_t wg) {
    const std::int64_t c = q.shape[1];
    const double scale = 1.0 / std::sqrt(static_cast<double>(c));
    std::vector<S> out(static_cast<std::size_t>(hg * wg * c), S(0));
    for (std::int64_t i = 0; i < hg; ++i) {
        for (std::int64_t j = 0; j < wg; ++j) {
            auto nb = axial_neighborhood(i, j, hg, wg);
            std::vector<double> logits;
            for (const auto& [ii, jj] : nb.indices) {
                double dot = 0.0;
                for (std::int64_t ch = 0; ch < c; ++ch)
                    dot += static_cast<double>(q.data[(i * wg + j) * c + ch]) *
                           static_cast<double>(k.data[(ii * wg + jj) * c + ch]);
                logits.push_back(dot * scale);
            }
            const double mx = *std::max_element(logits.begin(), logits.end());
            double sum = 0.0;
            for (auto& l : logits) {
                l = std::exp(l - mx);
                sum += l;
            }
            for (std::size_t a = 0; a < nb.indices.size(); ++a) {
                const auto [ii, jj] = nb.indices[a];
                for (std::int64_t ch = 0; ch < c; ++ch)
                    out[(i * wg + j) * c + ch] += static_cast<S>(
                        logits[a] / sum * static_cast<double>(v.data[(ii * wg + jj) * c + ch]));
            }
        }
    }
    return out;
}

}  // namespace

TEST_CASE("window_partition shapes and degenerate window") {
    std::mt19937_64 rng(1);
    auto x = random_tensor<float>({3, 8, 8}, rng);
    auto wins = ops::window_partition(x, 4);
    CHECK(wins->shape == Shape{4, 16, 3});

    auto small = random_tensor<float>({2, 4, 4}, rng);
    auto one = ops::window_partition(small, 4);
    CHECK(one->shape == Shape{1, 16, 2});
    // Single window keeps row-major token order.
    for (std::int64_t t = 0; t < 16; ++t)
        for (std::int64_t c = 0; c < 2; ++c)
            CHECK(one->data[t * 2 + c] == small->data[c * 16 + t]);

    CHECK_THROWS_WITH_AS(ops::window_partition(x, 3),
                         doctest::Contains("H=8, W=8 not divisible by p=3"), DimensionError);
}

TEST_CASE("window partition/reverse round-trip is exact") {
    std::mt19937_64 rng(2);
    const std::int64_t configs[][3] = {{1, 4, 4}, {3, 8, 12}, {2, 16, 16}, {5, 12, 8}};
    for (auto [c, h, w] : configs) {
        for (std::int64_t p : {1, 2, 4}) {
            if (h % p || w % p) continue;
            auto x = random_tensor<float>({c, h, w}, rng);
            auto rt = ops::window_reverse(ops::window_partition(x, p), h, w, p);
            CHECK(rt->data == x->data);
        }
    }
    auto zero = zeros<float>({2, 8, 8});
    auto rt = ops::window_reverse(ops::window_partition(zero, 4), 8, 8, 4);
    for (auto v : rt->data) CHECK(v == 0.0f);
    CHECK_THROWS_AS(ops::window_reverse(zeros<float>({3, 16, 2}), 8, 8, 4), DimensionError);
}

TEST_CASE("local self-attention preserves shape and window locality") {
    std::mt19937_64 rng(3);
    ParameterStore<float> store;
    ParamInit<float> init(store, 99);
    LocalSelfAttention<float> lsa(init, "lsa", 8, 4, 1);

    auto x = random_tensor<float>({8, 16, 16}, rng);
    auto y = lsa.forward(x);
    CHECK(y->shape == x->shape);

    // Perturb one token inside window (0,0); windows other than (0,0) must be
    // bit-identical.
    auto x2 = make_tensor<float>(x->shape, x->data);
    x2->data[(2 * 16 + 1) * 16 + 2] += 0.5f;  // channel 2, row 1, col 2
    auto y2 = lsa.forward(x2);
    bool deviated_inside = false;
    for (std::int64_t c = 0; c < 8; ++c) {
        for (std::int64_t r = 0; r < 16; ++r) {
            for (std::int64_t col = 0; col < 16; ++col) {
                const auto a = y->data[(c * 16 + r) * 16 + col];
                const auto b = y2->data[(c * 16 + r) * 16 + col];
                if (r < 4 && col < 4) {
                    deviated_inside = deviated_inside || a != b;
                } else {
                    CHECK(a == b);
                }
            }
        }
    }
    CHECK(deviated_inside);
}

TEST_CASE("local self-attention with trivial weights averages each window") {
    ParameterStore<float> store;
    ParamInit<float> init(store, 5);
    LocalSelfAttention<float> lsa(init, "lsa", 3, 2, 1);
    std::fill(lsa.w_q->data.begin(), lsa.w_q->data.end(), 0.0f);
    std::fill(lsa.w_k->data.begin(), lsa.w_k->data.end(), 0.0f);
    std::fill(lsa.w_v->data.begin(), lsa.w_v->data.end(), 0.0f);
    std::fill(lsa.w_out->data.begin(), lsa.w_out->data.end(), 0.0f);
    for (std::int64_t i = 0; i < 3; ++i) {
        lsa.w_v->data[i * 3 + i] = 1.0f;
        lsa.w_out->data[i * 3 + i] = 1.0f;
    }

    std::mt19937_64 rng(6);
    auto x = random_tensor<float>({3, 4, 4}, rng);
    auto y = lsa.forward(x);
    for (std::int64_t c = 0; c < 3; ++c) {
        for (std::int64_t ti = 0; ti < 2; ++ti) {
            for (std::int64_t tj = 0; tj < 2; ++tj) {
                float mean = 0.0f;
                for (std::int64_t u = 0; u < 2; ++u)
                    for (std::int64_t v = 0; v < 2; ++v)
                        mean += x->data[(c * 4 + ti * 2 + u) * 4 + tj * 2 + v];
                mean /= 4.0f;
                for (std::int64_t u = 0; u < 2; ++u)
                    for (std::int64_t v = 0; v < 2; ++v)
                        CHECK(y->data[(c * 4 + ti * 2 + u) * 4 + tj * 2 + v] ==
                              doctest::Approx(mean).epsilon(1e-5));
            }
        }
    }
}

TEST_CASE("local self-attention equals full SA when the window covers the grid") {
    std::mt19937_64 rng(7);
    ParameterStore<float> store;
    ParamInit<float> init(store, 11);
    LocalSelfAttention<float> lsa(init, "lsa", 6, 4, 1);
    FullSelfAttention<float> full(init, "full", 6);
    full.w_q->data = lsa.w_q->data;
    full.w_k->data = lsa.w_k->data;
    full.w_v->data = lsa.w_v->data;
    full.w_out->data = lsa.w_out->data;

    auto x = random_tensor<float>({6, 4, 4}, rng);
    auto via_lsa = lsa.forward(x);
    auto via_full = full.forward(ops::channels_to_tokens(x));
    for (std::int64_t t = 0; t < 16; ++t)
        for (std::int64_t c = 0; c < 6; ++c)
            CHECK(via_full->data[t * 6 + c] ==
                  doctest::Approx(via_lsa->data[c * 16 + t]).epsilon(1e-5));
}

TEST_CASE("aggregation modes") {
    std::mt19937_64 rng(8);
    ParameterStore<float> store;
    ParamInit<float> init(store, 13);
    Aggregator<float> dyn(init, "dyn", 3, 2, AggregatorMode::kDynamic);
    Aggregator<float> mx(init, "max", 3, 2, AggregatorMode::kMaxPool);

    // All-equal tokens inside a window: the convex combination returns them.
    auto x = zeros<float>({3, 2, 2});
    for (std::int64_t c = 0; c < 3; ++c)
        for (std::int64_t i = 0; i < 4; ++i) x->data[c * 4 + i] = 0.3f * static_cast<float>(c + 1);
    auto pooled = dyn.forward(x);
    CHECK(pooled->shape == Shape{3, 1, 1});
    for (std::int64_t c = 0; c < 3; ++c)
        CHECK(pooled->data[c] == doctest::Approx(0.3f * (c + 1)).epsilon(1e-6));

    // Max pooling picks the channelwise spike.
    auto spike = zeros<float>({2, 2, 2});
    spike->data[3] = 4.5f;   // channel 0, position (1,1)
    spike->data[4] = -1.0f;  // channel 1 all below zero except this max
    spike->data[5] = -3.0f;
    spike->data[6] = -2.0f;
    spike->data[7] = -5.0f;
    auto mp = mx.forward(spike);
    CHECK(mp->data[0] == 4.5f);
    CHECK(mp->data[1] == -1.0f);

    CHECK_THROWS_AS(aggregator_mode_from_string("median"), ConfigError);
}

TEST_CASE("dynamic aggregation matches the explicit softmax-weighted-sum oracle") {
    std::mt19937_64 rng(9);
    ParameterStore<float> store;
    ParamInit<float> init(store, 17);
    const std::int64_t c = 5, p = 2;
    Aggregator<float> dyn(init, "dyn", c, p, AggregatorMode::kDynamic);
    auto x = random_tensor<float>({c, 6, 4}, rng);
    auto pooled = dyn.forward(x);
    CHECK(pooled->shape == Shape{c, 3, 2});

    for (std::int64_t ti = 0; ti < 3; ++ti) {
        for (std::int64_t tj = 0; tj < 2; ++tj) {
            std::vector<double> logits(4, 0.0), tok(4 * c);
            for (std::int64_t u = 0; u < p; ++u)
                for (std::int64_t v = 0; v < p; ++v) {
                    const std::int64_t pos = u * p + v;
                    for (std::int64_t ch = 0; ch < c; ++ch) {
                        tok[pos * c + ch] = x->data[(ch * 6 + ti * p + u) * 4 + tj * p + v];
                        logits[pos] += dyn.score_w->data[pos * c + ch] * tok[pos * c + ch];
                    }
                }
            const double mxv = *std::max_element(logits.begin(), logits.end());
            double sum = 0.0;
            for (auto& l : logits) {
                l = std::exp(l - mxv);
                sum += l;
            }
            for (std::int64_t ch = 0; ch < c; ++ch) {
                double expect = 0.0;
                for (std::int64_t pos = 0; pos < 4; ++pos)
                    expect += logits[pos] / sum * tok[pos * c + ch];
                CHECK(pooled->data[(ch * 3 + ti) * 2 + tj] ==
                      doctest::Approx(expect).epsilon(1e-6));
            }
        }
    }
}

TEST_CASE("axial neighborhood hand case and degenerate grid") {
    auto nb = axial_neighborhood(1, 2, 4, 4);
    REQUIRE(nb.indices.size() == 7);
    const std::vector<double> expected = {2, 1, 0, 1, 1, 1, 2};
    CHECK(nb.distances == expected);
    CHECK(nb.indices[2] == std::pair<std::int64_t, std::int64_t>{1, 2});

    auto solo = axial_neighborhood(0, 0, 1, 1);
    REQUIRE(solo.indices.size() == 1);
    CHECK(solo.distances[0] == 0.0);

    CHECK_THROWS_AS(axial_neighborhood(4, 0, 4, 4), DimensionError);
}

TEST_CASE("axial neighborhood count matches brute-force enumeration") {
    std::mt19937_64 rng(10);
    std::uniform_int_distribution<std::int64_t> dim(1, 12);
    for (int trial = 0; trial < 100; ++trial) {
        const auto hg = dim(rng), wg = dim(rng);
        const auto i = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(hg));
        const auto j = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(wg));
        auto nb = axial_neighborhood(i, j, hg, wg);

        std::set<std::pair<std::int64_t, std::int64_t>> brute;
        for (std::int64_t r = 0; r < hg; ++r)
            for (std::int64_t c = 0; c < wg; ++c)
                if (r == i || c == j) brute.insert({r, c});
        CHECK(nb.indices.size() == brute.size());
        CHECK(static_cast<std::int64_t>(nb.indices.size()) == hg + wg - 1);
        std::set<std::pair<std::int64_t, std::int64_t>> got(nb.indices.begin(),
                                                            nb.indices.end());
        CHECK(got == brute);
    }
}

TEST_CASE("gwaa with w=0 equals the unbiased axial reference") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        const std::int64_t hg = 1 + static_cast<std::int64_t>(rng() % 6);
        const std::int64_t wg = 1 + static_cast<std::int64_t>(rng() % 6);
        const std::int64_t c = 4;
        auto q = random_tensor<double>({hg * wg, c}, rng);
        auto k = random_tensor<double>({hg * wg, c}, rng);
        auto v = random_tensor<double>({hg * wg, c}, rng);
        auto w0 = zeros<double>({1});
        auto fused = gwaa_attend(q, k, v, w0, hg, wg);
        auto ref = plain_axial_reference(*q, *k, *v, hg, wg);
        for (std::size_t i = 0; i < ref.size(); ++i) {
            CHECK(std::abs(fused->data[i] - ref[i]) < 1e-6);
        }
    }
}

TEST_CASE("gwaa attention weights are normalized and center-dominated for strongly negative w") {
    std::mt19937_64 rng(13);
    const std::int64_t hg = 4, wg = 4, c = 6;
    auto q = random_tensor<double>({hg * wg, c}, rng);
    auto k = random_tensor<double>({hg * wg, c}, rng);
    auto v = random_tensor<double>({hg * wg, c}, rng);
    auto w = make_tensor<double>({1}, {-10.0});
    std::vector<std::vector<double>> weights;
    gwaa_attend(q, k, v, w, hg, wg, &weights);
    for (std::int64_t i = 0; i < hg; ++i) {
        for (std::int64_t j = 0; j < wg; ++j) {
            const auto& row = weights[static_cast<std::size_t>(i * wg + j)];
            double sum = 0.0;
            for (auto p : row) {
                CHECK(p >= 0.0);
                sum += p;
            }
            CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
            // The center (distance 0) carries more mass than any other entry.
            const double center = row[static_cast<std::size_t>(j)];
            for (std::size_t a = 0; a < row.size(); ++a) {
                if (a == static_cast<std::size_t>(j)) continue;
                CHECK(center > row[a]);
            }
        }
    }
}

TEST_CASE("gwaa on a 1x1 grid ignores w") {
    std::mt19937_64 rng(14);
    ParameterStore<double> store;
    ParamInit<double> init(store, 21);
    GaussianAxialAttention<double> gsa(init, "gsa", 4, 4, 1);
    auto g = random_tensor<double>({4, 1, 1}, rng);
    auto base = gsa.forward(g);
    gsa.gauss_w->data[0] = 123.0;
    auto changed = gsa.forward(g);
    for (std::int64_t i = 0; i < base->size(); ++i)
        CHECK(base->data[i] == doctest::Approx(changed->data[i]).epsilon(1e-12));

    // Single key: softmax weight 1, so out = g . W_v . W_out.
    std::vector<double> vrow(4, 0.0), expect(4, 0.0);
    for (std::int64_t d = 0; d < 4; ++d)
        for (std::int64_t ch = 0; ch < 4; ++ch)
            vrow[d] += g->data[ch] * gsa.w_v->data[ch * 4 + d];
    for (std::int64_t d = 0; d < 4; ++d)
        for (std::int64_t ch = 0; ch < 4; ++ch) expect[ch] += vrow[d] * gsa.w_out->data[d * 4 + ch];
    for (std::int64_t ch = 0; ch < 4; ++ch)
        CHECK(base->data[ch] == doctest::Approx(expect[ch]).epsilon(1e-9));
}

TEST_CASE("gwaa gradients pass finite differences, including w") {
    std::mt19937_64 rng(15);
    ParameterStore<double> store;
    ParamInit<double> init(store, 23);
    GaussianAxialAttention<double> gsa(init, "gsa", 4, 2, 1);
    auto g = random_tensor<double>({4, 3, 2}, rng);
    auto report = grad_check(
        [&](ParameterStore<double>&) {
            auto y = gsa.forward(g);
            return ops::sum_all(ops::mul(y, y));
        },
        store, 1e-5);
    CHECK(report.max_rel_err < 1e-3);
    bool saw_w = false;
    for (const auto& e : report.per_param) saw_w = saw_w || e.name == "gsa.w";
    CHECK(saw_w);
}

TEST_CASE("lgg composite: shape, tile-constant global path, sub-quadratic MACs") {
    std::mt19937_64 rng(16);
    ParameterStore<float> store;
    ParamInit<float> init(store, 31);
    LggSa<float> lgg(init, "lgg", 8, 4, 1, AggregatorMode::kDynamic);

    auto x = random_tensor<float>({8, 16, 16}, rng);
    CHECK(lgg.forward(x)->shape == Shape{8, 16, 16});

    // Upsampled global component is constant within each p x p tile.
    auto up = ops::upsample_nearest(lgg.gsa.forward(lgg.agg.forward(lgg.lsa.forward(x))), 4);
    for (std::int64_t c = 0; c < 8; ++c)
        for (std::int64_t ti = 0; ti < 4; ++ti)
            for (std::int64_t tj = 0; tj < 4; ++tj) {
                const float v0 = up->data[(c * 16 + ti * 4) * 16 + tj * 4];
                for (std::int64_t u = 0; u < 4; ++u)
                    for (std::int64_t w = 0; w < 4; ++w)
                        CHECK(up->data[(c * 16 + ti * 4 + u) * 16 + tj * 4 + w] == v0);
            }

    // MAC growth per 4x token increase: LGG-SA <= 9x, full SA >= 14x, LSA ~4x.
    ParameterStore<float> store2;
    ParamInit<float> init2(store2, 33);
    const std::int64_t c = 16;
    LggSa<float> lgg16(init2, "lgg", c, 4, 1, AggregatorMode::kDynamic);
    LocalSelfAttention<float> lsa16(init2, "lsa", c, 4, 1);
    FullSelfAttention<float> full16(init2, "full", c);
    auto& fc = FlopCounter::instance();

    std::vector<std::uint64_t> lgg_macs, lsa_macs, full_macs;
    for (std::int64_t size : {16, 32, 64}) {
        auto input = random_tensor<float>({c, size, size}, rng);
        auto tokens = ops::channels_to_tokens(input);
        fc.reset();
        lgg16.forward(input);
        lgg_macs.push_back(fc.macs());
        fc.reset();
        lsa16.forward(input);
        lsa_macs.push_back(fc.macs());
        fc.reset();
        full16.forward(tokens);
        full_macs.push_back(fc.macs());
    }
    for (int hop = 0; hop < 2; ++hop) {
        const double lgg_ratio = double(lgg_macs[hop + 1]) / double(lgg_macs[hop]);
        const double lsa_ratio = double(lsa_macs[hop + 1]) / double(lsa_macs[hop]);
        const double full_ratio = double(full_macs[hop + 1]) / double(full_macs[hop]);
        CHECK(lgg_ratio <= 9.0);
        CHECK(lsa_ratio == doctest::Approx(4.0).epsilon(0.125));
        CHECK(full_ratio >= 14.0);
    }
}

TEST_CASE("lgg gradients pass finite differences, incl. aggregation scores") {
    std::mt19937_64 rng(18);
    ParameterStore<double> store;
    ParamInit<double> init(store, 35);
    LggSa<double> lgg(init, "lgg", 4, 2, 1, AggregatorMode::kDynamic);
    auto x = random_tensor<double>({4, 4, 4}, rng);
    auto report = grad_check(
        [&](ParameterStore<double>&) {
            auto y = lgg.forward(x);
            return ops::sum_all(ops::mul(y, y));
        },
        store, 1e-5);
    CHECK(report.max_rel_err < 1e-3);
    bool saw_scores = false;
    for (const auto& e : report.per_param) {
        if (e.name == "lgg.agg.score_w") saw_scores = e.max_rel_err < 1e-3;
    }
    CHECK(saw_scores);
}

TEST_CASE("multi-head local and axial attention pass finite differences") {
    std::mt19937_64 rng(19);
    ParameterStore<double> store;
    ParamInit<double> init(store, 37);
    LocalSelfAttention<double> lsa(init, "lsa", 8, 2, 2);
    GaussianAxialAttention<double> gsa(init, "gsa", 8, 2, 2);
    auto x = random_tensor<double>({8, 4, 4}, rng);
    auto report = grad_check(
        [&](ParameterStore<double>&) {
            auto y = gsa.forward(lsa.forward(x));
            return ops::sum_all(ops::mul(y, y));
        },
        store, 1e-5);
    CHECK(report.max_rel_err < 1e-3);
}

TEST_CASE("external attention: single slot, row normalization, independence") {
    std::mt19937_64 rng(20);
    ParameterStore<float> store;
    ParamInit<float> init(store, 41);
    ExternalAttention<float> ea1(init, "ea1", 5, 1);

    auto tokens = random_tensor<float>({7, 5}, rng);
    auto out = ea1.forward(tokens);
    CHECK(out->shape == Shape{7, 5});
    // S=1: every token attends to the single memory row with weight 1.
    std::vector<float> expect(5, 0.0f);
    for (std::int64_t c = 0; c < 5; ++c)
        for (std::int64_t d = 0; d < 10; ++d)
            expect[c] += ea1.m_v->data[d] * ea1.w_out->data[d * 5 + c];
    for (std::int64_t t = 0; t < 7; ++t)
        for (std::int64_t c = 0; c < 5; ++c)
            CHECK(out->data[t * 5 + c] == doctest::Approx(expect[c]).epsilon(1e-5));

    // Attention rows sum to one after the double normalization.
    ExternalAttention<float> ea(init, "ea", 5, 6);
    auto q = ops::matmul(tokens, ea.w_q);
    auto logits = ops::matmul(q, ops::transpose_last2(ea.m_k));
    auto rows = ops::l1_normalize_lastdim(
        ops::transpose_last2(ops::softmax_lastdim(ops::transpose_last2(logits))));
    for (std::int64_t t = 0; t < 7; ++t) {
        float sum = 0.0f;
        for (std::int64_t s = 0; s < 6; ++s) sum += rows->data[t * 6 + s];
        CHECK(std::abs(sum - 1.0f) < 1e-6f);
    }

    // Memories are parameters, not batch statistics: repeated evaluation of
    // the same sample is bit-identical regardless of what ran in between.
    auto first = ea.forward(tokens);
    ea.forward(random_tensor<float>({9, 5}, rng));
    auto again = ea.forward(tokens);
    CHECK(first->data == again->data);

    CHECK_THROWS_AS(ExternalAttention<float>(init, "bad", 5, 0), ConfigError);
}

TEST_CASE("external attention gradients pass finite differences, incl. memories") {
    std::mt19937_64 rng(22);
    ParameterStore<double> store;
    ParamInit<double> init(store, 43);
    ExternalAttention<double> ea(init, "ea", 4, 3);
    auto tokens = random_tensor<double>({6, 4}, rng);
    auto report = grad_check(
        [&](ParameterStore<double>&) {
            auto y = ea.forward(tokens);
            return ops::sum_all(ops::mul(y, y));
        },
        store, 1e-5);
    CHECK(report.max_rel_err < 1e-3);
    bool saw_mk = false, saw_mv = false;
    for (const auto& e : report.per_param) {
        if (e.name == "ea.m_k") saw_mk = true;
        if (e.name == "ea.m_v") saw_mv = true;
    }
    CHECK(saw_mk);
    CHECK(saw_mv);
}
