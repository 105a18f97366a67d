#include <doctest.h>

#include <cmath>
#include <random>

#include "icl/sparse_icl.hpp"

using namespace icl;

namespace {

BucketEmbedding onehot(double eps = 0.05, double clip = 8.0) { return {eps, clip, EmbedMode::OneHot}; }

ExampleBatch batch_of(std::size_t m, std::vector<std::vector<double>> x, const Tuple& f) {
    ExampleBatch b;
    b.m = m;
    b.x = std::move(x);
    for (const auto& row : b.x) b.y.push_back(label(f, row));
    return b;
}

bool contains(const std::vector<Tuple>& set, const Tuple& t) {
    return std::find(set.begin(), set.end(), t) != set.end();
}

SparseTask fixed_task(std::size_t m, Tuple f, Dist d = Dist::Gaussian) {
    SparseTask t;
    t.m = m;
    t.s = f.size();
    t.f_star = std::move(f);
    t.dist = d;
    t.tau = default_tau(t.s);
    return t;
}

}  // namespace

TEST_CASE("task generation") {
    std::mt19937_64 rng(3);
    const SparseTask t = make_task(6, 2, Dist::Gaussian, rng);
    CHECK(t.f_star.size() == 2);
    CHECK(t.f_star[0] < t.f_star[1]);
    CHECK(t.tau == 4.0);
    const ExampleBatch a = gen_examples(t, 20, 9), b = gen_examples(t, 20, 9);
    CHECK(a.x == b.x);
    for (std::size_t i = 0; i < a.n(); ++i) CHECK(a.y[i] == a.x[i][t.f_star[0]] + a.x[i][t.f_star[1]]);

    SparseTask bad = t;
    bad.tau = 3.0;
    CHECK_THROWS_AS(validate(bad), SparseError);
    CHECK_THROWS_AS(make_task(3, 4, Dist::Gaussian, rng), SparseError);

    const SparseTask r = make_task(5, 1, Dist::Rademacher, rng);
    const ExampleBatch rb = gen_examples(r, 10, 1);
    for (double v : rb.x[3]) CHECK(std::abs(v) == 1.0);
}

TEST_CASE("bucket embedding edges, clipping and NaN") {
    const BucketEmbedding e(0.5, 1.0, EmbedMode::OneHot);
    CHECK(e.buckets() == 4);
    CHECK(e.bucket(-1.0) == 0);
    CHECK(e.bucket(-0.51) == 0);
    CHECK(e.bucket(-0.5) == 1);
    CHECK(e.bucket(0.49) == 2);
    CHECK(e.bucket(1.0) == 3);
    CHECK(e.clip_count() == 0);
    CHECK(e.bucket(5.0) == 3);
    CHECK(e.clip_count() == 1);
    CHECK_THROWS_AS(e.bucket(std::nan("")), SparseError);
    CHECK(e.inner(0.1, 0.2) == 1.0);
    CHECK(e.inner(0.1, 0.6) == 0.0);
    CHECK_THROWS_AS(BucketEmbedding(0.0, 1.0, EmbedMode::OneHot), SparseError);
}

TEST_CASE("random projection width and near-orthogonality") {
    // 8 tau^2 ln(2 K^2 / delta) with K = 320, tau = 2, delta = 0.01.
    const double want = 8.0 * 4.0 * std::log(2.0 * 320.0 * 320.0 / 0.01);
    CHECK(projection_dim(2.0, 320, 0.01) == static_cast<std::size_t>(std::ceil(want)));
    CHECK(projection_dim(2.0, 320, 0.01) == 539);

    const BucketEmbedding e(0.05, 8.0, EmbedMode::RandomProjection, 2.0, 0.01, 5);
    CHECK(e.dim() == 539);
    const EmbeddingCheck c = check_embedding(e, 10000, 7);
    CHECK(c.ok);
    CHECK(c.max_far < 0.25);
    CHECK(c.max_self_err < 1e-12);
    CHECK(e.inner(1.0, 1.01) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(check_embedding(onehot(), 2000, 1).ok);
}

TEST_CASE("oracle_consistent on a hand-built batch") {
    const ExampleBatch b = batch_of(3, {{1, 2, 3}, {1, 5, 3}}, {0, 2});
    CHECK(oracle_consistent(b, 2, 2, 0.01) == std::vector<Tuple>{{0, 2}});
    // First example alone: 1+3 = 4 only.
    CHECK(oracle_consistent(b, 1, 2, 0.01) == std::vector<Tuple>{{0, 2}});
    CHECK(oracle_consistent(b, 0, 2, 0.01).size() == 3);
    CHECK(oracle_consistent(b, 2, 1, 0.01).empty());
    CHECK(binomial(8, 3) == 56);
    CHECK(binomial(3, 4) == 0);
    ExampleBatch wide;
    wide.m = 40;
    CHECK_THROWS_WITH_AS(oracle_consistent(wide, 0, 20, 0.1), "oracle scale exceeded", SparseError);
    CHECK_THROWS_AS(oracle_consistent(b, 3, 1, 0.01), SparseError);
}

TEST_CASE("1-sparse attention pattern") {
    const std::size_t m = 3;
    const OneSparseMech mech = build_1sparse(m, onehot());
    CHECK(mech.params.layers.size() == 4);
    const ExampleBatch b = batch_of(m, {{0.3, -1.2, 2.0}, {1.1, 0.4, -0.7}, {-2.2, 1.6, 0.9}}, {1});
    const OneSparseRun r = run_1sparse(mech, b);
    const auto& tr = r.state.trace.layers;
    REQUIRE(tr.size() == 4);
    const std::size_t stride = m + 1;
    // Layer 1: coordinate tokens attend only to themselves.
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t j = 0; j < m; ++j) CHECK(tr[0][0](t * stride + j, t * stride + j) == 1.0);
    // Layer 2: label t spreads 1/(t+1) over the labels so far.
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t u = 0; u <= t; ++u)
            CHECK(tr[1][0](t * stride + m, u * stride + m) == doctest::Approx(1.0 / (t + 1.0)));
    // Layer 3: selected coordinate splits 1/2, others 1/(1+e) on the label.
    const double e = std::exp(1.0);
    for (std::size_t t = 1; t < 3; ++t)
        for (std::size_t j = 0; j < m; ++j) {
            const double want = j == r.f[t - 1] ? 0.5 : 1.0 / (1.0 + e);
            CHECK(tr[2][0](t * stride + j, (t - 1) * stride + m) == doctest::Approx(want).epsilon(1e-12));
        }
    CHECK(r.f == std::vector<std::size_t>{1, 1, 1});
    CHECK(r.pred[0] == 0.0);
    CHECK(r.pred[1] == 0.4);
    CHECK(r.pred[2] == 1.6);
    CHECK(r.loss[1] == 0.0);
}

TEST_CASE("1-sparse tie goes to the lowest index") {
    const OneSparseMech mech = build_1sparse(2, onehot());
    const ExampleBatch b = batch_of(2, {{0.7, 0.7}}, {1});
    const OneSparseRun r = run_1sparse(mech, b);
    CHECK(r.state.o1[0](0) == r.state.o1[0](1));
    CHECK(r.f[0] == 0);
}

TEST_CASE("1-sparse tracks the brute-force hypothesis set") {
    for (Dist d : {Dist::Gaussian, Dist::Rademacher}) {
        const BucketEmbedding e = onehot(0.05, default_clip(d, 1));
        const OneSparseMech mech = build_1sparse(5, e);
        for (std::uint64_t seed = 0; seed < 10; ++seed) {
            auto rng = substream(seed, 1, 0);
            const SparseTask t = make_task(5, 1, d, rng);
            const ExampleBatch b = gen_examples(t, 12, seed);
            const OneSparseRun r = run_1sparse(mech, b);
            CHECK(r.pred[0] == 0.0);
            for (std::size_t i = 0; i < b.n(); ++i) {
                const auto set = oracle_consistent(b, i + 1, 1, t.eps);
                CHECK(contains(set, Tuple{r.f[i]}));
                if (i + 1 < b.n()) CHECK(r.pred[i + 1] == b.x[i + 1][r.f[i]]);
                if (set.size() == 1 && i + 1 < b.n()) CHECK(r.loss[i + 1] == 0.0);
            }
        }
    }
}

TEST_CASE("property: first-layer margin of the true coordinate") {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> lvl(-2, 2);
    for (std::size_t m = 2; m <= 8; ++m) {
        const OneSparseMech mech = build_1sparse(m, onehot(0.05, 3.0));
        const double bound = std::exp(1.0) / (4.0 * (m + 1.0));
        for (int k = 0; k < 200; ++k) {
            // Few distinct levels so many coordinates share a bucket.
            std::vector<double> x(m);
            for (auto& v : x) v = 0.5 * lvl(rng);
            const std::size_t f = std::uniform_int_distribution<std::size_t>(0, m - 1)(rng);
            const ExampleBatch b = batch_of(m, {x}, {f});
            const Vector o1 = run_1sparse(mech, b).state.o1[0];
            for (std::size_t j = 0; j < m; ++j)
                if (std::abs(x[j] - x[f]) > 0.05) CHECK(o1(f) - o1(j) >= bound - 1e-9);
        }
    }
}

TEST_CASE("deflation") {
    const BucketEmbedding e(0.05, 8.0, EmbedMode::RandomProjection, 4.0, 0.01, 3);
    const std::vector<double> x{0.5, -1.3, 2.2, 0.9};
    std::vector<Vector> x1;
    for (double v : x) x1.push_back(e.embed(v));
    const Vector y1 = compositional_label(x1, {1, 2});

    double comp = 0.0;
    CHECK((deflate(y1, {}, x1, &comp) - y1).norm() < 1e-12);
    CHECK(comp == 1.0);
    const Vector d = deflate(y1, {1}, x1, &comp);
    CHECK(comp == 0.5);
    CHECK((d - x1[2]).norm() < 1e-12);
    CHECK(x1[2].dot(d) >= 0.75);
    CHECK(std::abs(x1[0].dot(d)) <= 0.25);
    CHECK(std::abs(x1[3].dot(d)) <= 0.25);
    CHECK_THROWS_AS(deflate(y1, {1, 1}, x1), SparseError);
    CHECK_THROWS_AS(deflate(y1, {7}, x1), SparseError);
}

TEST_CASE("s-sparse recovery, monotone rounds, and stacked layers") {
    for (Dist d : {Dist::Gaussian, Dist::Rademacher}) {
        for (std::size_t s = 1; s <= 3; ++s) {
            const BucketEmbedding e = onehot(0.05, default_clip(d, s));
            for (std::uint64_t seed = 0; seed < 6; ++seed) {
                auto rng = substream(seed, 2, s);
                const SparseTask t = make_task(6, s, d, rng);
                const ExampleBatch b = gen_examples(t, 128, seed);
                const SsparseResult r = run_ssparse(t, b, e);
                CHECK(r.C.size() == s);
                CHECK(r.bijection_ok);
                CHECK(contains(oracle_consistent(b, b.n(), s, t.eps), r.C));
                for (std::size_t k = 0; k < s; ++k)
                    for (std::size_t i = 0; i < b.n(); ++i) {
                        const Tuple& before = r.rounds[k].C_before[i];
                        CHECK(std::find(before.begin(), before.end(), r.rounds[k].winner[i]) == before.end());
                        if (k + 1 < s) {
                            const Tuple& after = r.rounds[k + 1].C_before[i];
                            for (std::size_t j : before)
                                CHECK(std::find(after.begin(), after.end(), j) != after.end());
                        }
                    }
                if (s <= 2 && seed < 3) {
                    const StackedRun st = run_ssparse_stacked(t, b, e);
                    CHECK(st.layers == 3 * s);
                    CHECK(st.C_prefix == r.C_prefix);
                }
            }
        }
    }
}

TEST_CASE("s-sparse input validation") {
    const SparseTask t = fixed_task(3, {0, 2});
    const ExampleBatch b = batch_of(3, {{1.0, 2.0, 3.0}}, {0, 2});
    ExampleBatch narrow = batch_of(2, {{1.0, 2.0}}, {0});
    CHECK_THROWS_AS(run_ssparse(t, narrow, onehot()), SparseError);
    CHECK_THROWS_AS(run_ssparse(t, ExampleBatch{3, {}, {}}, onehot()), SparseError);
    CHECK(run_ssparse(t, b, onehot()).C == Tuple{0, 2});
}

TEST_CASE("vector bit recovery") {
    const BucketEmbedding e = onehot();
    const BitRecovery one = vector_bit_recovery(batch_of(1, {{0.3}, {-1.0}}, {0}), e, 3.0, 50.0);
    CHECK(one.j == 0);
    CHECK(one.rounds.empty());

    const ExampleBatch b = batch_of(4, {{0.1, 0.2, 0.7, -0.4}, {1.0, -1.0, 0.5, 0.2}}, {2});
    const BitRecovery r = vector_bit_recovery(b, e, 9.0, 50.0);
    CHECK(r.j == 2);
    REQUIRE(r.rounds.size() == 2);
    CHECK(r.rounds[0].bit == 1);
    CHECK(r.rounds[0].value == 1);
    CHECK(r.rounds[1].value == 0);
    CHECK(r.consistent == std::vector<double>{0, 0, 1, 0});
    CHECK_THROWS_AS(vector_bit_recovery(b, e, 8.0, 50.0), SparseError);

    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        auto rng = substream(seed, 4, 0);
        const std::size_t m = std::size_t{1} << (1 + seed % 3);
        const SparseTask t = make_task(m, 1, seed % 2 ? Dist::Rademacher : Dist::Gaussian, rng);
        const ExampleBatch vb = gen_examples(t, 6, seed);
        const BitRecovery v = vector_bit_recovery(vb, onehot(0.05, 8.0), 2.0 * m + 1.0, 50.0);
        CHECK(contains(oracle_consistent(vb, vb.n(), 1, t.eps), Tuple{v.j}));
    }
}

TEST_CASE("risk evaluation and sample sizes") {
    // ceil(s ln(m/eps) / eps) at m = 8, eps = 0.05.
    CHECK(risk_sample_size(1.0, 1, 8, 0.05) == static_cast<std::size_t>(std::ceil(std::log(160.0) / 0.05)));
    CHECK(risk_sample_size(1.0, 1, 8, 0.05) == 102);
    CHECK(risk_sample_size(1.0, 2, 8, 0.05) == 204);
    CHECK(disagreement_bound(8, 0.1, 102) == doctest::Approx(20.0 * std::log(80.0) / 306.0));

    const SparseTask t = fixed_task(4, {1});
    const RiskEstimate good = risk_eval({1}, t, 500, 1);
    CHECK(good.mean == 0.0);
    CHECK(good.disagree == 0.0);
    const RiskEstimate bad = risk_eval({2}, t, 4000, 1);
    // E|X1 - X2| for independent standard normals is 2/sqrt(pi).
    CHECK(bad.mean == doctest::Approx(2.0 / std::sqrt(M_PI)).epsilon(4.0 * bad.se / bad.mean));
    CHECK_THROWS_AS(risk_eval({9}, t, 10, 1), SparseError);
}
