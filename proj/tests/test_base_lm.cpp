#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "icl/base_lm.hpp"

using namespace icl;

namespace {

// ids: 2 = a, 3 = b in a vocabulary that also holds <begin>/<end>.
constexpr int A = 2;
constexpr int B = 3;

std::vector<double> conditional_row(const NGramModel& m, std::span<const int> ctx) {
    std::vector<double> row;
    for (std::size_t t = 0; t < m.vocab_size; ++t) row.push_back(std::exp(log_cond(m, static_cast<int>(t), ctx)));
    return row;
}

}  // namespace

TEST_CASE("unigram hand counts") {
    // Only the two content symbols exist here, ids 0 and 1.
    auto m = fit_ngram({{0, 0, 1}}, 1, 1.0, 2, 1e-6, -1);
    CHECK(std::exp(log_cond(m, 0, {})) == doctest::Approx(0.6).epsilon(1e-14));
    CHECK(log_cond(m, 0, {}) == doctest::Approx(std::log(0.6)).epsilon(1e-14));
}

TEST_CASE("unigram with <begin> targets skipped") {
    auto m = fit_ngram({{0, A, A, B}}, 1, 1.0, 4);
    // counts a=2 b=1, total 3, |V|=4
    CHECK(std::exp(log_cond(m, A, {})) == doctest::Approx(3.0 / 7.0));
    CHECK(std::exp(log_cond(m, 0, {})) == doctest::Approx(1.0 / 7.0));
}

TEST_CASE("symmetric corpus gives equal unigram mass") {
    auto m = fit_ngram({{0, 1}, {1, 0}}, 1, 1.0, 2, 1e-6, -1);
    CHECK(std::exp(log_cond(m, 0, {})) == doctest::Approx(0.5));
    CHECK(log_cond(m, 1, {}) == doctest::Approx(std::log(0.5)));
}

TEST_CASE("bigram hand counts") {
    // a b a b a with a=0 b=1 and no framing: context a is followed by b twice.
    const int a = 0, b = 1;
    auto m = fit_ngram({{a, b, a, b, a}}, 2, 1.0, 2, 1e-6, -1);
    const TokenSeq ctx{a};
    CHECK(std::exp(log_cond(m, b, ctx)) == doctest::Approx(0.75).epsilon(1e-14));
    CHECK(std::exp(log_cond(m, a, ctx)) == doctest::Approx(0.25).epsilon(1e-14));
    // Context b is followed by a twice.
    const TokenSeq cb{b};
    CHECK(std::exp(log_cond(m, a, cb)) == doctest::Approx(0.75));
    // The padded start context is followed by a once.
    CHECK(std::exp(log_cond(m, a, {})) == doctest::Approx(2.0 / 3.0));
}

TEST_CASE("higher order uses the last order-1 tokens and pads with <begin>") {
    auto m = fit_ngram({{0, A, B, A, B, 1}}, 3, 0.5, 4);
    const TokenSeq full{A, A, B};
    const TokenSeq tail{A, B};
    CHECK(log_cond(m, A, full) == log_cond(m, A, tail));
    // context (<begin>, a) seen once followed by b
    const TokenSeq one{A};
    CHECK(std::exp(log_cond(m, B, one)) == doctest::Approx(1.5 / 3.0));
}

TEST_CASE("fit_ngram argument errors") {
    CHECK_THROWS_AS(fit_ngram({}, 1, 1.0, 2), LmError);
    CHECK_THROWS_AS(fit_ngram({{}}, 1, 1.0, 2), LmError);
    CHECK_THROWS_AS(fit_ngram({{0}}, 0, 1.0, 2), LmError);
    CHECK_THROWS_AS(fit_ngram({{0}}, 1, 0.0, 2), LmError);
    CHECK_THROWS_AS(fit_ngram({{5}}, 1, 1.0, 2), LmError);
    auto m = fit_ngram({{0, 1}}, 2, 1.0, 2);
    CHECK_THROWS_AS(log_cond(m, 2, {}), LmError);
    CHECK_THROWS_AS(log_cond(m, -1, {}), LmError);
}

TEST_CASE("chunk_logprob follows the chain rule") {
    auto m = fit_ngram({{0, A, B, 1}, {0, B, B, A, 1}, {0, 1}}, 2, 1.0, 4);
    const TokenSeq none;
    const TokenSeq ca{A};
    const TokenSeq cb{B};
    const TokenSeq beg{0};
    CHECK(chunk_logprob(m, {}) == doctest::Approx(log_cond(m, 1, beg)));
    CHECK(chunk_logprob(m, ca) == doctest::Approx(log_cond(m, A, none) + log_cond(m, 1, ca)));
    const TokenSeq ab{A, B};
    CHECK(chunk_logprob(m, ab) ==
          doctest::Approx(log_cond(m, A, beg) + log_cond(m, B, ca) + log_cond(m, 1, cb)));
    CHECK(prefix_logprob(m, ab) == doctest::Approx(log_cond(m, A, beg) + log_cond(m, B, ca)));

    // Counts by hand: contexts begin->{a,b,end}, a->{b,end}, b->{b,a,end}.
    // p(end|<begin>) = (1+1)/(3+4)
    CHECK(chunk_logprob(m, {}) == doctest::Approx(std::log(2.0 / 7.0)));
    // p(a|<begin>) p(b|a) p(end|b) = 2/7 * 2/6 * 2/7
    CHECK(chunk_logprob(m, ab) == doctest::Approx(std::log(2.0 / 7.0 * 2.0 / 6.0 * 2.0 / 7.0)));
}

TEST_CASE("empty chunk under a unigram is a single end emission") {
    auto m = fit_ngram({{0, A, 1}}, 1, 1.0, 4);
    // end count 1 of 2 targets: q = 2/6
    CHECK(chunk_logprob(m, {}) == doctest::Approx(std::log(2.0 / 6.0)));
}

TEST_CASE("conditional oracle cases") {
    auto m = fit_ngram({{0, A, B, 1}, {0, B, A, 1}}, 1, 1.0, 4, 1e-4);
    const TokenSeq z{0, A, B, A};
    CHECK(cond_prob_oracle(m, {z, 2, 0, true}) == std::log(1e-4));
    CHECK(cond_prob_oracle(m, {z, 2, 2, false}) == 0.0);
    CHECK(cond_prob_oracle(m, {z, 2, 1, false}) == log_cond(m, B, {}));

    auto m2 = fit_ngram({{0, A, B, 1}, {0, B, A, 1}}, 2, 1.0, 4);
    const TokenSeq b1{B};
    CHECK(cond_prob_oracle(m2, {z, 3, 1, false}) == log_cond(m2, A, b1));
    CHECK(cond_prob_oracle(m2, {z, 3, 2, false}) == log_cond(m2, A, {}));
    CHECK_THROWS_AS(cond_prob_oracle(m2, {z, 1, 2, false}), LmError);
}

TEST_CASE("chunk_logprob equals oracle calls along the framed chunk") {
    auto m = fit_ngram({{0, A, B, B, 1}, {0, B, A, 1}}, 2, 0.3, 4);
    const TokenSeq chunk{B, A, A, B};
    TokenSeq framed{0};
    framed.insert(framed.end(), chunk.begin(), chunk.end());
    framed.push_back(1);
    double s = 0.0;
    for (std::size_t i = 1; i < framed.size(); ++i) s += cond_prob_oracle(m, {framed, i, 0, false});
    CHECK(s == doctest::Approx(chunk_logprob(m, chunk)).epsilon(1e-15));
}

TEST_CASE("property: conditionals normalize and respect the smoothing floor") {
    std::mt19937_64 rng(17);
    const std::size_t V = 9;
    std::uniform_int_distribution<int> tok(2, static_cast<int>(V) - 1);
    std::vector<TokenSeq> corpus;
    for (int d = 0; d < 40; ++d) {
        TokenSeq doc{0};
        for (int t = 0; t < 12; ++t) doc.push_back(tok(rng));
        doc.push_back(1);
        corpus.push_back(doc);
    }
    for (int order : {1, 2, 3}) {
        auto m = fit_ngram(corpus, order, 0.7, V);
        double max_total = 0.0;
        for (const auto& [k, t] : m.totals) max_total = std::max(max_total, t);
        const double floor = std::log(0.7 / (0.7 * V + max_total));
        for (int c = 0; c < 100; ++c) {
            TokenSeq ctx;
            const int len = static_cast<int>(rng() % 4);
            for (int t = 0; t < len; ++t) ctx.push_back(tok(rng));
            double s = 0.0;
            for (double p : conditional_row(m, ctx)) {
                s += p;
                CHECK(std::log(p) >= floor - 1e-12);
            }
            CHECK(std::abs(s - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("corpus reader frames each line") {
    const std::string path = "test_base_lm_corpus.txt";
    {
        std::ofstream f(path);
        f << "x y\n\n  y  \n";
    }
    Vocab v;
    auto docs = read_corpus(path, v);
    std::remove(path.c_str());
    REQUIRE(docs.size() == 2);
    CHECK(docs[0] == TokenSeq{0, v.id("x"), v.id("y"), 1});
    CHECK(docs[1] == TokenSeq{0, v.id("y"), 1});
    CHECK(v.size() == 4);
    CHECK_THROWS_AS(read_corpus("/nonexistent/corpus", v), LmError);
}

TEST_CASE("vocab delimiters") {
    Vocab v;
    const int l = v.add("/");
    const int e = v.add(";");
    v.set_delims({e, l, l});
    CHECK(v.delims() == std::vector<int>{l, e});
    CHECK(v.is_delim(l));
    CHECK_FALSE(v.is_delim(0));
    CHECK_THROWS_AS(v.set_delims({0}), LmError);
    CHECK_THROWS_AS(v.set_delims({99}), LmError);
    CHECK_THROWS_AS(v.id("zz"), LmError);
    CHECK_THROWS_AS(v.add("a b"), LmError);
}

TEST_CASE("model TSV round trip") {
    Vocab v;
    const int x = v.add("x");
    const int y = v.add("y");
    auto m = fit_ngram({{0, x, y, x, 1}, {0, y, 1}}, 3, 0.25, v.size(), 1e-5);
    const std::string path = "test_base_lm_model.tsv";
    save_model(path, m, v);
    auto lm = load_model(path);
    std::remove(path.c_str());
    CHECK(lm.model.order == 3);
    CHECK(lm.model.alpha == 0.25);
    CHECK(lm.model.nu == 1e-5);
    CHECK(lm.vocab.size() == v.size());
    CHECK(lm.model.counts == m.counts);
    const TokenSeq ctx{x, y};
    for (int t = 0; t < 4; ++t) CHECK(log_cond(lm.model, t, ctx) == log_cond(m, t, ctx));

    {
        std::ofstream f(path);
        f << "#ngram\torder=2\talpha=1\tnu=1e-6\n#vocab\t<begin>\t<end>\tq\nq\tunknown\t1\n";
    }
    CHECK_THROWS_AS(load_model(path), LmError);
    {
        std::ofstream f(path);
        f << "garbage\n";
    }
    CHECK_THROWS_AS(load_model(path), LmError);
    std::remove(path.c_str());
}
