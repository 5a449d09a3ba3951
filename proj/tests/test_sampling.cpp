#include <catch2/catch_amalgamated.hpp>

#include "respeak/sampling.hpp"

using namespace respeak;

namespace {

// independent nucleus oracle: sort a copy with indices, prefix scan
Dist nucleus_oracle(const Dist& p, double top_p) {
    std::vector<std::pair<double, size_t>> tagged;
    for (size_t i = 0; i < p.size(); ++i) tagged.push_back({p[i], i});
    std::stable_sort(tagged.begin(), tagged.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    double total = 0.0;
    for (double v : p) total += v;
    Dist out(p.size(), 0.0);
    double cum = 0.0;
    for (const auto& [v, i] : tagged) {
        out[i] = v;
        cum += v / total;
        if (cum >= top_p - 1e-15) break;
    }
    double kept = 0.0;
    for (double v : out) kept += v;
    for (auto& v : out) v /= kept;
    return out;
}

Dist random_dist(size_t n, Rng& rng) {
    Dist p(n);
    double z = 0.0;
    for (auto& v : p) {
        v = rng.uniform();
        z += v;
    }
    for (auto& v : p) v /= z;
    return p;
}

} // namespace

TEST_CASE("cfg_mix worked examples") {
    SECTION("gamma=1 is the exact identity") {
        Dist p{0.31, 0.69};
        Dist u{0.9, 0.1};
        CHECK(cfg_mix(p, u, 1.0) == p);
    }
    SECTION("(0.8,0.2) vs (0.5,0.5) at gamma=1.5 -> (0.95, 0.05)") {
        Dist q = cfg_mix({0.8, 0.2}, {0.5, 0.5}, 1.5);
        REQUIRE(q.size() == 2);
        CHECK(std::abs(q[0] - 0.95) < 1e-12);
        CHECK(std::abs(q[1] - 0.05) < 1e-12);
    }
    SECTION("clamping: (0.1,0.9) vs (0.9,0.1) at gamma=1.5 -> (0, 1)") {
        Dist q = cfg_mix({0.1, 0.9}, {0.9, 0.1}, 1.5);
        CHECK(std::abs(q[0] - 0.0) < 1e-12);
        CHECK(std::abs(q[1] - 1.0) < 1e-12);
    }
    SECTION("support mismatch rejected") { CHECK_THROWS(cfg_mix({1.0}, {0.5, 0.5}, 1.5)); }
    SECTION("fallback to the conditional when all mass clamps away") {
        // gamma*p + (1-gamma)*u == 0 in every slot
        Dist q = cfg_mix({0.5, 0.5}, {1.0, 1.0}, 2.0);
        CHECK(q == Dist{0.5, 0.5});
    }
}

TEST_CASE("cfg_mix always yields a valid distribution") {
    Rng rng(9);
    for (int rep = 0; rep < 10000; ++rep) {
        const size_t n = 1 + rng.uniform_int(32);
        Dist p = random_dist(n, rng);
        Dist u = random_dist(n, rng);
        const double gamma = rng.uniform(0.0, 3.0);
        Dist q = cfg_mix(p, u, gamma);
        double z = 0.0;
        for (double v : q) {
            REQUIRE(v >= 0.0);
            z += v;
        }
        REQUIRE(std::abs(z - 1.0) < 1e-9);
    }
}

TEST_CASE("nucleus truncation worked example") {
    // (0.5, 0.3, 0.15, 0.05), p=0.8 -> support {0,1} with (0.625, 0.375)
    Dist q = nucleus_truncate({0.5, 0.3, 0.15, 0.05}, 0.8);
    CHECK(std::abs(q[0] - 0.625) < 1e-12);
    CHECK(std::abs(q[1] - 0.375) < 1e-12);
    CHECK(q[2] == 0.0);
    CHECK(q[3] == 0.0);
}

TEST_CASE("nucleus equals the brute-force oracle on random distributions") {
    Rng rng(10);
    for (int rep = 0; rep < 2000; ++rep) {
        const size_t n = 1 + rng.uniform_int(64);
        Dist p = random_dist(n, rng);
        const double top_p = rng.uniform(0.05, 1.0);
        Dist mine = nucleus_truncate(p, top_p);
        Dist oracle = nucleus_oracle(p, top_p);
        for (size_t i = 0; i < n; ++i) {
            REQUIRE((mine[i] == 0.0) == (oracle[i] == 0.0)); // same support
            REQUIRE(std::abs(mine[i] - oracle[i]) < 1e-12);
        }
    }
}

TEST_CASE("nucleus edge cases") {
    SECTION("top_p=1 keeps the distribution") {
        Dist p{0.25, 0.5, 0.25};
        Dist q = nucleus_truncate(p, 1.0);
        for (size_t i = 0; i < p.size(); ++i) CHECK(std::abs(q[i] - p[i]) < 1e-12);
    }
    SECTION("one-hot always samples that token") {
        Rng rng(4);
        SamplerParams sp;
        sp.top_p = 0.5;
        for (int i = 0; i < 20; ++i) CHECK(nucleus_sample({0.0, 0.0, 1.0, 0.0}, sp, rng) == 2);
    }
    SECTION("all-zero distribution rejected") {
        Rng rng(4);
        SamplerParams sp;
        CHECK_THROWS(nucleus_sample({0.0, 0.0, 0.0}, sp, rng));
    }
    SECTION("temperature=1 is a no-op") {
        Dist p{0.3, 0.7};
        CHECK(apply_temperature(p, 1.0) == p);
    }
    SECTION("low temperature sharpens") {
        Dist q = apply_temperature({0.4, 0.6}, 0.5);
        CHECK(q[1] > 0.6);
        CHECK(std::abs(q[0] + q[1] - 1.0) < 1e-12);
    }
    SECTION("invalid sampler params rejected") {
        SamplerParams bad;
        bad.top_p = 0.0;
        CHECK_THROWS(bad.validate());
        bad.top_p = 0.5;
        bad.temperature = 0.0;
        CHECK_THROWS(bad.validate());
    }
}

TEST_CASE("sampling respects the truncated distribution statistically") {
    Rng rng(11);
    SamplerParams sp;
    sp.top_p = 0.8;
    int counts[4] = {0, 0, 0, 0};
    const int n = 20000;
    for (int i = 0; i < n; ++i) counts[nucleus_sample({0.5, 0.3, 0.15, 0.05}, sp, rng)]++;
    CHECK(counts[2] == 0);
    CHECK(counts[3] == 0);
    CHECK(std::abs(counts[0] / static_cast<double>(n) - 0.625) < 0.02);
    CHECK(std::abs(counts[1] / static_cast<double>(n) - 0.375) < 0.02);
}

TEST_CASE("random unconditional sequences") {
    Lexicon lex;
    lex.entries["ab"] = {"a", "b"};
    PhonemeVocab vocab = PhonemeVocab::build(lex);
    Rng rng(12);

    SECTION("length preserved") {
        for (int len : {1, 5, 40}) {
            PhonemeSeq y(len, 1);
            CHECK(random_unconditional(y, vocab, rng).size() == static_cast<size_t>(len));
        }
    }
    SECTION("seeded determinism") {
        PhonemeSeq y(16, 1);
        Rng r1(99), r2(99);
        CHECK(random_unconditional(y, vocab, r1) == random_unconditional(y, vocab, r2));
    }
    SECTION("uniform marginal over the regular inventory") {
        PhonemeSeq y(1, 1);
        std::vector<int64_t> counts(vocab.size(), 0);
        const int n = 100000;
        for (int i = 0; i < n; ++i) counts[random_unconditional(y, vocab, rng)[0]]++;
        CHECK(counts[vocab.boundary_id()] == 0);
        const double expect = 1.0 / static_cast<double>(vocab.num_regular());
        for (int64_t id = 1; id < vocab.size(); ++id)
            CHECK(std::abs(counts[id] / static_cast<double>(n) - expect) < 0.02);
    }
    SECTION("empty input rejected") { CHECK_THROWS(random_unconditional({}, vocab, rng)); }
}
