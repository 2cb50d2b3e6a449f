// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <boost/multiprecision/cpp_int.hpp>
#include <boost/multiprecision/miller_rabin.hpp>

#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "fetchlab/attacks.hpp"
#include "fetchlab/frontend.hpp"
#include "fetchlab/listing.hpp"
#include "fetchlab/rng.hpp"
#include "fetchlab/timing.hpp"

using namespace fetchlab;
using attacks::BigInt;
using attacks::Decision;

namespace {

BigInt random_odd_bigint(Rng& rng, int bits) {
    BigInt v = 0;
    for (int got = 0; got < bits; got += 64) {
        v <<= 64;
        v |= BigInt(rng.next_u64());
    }
    v >>= (64 - bits % 64) % 64;
    boost::multiprecision::bit_set(v, static_cast<unsigned>(bits - 1));
    v |= 1;
    return v;
}

} // namespace

TEST_CASE("gcd matches the standard library on a dense small grid") {
    for (std::uint64_t a = 1; a < 300; ++a)
        for (std::uint64_t b = 1; b < 300; ++b)
            CHECK(attacks::binary_gcd_reference(a, b).gcd == std::gcd(a, b));
}

TEST_CASE("gcd matches std::gcd on random 64-bit operands") {
    Rng rng(0x67636431ULL);
    for (int i = 0; i < 4000; ++i) {
        std::uint64_t a = rng.next_u64() | 1ULL;
        std::uint64_t b = rng.next_u64();
        if (b == 0) b = 7;
        CHECK(attacks::binary_gcd_reference(a, b).gcd == std::gcd(a, b));
    }
    CHECK_THROWS_AS(attacks::binary_gcd_reference<std::uint64_t>(0, 5),
                    std::invalid_argument);
    CHECK_THROWS_AS(attacks::binary_gcd_reference<std::uint64_t>(5, 0),
                    std::invalid_argument);
}

TEST_CASE("gcd matches boost on random 256-bit operands") {
    Rng rng(0x67636432ULL);
    for (int i = 0; i < 150; ++i) {
        BigInt a = random_odd_bigint(rng, 256);
        BigInt b = random_odd_bigint(rng, 256) - 1;  // one even operand
        CHECK(attacks::binary_gcd_reference(a, b).gcd == boost::multiprecision::gcd(a, b));
    }
}

TEST_CASE("the worked 17/3120 trace comes out step for step") {
    attacks::GcdResult<std::uint64_t> r = attacks::binary_gcd_reference<std::uint64_t>(17, 3120);
    CHECK(r.gcd == 1);
    CHECK(r.trace.initial_common_shift == 0);
    REQUIRE(r.trace.iterations.size() == 5);

    const unsigned tz_a[] = {0, 0, 0, 2, 0};
    const unsigned tz_b[] = {4, 0, 2, 0, 2};
    const Decision dir[] = {Decision::not_taken, Decision::not_taken, Decision::taken,
                            Decision::not_taken, Decision::taken};
    for (int i = 0; i < 5; ++i) {
        CHECK(r.trace.iterations[i].tz_a == tz_a[i]);
        CHECK(r.trace.iterations[i].tz_b == tz_b[i]);
        CHECK(r.trace.iterations[i].direction == dir[i]);
    }

    // gcd(1, 1) takes exactly one subtraction.
    CHECK(attacks::binary_gcd_reference<std::uint64_t>(1, 1).trace.iterations.size() == 1);
}

TEST_CASE("iteration counts scale linearly with the operand width") {
    Rng rng(0x69746572ULL);
    double total = 0.0;
    const int trials = 60;
    for (int i = 0; i < trials; ++i) {
        BigInt a = random_odd_bigint(rng, 256);
        BigInt b = random_odd_bigint(rng, 256);
        total += static_cast<double>(attacks::binary_gcd_reference(a, b).trace.iterations.size());
    }
    // Subtract-and-shift steps settle near 0.706 per operand bit.
    double mean = total / trials;
    CHECK(mean > 0.55 * 256);
    CHECK(mean < 0.85 * 256);
}

TEST_CASE("a classified trace replays back to the original operands") {
    Rng rng(0x72656361ULL);
    for (int i = 0; i < 100; ++i) {
        BigInt phi = random_odd_bigint(rng, 96) - 1;  // totients are even
        BigInt e = 65537;
        attacks::GcdResult<BigInt> r = attacks::binary_gcd_reference(e, phi);
        if (r.gcd != 1) continue;
        std::optional<BigInt> back = attacks::reconstruct_phi(r.trace, e);
        REQUIRE(back.has_value());
        CHECK(*back == phi);

        // Operand order must not matter.
        attacks::GcdResult<BigInt> swapped = attacks::binary_gcd_reference(phi, e);
        std::optional<BigInt> back2 = attacks::reconstruct_phi(swapped.trace, e);
        REQUIRE(back2.has_value());
        CHECK(*back2 == phi);

        // A wrong public exponent fails the end check instead of lying.
        CHECK_FALSE(attacks::reconstruct_phi(r.trace, BigInt(65539)).has_value());
    }
}

TEST_CASE("replay honours a non-trivial expected gcd") {
    attacks::GcdResult<std::uint64_t> r = attacks::binary_gcd_reference<std::uint64_t>(51, 9360);
    CHECK(r.gcd == 3);

    attacks::GcdTrace big_trace;
    big_trace.initial_common_shift = r.trace.initial_common_shift;
    big_trace.iterations = r.trace.iterations;
    std::optional<BigInt> back = attacks::reconstruct_phi(big_trace, BigInt(51), BigInt(3));
    REQUIRE(back.has_value());
    CHECK(*back == 9360);

    attacks::GcdTrace bad = big_trace;
    bad.iterations[0].direction = Decision::unclassified;
    CHECK_THROWS_AS(attacks::reconstruct_phi(bad, BigInt(51), BigInt(3)),
                    std::invalid_argument);
}

TEST_CASE("the 3233 key recovers from its totient") {
    attacks::RsaKey key = attacks::recover_rsa_key(3233, 17, 3120);
    CHECK(key.p == 61);
    CHECK(key.q == 53);
    CHECK(key.d == 413);
    CHECK(key.n == 3233);
    CHECK(key.phi == 3120);

    CHECK_FALSE(attacks::try_recover_rsa_key(3233, 17, 3122).has_value());
    CHECK_THROWS_AS(attacks::recover_rsa_key(3233, 17, 3122), std::invalid_argument);
}

TEST_CASE("generated keys are internally consistent") {
    Rng rng(0x6b657967ULL);
    for (int i = 0; i < 6; ++i) {
        attacks::RsaKeygen kg = attacks::generate_rsa_key(96, 65537, rng);
        CHECK(kg.p * kg.q == kg.n);
        CHECK(kg.p >= kg.q);
        CHECK(kg.p != kg.q);
        CHECK(kg.phi == (kg.p - 1) * (kg.q - 1));

        std::mt19937_64 witness(42);
        CHECK(boost::multiprecision::miller_rabin_test(kg.p, 32, witness));
        CHECK(boost::multiprecision::miller_rabin_test(kg.q, 32, witness));

        BigInt lambda = (kg.p - 1) * (kg.q - 1) /
                        boost::multiprecision::gcd(kg.p - 1, kg.q - 1);
        CHECK((kg.d * kg.e) % lambda == 1);

        // Totient round trip through the solver.
        attacks::RsaKey rec = attacks::recover_rsa_key(kg.n, kg.e, kg.phi);
        CHECK(rec.p == kg.p);
        CHECK(rec.q == kg.q);
        CHECK(rec.d == kg.d);
    }
}

TEST_CASE("greedy repair fills an unclassified suffix") {
    Rng rng(0x67726479ULL);
    attacks::RsaKeygen kg = attacks::generate_rsa_key(96, 65537, rng);
    attacks::GcdResult<BigInt> r = attacks::binary_gcd_reference(BigInt(65537), kg.phi);
    REQUIRE(r.gcd == 1);

    // Pick the longest trailing window whose true directions look like
    // nt...nt,t...t; assigning taken from the back can then reproduce it.
    std::size_t n = r.trace.iterations.size();
    std::size_t m = 1;
    for (std::size_t cand = 2; cand <= 6 && cand <= n; ++cand) {
        bool seen_taken = false, ok = true;
        for (std::size_t i = n - cand; i < n && ok; ++i) {
            if (r.trace.iterations[i].direction == Decision::taken)
                seen_taken = true;
            else if (seen_taken)
                ok = false;
        }
        if (ok) m = cand;
    }

    int expected_flips = 0;
    attacks::GcdTrace damaged = r.trace;
    for (std::size_t i = n - m; i < n; ++i) {
        if (damaged.iterations[i].direction == Decision::taken) ++expected_flips;
        damaged.iterations[i].direction = Decision::unclassified;
    }

    attacks::GreedySearchResult res = attacks::greedy_key_search(damaged, 65537, kg.n);
    REQUIRE(res.key.has_value());
    CHECK(res.key->p == kg.p);
    CHECK(res.key->q == kg.q);
    CHECK(res.flips_used == expected_flips);
    CHECK(res.attempts == expected_flips + 1);
}

TEST_CASE("greedy repair never invents a key for a broken trace") {
    Rng rng(0x68706c73ULL);
    attacks::RsaKeygen kg = attacks::generate_rsa_key(96, 65537, rng);
    attacks::GcdResult<BigInt> r = attacks::binary_gcd_reference(BigInt(65537), kg.phi);

    attacks::GcdTrace broken = r.trace;
    broken.iterations[0].direction =
        broken.iterations[0].direction == Decision::taken ? Decision::not_taken
                                                          : Decision::taken;
    attacks::GreedySearchResult res = attacks::greedy_key_search(broken, 65537, kg.n);
    CHECK_FALSE(res.key.has_value());
    CHECK(res.attempts == 1);
}

TEST_CASE("trace CSV round trips including the common shift") {
    attacks::GcdResult<std::uint64_t> r = attacks::binary_gcd_reference<std::uint64_t>(24, 36);
    CHECK(r.gcd == 12);
    CHECK(r.trace.initial_common_shift == 2);

    std::string csv = attacks::gcd_trace_to_csv(r.trace);
    CHECK(csv.rfind("iteration,tz_a,tz_b,direction\n", 0) == 0);
    CHECK(csv.find("# initial_common_shift=2\n") != std::string::npos);

    attacks::GcdTrace back = attacks::gcd_trace_from_csv(csv);
    CHECK(back.initial_common_shift == r.trace.initial_common_shift);
    REQUIRE(back.iterations.size() == r.trace.iterations.size());
    for (std::size_t i = 0; i < back.iterations.size(); ++i) {
        CHECK(back.iterations[i].tz_a == r.trace.iterations[i].tz_a);
        CHECK(back.iterations[i].tz_b == r.trace.iterations[i].tz_b);
        CHECK(back.iterations[i].direction == r.trace.iterations[i].direction);
    }
}

TEST_CASE("comparator pipeline claims carefully and rarely cries wolf") {
    Rng rng(0x636d70ULL);
    std::vector<int> bits;
    for (int i = 0; i < 600; ++i) bits.push_back(rng.bernoulli(0.5) ? 1 : 0);

    attacks::CmpBnParams params;
    attacks::CmpBnResult res = attacks::cmp_bn_pipeline(bits, params, 17);

    REQUIRE(res.claims.size() == bits.size());
    CHECK(res.recovered_fraction > 0.15);
    CHECK(res.recovered_fraction < 0.40);
    CHECK(res.false_positive_rate < 0.07);
    CHECK(res.claim_accuracy > 0.85);
    CHECK(res.threshold > params.smaller_mu);
    CHECK(res.bigger_fit.mu_slow > res.bigger_fit.mu_fast);

    // No unclaimed decision may be the strong kind.
    for (Decision d : res.claims) CHECK(d != Decision::not_taken);
}

TEST_CASE("montmul loop program places the probe at any requested offset") {
    for (int offset = 0; offset < 16; ++offset) {
        listing::Program raw = attacks::montmul_loop_program(offset);
        listing::Program fused = frontend::fuse(raw);
        REQUIRE(fused.instructions.size() == 16);
        CHECK(raw.instructions.size() == 17);

        const listing::Instruction& probe = fused.instructions[10];
        CHECK(probe.mnemonic == "sub");
        CHECK(static_cast<int>(probe.address % 16) == offset);

        int writes = 0;
        for (const listing::Instruction& ins : fused.instructions)
            if (ins.writes_memory) ++writes;
        CHECK(writes == 2);
        CHECK(fused.instructions.back().is_cond_branch);
    }
}

TEST_CASE("montmul classification separates real from dummy subtractions") {
    attacks::MontmulConfig config;
    config.calls = 200;
    attacks::MontmulResult res = attacks::montmul_pipeline(config);

    REQUIRE(res.observations.size() == 200);
    CHECK(res.decided_fraction >= 0.95);
    CHECK(res.decided_accuracy >= 0.98);
    for (const attacks::BranchObservation& o : res.observations) {
        if (o.predicted != Decision::unclassified) CHECK(o.confidence < config.alpha);
    }

    // Same alignment on both branches: the probe goes blind.
    attacks::MontmulConfig blind = config;
    blind.calls = 100;
    blind.dummy_offset = blind.real_offset;
    attacks::MontmulResult none = attacks::montmul_pipeline(blind);
    CHECK(none.decided_fraction <= 0.05);

    attacks::MontmulConfig bad = config;
    bad.repetitions = 1;
    CHECK_THROWS_AS(attacks::montmul_pipeline(bad), std::invalid_argument);
}

TEST_CASE("balanced-branch extraction scores itself against ground truth") {
    listing::Program prog = frontend::fuse(listing::template_branch_program(6, 2, 25));
    timing::TimingParams params;

    Rng secret_rng(0x736563ULL);
    std::vector<std::vector<int>> secrets;
    for (int i = 0; i < 300; ++i) secrets.push_back({secret_rng.bernoulli(0.5) ? 1 : 0});
    std::vector<timing::Run> runs = timing::simulate_runs(prog, secrets, params, 271828);

    attacks::ExtractResult res = attacks::extract_branch_secret(prog, params, runs, 10);
    REQUIRE(res.bits.size() == runs.size());
    CHECK(res.accuracy >= 0.70);
    CHECK(res.polarity == +1);

    int agree = 0;
    for (std::size_t i = 0; i < runs.size(); ++i)
        if (res.bits[i] == secrets[i][0]) ++agree;
    CHECK(res.accuracy == doctest::Approx(agree / static_cast<double>(runs.size())));
}

TEST_CASE("end-to-end key recovery smoke runs are reproducible") {
    attacks::RsaAttackConfig config;
    config.keys = 4;
    config.prime_bits = 64;
    config.model = attacks::UnclassificationModel::reliable;
    config.seed = 5;

    attacks::RsaAttackReport a = attacks::rsa_attack_end_to_end(config);
    REQUIRE(a.runs.size() == 4);
    CHECK(a.success_fraction == 1.0);
    for (const attacks::RsaRunReport& r : a.runs) {
        CHECK(r.success);
        CHECK(r.unclassified == 0);
        CHECK(r.flips_used == 0);
        CHECK(r.iterations > 10);
    }

    attacks::RsaAttackReport b = attacks::rsa_attack_end_to_end(config);
    CHECK(b.success_fraction == a.success_fraction);
    CHECK(b.mean_iterations == a.mean_iterations);

    config.model = attacks::UnclassificationModel::suffix_weighted;
    config.keys = 6;
    attacks::RsaAttackReport c = attacks::rsa_attack_end_to_end(config);
    CHECK(c.mean_unclassified > 0.0);
    for (const attacks::RsaRunReport& r : c.runs) CHECK(r.unclassified >= 0);

    config.model = attacks::UnclassificationModel::simulated;
    config.keys = 2;
    attacks::RsaAttackReport d = attacks::rsa_attack_end_to_end(config);
    REQUIRE(d.runs.size() == 2);
    CHECK(d.mean_iterations > 10.0);
}
