// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <vector>

#include "fetchlab/frontend.hpp"
#include "fetchlab/listing.hpp"
#include "fetchlab/rng.hpp"
#include "fetchlab/timing.hpp"

using namespace fetchlab;
using listing::Program;

namespace {

Program fused_example() {
    return frontend::fuse(listing::parse_listing(listing::example_branch_listing()));
}

timing::TimingParams quiet_params() {
    timing::TimingParams p;
    p.base_sigma = 0.0;
    p.run_shift_max = 0.0;
    return p;
}

} // namespace

TEST_CASE("parameter validation rejects out-of-domain values") {
    timing::TimingParams p;
    CHECK_NOTHROW(timing::validate(p));

    timing::TimingParams bad = p;
    bad.base_sigma = -1.0;
    CHECK_THROWS_AS(timing::validate(bad), std::invalid_argument);

    bad = p;
    bad.p_slow_table[3] = 1.5;
    CHECK_THROWS_AS(timing::validate(bad), std::invalid_argument);

    bad = p;
    bad.degraded_prob = -0.1;
    CHECK_THROWS_AS(timing::validate(bad), std::invalid_argument);

    bad = p;
    bad.contrast_gain = 2.0;
    CHECK_THROWS_AS(timing::validate(bad), std::invalid_argument);

    bad = p;
    bad.delta = -5.0;
    CHECK_THROWS_AS(timing::validate(bad), std::invalid_argument);
}

TEST_CASE("mode probability is pushed toward the nearer extreme per trailing write") {
    timing::TimingParams p;
    frontend::AlignmentFeature f;

    f.address_mod_16 = 6;  // table value 0.9
    f.trailing_writes_in_window = 0;
    CHECK(timing::mode_probability(p, f, true) == doctest::Approx(0.9));
    f.trailing_writes_in_window = 1;
    CHECK(timing::mode_probability(p, f, true) == doctest::Approx(0.95));
    f.trailing_writes_in_window = 2;
    CHECK(timing::mode_probability(p, f, true) == doctest::Approx(0.975));

    f.address_mod_16 = 0;  // table value 0.1
    f.trailing_writes_in_window = 1;
    CHECK(timing::mode_probability(p, f, false) == doctest::Approx(0.05));
    f.trailing_writes_in_window = 4;
    CHECK(timing::mode_probability(p, f, false) == doctest::Approx(0.1 * 0.0625));
}

TEST_CASE("surcharge is full on writes, attenuated beside them, zero elsewhere") {
    Program p = fused_example();
    timing::TimingParams tp;

    CHECK(timing::effective_delta(tp, p, 4) == doctest::Approx(100.0));  // writing mov
    CHECK(timing::effective_delta(tp, p, 3) == doctest::Approx(30.0));   // add before it
    CHECK(timing::effective_delta(tp, p, 5) == doctest::Approx(30.0));   // add between movs
    CHECK(timing::effective_delta(tp, p, 0) == doctest::Approx(0.0));    // isolated load
    CHECK(timing::effective_delta(tp, p, 2) == doctest::Approx(0.0));    // fused branch
    CHECK(timing::effective_delta(tp, p, 7) == doctest::Approx(30.0));   // ret after a mov
    CHECK_THROWS_AS(timing::effective_delta(tp, p, 99), std::out_of_range);
}

TEST_CASE("zero-spread parameters collapse write latencies onto two points") {
    Program p = fused_example();
    timing::Simulator sim(p, quiet_params());

    int slow = 0, fast = 0;
    for (int r = 0; r < 300; ++r) {
        timing::Run run = sim.run({0}, mix_seed(77, r), r);
        double lat = run.samples[4].latency;  // mov at 0x14, p_slow 0.9
        if (lat == 9500.0)
            ++slow;
        else if (lat == 9400.0)
            ++fast;
    }
    CHECK(slow + fast == 300);
    CHECK(slow > 230);
    CHECK(fast > 5);
}

TEST_CASE("slow fraction tracks the pushed probability") {
    timing::TimingParams p;
    frontend::AlignmentFeature f;
    f.address_mod_16 = 6;
    f.trailing_writes_in_window = 0;

    Rng rng(0x736c6f77ULL);
    int slow = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        timing::LatencySample s = timing::sample_latency(p, f, true, p.delta, 0.0, rng);
        if (s.mode == timing::Mode::slow) ++slow;
    }
    CHECK(std::abs(slow / static_cast<double>(n) - 0.9) < 0.02);
}

TEST_CASE("runs are deterministic per seed") {
    Program p = fused_example();
    timing::TimingParams tp;
    timing::Run a = timing::simulate_run(p, {1}, tp, 12345, 0);
    timing::Run b = timing::simulate_run(p, {1}, tp, 12345, 0);
    timing::Run c = timing::simulate_run(p, {1}, tp, 12346, 0);

    REQUIRE(a.samples.size() == b.samples.size());
    CHECK(a.run_shift == b.run_shift);
    for (std::size_t i = 0; i < a.samples.size(); ++i)
        CHECK(a.samples[i].latency == b.samples[i].latency);

    bool any_diff = c.run_shift != a.run_shift;
    for (std::size_t i = 0; i < a.samples.size() && !any_diff; ++i)
        any_diff = c.samples[i].latency != a.samples[i].latency;
    CHECK(any_diff);
}

TEST_CASE("equal seeds give identical noise on either path") {
    Program p = fused_example();
    timing::TimingParams tp;
    tp.delta = 0.0;  // no mode surcharge: only shared noise remains
    timing::Run fall = timing::simulate_run(p, {0}, tp, 999, 0);
    timing::Run taken = timing::simulate_run(p, {1}, tp, 999, 1);

    REQUIRE(fall.samples.size() == taken.samples.size());
    CHECK(fall.run_shift == taken.run_shift);
    for (std::size_t i = 0; i < fall.samples.size(); ++i) {
        CHECK(fall.samples[i].latency == taken.samples[i].latency);
        CHECK(fall.samples[i].mode == timing::Mode::none);
    }
}

TEST_CASE("run carries path addresses, ordered steps and a bounded shift") {
    Program p = fused_example();
    timing::TimingParams tp;
    timing::Run run = timing::simulate_run(p, {1}, tp, 4242, 7);

    CHECK(run.run_id == 7);
    CHECK(run.secret_bits == std::vector<int>{1});
    CHECK(std::abs(run.run_shift) <= tp.run_shift_max);

    std::vector<std::uint64_t> path = listing::executed_path(p, {1});
    REQUIRE(run.samples.size() == path.size());
    for (std::size_t i = 0; i < path.size(); ++i) {
        CHECK(run.samples[i].step_index == static_cast<int>(i));
        CHECK(run.samples[i].instr_address == path[i]);
    }

    CHECK_THROWS_AS(timing::simulate_run(p, {1, 0}, tp, 1, 0), std::invalid_argument);
    CHECK_THROWS_AS(timing::simulate_run(p, {}, tp, 1, 0), std::invalid_argument);
}

TEST_CASE("degraded runs wash the modes out") {
    Program p = fused_example();
    timing::TimingParams tp = quiet_params();
    tp.degraded_mode = true;

    int degraded = 0;
    bool clean_bimodal = false;
    for (int r = 0; r < 1000; ++r) {
        timing::Run run = timing::simulate_run(p, {0}, tp, mix_seed(5, r), r);
        if (run.degraded) {
            ++degraded;
            for (const timing::LatencySample& s : run.samples) {
                CHECK(s.latency == 9400.0);
                CHECK(s.mode == timing::Mode::none);
            }
        } else if (run.samples[4].latency == 9500.0) {
            clean_bimodal = true;
        }
    }
    CHECK(std::abs(degraded / 1000.0 - 0.8) < 0.05);
    CHECK(clean_bimodal);
}

TEST_CASE("page-straddling units pick up the extra spike") {
    Program p = listing::parse_listing(
        ".alignmod 4096 4090\n"
        "mov a, b; len=8\n"
        "ret; len=1\n");
    timing::TimingParams tp = quiet_params();
    tp.delta = 0.0;
    tp.page_noise_prob = 1.0;

    timing::Run run = timing::simulate_run(p, {}, tp, 3, 0);
    REQUIRE(run.samples.size() == 1);
    CHECK(run.samples[0].latency >= 9400.0 + 0.5 * tp.page_noise_cycles);
    CHECK(run.samples[0].latency <= 9400.0 + 1.5 * tp.page_noise_cycles);

    tp.page_noise_prob = 0.0;
    timing::Run calm = timing::simulate_run(p, {}, tp, 3, 0);
    CHECK(calm.samples[0].latency == 9400.0);
}

TEST_CASE("translating a program by 16 bytes leaves latencies untouched") {
    const char* base =
        "mov (%rsi), %rax; len=5\n"
        "add $0x1, %rax; len=4\n"
        "mov %rax, (%rdi); len=6 write\n"
        "ret; len=1\n";
    std::string shifted = std::string(".alignmod 32 16\n") + base;
    listing::Program a = frontend::fuse(listing::parse_listing(base));
    listing::Program b = frontend::fuse(listing::parse_listing(shifted));

    timing::TimingParams params;
    timing::Simulator sa(a, params);
    timing::Simulator sb(b, params);
    for (std::uint64_t seed : {3ULL, 77ULL, 901ULL}) {
        timing::Run ra = sa.run({}, seed, 0);
        timing::Run rb = sb.run({}, seed, 0);
        REQUIRE(ra.samples.size() == rb.samples.size());
        for (std::size_t i = 0; i < ra.samples.size(); ++i)
            CHECK(ra.samples[i].latency == rb.samples[i].latency);
    }
}

TEST_CASE("uninterrupted wall time is path-shape blind") {
    Program p = fused_example();
    timing::TimingParams tp;
    tp.uninterrupted_sigma = 0.0;

    // 6 plain units, one fused pair counting double, plus ret: 9 instructions.
    double fall = timing::total_time_no_interrupts(p, {0}, tp, 11);
    double taken = timing::total_time_no_interrupts(p, {1}, tp, 11);
    CHECK(fall == doctest::Approx(9 * 1.5));
    CHECK(taken == doctest::Approx(9 * 1.5));
}

TEST_CASE("simulate_runs derives one seed per run") {
    Program p = fused_example();
    timing::TimingParams tp;
    std::vector<std::vector<int>> secrets = {{0}, {0}, {1}};
    std::vector<timing::Run> runs = timing::simulate_runs(p, secrets, tp, 31);

    REQUIRE(runs.size() == 3);
    CHECK(runs[0].run_id == 0);
    CHECK(runs[2].secret_bits == std::vector<int>{1});
    // Same secret, different run seeds: traces differ.
    bool diff = false;
    for (std::size_t i = 0; i < runs[0].samples.size() && !diff; ++i)
        diff = runs[0].samples[i].latency != runs[1].samples[i].latency;
    CHECK(diff);
}
