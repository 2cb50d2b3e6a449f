// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cstdint>
#include <string>
#include <vector>

#include "fetchlab/defense.hpp"
#include "fetchlab/frontend.hpp"
#include "fetchlab/listing.hpp"
#include "fetchlab/timing.hpp"

using namespace fetchlab;
using listing::Program;

namespace {

// Mnemonic/length/write shape of the executed path, fillers skipped.
std::vector<std::string> path_shape(const Program& p, int bit) {
    std::vector<std::string> out;
    for (std::uint64_t a : listing::executed_path(p, {bit}, true)) {
        const listing::Instruction& ins = p.instructions[p.index_of(a)];
        out.push_back(ins.mnemonic + "/" + std::to_string(ins.length) +
                      (ins.writes_memory ? "/w" : ""));
    }
    return out;
}

} // namespace

TEST_CASE("alignment pads the classic offender onto window starts") {
    Program raw = listing::template_branch_program(6, 2, 25);
    defense::AlignedProgram out = defense::align_branch_targets(raw);

    REQUIRE(out.patch.insertion_points.size() == 2);
    CHECK(out.patch.insertion_points[0].address == 0x16);
    CHECK(out.patch.insertion_points[0].pad_bytes == 10);
    CHECK(out.patch.insertion_points[1].address == 0x1bc);
    CHECK(out.patch.insertion_points[1].pad_bytes == 4);

    CHECK(out.program.labels.at("if") == 0x20);
    CHECK(out.program.labels.at("else") == 0x1c0);
    for (const listing::BranchPair& pair : out.program.branch_pairs) {
        CHECK(pair.taken.begin % 16 == 0);
        CHECK(pair.fallthrough.begin % 16 == 0);
    }

    CHECK(out.patch.original_size == raw.code_bytes());
    CHECK(out.patch.padded_size == raw.code_bytes() + 14);
    CHECK(out.patch.overhead_percent() > 0.0);
    CHECK_NOTHROW(listing::validate(out.program));
}

TEST_CASE("alignment is idempotent, byte for byte") {
    Program raw = listing::template_branch_program(6, 2, 25);
    defense::AlignedProgram once = defense::align_branch_targets(raw);
    defense::AlignedProgram twice = defense::align_branch_targets(once.program);

    CHECK(twice.patch.insertion_points.empty());
    CHECK(listing::emit_listing(twice.program) == listing::emit_listing(once.program));
}

TEST_CASE("a program already on target offsets is untouched") {
    Program raw = listing::template_branch_program(0, 0, 25);
    defense::AlignedProgram out = defense::align_branch_targets(raw);
    CHECK(out.patch.insertion_points.empty());
    CHECK(out.patch.padded_size == out.patch.original_size);
    CHECK(listing::emit_listing(out.program) == listing::emit_listing(raw));
}

TEST_CASE("padding preserves each path's instruction sequence") {
    for (int x : {1, 6, 13, 22, 31}) {
        for (int y : {0, 2, 9, 15, 30}) {
            Program raw = listing::template_branch_program(x, y, 9);
            defense::AlignedProgram out = defense::align_branch_targets(raw);
            for (int bit : {0, 1}) CHECK(path_shape(raw, bit) == path_shape(out.program, bit));
            for (const defense::InsertionPoint& ip : out.patch.insertion_points) {
                CHECK(ip.pad_bytes >= 1);
                CHECK(ip.pad_bytes <= 15);
            }
        }
    }
}

TEST_CASE("non-zero target offsets are honoured") {
    Program raw = listing::template_branch_program(6, 2, 10);
    defense::AlignedProgram out = defense::align_branch_targets(raw, 5);
    for (const listing::BranchPair& pair : out.program.branch_pairs) {
        CHECK(pair.taken.begin % 16 == 5);
        CHECK(pair.fallthrough.begin % 16 == 5);
    }
    CHECK_THROWS_AS(defense::align_branch_targets(raw, 16), std::invalid_argument);
    CHECK_THROWS_AS(defense::align_branch_targets(raw, -1), std::invalid_argument);
}

TEST_CASE("a defended program survives the text round trip") {
    Program raw = listing::template_branch_program(6, 2, 10);
    defense::AlignedProgram out = defense::align_branch_targets(raw);
    Program back = listing::parse_listing(listing::emit_listing(out.program));

    REQUIRE(back.instructions.size() == out.program.instructions.size());
    int fillers = 0;
    for (const listing::Instruction& ins : back.instructions)
        if (ins.is_filler) ++fillers;
    CHECK(fillers == 2);

    // Fillers never show up on the walked path.
    for (std::uint64_t a : listing::executed_path(back, {1}, true))
        CHECK_FALSE(back.instructions[back.index_of(a)].is_filler);
}

TEST_CASE("verification separates the leaky layout from the aligned one") {
    Program raw = listing::template_branch_program(6, 2, 25);
    timing::TimingParams params;

    double control = defense::verify_defense(raw, params, 400, 1);
    CHECK(control >= 0.95);

    defense::AlignedProgram out = defense::align_branch_targets(raw);
    double aligned = defense::verify_defense(out.program, params, 400, 1);
    CHECK(aligned == 0.5);

    CHECK_THROWS_AS(defense::verify_defense(raw, params, 1, 1), std::invalid_argument);
    Program no_pairs = listing::parse_listing("mov a, b; len=3\nret; len=1\n");
    CHECK_THROWS_AS(defense::verify_defense(no_pairs, params, 100, 1),
                    std::invalid_argument);
}

TEST_CASE("a degraded channel drags the attacker toward the coin flip") {
    Program raw = listing::template_branch_program(6, 2, 25);
    timing::TimingParams params;
    params.degraded_mode = true;  // 80% of runs lose the latency modes

    double success = defense::verify_defense(raw, params, 1000, 3);
    CHECK(success > 0.52);
    CHECK(success < 0.70);
}

TEST_CASE("patched pairs agree step for step modulo 16") {
    listing::Program raw = listing::template_branch_program(6, 2, 25);
    listing::Program aligned = defense::align_branch_targets(raw).program;
    std::vector<std::uint64_t> taken = listing::executed_path(aligned, {1}, true);
    std::vector<std::uint64_t> fall = listing::executed_path(aligned, {0}, true);
    REQUIRE(taken.size() == fall.size());
    for (std::size_t i = 0; i < taken.size(); ++i) {
        const listing::Instruction& t = aligned.instructions[aligned.index_of(taken[i])];
        const listing::Instruction& f = aligned.instructions[aligned.index_of(fall[i])];
        CHECK(t.address % 16 == f.address % 16);
        CHECK(t.length == f.length);
        CHECK(t.writes_memory == f.writes_memory);
    }
}

TEST_CASE("synthetic corpus has the advertised shape and cheap padding") {
    Program corpus = defense::synthetic_corpus(10000, 0.05, 0.2, 7);
    CHECK(corpus.instructions.size() == 10000);

    int branches = 0;
    for (const listing::Instruction& ins : corpus.instructions)
        if (ins.is_cond_branch) ++branches;
    double density = branches / 10000.0;
    CHECK(density >= 0.04);
    CHECK(density <= 0.06);
    CHECK(corpus.branch_pairs.size() == 100);

    defense::AlignedProgram out = defense::align_branch_targets(corpus);
    CHECK(out.patch.overhead_percent() < 4.0);
    for (const defense::InsertionPoint& ip : out.patch.insertion_points)
        CHECK(ip.pad_bytes <= 15);
    CHECK_NOTHROW(listing::validate(out.program));

    defense::AlignedProgram again = defense::align_branch_targets(out.program);
    CHECK(again.patch.insertion_points.empty());

    CHECK_THROWS_AS(defense::synthetic_corpus(50, 0.05, 0.2, 7), std::invalid_argument);
    CHECK_THROWS_AS(defense::synthetic_corpus(10000, 0.5, 0.2, 7), std::invalid_argument);
    CHECK_THROWS_AS(defense::synthetic_corpus(10000, 0.05, 1.5, 7), std::invalid_argument);
}
