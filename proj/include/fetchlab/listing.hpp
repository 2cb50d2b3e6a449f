// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace fetchlab::listing {

// One decoded instruction. Mnemonic and operands are opaque text; the model
// only interprets address, length and the flags.
struct Instruction {
    std::uint64_t address = 0;
    int length = 1;                // bytes, 1..15
    std::string mnemonic;
    std::string operands;
    bool writes_memory = false;
    bool is_cond_branch = false;
    bool fuses_with_next = false;  // compare immediately preceding a cond branch
    bool is_filler = false;        // alignment padding, never executed
};

// Half-open address interval [begin, end).
struct AddrRange {
    std::uint64_t begin = 0;
    std::uint64_t end = 0;
    bool contains(std::uint64_t a) const { return a >= begin && a < end; }
};

// A balanced secret branch: the unit at branch_address consumes one secret
// bit; bit==taken_means_one selects the taken range, otherwise fallthrough.
struct BranchPair {
    std::uint64_t branch_address = 0;
    AddrRange taken;
    AddrRange fallthrough;
    bool taken_means_one = true;
};

struct Program {
    std::vector<Instruction> instructions;  // strictly increasing addresses
    std::map<std::string, std::uint64_t> labels;
    std::vector<BranchPair> branch_pairs;

    const Instruction* find(std::uint64_t address) const;
    std::size_t index_of(std::uint64_t address) const;  // throws if absent
    std::uint64_t end_address() const;                  // one past last byte
    std::uint64_t code_bytes() const;                   // sum of lengths
};

struct ParseError : std::runtime_error {
    int line;
    ParseError(int line_, const std::string& msg)
        : std::runtime_error("line " + std::to_string(line_) + ": " + msg), line(line_) {}
};

// Listing grammar, one item per line:
//   label:
//   .alignmod M X        advance cursor to the next address == X (mod M)
//   .alignmod X          same with M = 16
//   <mnemonic> [operands]; len=<n> [write] [cbr]
// '#' starts a comment. A cond branch whose operands name a known label gets a
// BranchPair whose taken path starts at that label; both path ranges extend to
// the first ret at or after their start.
Program parse_listing(const std::string& text);

// Inverse of parse_listing up to layout: re-parsing the emitted text yields
// the same addresses, lengths and flags.
std::string emit_listing(const Program& program);

// Throws std::invalid_argument on violated structural invariants.
void validate(const Program& program);

// Two-path branch program shaped like the alignment-sweep victim: a cmp+jnz
// header directly before the first path, `reps` add/mov pairs per path (the
// mov writes memory), each pair on its own 16-byte slot relative to the path
// start, each path closed by ret. x and y in [0, 31] choose the paths' start
// offsets; offsets >= 16 land 16 bytes further than their mod-16 twin so the
// full 32-offset grid maps to distinct addresses.
Program template_branch_program(int x, int y, int reps,
                                int add_len = 3, int mov_len = 5);

// Canonical small fixture: load two counters, compare a secret byte, update
// the counters on either path. Mirrors the layout used across the test suite.
std::string example_branch_listing();

// Instruction addresses executed for the given secret bits, in step order.
// Conditional branches with a BranchPair consume one bit each; execution
// stops at ret (excluded unless include_terminal_ret); fillers are skipped.
std::vector<std::uint64_t> executed_path(const Program& program,
                                         const std::vector<int>& secret_bits,
                                         bool include_terminal_ret = false);

} // namespace fetchlab::listing
