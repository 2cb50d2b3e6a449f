// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#include "fetchlab/frontend.hpp"

#include <sstream>
#include <stdexcept>

namespace fetchlab::frontend {

using listing::BranchPair;
using listing::Instruction;
using listing::Program;

Program fuse(const Program& program) {
    Program out;
    out.labels = program.labels;
    for (std::size_t i = 0; i < program.instructions.size(); ++i) {
        const Instruction& cur = program.instructions[i];
        if (cur.fuses_with_next && i + 1 < program.instructions.size()) {
            const Instruction& br = program.instructions[i + 1];
            Instruction unit = cur;
            unit.length = cur.length + br.length;
            unit.mnemonic = cur.mnemonic + "+" + br.mnemonic;
            unit.operands = br.operands;
            unit.writes_memory = cur.writes_memory || br.writes_memory;
            unit.is_cond_branch = br.is_cond_branch;
            unit.fuses_with_next = false;
            out.instructions.push_back(std::move(unit));
            ++i;
        } else {
            out.instructions.push_back(cur);
        }
    }
    for (BranchPair pair : program.branch_pairs) {
        // Anchor the pair to the unit that now holds the branch's bytes.
        for (const Instruction& unit : out.instructions) {
            if (pair.branch_address >= unit.address &&
                pair.branch_address < unit.address + static_cast<std::uint64_t>(unit.length)) {
                pair.branch_address = unit.address;
                break;
            }
        }
        out.branch_pairs.push_back(pair);
    }
    return out;
}

namespace {

// Anything past a control transfer belongs to another fetch stream.
bool ends_decode(const Instruction& ins) {
    return ins.is_cond_branch || ins.mnemonic == "ret" || ins.mnemonic == "jmp";
}

} // namespace

FetchBatch fetch_batch(const Program& program, std::uint64_t resumed_at) {
    std::size_t idx = program.index_of(resumed_at);
    const Instruction& first = program.instructions[idx];
    std::uint64_t last_byte = first.address + static_cast<std::uint64_t>(first.length) - 1;

    FetchBatch batch;
    batch.resumed_at = resumed_at;
    batch.window_start = last_byte & ~(kWindowBytes - 1);
    batch.fetched.push_back(resumed_at);
    std::uint64_t window_end = batch.window_start + kWindowBytes;
    if (!ends_decode(first)) {
        for (std::size_t i = idx + 1; i < program.instructions.size(); ++i) {
            const Instruction& ins = program.instructions[i];
            if (ins.address < batch.window_start ||
                ins.address + static_cast<std::uint64_t>(ins.length) > window_end)
                break;
            batch.fetched.push_back(ins.address);
            if (ends_decode(ins)) break;
        }
    }
    return batch;
}

namespace {

// Address reached from instruction idx by falling through, hopping over
// contiguous filler units. ~0 when flow runs off the program or into a gap.
std::uint64_t fallthrough_successor(const Program& program, std::size_t idx) {
    std::uint64_t addr =
        program.instructions[idx].address + static_cast<std::uint64_t>(program.instructions[idx].length);
    for (std::size_t i = idx + 1; i < program.instructions.size(); ++i) {
        const Instruction& ins = program.instructions[i];
        if (ins.address != addr) return ~0ULL;
        if (!ins.is_filler) return addr;
        addr += static_cast<std::uint64_t>(ins.length);
    }
    return ~0ULL;
}

} // namespace

std::vector<FetchBatch> step_batches(const Program& program,
                                     const std::vector<std::uint64_t>& path) {
    std::vector<FetchBatch> out;
    out.reserve(path.size());
    for (std::size_t i = 0; i < path.size(); ++i) {
        if (i > 0) {
            std::size_t prev_idx = program.index_of(path[i - 1]);
            bool sequential = path[i] == fallthrough_successor(program, prev_idx);
            if (!sequential && !program.instructions[prev_idx].is_cond_branch)
                throw std::invalid_argument("path jumps without a conditional branch");
        }
        out.push_back(fetch_batch(program, path[i]));
    }
    return out;
}

AlignmentFeature alignment_feature(const Program& program, std::uint64_t address) {
    const Instruction& ins = program.instructions[program.index_of(address)];
    std::uint64_t last_byte = ins.address + static_cast<std::uint64_t>(ins.length) - 1;
    AlignmentFeature f;
    f.address = address;
    f.address_mod_16 = static_cast<int>(address % kWindowBytes);
    f.end_mod_16 = static_cast<int>(last_byte % kWindowBytes);
    f.crosses_window = (address / kWindowBytes) != (last_byte / kWindowBytes);
    FetchBatch batch = fetch_batch(program, address);
    int writes = 0;
    for (std::size_t i = 1; i < batch.fetched.size(); ++i)
        if (program.instructions[program.index_of(batch.fetched[i])].writes_memory) ++writes;
    f.trailing_writes_in_window = writes;
    return f;
}

std::vector<AlignmentFeature> alignment_features(const Program& program) {
    std::vector<AlignmentFeature> out;
    out.reserve(program.instructions.size());
    for (const Instruction& ins : program.instructions)
        out.push_back(alignment_feature(program, ins.address));
    return out;
}

std::string batches_to_csv(const std::vector<FetchBatch>& batches) {
    std::ostringstream out;
    out << "interrupt_index,resumed_at,window_start,fetched\n";
    for (std::size_t i = 0; i < batches.size(); ++i) {
        const FetchBatch& b = batches[i];
        out << i << ",0x" << std::hex << b.resumed_at << ",0x" << b.window_start << ',';
        for (std::size_t j = 0; j < b.fetched.size(); ++j) {
            if (j) out << ';';
            out << "0x" << b.fetched[j];
        }
        out << std::dec << '\n';
    }
    return out.str();
}

} // namespace fetchlab::frontend
