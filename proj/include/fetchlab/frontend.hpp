// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fetchlab/listing.hpp"

namespace fetchlab::frontend {

inline constexpr std::uint64_t kWindowBytes = 16;

// Instructions decoded after resuming at resumed_at: the resumed instruction
// plus every following one lying fully inside the 16-byte window that holds
// the last byte of the resumed instruction.
struct FetchBatch {
    std::uint64_t resumed_at = 0;
    std::uint64_t window_start = 0;               // 16-byte aligned
    std::vector<std::uint64_t> fetched;           // addresses, first == resumed_at
};

// Placement summary of one steppable unit.
struct AlignmentFeature {
    std::uint64_t address = 0;
    int address_mod_16 = 0;
    int end_mod_16 = 0;          // offset of the last byte
    bool crosses_window = false; // last byte in a different window than the first
    int trailing_writes_in_window = 0;  // writes after this unit in its batch
};

// Collapse each compare marked fuses_with_next with its following branch into
// one steppable unit (combined length, branch flag kept). Branch pairs stay
// anchored to the deciding unit.
listing::Program fuse(const listing::Program& program);

FetchBatch fetch_batch(const listing::Program& program, std::uint64_t resumed_at);

// One batch per executed step. Throws if the path leaves the program or jumps
// without a conditional branch.
std::vector<FetchBatch> step_batches(const listing::Program& program,
                                     const std::vector<std::uint64_t>& path);

AlignmentFeature alignment_feature(const listing::Program& program, std::uint64_t address);
std::vector<AlignmentFeature> alignment_features(const listing::Program& program);

// CSV: interrupt_index,resumed_at,window_start,fetched with addresses in hex
// and the batch joined by semicolons.
std::string batches_to_csv(const std::vector<FetchBatch>& batches);

} // namespace fetchlab::frontend
