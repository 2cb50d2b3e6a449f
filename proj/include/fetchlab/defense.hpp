// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

#include "fetchlab/stats.hpp"

namespace fetchlab::defense {

struct InsertionPoint {
    std::uint64_t address = 0;  // post-patch address of the filler unit
    int pad_bytes = 0;
};

struct AlignmentPatch {
    std::vector<InsertionPoint> insertion_points;
    int target_offset = 0;
    std::uint64_t original_size = 0;  // sum of instruction lengths, bytes
    std::uint64_t padded_size = 0;

    double overhead_percent() const {
        return original_size
                   ? 100.0 * static_cast<double>(padded_size - original_size) /
                         static_cast<double>(original_size)
                   : 0.0;
    }
};

struct AlignedProgram {
    listing::Program program;
    AlignmentPatch patch;
};

// Pad every branch-pair target (taken and fallthrough path start) to
// target_offset mod 16 with a single never-executed filler unit per target.
// Existing bytes are never moved relative to each other: all addresses shift
// by the padding accumulated before them, so aligning an aligned program is
// a byte-exact no-op with an empty patch.
AlignedProgram align_branch_targets(const listing::Program& program,
                                    int target_offset = 0);

// Closed simulate-and-classify loop over the program's first branch pair:
// antithetic taken/fallthrough run pairs, per-run normalization by the
// pre-branch mean, pooled two-component fit per step, and a vote weighted by
// the public per-step mode-contrast model. Returns the attacker success
// fraction; 0.5 means the trace carries no direction signal.
double verify_defense(const listing::Program& program,
                      const timing::TimingParams& params, int runs,
                      std::uint64_t seed = 1);

// Random straight-line code with embedded branch constructs for overhead
// accounting. branch_density is the fraction of instructions that are
// conditional branches; pair_fraction is the share of those forming
// label-targeted balanced pairs (the defense's subjects; the rest are
// indirect branches no pair derivation applies to).
listing::Program synthetic_corpus(int instruction_count, double branch_density,
                                  double pair_fraction, std::uint64_t seed);

} // namespace fetchlab::defense
