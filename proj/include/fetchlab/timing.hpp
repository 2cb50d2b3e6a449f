// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "fetchlab/frontend.hpp"
#include "fetchlab/listing.hpp"
#include "fetchlab/rng.hpp"

namespace fetchlab::timing {

struct TimingParams {
    double base_mu = 9400.0;      // cycles per interrupted step
    double base_sigma = 30.0;
    double delta = 100.0;         // slow-mode surcharge for writes
    // Probability that a unit starting at offset o (mod 16) lands in the slow
    // mode, before the trailing-write push.
    std::array<double, 16> p_slow_table = {0.1, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9,
                                           0.9, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1};
    double contrast_gain = 0.5;   // per trailing write, pushes p toward {0,1}
    double nonwrite_attenuation = 0.3;  // delta scale for neighbours of writes
    double run_shift_max = 200.0; // per-run uniform offset, +/- this many cycles
    bool degraded_mode = false;   // microcode revision that washes out the modes
    double degraded_prob = 0.8;   // fraction of degraded runs when enabled
    double page_noise_prob = 0.0; // extra spike when a unit straddles a page
    double page_noise_cycles = 800.0;
    double uninterrupted_mu = 1.5;      // per-instruction cost without interrupts
    double uninterrupted_sigma = 0.4;
};

// Rejects parameter sets outside the model's domain (probabilities outside
// [0,1], negative spreads or surcharges).
void validate(const TimingParams& params);

enum class Mode : std::uint8_t { none = 0, fast = 1, slow = 2 };

struct LatencySample {
    int step_index = 0;  // 0-based over fused units along the path, ret excluded
    std::uint64_t instr_address = 0;
    double latency = 0.0;
    Mode mode = Mode::none;  // ground truth; stripped by the attack-mode export
};

struct Run {
    std::uint64_t run_id = 0;
    std::vector<int> secret_bits;
    double run_shift = 0.0;
    bool degraded = false;
    std::vector<LatencySample> samples;
};

// Chance that the unit described by feature resolves to the slow mode. The
// mod-16 table entry is pushed toward its nearer extreme by each trailing
// write in the unit's fetch window; non-writing units use the same value.
double mode_probability(const TimingParams& params,
                        const frontend::AlignmentFeature& feature,
                        bool writes_memory);

// Slow-mode surcharge for one unit: full delta for writes, attenuated for
// units adjacent to a write in program order, zero otherwise.
double effective_delta(const TimingParams& params, const listing::Program& program,
                       std::size_t unit_index);

// One interrupted-step latency: run_shift + Normal(base_mu, base_sigma) plus
// delta_effective when the slow mode fires. Draws a fixed number of variates
// from rng so parallel streams stay aligned whether or not a mode applies.
LatencySample sample_latency(const TimingParams& params,
                             const frontend::AlignmentFeature& feature,
                             bool writes_memory, double delta_effective,
                             double run_shift, Rng& rng);

// Precomputed per-unit model over a fused program. Runs with equal seeds use
// identical noise draws per step index regardless of the path taken, so
// paired-secret simulations line up sample for sample.
class Simulator {
public:
    Simulator(listing::Program fused_program, const TimingParams& params);

    const listing::Program& program() const { return program_; }
    const TimingParams& params() const { return params_; }

    double p_slow_at(std::uint64_t address) const;
    double delta_at(std::uint64_t address) const;

    Run run(const std::vector<int>& secret_bits, std::uint64_t seed,
            std::uint64_t run_id) const;

    // Wall time of one uninterrupted execution: instruction costs collapse to
    // a single normal draw, identical in distribution for either path.
    double total_time_no_interrupts(const std::vector<int>& secret_bits,
                                    std::uint64_t seed) const;

private:
    struct UnitModel {
        frontend::AlignmentFeature feature;
        double p_slow = 0.5;
        double delta = 0.0;
        bool page_cross = false;
    };
    listing::Program program_;
    TimingParams params_;
    std::vector<UnitModel> units_;
};

Run simulate_run(const listing::Program& fused_program,
                 const std::vector<int>& secret_bits, const TimingParams& params,
                 std::uint64_t seed, std::uint64_t run_id);

// n runs with per-run seeds derived from base_seed; secret bit i of run r
// comes from secrets[r]. Convenience wrapper over Simulator.
std::vector<Run> simulate_runs(const listing::Program& fused_program,
                               const std::vector<std::vector<int>>& secrets,
                               const TimingParams& params, std::uint64_t base_seed);

double total_time_no_interrupts(const listing::Program& program,
                                const std::vector<int>& secret_bits,
                                const TimingParams& params, std::uint64_t seed);

// Substream tags for per-run derivations; fixed so traces are reproducible.
inline constexpr std::uint64_t kTagRunShift = 0x73686966u;   // per-run offset
inline constexpr std::uint64_t kTagDegraded = 0x64656772u;   // degraded draw
inline constexpr std::uint64_t kTagStep = 0x73746570u;       // per-step stream
inline constexpr std::uint64_t kTagTotal = 0x746f7461u;      // uninterrupted

} // namespace fetchlab::timing
