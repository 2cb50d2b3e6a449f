// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#include "fetchlab/timing.hpp"

#include <cmath>
#include <stdexcept>

namespace fetchlab::timing {

using listing::Program;

void validate(const TimingParams& params) {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (params.base_sigma < 0.0 || params.delta < 0.0 || params.run_shift_max < 0.0 ||
        params.page_noise_cycles < 0.0 || params.uninterrupted_sigma < 0.0)
        throw std::invalid_argument("timing parameter out of range: negative spread");
    for (double p : params.p_slow_table)
        if (!prob(p)) throw std::invalid_argument("p_slow_table entry outside [0, 1]");
    if (!prob(params.contrast_gain) || !prob(params.nonwrite_attenuation) ||
        !prob(params.degraded_prob) || !prob(params.page_noise_prob))
        throw std::invalid_argument("timing probability outside [0, 1]");
}

double mode_probability(const TimingParams& params,
                        const frontend::AlignmentFeature& feature,
                        bool writes_memory) {
    (void)writes_memory;  // same probability; only the surcharge differs
    double p0 = params.p_slow_table[static_cast<std::size_t>(feature.address_mod_16)];
    double e = p0 - 0.5;
    int w = feature.trailing_writes_in_window;
    if (w <= 0 || e == 0.0) return p0;
    double frac = 1.0 - std::pow(1.0 - params.contrast_gain, w);
    double extreme = e > 0.0 ? 0.5 : -0.5;
    double e_eff = e + (extreme - e) * frac;
    return 0.5 + e_eff;
}

double effective_delta(const TimingParams& params, const Program& program,
                       std::size_t unit_index) {
    const auto& ins = program.instructions;
    if (unit_index >= ins.size()) throw std::out_of_range("unit index out of range");
    if (ins[unit_index].writes_memory) return params.delta;
    bool adjacent_write =
        (unit_index > 0 && ins[unit_index - 1].writes_memory) ||
        (unit_index + 1 < ins.size() && ins[unit_index + 1].writes_memory);
    return adjacent_write ? params.delta * params.nonwrite_attenuation : 0.0;
}

LatencySample sample_latency(const TimingParams& params,
                             const frontend::AlignmentFeature& feature,
                             bool writes_memory, double delta_effective,
                             double run_shift, Rng& rng) {
    double noise = rng.normal(0.0, params.base_sigma);
    double mode_u = rng.uniform01();

    LatencySample s;
    s.instr_address = feature.address;
    s.latency = params.base_mu + run_shift + noise;
    if (delta_effective > 0.0) {
        double p = mode_probability(params, feature, writes_memory);
        bool slow = mode_u < p;
        s.mode = slow ? Mode::slow : Mode::fast;
        if (slow) s.latency += delta_effective;
    } else {
        s.mode = Mode::none;
    }
    return s;
}

Simulator::Simulator(Program fused_program, const TimingParams& params)
    : program_(std::move(fused_program)), params_(params) {
    units_.reserve(program_.instructions.size());
    for (std::size_t i = 0; i < program_.instructions.size(); ++i) {
        const listing::Instruction& ins = program_.instructions[i];
        UnitModel m;
        m.feature = frontend::alignment_feature(program_, ins.address);
        m.delta = effective_delta(params_, program_, i);
        m.p_slow = mode_probability(params_, m.feature, ins.writes_memory);
        std::uint64_t last = ins.address + static_cast<std::uint64_t>(ins.length) - 1;
        m.page_cross = (ins.address / 4096) != (last / 4096);
        units_.push_back(m);
    }
}

double Simulator::p_slow_at(std::uint64_t address) const {
    return units_[program_.index_of(address)].p_slow;
}

double Simulator::delta_at(std::uint64_t address) const {
    return units_[program_.index_of(address)].delta;
}

Run Simulator::run(const std::vector<int>& secret_bits, std::uint64_t seed,
                   std::uint64_t run_id) const {
    Run out;
    out.run_id = run_id;
    out.secret_bits = secret_bits;
    {
        Rng shift_rng(mix_seed(seed, kTagRunShift));
        out.run_shift = shift_rng.uniform(-params_.run_shift_max, params_.run_shift_max);
    }
    if (params_.degraded_mode) {
        Rng deg_rng(mix_seed(seed, kTagDegraded));
        out.degraded = deg_rng.bernoulli(params_.degraded_prob);
    }

    std::vector<std::uint64_t> path = listing::executed_path(program_, secret_bits);
    std::size_t consumed = 0;
    for (std::uint64_t addr : path)
        for (const listing::BranchPair& bp : program_.branch_pairs)
            if (bp.branch_address == addr) ++consumed;
    if (consumed != secret_bits.size())
        throw std::invalid_argument("secret length mismatch: path consumes " +
                                    std::to_string(consumed) + " bits");

    out.samples.reserve(path.size());
    for (std::size_t k = 0; k < path.size(); ++k) {
        std::size_t idx = program_.index_of(path[k]);
        const UnitModel& m = units_[idx];
        // One substream per step index: equal seeds give equal draws at equal
        // steps whichever path is executed, so paired secrets share noise.
        Rng rng(mix_seed(seed, kTagStep, static_cast<std::uint64_t>(k)));
        LatencySample s = sample_latency(params_, m.feature,
                                         program_.instructions[idx].writes_memory,
                                         out.degraded ? 0.0 : m.delta,
                                         out.run_shift, rng);
        s.step_index = static_cast<int>(k);
        if (m.page_cross && params_.page_noise_prob > 0.0) {
            double page_u = rng.uniform01();
            double page_mag = rng.uniform01();
            if (page_u < params_.page_noise_prob)
                s.latency += params_.page_noise_cycles * (0.5 + page_mag);
        }
        out.samples.push_back(s);
    }
    return out;
}

double Simulator::total_time_no_interrupts(const std::vector<int>& secret_bits,
                                           std::uint64_t seed) const {
    std::vector<std::uint64_t> path = listing::executed_path(program_, secret_bits, true);
    // Unfused instruction count: fused units still retire two instructions.
    double n = 0.0;
    for (std::uint64_t addr : path) {
        const listing::Instruction& ins = program_.instructions[program_.index_of(addr)];
        n += ins.mnemonic.find('+') != std::string::npos ? 2.0 : 1.0;
    }
    Rng rng(mix_seed(seed, kTagTotal));
    return rng.normal(n * params_.uninterrupted_mu,
                      params_.uninterrupted_sigma * std::sqrt(n));
}

Run simulate_run(const Program& fused_program, const std::vector<int>& secret_bits,
                 const TimingParams& params, std::uint64_t seed, std::uint64_t run_id) {
    return Simulator(fused_program, params).run(secret_bits, seed, run_id);
}

std::vector<Run> simulate_runs(const Program& fused_program,
                               const std::vector<std::vector<int>>& secrets,
                               const TimingParams& params, std::uint64_t base_seed) {
    Simulator sim(fused_program, params);
    std::vector<Run> out;
    out.reserve(secrets.size());
    for (std::size_t r = 0; r < secrets.size(); ++r)
        out.push_back(sim.run(secrets[r], mix_seed(base_seed, r), r));
    return out;
}

double total_time_no_interrupts(const Program& program,
                                const std::vector<int>& secret_bits,
                                const TimingParams& params, std::uint64_t seed) {
    return Simulator(program, params).total_time_no_interrupts(secret_bits, seed);
}

} // namespace fetchlab::timing
