// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#include "fetchlab/defense.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fetchlab::defense {

using listing::Program;

AlignedProgram align_branch_targets(const Program& program, int target_offset) {
    if (target_offset < 0 || target_offset >= 16)
        throw std::invalid_argument("target_offset must be in [0, 16)");

    std::set<std::uint64_t> targets;
    for (const listing::BranchPair& pair : program.branch_pairs) {
        targets.insert(pair.taken.begin);
        targets.insert(pair.fallthrough.begin);
    }

    AlignedProgram out;
    out.patch.target_offset = target_offset;
    out.patch.original_size = program.code_bytes();

    std::map<std::uint64_t, std::uint64_t> addr_map;   // instruction starts
    std::map<std::uint64_t, std::uint64_t> end_map;    // one-past ends
    std::uint64_t pad_so_far = 0;
    for (const listing::Instruction& ins : program.instructions) {
        std::uint64_t tentative = ins.address + pad_so_far;
        if (targets.count(ins.address)) {
            int pad = static_cast<int>((16 + target_offset - tentative % 16) % 16);
            if (pad > 0) {
                listing::Instruction filler;
                filler.address = tentative;
                filler.length = pad;
                filler.mnemonic = "nop";
                filler.is_filler = true;
                out.program.instructions.push_back(std::move(filler));
                out.patch.insertion_points.push_back({tentative, pad});
                pad_so_far += static_cast<std::uint64_t>(pad);
                tentative += static_cast<std::uint64_t>(pad);
            }
        }
        listing::Instruction moved = ins;
        moved.address = tentative;
        out.program.instructions.push_back(std::move(moved));
        addr_map[ins.address] = tentative;
        end_map[ins.address + static_cast<std::uint64_t>(ins.length)] =
            tentative + static_cast<std::uint64_t>(ins.length);
    }
    // Labels may sit on an instruction or one past the last one.
    end_map[program.end_address()] = out.program.end_address();

    auto map_start = [&](std::uint64_t a) {
        auto it = addr_map.find(a);
        if (it == addr_map.end()) throw std::invalid_argument("unmapped address");
        return it->second;
    };
    auto map_end = [&](std::uint64_t a) {
        auto it = end_map.find(a);
        if (it == end_map.end()) throw std::invalid_argument("unmapped range end");
        return it->second;
    };

    for (const auto& [name, addr] : program.labels) {
        auto it = addr_map.find(addr);
        out.program.labels.emplace(name, it != addr_map.end() ? it->second : map_end(addr));
    }
    for (const listing::BranchPair& pair : program.branch_pairs) {
        listing::BranchPair moved = pair;
        moved.branch_address = map_start(pair.branch_address);
        moved.taken.begin = map_start(pair.taken.begin);
        moved.taken.end = map_end(pair.taken.end);
        moved.fallthrough.begin = map_start(pair.fallthrough.begin);
        moved.fallthrough.end = map_end(pair.fallthrough.end);
        out.program.branch_pairs.push_back(moved);
    }

    out.patch.padded_size = out.program.code_bytes();
    listing::validate(out.program);
    return out;
}

double verify_defense(const Program& program, const timing::TimingParams& params,
                      int runs, std::uint64_t seed) {
    Program fused = frontend::fuse(program);
    if (fused.branch_pairs.empty())
        throw std::invalid_argument("program has no branch pair to attack");
    int pairs = runs / 2;
    if (pairs < 1) throw std::invalid_argument("need at least two runs");

    timing::Simulator sim(fused, params);
    std::vector<timing::Run> batch;
    batch.reserve(2 * static_cast<std::size_t>(pairs));
    for (int p = 0; p < pairs; ++p) {
        std::uint64_t ps = mix_seed(seed, static_cast<std::uint64_t>(p));
        batch.push_back(sim.run({1}, ps, static_cast<std::uint64_t>(2 * p)));
        batch.push_back(sim.run({0}, ps, static_cast<std::uint64_t>(2 * p + 1)));
    }

    std::vector<std::uint64_t> taken_path = listing::executed_path(fused, {1});
    std::vector<std::uint64_t> fall_path = listing::executed_path(fused, {0});
    std::size_t steps = std::min(taken_path.size(), fall_path.size());
    std::size_t prefix = static_cast<std::size_t>(stats::prefix_steps(fused));
    if (prefix >= steps) throw std::invalid_argument("no post-branch steps to classify");

    // Public model: expected mode surcharge difference between the two paths
    // at each step. Zero difference means the step cannot carry direction.
    std::vector<double> weight(steps, 0.0);
    for (std::size_t s = prefix; s < steps; ++s) {
        double dt = sim.p_slow_at(taken_path[s]) * sim.delta_at(taken_path[s]);
        double df = sim.p_slow_at(fall_path[s]) * sim.delta_at(fall_path[s]);
        weight[s] = dt - df;
    }

    // Baseline anchors: the prefix plus every step the model calls
    // direction-free. More anchors mean less shared noise under each vote.
    std::vector<std::size_t> anchors;
    for (std::size_t s = 0; s < prefix; ++s) anchors.push_back(s);
    for (std::size_t s = prefix; s < steps; ++s)
        if (weight[s] == 0.0 &&
            sim.p_slow_at(taken_path[s]) == sim.p_slow_at(fall_path[s]) &&
            sim.delta_at(taken_path[s]) == sim.delta_at(fall_path[s]))
            anchors.push_back(s);

    std::vector<std::vector<double>> normalized(batch.size());
    for (std::size_t r = 0; r < batch.size(); ++r) {
        const timing::Run& run = batch[r];
        double base = 0.0;
        int used = 0;
        for (std::size_t s : anchors) {
            if (s >= run.samples.size()) continue;
            base += run.samples[s].latency;
            ++used;
        }
        base /= static_cast<double>(used);
        normalized[r].resize(steps, 0.0);
        for (std::size_t s = prefix; s < steps && s < run.samples.size(); ++s)
            normalized[r][s] = run.samples[s].latency - base;
    }

    // Cut the weighted vote at the model-expected midpoint between the two
    // classes; a zero cut would lean wherever both paths are mostly slow.
    std::vector<double> vote(batch.size(), 0.0);
    double midpoint = 0.0;
    for (std::size_t s = prefix; s < steps; ++s) {
        if (weight[s] == 0.0) continue;
        std::vector<double> pooled;
        pooled.reserve(batch.size());
        for (const auto& row : normalized) pooled.push_back(row[s]);
        if (pooled.size() < 10) continue;
        stats::Gmm2Fit fit = stats::fit_gmm2(pooled);
        double threshold = 0.5 * (fit.mu_fast + fit.mu_slow);
        midpoint += weight[s] * (sim.p_slow_at(taken_path[s]) +
                                 sim.p_slow_at(fall_path[s]) - 1.0);
        for (std::size_t r = 0; r < batch.size(); ++r)
            vote[r] += weight[s] * (normalized[r][s] >= threshold ? 1.0 : -1.0);
    }

    int correct = 0;
    for (std::size_t r = 0; r < batch.size(); ++r) {
        int predicted = vote[r] >= midpoint ? 1 : 0;
        if (predicted == batch[r].secret_bits[0]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(batch.size());
}

Program synthetic_corpus(int instruction_count, double branch_density,
                         double pair_fraction, std::uint64_t seed) {
    if (instruction_count < 100)
        throw std::invalid_argument("corpus too small to shape");
    if (branch_density <= 0.0 || branch_density > 0.2)
        throw std::invalid_argument("branch_density out of range");
    if (pair_fraction < 0.0 || pair_fraction > 1.0)
        throw std::invalid_argument("pair_fraction out of range");

    Rng rng(mix_seed(seed, 0x636f7270ULL));
    int branches = static_cast<int>(instruction_count * branch_density + 0.5);
    int pair_branches = static_cast<int>(branches * pair_fraction + 0.5);
    int plain_branches = branches - pair_branches;

    static const char* kMnemonics[] = {"mov", "add", "lea", "xor", "sub"};
    std::ostringstream out;
    int emitted = 0;
    int label_id = 0;
    auto plain = [&]() {
        int len = static_cast<int>(rng.uniform(2.0, 9.0));
        len = std::clamp(len, 2, 8);
        out << kMnemonics[rng.below(5)] << " %r8, %r9; len=" << len;
        if (rng.bernoulli(0.1)) out << " write";
        out << '\n';
        ++emitted;
    };
    auto body = [&](int n) {
        for (int i = 0; i < n; ++i) plain();
        out << "ret; len=1\n";
        ++emitted;
    };
    int gap = std::max(1, static_cast<int>(instruction_count / std::max(1, branches)));
    while (pair_branches > 0 || plain_branches > 0) {
        int stretch = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(gap)));
        for (int i = 0; i < stretch; ++i) plain();
        bool emit_pair =
            rng.below(static_cast<std::uint64_t>(pair_branches + plain_branches)) <
            static_cast<std::uint64_t>(pair_branches);
        if (emit_pair && pair_branches > 0) {
            int name = label_id++;
            out << "cmp %r10, %r11; len=3\n";
            ++emitted;
            out << "jnz alt" << name << "; len=2 cbr\n";
            ++emitted;
            body(3 + static_cast<int>(rng.below(8)));
            out << "alt" << name << ":\n";
            body(3 + static_cast<int>(rng.below(8)));
            --pair_branches;
        } else if (plain_branches > 0) {
            out << "jnz *%rax; len=2 cbr\n";
            ++emitted;
            --plain_branches;
        }
    }
    while (emitted < instruction_count) plain();
    return listing::parse_listing(out.str());
}

} // namespace fetchlab::defense
