// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#include "fetchlab/attacks.hpp"

#include <boost/multiprecision/miller_rabin.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <random>
#include <sstream>
#include <stdexcept>

namespace fetchlab::attacks {

namespace mp = boost::multiprecision;

std::string to_string(Decision d) {
    switch (d) {
        case Decision::not_taken: return "not_taken";
        case Decision::taken: return "taken";
        case Decision::unclassified: return "unclassified";
    }
    return "unclassified";
}

// ---- balanced-branch extraction ----

ExtractResult extract_branch_secret(const listing::Program& fused_program,
                                    const timing::TimingParams& params,
                                    const std::vector<timing::Run>& runs,
                                    int discriminator_step) {
    stats::DiscriminatorClassification cls =
        stats::classify_discriminator(fused_program, params, runs, discriminator_step);
    const listing::BranchPair& pair = fused_program.branch_pairs.front();
    int correct = 0;
    for (std::size_t r = 0; r < runs.size(); ++r) {
        if (runs[r].secret_bits.empty())
            throw std::invalid_argument("run carries no ground-truth secret");
        int truth_taken =
            ((runs[r].secret_bits[0] != 0) == pair.taken_means_one) ? 1 : 0;
        if (cls.bits[r] == truth_taken) ++correct;
    }
    ExtractResult out;
    out.bits = std::move(cls.bits);
    out.threshold = cls.threshold;
    out.polarity = cls.polarity;
    out.accuracy = static_cast<double>(correct) / static_cast<double>(runs.size());
    return out;
}

// ---- big-number comparator leak ----

CmpBnResult cmp_bn_pipeline(const std::vector<int>& secret_bits,
                            const CmpBnParams& params, std::uint64_t seed) {
    if (secret_bits.empty()) throw std::invalid_argument("no comparator calls");
    if (params.calibration_samples < 100)
        throw std::invalid_argument("calibration needs at least 100 samples");
    if (params.runs_per_bit < 1) throw std::invalid_argument("runs_per_bit must be positive");

    auto draw_smaller = [&](Rng& rng) { return rng.normal(params.smaller_mu, params.sigma); };
    auto draw_bigger = [&](Rng& rng) {
        double mu = rng.bernoulli(params.bigger_slow_weight) ? params.bigger_slow_mu
                                                             : params.bigger_fast_mu;
        return rng.normal(mu, params.sigma);
    };

    Rng calib_rng(mix_seed(seed, 0x636d7062ULL));
    std::vector<double> smaller_ref(params.calibration_samples);
    std::vector<double> bigger_ref(params.calibration_samples);
    for (double& x : smaller_ref) x = draw_smaller(calib_rng);
    for (double& x : bigger_ref) x = draw_bigger(calib_rng);

    CmpBnResult out;
    {
        double s = 0.0;
        for (double x : smaller_ref) s += x;
        out.fitted_smaller_mu = s / smaller_ref.size();
    }
    out.bigger_fit = stats::fit_gmm2(bigger_ref);

    // One-sided rule: only latencies beyond what the smaller-than path
    // plausibly produces get claimed, everything else stays unclassified.
    std::vector<double> sorted = smaller_ref;
    std::sort(sorted.begin(), sorted.end());
    std::size_t idx = static_cast<std::size_t>((1.0 - params.fp_target) * sorted.size());
    idx = std::min(idx, sorted.size() - 1);
    out.threshold = sorted[idx];

    Rng bit_rng(mix_seed(seed, 0x62697473ULL));
    out.claims.reserve(secret_bits.size());
    int claimed = 0, claimed_correct = 0, false_claims = 0, true_smaller = 0;
    for (std::size_t i = 0; i < secret_bits.size(); ++i) {
        bool bigger = secret_bits[i] != 0;
        double acc = 0.0;
        for (int r = 0; r < params.runs_per_bit; ++r)
            acc += bigger ? draw_bigger(bit_rng) : draw_smaller(bit_rng);
        double mean = acc / params.runs_per_bit;
        bool claim = mean >= out.threshold;
        out.claims.push_back(claim ? Decision::taken : Decision::unclassified);
        if (!bigger) ++true_smaller;
        if (claim) {
            ++claimed;
            if (bigger) ++claimed_correct;
            else ++false_claims;
        }
    }
    double n = static_cast<double>(secret_bits.size());
    out.recovered_fraction = static_cast<double>(claimed_correct) / n;
    out.claim_accuracy = claimed ? static_cast<double>(claimed_correct) / claimed : 0.0;
    out.false_positive_rate =
        true_smaller ? static_cast<double>(false_claims) / true_smaller : 0.0;
    return out;
}

// ---- Montgomery-multiplication subtraction classifier ----

listing::Program montmul_loop_program(int sub_offset) {
    if (sub_offset < 0 || sub_offset > 15)
        throw std::invalid_argument("sub_offset must be in 0..15");
    struct Row {
        const char* mnemonic;
        const char* operands;
        int length;
        bool write;
        bool cbr;
    };
    // One iteration of the conditional-subtraction loop: two memory writes,
    // the measured reg-to-reg sub surrounded by them, compare+branch tail.
    static constexpr Row rows[] = {
        {"mov", "(%rsi), %r8", 4, false, false},
        {"xor", "%r9, %r9", 3, false, false},
        {"cmp", "%r10, %r11", 3, false, false},
        {"setb", "%al", 3, false, false},
        {"sub", "%r12, %r13", 3, false, false},
        {"mov", "%r8, (%rdi)", 4, true, false},
        {"mov", "8(%rsi), %r9", 4, false, false},
        {"mov", "%r9, %r14", 3, false, false},
        {"cmp", "%r14, %r15", 3, false, false},
        {"adc", "$0x0, %r9", 4, false, false},
        {"sub", "%r9, %r13", 3, false, false},   // measured unit, index 10
        {"mov", "%r13, 8(%rdi)", 4, true, false},
        {"add", "$0x8, %rsi", 4, false, false},
        {"lea", "8(%rdi), %rdi", 4, false, false},
        {"mov", "%rbx, %rcx", 3, false, false},
        {"cmp", "%rbx, %rdx", 3, false, false},
        {"jne", "loop", 3, false, true},
    };
    // Bytes before the measured sub: units 0..9.
    int prefix = 0;
    for (int i = 0; i < 10; ++i) prefix += rows[i].length;
    std::uint64_t start =
        static_cast<std::uint64_t>(((sub_offset - prefix) % 16 + 16) % 16);

    listing::Program prog;
    std::uint64_t addr = start;
    for (const Row& row : rows) {
        listing::Instruction ins;
        ins.address = addr;
        ins.length = row.length;
        ins.mnemonic = row.mnemonic;
        ins.operands = row.operands;
        ins.writes_memory = row.write;
        ins.is_cond_branch = row.cbr;
        prog.instructions.push_back(std::move(ins));
        addr += static_cast<std::uint64_t>(row.length);
    }
    prog.labels.emplace("loop", start);
    for (std::size_t i = 0; i + 1 < prog.instructions.size(); ++i) {
        if (prog.instructions[i].mnemonic == "cmp" &&
            prog.instructions[i + 1].is_cond_branch)
            prog.instructions[i].fuses_with_next = true;
    }
    listing::validate(prog);
    return prog;
}

namespace {

// Latency stream for the measured subtraction of one loop body.
class SubSampler {
public:
    SubSampler(int sub_offset, const timing::TimingParams& params)
        : params_(params),
          fused_(frontend::fuse(montmul_loop_program(sub_offset))) {
        const listing::Instruction& sub = fused_.instructions.at(10);
        if (sub.mnemonic != "sub")
            throw std::logic_error("measured unit is not the subtraction");
        feature_ = frontend::alignment_feature(fused_, sub.address);
        delta_ = timing::effective_delta(params_, fused_, 10);
    }

    double draw(double run_shift, Rng& rng) const {
        return timing::sample_latency(params_, feature_, false, delta_, run_shift, rng)
            .latency;
    }

private:
    timing::TimingParams params_;
    listing::Program fused_;
    frontend::AlignmentFeature feature_;
    double delta_ = 0.0;
};

} // namespace

MontmulResult montmul_pipeline(const MontmulConfig& config) {
    if (config.repetitions < 2)
        throw std::invalid_argument("montmul needs at least two repetitions");
    if (config.calls < 1 || config.loop_len < 1 || config.reference_samples < 2)
        throw std::invalid_argument("montmul counts must be positive");

    SubSampler real(config.real_offset, config.timing);
    SubSampler dummy(config.dummy_offset, config.timing);

    // Everything is measured within one enclave run: a single shared shift.
    double shift;
    {
        Rng rng(mix_seed(config.seed, timing::kTagRunShift));
        shift = rng.uniform(-config.timing.run_shift_max, config.timing.run_shift_max);
    }

    Rng ref_rng(mix_seed(config.seed, 0x72656673ULL));
    std::vector<double> ref_real(config.reference_samples);
    std::vector<double> ref_dummy(config.reference_samples);
    for (double& x : ref_real) x = real.draw(shift, ref_rng);
    for (double& x : ref_dummy) x = dummy.draw(shift, ref_rng);

    Rng truth_rng(mix_seed(config.seed, 0x74727574ULL));
    Rng call_rng(mix_seed(config.seed, 0x63616c6cULL));

    MontmulResult out;
    out.observations.reserve(config.calls);
    int samples_per_call = config.repetitions * config.loop_len;
    for (int c = 0; c < config.calls; ++c) {
        bool is_real = truth_rng.bernoulli(0.5);
        const SubSampler& sampler = is_real ? real : dummy;
        std::vector<double> obs(samples_per_call);
        for (double& x : obs) x = sampler.draw(shift, call_rng);

        int verdict = stats::three_value_classify(obs, ref_real, ref_dummy, config.alpha);
        BranchObservation ob;
        ob.execution_index = c;
        if (verdict > 0) {
            ob.predicted = Decision::taken;
            ob.confidence = stats::welch_t(obs, ref_dummy).p_value;
        } else if (verdict < 0) {
            ob.predicted = Decision::not_taken;
            ob.confidence = stats::welch_t(obs, ref_real).p_value;
        } else {
            ob.predicted = Decision::unclassified;
            ob.confidence = std::min(stats::welch_t(obs, ref_real).p_value,
                                     stats::welch_t(obs, ref_dummy).p_value);
        }
        if (ob.predicted != Decision::unclassified) {
            ++out.decided;
            bool said_real = ob.predicted == Decision::taken;
            if (said_real == is_real) ++out.correct;
        }
        out.observations.push_back(ob);
    }
    out.decided_fraction = static_cast<double>(out.decided) / config.calls;
    out.decided_accuracy =
        out.decided ? static_cast<double>(out.correct) / out.decided : 0.0;
    return out;
}

// ---- binary-GCD trace and RSA key recovery ----

namespace {

unsigned trailing_zeros_u64(std::uint64_t x) {
    return static_cast<unsigned>(std::countr_zero(x));
}

unsigned trailing_zeros_big(const BigInt& x) {
    return static_cast<unsigned>(mp::lsb(x));
}

template <typename UInt>
unsigned trailing_zeros(const UInt& x) {
    if constexpr (std::is_same_v<UInt, std::uint64_t>)
        return trailing_zeros_u64(x);
    else
        return trailing_zeros_big(x);
}

} // namespace

template <typename UInt>
GcdResult<UInt> binary_gcd_reference(UInt a, UInt b) {
    if (a == 0 || b == 0) throw std::invalid_argument("gcd operands must be positive");
    GcdResult<UInt> out;
    unsigned lz = std::min(trailing_zeros<UInt>(a), trailing_zeros<UInt>(b));
    out.trace.initial_common_shift = lz;
    UInt ta = a >> lz;
    UInt tb = b >> lz;
    while (ta != 0) {
        GcdIteration it;
        it.tz_a = trailing_zeros<UInt>(ta);
        ta >>= it.tz_a;
        it.tz_b = trailing_zeros<UInt>(tb);
        tb >>= it.tz_b;
        if (ta >= tb) {
            it.direction = Decision::taken;
            ta = (ta - tb) >> 1;
        } else {
            it.direction = Decision::not_taken;
            tb = (tb - ta) >> 1;
        }
        out.trace.iterations.push_back(it);
    }
    out.gcd = tb << lz;
    return out;
}

template GcdResult<std::uint64_t> binary_gcd_reference(std::uint64_t, std::uint64_t);
template GcdResult<BigInt> binary_gcd_reference(BigInt, BigInt);

std::optional<BigInt> reconstruct_phi(const GcdTrace& trace, const BigInt& e,
                                      const BigInt& expected_gcd) {
    BigInt ta = 0;
    BigInt tb = expected_gcd;
    for (auto it = trace.iterations.rbegin(); it != trace.iterations.rend(); ++it) {
        switch (it->direction) {
            case Decision::taken:
                ta = (ta << 1) + tb;
                break;
            case Decision::not_taken:
                tb = (tb << 1) + ta;
                break;
            case Decision::unclassified:
                throw std::invalid_argument("trace has unclassified directions");
        }
        ta <<= it->tz_a;
        tb <<= it->tz_b;
    }
    ta <<= trace.initial_common_shift;
    tb <<= trace.initial_common_shift;
    if (ta == e) return tb;
    if (tb == e) return ta;
    return std::nullopt;
}

namespace {

// d with e*d == 1 (mod m); empty when gcd(e, m) != 1.
std::optional<BigInt> mod_inverse(const BigInt& e, const BigInt& m) {
    BigInt old_r = e, r = m;
    BigInt old_s = 1, s = 0;
    while (r != 0) {
        BigInt q = old_r / r;
        BigInt tmp = old_r - q * r;
        old_r = r;
        r = tmp;
        tmp = old_s - q * s;
        old_s = s;
        s = tmp;
    }
    if (old_r != 1) return std::nullopt;
    BigInt d = old_s % m;
    if (d < 0) d += m;
    return d;
}

} // namespace

std::optional<RsaKey> try_recover_rsa_key(const BigInt& n, const BigInt& e,
                                          const BigInt& phi) {
    if (n < 6 || e < 3 || phi < 1 || phi >= n) return std::nullopt;
    BigInt s = n - phi + 1;  // p + q
    BigInt disc = s * s - 4 * n;
    if (disc < 0) return std::nullopt;
    BigInt root = mp::sqrt(disc);
    if (root * root != disc) return std::nullopt;
    if ((s + root) % 2 != 0) return std::nullopt;
    BigInt p = (s + root) / 2;
    BigInt q = (s - root) / 2;
    if (q < 2 || p * q != n) return std::nullopt;

    BigInt pm1 = p - 1, qm1 = q - 1;
    BigInt lambda = pm1 * qm1 / mp::gcd(pm1, qm1);
    std::optional<BigInt> d = mod_inverse(e, lambda);
    if (!d) return std::nullopt;
    RsaKey key;
    key.n = n;
    key.e = e;
    key.p = p;
    key.q = q;
    key.d = *d;
    key.phi = phi;
    return key;
}

RsaKey recover_rsa_key(const BigInt& n, const BigInt& e, const BigInt& phi) {
    std::optional<RsaKey> key = try_recover_rsa_key(n, e, phi);
    if (!key) throw std::invalid_argument("phi does not factor n");
    return *key;
}

GreedySearchResult greedy_key_search(const GcdTrace& trace, const BigInt& e,
                                     const BigInt& n) {
    std::vector<std::size_t> unclassified;
    GcdTrace work = trace;
    for (std::size_t i = 0; i < work.iterations.size(); ++i) {
        if (work.iterations[i].direction == Decision::unclassified) {
            unclassified.push_back(i);
            work.iterations[i].direction = Decision::not_taken;
        }
    }

    GreedySearchResult out;
    for (std::size_t flips = 0; flips <= unclassified.size(); ++flips) {
        if (flips > 0) {
            // Cumulatively assign taken from the last unclassified backward.
            work.iterations[unclassified[unclassified.size() - flips]].direction =
                Decision::taken;
        }
        ++out.attempts;
        std::optional<BigInt> phi = reconstruct_phi(work, e);
        if (phi) {
            std::optional<RsaKey> key = try_recover_rsa_key(n, e, *phi);
            if (key) {
                out.key = std::move(key);
                out.flips_used = static_cast<int>(flips);
                return out;
            }
        }
    }
    return out;
}

RsaKeygen generate_rsa_key(int prime_bits, const BigInt& e, Rng& rng) {
    if (prime_bits < 8 || prime_bits > 4096)
        throw std::invalid_argument("prime size out of range");
    if (e < 3 || e % 2 == 0) throw std::invalid_argument("e must be an odd integer >= 3");

    // Deterministic bridge into the Miller-Rabin witness generator.
    std::mt19937_64 witness_rng(rng.next_u64());
    auto random_prime = [&]() {
        while (true) {
            BigInt c = 0;
            for (int filled = 0; filled < prime_bits; filled += 64) {
                c <<= 64;
                c += rng.next_u64();
            }
            c >>= (64 - prime_bits % 64) % 64;
            mp::bit_set(c, static_cast<unsigned>(prime_bits - 1));
            mp::bit_set(c, 0);
            if (mp::miller_rabin_test(c, 64, witness_rng)) return c;
        }
    };

    while (true) {
        BigInt p = random_prime();
        BigInt q = random_prime();
        if (p == q) continue;
        BigInt phi = (p - 1) * (q - 1);
        if (mp::gcd(e, phi) != 1) continue;
        if (p < q) std::swap(p, q);
        BigInt lambda = (p - 1) * (q - 1) / mp::gcd(p - 1, q - 1);
        RsaKeygen kg;
        kg.n = p * q;
        kg.e = e;
        kg.p = p;
        kg.q = q;
        kg.phi = phi;
        kg.d = *mod_inverse(e, lambda);
        return kg;
    }
}

namespace {

// Per-iteration three-value classification of the balanced shift-loop branch:
// both paths write memory; their alignment contrast is what the attacker
// reads. Models the classifier the trace-collection phase would run.
class IterationClassifier {
public:
    IterationClassifier(const timing::TimingParams& params, int samples,
                        std::uint64_t seed)
        : params_(params), samples_(samples), rng_(mix_seed(seed, 0x69746572ULL)) {
        Rng shift_rng(mix_seed(seed, timing::kTagRunShift));
        shift_ = shift_rng.uniform(-params.run_shift_max, params.run_shift_max);
        ref_taken_.resize(3000);
        ref_fall_.resize(3000);
        for (double& x : ref_taken_) x = draw(true);
        for (double& x : ref_fall_) x = draw(false);
    }

    Decision observe(Decision truth) {
        std::vector<double> obs(samples_);
        for (double& x : obs) x = draw(truth == Decision::taken);
        int verdict = stats::three_value_classify(obs, ref_taken_, ref_fall_);
        if (verdict > 0) return Decision::taken;
        if (verdict < 0) return Decision::not_taken;
        return Decision::unclassified;
    }

private:
    double draw(bool taken) {
        // Write at offset 5 (taken) vs 13 (fallthrough): p_slow 0.9 vs 0.1.
        double p = taken ? params_.p_slow_table[5] : params_.p_slow_table[13];
        double x = params_.base_mu + shift_ + rng_.normal(0.0, params_.base_sigma);
        if (rng_.bernoulli(p)) x += params_.delta;
        return x;
    }

    timing::TimingParams params_;
    int samples_;
    Rng rng_;
    double shift_ = 0.0;
    std::vector<double> ref_taken_;
    std::vector<double> ref_fall_;
};

} // namespace

RsaAttackReport rsa_attack_end_to_end(const RsaAttackConfig& config) {
    if (config.keys < 1) throw std::invalid_argument("need at least one key");
    if (config.unclassified_mean_fraction < 0.0 || config.unclassified_mean_fraction > 0.5)
        throw std::invalid_argument("unclassified_mean_fraction must be in [0, 0.5]");

    RsaAttackReport report;
    report.runs.reserve(config.keys);
    for (int k = 0; k < config.keys; ++k) {
        std::uint64_t key_seed = mix_seed(config.seed, static_cast<std::uint64_t>(k));
        Rng key_rng(mix_seed(key_seed, 0x6b657967ULL));
        RsaKeygen kg = generate_rsa_key(config.prime_bits, config.e, key_rng);

        GcdResult<BigInt> victim = binary_gcd_reference(BigInt(config.e), kg.phi);
        GcdTrace observed = victim.trace;
        const std::size_t n_iter = observed.iterations.size();

        switch (config.model) {
            case UnclassificationModel::reliable:
                break;
            case UnclassificationModel::suffix_weighted: {
                Rng unc_rng(mix_seed(key_seed, 0x756e636cULL));
                for (std::size_t i = 0; i < n_iter; ++i) {
                    double p = 2.0 * config.unclassified_mean_fraction *
                               (static_cast<double>(i) + 0.5) / static_cast<double>(n_iter);
                    if (unc_rng.bernoulli(std::min(p, 1.0)))
                        observed.iterations[i].direction = Decision::unclassified;
                }
                break;
            }
            case UnclassificationModel::simulated: {
                IterationClassifier cls(config.timing, config.branch_samples, key_seed);
                for (GcdIteration& it : observed.iterations)
                    it.direction = cls.observe(it.direction);
                break;
            }
        }

        int unclassified = 0;
        for (const GcdIteration& it : observed.iterations)
            if (it.direction == Decision::unclassified) ++unclassified;

        GreedySearchResult search = greedy_key_search(observed, config.e, kg.n);
        RsaRunReport rr;
        rr.iterations = static_cast<int>(n_iter);
        rr.unclassified = unclassified;
        rr.flips_used = search.flips_used;
        rr.success = search.key.has_value() && search.key->p == kg.p &&
                     search.key->q == kg.q;
        report.runs.push_back(rr);
    }

    double successes = 0.0, unc_sum = 0.0, iter_sum = 0.0;
    std::vector<int> unc_counts;
    unc_counts.reserve(report.runs.size());
    for (const RsaRunReport& rr : report.runs) {
        successes += rr.success ? 1.0 : 0.0;
        unc_sum += rr.unclassified;
        iter_sum += rr.iterations;
        unc_counts.push_back(rr.unclassified);
    }
    double n = static_cast<double>(report.runs.size());
    report.success_fraction = successes / n;
    report.mean_unclassified = unc_sum / n;
    report.mean_iterations = iter_sum / n;
    std::sort(unc_counts.begin(), unc_counts.end());
    report.median_unclassified =
        unc_counts.size() % 2
            ? unc_counts[unc_counts.size() / 2]
            : 0.5 * (unc_counts[unc_counts.size() / 2 - 1] + unc_counts[unc_counts.size() / 2]);
    return report;
}

std::string gcd_trace_to_csv(const GcdTrace& trace) {
    std::ostringstream out;
    out << "iteration,tz_a,tz_b,direction\n";
    out << "# initial_common_shift=" << trace.initial_common_shift << '\n';
    for (std::size_t i = 0; i < trace.iterations.size(); ++i) {
        const GcdIteration& it = trace.iterations[i];
        out << i << ',' << it.tz_a << ',' << it.tz_b << ',' << to_string(it.direction)
            << '\n';
    }
    return out.str();
}

GcdTrace gcd_trace_from_csv(const std::string& text) {
    GcdTrace trace;
    std::istringstream in(text);
    std::string line;
    bool header_seen = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::size_t eq = line.find('=');
            if (eq != std::string::npos &&
                line.find("initial_common_shift") != std::string::npos)
                trace.initial_common_shift =
                    static_cast<unsigned>(std::stoul(line.substr(eq + 1)));
            continue;
        }
        if (!header_seen) {
            header_seen = true;  // column header
            continue;
        }
        std::istringstream row(line);
        std::string field;
        GcdIteration it;
        std::getline(row, field, ',');  // iteration index (implicit)
        std::getline(row, field, ',');
        it.tz_a = static_cast<unsigned>(std::stoul(field));
        std::getline(row, field, ',');
        it.tz_b = static_cast<unsigned>(std::stoul(field));
        std::getline(row, field, ',');
        if (field == "taken") it.direction = Decision::taken;
        else if (field == "not_taken") it.direction = Decision::not_taken;
        else if (field == "unclassified") it.direction = Decision::unclassified;
        else throw std::invalid_argument("unknown direction " + field);
        trace.iterations.push_back(it);
    }
    return trace;
}

} // namespace fetchlab::attacks
