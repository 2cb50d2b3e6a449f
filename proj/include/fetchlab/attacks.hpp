// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <boost/multiprecision/cpp_int.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fetchlab/stats.hpp"

namespace fetchlab::attacks {

using BigInt = boost::multiprecision::cpp_int;

enum class Decision : std::uint8_t { not_taken = 0, taken = 1, unclassified = 2 };

std::string to_string(Decision d);

struct BranchObservation {
    int execution_index = 0;
    Decision predicted = Decision::unclassified;
    double confidence = 1.0;  // p-value against the rejected reference
};

// ---- balanced-branch extraction ----

struct ExtractResult {
    std::vector<int> bits;     // per run: 1 = taken
    double accuracy = 0.0;     // against the runs' ground-truth secrets
    double threshold = 0.0;
    int polarity = 0;
};

// Per-run secret guess from one discriminator step; thin wrapper over
// stats::classify_discriminator that scores against the simulated ground
// truth carried by the runs.
ExtractResult extract_branch_secret(const listing::Program& fused_program,
                                    const timing::TimingParams& params,
                                    const std::vector<timing::Run>& runs,
                                    int discriminator_step);

// ---- big-number comparator leak ----

struct CmpBnParams {
    double smaller_mu = 9400.0;      // smaller-than path: unimodal
    double bigger_fast_mu = 9300.0;  // bigger-than path: minor fast mode
    double bigger_slow_mu = 9525.0;  // bigger-than path: predominant slow mode
    double sigma = 30.0;
    double bigger_slow_weight = 0.55;
    int calibration_samples = 3000;  // per-path reference sets
    double fp_target = 0.03;         // one-sided threshold quantile
    int runs_per_bit = 1;
};

struct CmpBnResult {
    std::vector<Decision> claims;    // taken = claimed bigger-than
    double recovered_fraction = 0.0; // claimed-bigger and true-bigger, over all bits
    double claim_accuracy = 0.0;     // correct among claims
    double false_positive_rate = 0.0;  // claims among true smaller-than bits
    double threshold = 0.0;
    double fitted_smaller_mu = 0.0;
    stats::Gmm2Fit bigger_fit;
};

// One-sided rule over the comparator victim: latencies above the calibrated
// smaller-than quantile claim "bigger-than"; everything else stays
// unclassified. secret_bits: 1 = bigger-than call.
CmpBnResult cmp_bn_pipeline(const std::vector<int>& secret_bits,
                            const CmpBnParams& params, std::uint64_t seed);

// ---- Montgomery-multiplication subtraction classifier ----

struct MontmulConfig {
    int calls = 616;        // conditional-subtraction calls to classify
    int repetitions = 16;   // re-executions measured per call
    int loop_len = 6;       // inner-loop iterations per execution
    int reference_samples = 3000;  // attacker calibration per branch
    double alpha = 1e-3;    // 99.9% confidence
    int real_offset = 6;    // subtraction offset mod 16, real branch
    int dummy_offset = 14;  // subtraction offset mod 16, dummy branch
    timing::TimingParams timing;
    std::uint64_t seed = 1;
};

struct MontmulResult {
    std::vector<BranchObservation> observations;  // taken = real subtraction
    int decided = 0;
    int correct = 0;
    double decided_fraction = 0.0;
    double decided_accuracy = 0.0;
};

// Listing-2-shaped victim: a 16-unit loop body with two memory writes whose
// surrounded reg-to-reg subtraction is the measured instruction. Each call is
// classified against both references with Welch's t-test at alpha.
MontmulResult montmul_pipeline(const MontmulConfig& config);

// The loop body template; sub_offset positions the measured subtraction
// (0-based steppable unit 10) at that offset mod 16.
listing::Program montmul_loop_program(int sub_offset);

// ---- binary-GCD trace and RSA key recovery ----

struct GcdIteration {
    unsigned tz_a = 0;
    unsigned tz_b = 0;
    Decision direction = Decision::not_taken;
};

struct GcdTrace {
    unsigned initial_common_shift = 0;
    std::vector<GcdIteration> iterations;
};

template <typename UInt>
struct GcdResult {
    UInt gcd;
    GcdTrace trace;
};

// Subtraction-and-shift gcd, recording per-iteration trailing-zero counts and
// the branch direction (taken = first operand was >= the second). Matches the
// widely used balanced-branch construction: strip the common power of two,
// then loop { strip each operand's trailing zeros; subtract the smaller from
// the larger and halve }.
template <typename UInt>
GcdResult<UInt> binary_gcd_reference(UInt a, UInt b);

extern template GcdResult<std::uint64_t> binary_gcd_reference(std::uint64_t, std::uint64_t);
extern template GcdResult<BigInt> binary_gcd_reference(BigInt, BigInt);

// Backward replay of a fully classified trace from the terminal state
// (0, expected_gcd). Returns the operand paired with e, i.e. phi when the
// trace came from gcd(e, phi) or gcd(phi, e); empty when neither
// reconstructed operand equals e (a misclassified trace).
std::optional<BigInt> reconstruct_phi(const GcdTrace& trace, const BigInt& e,
                                      const BigInt& expected_gcd = 1);

struct RsaKey {
    BigInt n, e, p, q, d, phi;
};

// Solve x^2 - (n - phi + 1)x + n = 0 for the prime factors and derive
// d = e^-1 mod lcm(p-1, q-1). Empty on a non-square discriminant or a phi
// that does not factor n.
std::optional<RsaKey> try_recover_rsa_key(const BigInt& n, const BigInt& e,
                                          const BigInt& phi);

// Throwing form of the above: std::invalid_argument on an invalid phi.
RsaKey recover_rsa_key(const BigInt& n, const BigInt& e, const BigInt& phi);

struct GreedySearchResult {
    std::optional<RsaKey> key;
    int flips_used = 0;       // unclassified suffix entries assigned taken
    int attempts = 0;
};

// Paper-style repair of a trace with unclassified directions: default all of
// them to not_taken, then flip the last k unclassified entries to taken for
// k = 0, 1, ... until reconstruct_phi + try_recover_rsa_key yield a key that
// validates against (n, e).
GreedySearchResult greedy_key_search(const GcdTrace& trace, const BigInt& e,
                                     const BigInt& n);

struct RsaKeygen {
    BigInt n, e, d, p, q, phi;
};

// Two random primes of prime_bits each (Miller-Rabin, 64 rounds), rejected
// until gcd(e, phi) = 1.
RsaKeygen generate_rsa_key(int prime_bits, const BigInt& e, Rng& rng);

enum class UnclassificationModel : std::uint8_t {
    reliable = 0,        // every direction observed correctly
    suffix_weighted = 1, // synthetic unclassification ramp toward the suffix
    simulated = 2,       // per-iteration three-value classification on latencies
};

struct RsaAttackConfig {
    int keys = 100;
    int prime_bits = 256;
    BigInt e = 65537;
    UnclassificationModel model = UnclassificationModel::reliable;
    // Mean fraction of iterations left unclassified by the suffix_weighted
    // model; the per-iteration probability ramps linearly with position so
    // the late (information-bearing) region is hit hardest.
    double unclassified_mean_fraction = 0.087;
    int branch_samples = 32;  // latency samples per iteration, simulated model
    timing::TimingParams timing;
    std::uint64_t seed = 1;
};

struct RsaRunReport {
    bool success = false;
    int iterations = 0;
    int unclassified = 0;
    int flips_used = 0;
};

struct RsaAttackReport {
    std::vector<RsaRunReport> runs;
    double success_fraction = 0.0;
    double mean_unclassified = 0.0;
    double median_unclassified = 0.0;
    double mean_iterations = 0.0;
};

RsaAttackReport rsa_attack_end_to_end(const RsaAttackConfig& config);

// GcdTrace CSV: iteration,tz_a,tz_b,direction.
std::string gcd_trace_to_csv(const GcdTrace& trace);
GcdTrace gcd_trace_from_csv(const std::string& text);

} // namespace fetchlab::attacks
