// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fetchlab/timing.hpp"

namespace fetchlab::stats {

struct Gmm2Fit {
    double mu_fast = 0.0;
    double mu_slow = 0.0;
    double sigma_fast = 0.0;
    double sigma_slow = 0.0;
    double weight_slow = 0.0;
    double log_likelihood = 0.0;
    int iterations = 0;
    bool converged = false;
    bool degenerate = false;            // collapsed component or zero spread
    std::vector<double> ll_history;     // log-likelihood after each iteration
};

// EM fit of a two-component Gaussian mixture. Initialization splits the
// sorted samples at the median; equal starting weights. Components are
// ordered so mu_fast <= mu_slow on return.
Gmm2Fit fit_gmm2(const std::vector<double>& samples, double tolerance = 1e-8,
                 int max_iter = 500);

struct WelchResult {
    double t_statistic = 0.0;
    double degrees_of_freedom = 0.0;
    double p_value = 1.0;
};

// Welch's two-sample t-test with Welch-Satterthwaite degrees of freedom and a
// two-sided p-value. Zero variance in both samples: equal means give t = 0,
// p = 1; distinct means give an infinite statistic and p = 0.
WelchResult welch_t(const std::vector<double>& a, const std::vector<double>& b);

// Sample Pearson correlation. Throws std::invalid_argument on length
// mismatch, n < 2, or zero variance in either argument.
double pearson(const std::vector<double>& xs, const std::vector<double>& ys);

// bit = 1 iff latency >= threshold.
std::vector<int> classify_threshold(const std::vector<double>& latencies,
                                    double threshold);

// Regularized incomplete beta I_x(a, b) via the standard continued fraction;
// exposed for the p-value oracle tests.
double incomplete_beta(double a, double b, double x);

// Two-sided tail of Student's t with dof degrees of freedom.
double student_t_two_sided_p(double t, double dof);

// Three-valued decision between two reference populations: +1 when obs fits a
// and rejects b, -1 for the reverse, 0 when neither criterion fires (the
// unclassified rule: Welch undecided and the mean outside both exclusive
// 2-sigma regions).
int three_value_classify(const std::vector<double>& obs,
                         const std::vector<double>& ref_a,
                         const std::vector<double>& ref_b, double alpha = 1e-3);

// Per-run secret guesses from the latency at one step of a single-branch
// program. Latencies are normalized per run by the mean of the pre-branch
// steps, pooled into a two-component fit, and cut at the midpoint of the
// fitted means; the public alignment model decides which side means "taken"
// (ties predict taken).
struct DiscriminatorClassification {
    std::vector<int> bits;   // per run: 1 = taken path
    double threshold = 0.0;  // on normalized latencies
    int polarity = 0;        // +1 slow=>taken, -1 slow=>fallthrough, 0 tie
    Gmm2Fit fit;
};
DiscriminatorClassification classify_discriminator(
    const listing::Program& fused_program, const timing::TimingParams& params,
    const std::vector<timing::Run>& runs, int discriminator_step);

// Step count before the first branch decision (the secret-independent prefix
// used for per-run normalization).
int prefix_steps(const listing::Program& fused_program);

struct HeatmapCell {
    int x_offset = 0;
    int y_offset = 0;
    double success_rate = 0.0;
    int runs = 0;
};

struct HeatmapConfig {
    int reps = 25;
    int add_len = 3;
    int mov_len = 5;
    int runs_per_cell = 200;       // even: secrets are balanced pairs
    int discriminator_step = 10;   // 5th mov of the executed path
    timing::TimingParams timing;
    std::uint64_t base_seed = 1;
    int threads = 0;               // 0 = hardware concurrency
};

// Success rate of the one-step classifier over the full offset grid
// [0,31]x[0,31]. Cells are seeded canonically by their mod-16 equivalence
// class and simulate balanced antithetic secret pairs, so the structural
// facts the sweep demonstrates (mod-16 periodicity, transpose symmetry,
// 50% diagonals) hold exactly rather than up to sampling error.
std::vector<HeatmapCell> heatmap_sweep(const HeatmapConfig& config);

std::string heatmap_to_csv(const std::vector<HeatmapCell>& cells);
// 32 rows (y) by 32 columns (x) of success percentages.
std::string heatmap_to_matrix(const std::vector<HeatmapCell>& cells);

} // namespace fetchlab::stats
