// Copyright (c) fetchlab contributors.
// SPDX-License-Identifier: Apache-2.0
#include "fetchlab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace fetchlab::stats {

namespace {

double mean_of(const std::vector<double>& xs) {
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

// Unbiased sample variance.
double variance_of(const std::vector<double>& xs, double mean) {
    double s = 0.0;
    for (double x : xs) s += (x - mean) * (x - mean);
    return s / static_cast<double>(xs.size() - 1);
}

double log_normal_pdf(double x, double mu, double sigma) {
    static const double kLogSqrt2Pi = 0.5 * std::log(2.0 * 3.14159265358979323846);
    double z = (x - mu) / sigma;
    return -0.5 * z * z - std::log(sigma) - kLogSqrt2Pi;
}

// Continued fraction for the incomplete beta (Lentz's algorithm).
double beta_cf(double a, double b, double x) {
    constexpr int kMaxIter = 400;
    constexpr double kEps = 1e-16;
    constexpr double kTiny = 1e-300;
    double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::fabs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::fabs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::fabs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < kEps) break;
    }
    return h;
}

} // namespace

double incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0)) throw std::invalid_argument("beta parameters must be positive");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                      a * std::log(x) + b * std::log1p(-x);
    double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cf(a, b, x) / a;
    return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

double student_t_two_sided_p(double t, double dof) {
    if (dof <= 0.0) throw std::invalid_argument("degrees of freedom must be positive");
    if (std::isinf(t)) return 0.0;
    return incomplete_beta(dof / 2.0, 0.5, dof / (dof + t * t));
}

Gmm2Fit fit_gmm2(const std::vector<double>& samples, double tolerance, int max_iter) {
    const std::size_t n = samples.size();
    if (n < 10) throw std::invalid_argument("fit_gmm2 needs at least 10 samples");

    std::vector<double> sorted = samples;
    std::sort(sorted.begin(), sorted.end());
    const double spread = sorted.back() - sorted.front();

    Gmm2Fit fit;
    if (spread == 0.0) {
        fit.mu_fast = fit.mu_slow = sorted.front();
        fit.sigma_fast = fit.sigma_slow = 0.0;
        fit.weight_slow = 0.5;
        fit.degenerate = true;
        fit.converged = true;
        return fit;
    }
    const double sigma_floor = std::max(spread * 1e-6, 1e-12);

    // Median-split initialization.
    std::size_t half = n / 2;
    std::vector<double> lo(sorted.begin(), sorted.begin() + half);
    std::vector<double> hi(sorted.begin() + half, sorted.end());
    double mu1 = mean_of(lo), mu2 = mean_of(hi);
    double s1 = std::sqrt(std::max(lo.size() > 1 ? variance_of(lo, mu1) : 0.0, sigma_floor * sigma_floor));
    double s2 = std::sqrt(std::max(hi.size() > 1 ? variance_of(hi, mu2) : 0.0, sigma_floor * sigma_floor));
    double w2 = 0.5;

    std::vector<double> resp(n);  // responsibility of the slow (upper) component
    double prev_ll = -std::numeric_limits<double>::infinity();
    bool floored = false;

    for (int iter = 1; iter <= max_iter; ++iter) {
        // E step, with the log-likelihood of the current parameters.
        double ll = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double l1 = std::log(1.0 - w2) + log_normal_pdf(samples[i], mu1, s1);
            double l2 = std::log(w2) + log_normal_pdf(samples[i], mu2, s2);
            double m = std::max(l1, l2);
            double denom = std::exp(l1 - m) + std::exp(l2 - m);
            ll += m + std::log(denom);
            resp[i] = std::exp(l2 - m) / denom;
        }
        fit.ll_history.push_back(ll);
        fit.iterations = iter;
        if (iter > 1 && std::fabs(ll - prev_ll) < tolerance) {
            fit.converged = true;
            fit.log_likelihood = ll;
            break;
        }
        prev_ll = ll;
        fit.log_likelihood = ll;

        // M step.
        double r2 = 0.0, sum1 = 0.0, sum2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            r2 += resp[i];
            sum1 += (1.0 - resp[i]) * samples[i];
            sum2 += resp[i] * samples[i];
        }
        double r1 = static_cast<double>(n) - r2;
        if (r1 < 1e-9 || r2 < 1e-9) {
            fit.degenerate = true;
            break;
        }
        mu1 = sum1 / r1;
        mu2 = sum2 / r2;
        double v1 = 0.0, v2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            v1 += (1.0 - resp[i]) * (samples[i] - mu1) * (samples[i] - mu1);
            v2 += resp[i] * (samples[i] - mu2) * (samples[i] - mu2);
        }
        s1 = std::sqrt(v1 / r1);
        s2 = std::sqrt(v2 / r2);
        if (s1 < sigma_floor) { s1 = sigma_floor; floored = true; }
        if (s2 < sigma_floor) { s2 = sigma_floor; floored = true; }
        w2 = r2 / static_cast<double>(n);
    }

    if (mu1 > mu2) {
        std::swap(mu1, mu2);
        std::swap(s1, s2);
        w2 = 1.0 - w2;
    }
    fit.mu_fast = mu1;
    fit.mu_slow = mu2;
    fit.sigma_fast = s1;
    fit.sigma_slow = s2;
    fit.weight_slow = w2;
    if (floored && fit.sigma_fast <= sigma_floor && fit.sigma_slow <= sigma_floor)
        fit.degenerate = true;
    return fit;
}

WelchResult welch_t(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() < 2 || b.size() < 2)
        throw std::invalid_argument("welch_t needs at least two samples per side");
    double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    double ma = mean_of(a), mb = mean_of(b);
    double va = variance_of(a, ma), vb = variance_of(b, mb);

    WelchResult r;
    double sa = va / na, sb = vb / nb;
    if (sa + sb == 0.0) {
        r.degrees_of_freedom = na + nb - 2.0;
        if (ma == mb) {
            r.t_statistic = 0.0;
            r.p_value = 1.0;
        } else {
            r.t_statistic = ma > mb ? std::numeric_limits<double>::infinity()
                                    : -std::numeric_limits<double>::infinity();
            r.p_value = 0.0;
        }
        return r;
    }
    r.t_statistic = (ma - mb) / std::sqrt(sa + sb);
    r.degrees_of_freedom = (sa + sb) * (sa + sb) /
                           (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    r.p_value = student_t_two_sided_p(r.t_statistic, r.degrees_of_freedom);
    return r;
}

double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw std::invalid_argument("pearson length mismatch");
    if (xs.size() < 2) throw std::invalid_argument("pearson needs at least two points");
    double mx = mean_of(xs), my = mean_of(ys);
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        double dx = xs[i] - mx, dy = ys[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0)
        throw std::invalid_argument("pearson requires nonzero variance");
    double r = sxy / std::sqrt(sxx * syy);
    return std::clamp(r, -1.0, 1.0);
}

std::vector<int> classify_threshold(const std::vector<double>& latencies,
                                    double threshold) {
    if (!std::isfinite(threshold)) throw std::invalid_argument("threshold must be finite");
    std::vector<int> bits;
    bits.reserve(latencies.size());
    for (double x : latencies) bits.push_back(x >= threshold ? 1 : 0);
    return bits;
}

int three_value_classify(const std::vector<double>& obs,
                         const std::vector<double>& ref_a,
                         const std::vector<double>& ref_b, double alpha) {
    double pa = welch_t(obs, ref_a).p_value;
    double pb = welch_t(obs, ref_b).p_value;
    bool reject_a = pa < alpha, reject_b = pb < alpha;
    if (reject_b && !reject_a) return +1;
    if (reject_a && !reject_b) return -1;
    // Welch undecided: fall back to the exclusive 2-sigma regions around the
    // reference means; a mean inside exactly one region classifies.
    double ma = mean_of(ref_a), mb = mean_of(ref_b);
    double sa = std::sqrt(variance_of(ref_a, ma)), sb = std::sqrt(variance_of(ref_b, mb));
    double m = mean_of(obs);
    bool in_a = std::fabs(m - ma) <= 2.0 * sa;
    bool in_b = std::fabs(m - mb) <= 2.0 * sb;
    if (in_a && !in_b) return +1;
    if (in_b && !in_a) return -1;
    return 0;
}

int prefix_steps(const listing::Program& fused_program) {
    if (fused_program.branch_pairs.empty())
        throw std::invalid_argument("program has no branch pair");
    // Walk the path a zero secret takes; the decider's step closes the prefix.
    std::vector<std::uint64_t> path = listing::executed_path(fused_program, {0});
    for (std::size_t k = 0; k < path.size(); ++k)
        for (const listing::BranchPair& bp : fused_program.branch_pairs)
            if (bp.branch_address == path[k]) return static_cast<int>(k) + 1;
    throw std::invalid_argument("no branch decision along the path");
}

DiscriminatorClassification classify_discriminator(
    const listing::Program& fused_program, const timing::TimingParams& params,
    const std::vector<timing::Run>& runs, int discriminator_step) {
    if (runs.empty()) throw std::invalid_argument("no runs to classify");
    int prefix = prefix_steps(fused_program);
    if (discriminator_step < prefix)
        throw std::invalid_argument("discriminator step inside the pre-branch prefix");

    std::vector<double> normalized;
    normalized.reserve(runs.size());
    for (const timing::Run& run : runs) {
        if (static_cast<int>(run.samples.size()) <= discriminator_step)
            throw std::invalid_argument("run shorter than the discriminator step");
        double base = 0.0;
        for (int k = 0; k < prefix; ++k) base += run.samples[k].latency;
        base /= prefix;
        normalized.push_back(run.samples[discriminator_step].latency - base);
    }

    DiscriminatorClassification out;
    out.fit = fit_gmm2(normalized);
    out.threshold = 0.5 * (out.fit.mu_fast + out.fit.mu_slow);

    // Attacker-public polarity: which path's discriminator unit is likelier
    // slow under the alignment model.
    const listing::BranchPair& pair = fused_program.branch_pairs.front();
    auto p_at_step = [&](bool taken) {
        std::vector<int> secret = {taken == pair.taken_means_one ? 1 : 0};
        std::vector<std::uint64_t> path = listing::executed_path(fused_program, secret);
        if (static_cast<int>(path.size()) <= discriminator_step)
            throw std::invalid_argument("path shorter than the discriminator step");
        std::uint64_t addr = path[discriminator_step];
        const listing::Instruction& ins =
            fused_program.instructions[fused_program.index_of(addr)];
        return timing::mode_probability(
            params, frontend::alignment_feature(fused_program, addr), ins.writes_memory);
    };
    double p_taken = p_at_step(true), p_fall = p_at_step(false);
    out.polarity = p_taken > p_fall ? +1 : (p_taken < p_fall ? -1 : 0);

    out.bits.reserve(runs.size());
    for (double x : normalized) {
        int hot = x >= out.threshold ? 1 : 0;
        int bit = out.polarity >= 0 ? hot : 1 - hot;
        if (out.polarity == 0) bit = 1;  // tie: predict taken
        out.bits.push_back(bit);
    }
    return out;
}

std::vector<HeatmapCell> heatmap_sweep(const HeatmapConfig& config) {
    if (config.runs_per_cell < 100)
        throw std::invalid_argument("heatmap needs at least 100 runs per cell");
    if (config.runs_per_cell % 2 != 0)
        throw std::invalid_argument("runs_per_cell must be even");

    std::vector<HeatmapCell> cells(32 * 32);
    auto run_cell = [&](int x, int y) {
        listing::Program prog = frontend::fuse(listing::template_branch_program(
            x, y, config.reps, config.add_len, config.mov_len));
        timing::Simulator sim(prog, config.timing);
        // Cells agreeing in (x mod 16, y mod 16) share one canonical seed and
        // are therefore sample-identical; the transpose shares it too, with
        // the paired secrets swapping roles.
        std::uint64_t lo = static_cast<std::uint64_t>(std::min(x % 16, y % 16));
        std::uint64_t hi = static_cast<std::uint64_t>(std::max(x % 16, y % 16));
        std::uint64_t cell_seed = mix_seed(config.base_seed, 0x6865617493ULL, lo, hi);

        int pairs = config.runs_per_cell / 2;
        std::vector<timing::Run> runs;
        std::vector<int> truth;
        runs.reserve(config.runs_per_cell);
        truth.reserve(config.runs_per_cell);
        for (int j = 0; j < pairs; ++j) {
            std::uint64_t pair_seed = mix_seed(cell_seed, static_cast<std::uint64_t>(j));
            runs.push_back(sim.run({1}, pair_seed, static_cast<std::uint64_t>(2 * j)));
            truth.push_back(1);
            runs.push_back(sim.run({0}, pair_seed, static_cast<std::uint64_t>(2 * j + 1)));
            truth.push_back(0);
        }
        DiscriminatorClassification cls = classify_discriminator(
            prog, config.timing, runs, config.discriminator_step);
        int correct = 0;
        for (std::size_t r = 0; r < runs.size(); ++r)
            if (cls.bits[r] == truth[r]) ++correct;

        HeatmapCell cell;
        cell.x_offset = x;
        cell.y_offset = y;
        cell.runs = config.runs_per_cell;
        cell.success_rate = static_cast<double>(correct) / runs.size();
        cells[static_cast<std::size_t>(y) * 32 + x] = cell;
    };

    unsigned n_threads = config.threads > 0
                             ? static_cast<unsigned>(config.threads)
                             : std::max(1u, std::thread::hardware_concurrency());
    n_threads = std::min(n_threads, 1024u);
    if (n_threads <= 1) {
        for (int y = 0; y < 32; ++y)
            for (int x = 0; x < 32; ++x) run_cell(x, y);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(n_threads);
        for (unsigned t = 0; t < n_threads; ++t) {
            pool.emplace_back([&, t] {
                for (std::size_t i = t; i < 1024; i += n_threads)
                    run_cell(static_cast<int>(i % 32), static_cast<int>(i / 32));
            });
        }
        for (std::thread& th : pool) th.join();
    }
    return cells;
}

std::string heatmap_to_csv(const std::vector<HeatmapCell>& cells) {
    std::ostringstream out;
    out << "x_offset,y_offset,success_rate,runs\n";
    char buf[64];
    for (const HeatmapCell& c : cells) {
        std::snprintf(buf, sizeof buf, "%d,%d,%.4f,%d\n", c.x_offset, c.y_offset,
                      c.success_rate, c.runs);
        out << buf;
    }
    return out.str();
}

std::string heatmap_to_matrix(const std::vector<HeatmapCell>& cells) {
    if (cells.size() != 1024) throw std::invalid_argument("matrix needs the full 32x32 grid");
    std::ostringstream out;
    char buf[32];
    for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) {
            const HeatmapCell& c = cells[static_cast<std::size_t>(y) * 32 + x];
            std::snprintf(buf, sizeof buf, "%s%.2f", x ? " " : "", c.success_rate * 100.0);
            out << buf;
        }
        out << '\n';
    }
    return out.str();
}

} // namespace fetchlab::stats
