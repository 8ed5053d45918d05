#pragma once

// Measurement protocol: relative error, multi-seed sweeps over estimator
// settings, query-noise and retrieval-error studies, CDF profiles of the
// per-class contributions, and the index-backed end-to-end comparison
// against the Z = 1 heuristic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfe/dataset.hpp"
#include "pfe/estimators.hpp"
#include "pfe/featuremap.hpp"
#include "pfe/mips_index.hpp"
#include "pfe/numeric.hpp"
#include "pfe/retrieval.hpp"

namespace pfe {

// 100 |z_hat - z| / z
inline double relative_error(double z_hat, double z_true) {
    if (!(z_true > 0.0)) throw std::invalid_argument("true partition value must be positive");
    return 100.0 * std::abs(z_hat - z_true) / z_true;
}

// Same quantity from log values: 100 |expm1(log z_hat - log z)|.
inline double relative_error_log(double log_z_hat, double log_z_true) {
    if (!std::isfinite(log_z_true)) throw std::invalid_argument("true log partition value must be finite");
    return 100.0 * std::abs(std::expm1(log_z_hat - log_z_true));
}

// log |exp(a) - exp(b)|; -inf when equal.
inline double log_abs_diff(double a, double b) {
    if (a == b) return kNegInf;
    const double hi = std::max(a, b), lo = std::min(a, b);
    return hi + std::log(-std::expm1(lo - hi));
}

struct Setting {
    Method method = Method::MIMPS;
    std::size_t k = 0;
    std::size_t l = 0;
    std::size_t features = 0;  // FMBE only
    double p = 2.0;            // FMBE only
    RetrievalErrorSpec ret_err{};

    std::string estimator_label() const {
        if (method == Method::FMBE) return "FMBE(P=" + std::to_string(features) + ")";
        return to_string(method);
    }

    bool uses_head() const {
        return method == Method::MIMPS || method == Method::NMIMPS || method == Method::MINCE;
    }

    void validate(std::size_t n_total) const {
        switch (method) {
            case Method::Exact: return;
            case Method::FMBE:
                if (features == 0) throw std::invalid_argument("FMBE needs P >= 1");
                if (!(p >= 2.0)) throw std::invalid_argument("FMBE needs p >= 2");
                return;
            case Method::Uniform:
                if (k != 0) throw std::invalid_argument("the uniform estimator has k = 0");
                if (l == 0 || l > n_total) throw std::invalid_argument("uniform needs 1 <= l <= N");
                return;
            case Method::NMIMPS:
                if (k == 0) throw std::invalid_argument("NMIMPS needs k >= 1");
                break;
            case Method::MIMPS:
                if (k == 0) throw std::invalid_argument("MIMPS needs k >= 1 (use Uniform for k = 0)");
                if (l == 0 && k < n_total) throw std::invalid_argument("MIMPS with l = 0 requires k = N");
                break;
            case Method::MINCE:
                if (k == 0 || l == 0) throw std::invalid_argument("MINCE needs k >= 1 and l >= 1");
                break;
        }
        if (k + l > n_total) throw std::invalid_argument("k + l exceeds N");
        if (k + ret_err.dropped_ranks.size() > n_total)
            throw std::invalid_argument("k + |dropped ranks| exceeds N");
        for (std::size_t r : ret_err.dropped_ranks)
            if (r > k + ret_err.dropped_ranks.size())
                throw std::invalid_argument("dropped rank " + std::to_string(r) + " unreachable at k = " +
                                            std::to_string(k));
    }
};

struct SweepOptions {
    unsigned threads = 1;
    double mince_tol = 1e-10;
    int mince_max_iter = 100;
    std::string dataset_id;
};

struct SweepRow {
    Setting setting;
    double noise = 0.0;
    double mu = 0.0;     // mean over seeds of the per-seed mean error, percent
    double sigma = 0.0;  // stdev of per-seed means / sqrt(n_seeds), percent
    std::size_t n_queries = 0;
    std::size_t n_seeds = 0;
    std::size_t n_failures = 0;
    std::vector<double> per_seed_mu;
    // log z_hat per [seed][query]; NaN where the estimator failed.
    std::vector<std::vector<double>> log_z_hat;
};

struct SweepReport {
    std::string dataset_id;
    std::vector<std::uint64_t> seeds;
    std::vector<SweepRow> rows;
    // True log Z per query, per noise level in row order of first use.
    std::map<double, std::vector<double>> true_log_z;
};

namespace detail {

inline std::uint64_t fmbe_model_seed(std::uint64_t seed, std::size_t features) {
    return derive_seed(seed, 0xF3BEull, features);
}

inline void aggregate(SweepRow& row, std::span<const double> true_log_z) {
    row.per_seed_mu.clear();
    row.n_failures = 0;
    for (const auto& per_query : row.log_z_hat) {
        std::vector<double> errs;
        errs.reserve(per_query.size());
        for (std::size_t q = 0; q < per_query.size(); ++q) {
            if (std::isnan(per_query[q])) {
                ++row.n_failures;
                continue;
            }
            errs.push_back(relative_error_log(per_query[q], true_log_z[q]));
        }
        row.per_seed_mu.push_back(mean(errs));
    }
    row.n_seeds = row.log_z_hat.size();
    row.mu = mean(row.per_seed_mu);
    row.sigma = sample_stddev(row.per_seed_mu) / std::sqrt(static_cast<double>(row.n_seeds));
}

}  // namespace detail

// Runs every setting with every seed over the same queries. True Z per
// query is computed once; the ranked head is computed once per query at the
// deepest depth any setting needs. Tail samples are seeded from
// (seed, query) only: every setting sees the same random stream, so
// settings are compared on paired draws, and nothing depends on the thread
// count.
inline SweepReport run_sweep(const EmbeddingMatrix& v, const QuerySet& queries, std::span<const Setting> grid,
                             std::span<const std::uint64_t> seeds, const SweepOptions& opts = {}) {
    if (seeds.empty()) throw std::invalid_argument("need at least one seed");
    if (queries.size() == 0) throw std::invalid_argument("need at least one query");
    if (queries.dim != v.dim()) throw std::invalid_argument("query dimension does not match the embeddings");
    const std::size_t n = v.size();
    for (const auto& s : grid) s.validate(n);

    const std::size_t m = queries.size();
    const std::size_t n_seeds = seeds.size();

    // One completed feature map per (FMBE setting, seed).
    std::vector<std::vector<FeatureMapModel>> models(grid.size());
    for (std::size_t s = 0; s < grid.size(); ++s) {
        if (grid[s].method != Method::FMBE) continue;
        for (std::uint64_t seed : seeds)
            models[s].push_back(precompute_lambda_tilde(
                build_feature_map(v.dim(), grid[s].features, grid[s].p,
                                  detail::fmbe_model_seed(seed, grid[s].features)),
                v));
    }

    std::size_t depth = 0;
    for (const auto& s : grid)
        if (s.uses_head()) depth = std::max(depth, s.k + s.ret_err.dropped_ranks.size());

    SweepReport rep;
    rep.dataset_id = opts.dataset_id;
    rep.seeds.assign(seeds.begin(), seeds.end());
    std::vector<double> true_log_z(m);
    rep.rows.resize(grid.size());
    for (std::size_t s = 0; s < grid.size(); ++s) {
        rep.rows[s].setting = grid[s];
        rep.rows[s].noise = queries.noise_level;
        rep.rows[s].n_queries = m;
        rep.rows[s].log_z_hat.assign(n_seeds, std::vector<double>(m, std::numeric_limits<double>::quiet_NaN()));
    }

    EstimatorConfig mince_cfg;
    mince_cfg.mince_tol = opts.mince_tol;
    mince_cfg.mince_max_iter = opts.mince_max_iter;

    parallel_for(m, opts.threads, [&](std::size_t qi) {
        const auto q = queries.query(qi);
        const auto scores = all_scores(v, q);
        true_log_z[qi] = log_sum_exp(scores);
        const TopKResult ranked = depth > 0 ? top_k_from_scores(scores, depth) : TopKResult{};

        for (std::size_t s = 0; s < grid.size(); ++s) {
            const Setting& st = grid[s];
            TopKResult head;
            if (st.uses_head())
                head = st.ret_err.none() ? ranked.prefix(st.k) : drop_ranks(ranked, st.ret_err, st.k);
            for (std::size_t si = 0; si < n_seeds; ++si) {
                double out = std::numeric_limits<double>::quiet_NaN();
                try {
                    TailSample tail;
                    if (st.l > 0 && st.method != Method::FMBE && st.method != Method::NMIMPS) {
                        std::mt19937_64 rng(derive_seed(seeds[si], qi));
                        tail.indices = sample_complement(n, head.indices, st.l, rng);
                        tail.scores.reserve(st.l);
                        for (std::size_t i : tail.indices) tail.scores.push_back(scores[i]);
                    }
                    switch (st.method) {
                        case Method::Exact: out = true_log_z[qi]; break;
                        case Method::NMIMPS: out = estimate_nmimps(head).log_z; break;
                        case Method::Uniform:
                        case Method::MIMPS: out = estimate_mimps(head, tail, n).log_z; break;
                        case Method::MINCE: out = estimate_mince(head, tail, n, mince_cfg).log_z; break;
                        case Method::FMBE: out = estimate_fmbe(models[s][si], q).log_z; break;
                    }
                } catch (const std::exception&) {
                    out = std::numeric_limits<double>::quiet_NaN();
                }
                rep.rows[s].log_z_hat[si][qi] = out;
            }
        }
    });

    for (auto& row : rep.rows) detail::aggregate(row, true_log_z);
    rep.true_log_z[queries.noise_level] = std::move(true_log_z);
    return rep;
}

// Same grid at several query-noise levels; queries derive from the same
// source rows and perturbation seed at every level.
inline SweepReport run_noise_study(const EmbeddingMatrix& v, std::span<const std::size_t> sources,
                                   std::span<const double> noise_levels, std::span<const Setting> grid,
                                   std::span<const std::uint64_t> seeds, std::uint64_t query_seed,
                                   const SweepOptions& opts = {}) {
    if (noise_levels.empty()) throw std::invalid_argument("need at least one noise level");
    SweepReport all;
    all.dataset_id = opts.dataset_id;
    all.seeds.assign(seeds.begin(), seeds.end());
    for (double rho : noise_levels) {
        const QuerySet qs = perturb_queries(v, sources, rho, query_seed);
        auto rep = run_sweep(v, qs, grid, seeds, opts);
        for (auto& row : rep.rows) all.rows.push_back(std::move(row));
        for (auto& [k, z] : rep.true_log_z) all.true_log_z[k] = std::move(z);
    }
    return all;
}

// Every base setting under every retrieval-error spec.
inline SweepReport run_retrieval_error_study(const EmbeddingMatrix& v, const QuerySet& queries,
                                             std::span<const RetrievalErrorSpec> specs,
                                             std::span<const Setting> base, std::span<const std::uint64_t> seeds,
                                             const SweepOptions& opts = {}) {
    std::vector<Setting> grid;
    for (const auto& b : base) {
        if (!b.uses_head()) throw std::invalid_argument("retrieval errors need an estimator with a head");
        for (const auto& spec : specs) {
            Setting s = b;
            s.ret_err = spec;
            grid.push_back(s);
        }
    }
    return run_sweep(v, queries, grid, seeds, opts);
}

inline std::string format_fixed(double x, int digits = 6) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, x);
    return buf;
}

inline constexpr const char* kSweepCsvHeader = "estimator,k,l,noise,ret_err,mu,sigma,n_queries,n_seeds";

inline std::string sweep_csv(const SweepReport& rep) {
    std::ostringstream out;
    out << "# mu: mean over seeds of the per-seed mean of 100|Z_hat - Z|/Z\n";
    out << "# sigma: stdev of per-seed mu / sqrt(n_seeds)\n";
    if (!rep.dataset_id.empty()) out << "# dataset: " << rep.dataset_id << "\n";
    out << "# seeds:";
    for (auto s : rep.seeds) out << ' ' << s;
    out << "\n" << kSweepCsvHeader << "\n";
    for (const auto& r : rep.rows) {
        out << r.setting.estimator_label() << ',' << r.setting.k << ',' << r.setting.l << ','
            << format_double(r.noise) << ',' << r.setting.ret_err.label() << ',' << format_fixed(r.mu) << ','
            << format_fixed(r.sigma) << ',' << r.n_queries << ',' << r.n_seeds << '\n';
    }
    return out.str();
}

// Cumulative share of Z captured by the top-ranked classes.
struct CdfProfile {
    std::string label;
    std::vector<double> cumulative;  // cumulative[r] covers ranks 1..r+1

    std::size_t size() const noexcept { return cumulative.size(); }

    double coverage_at(std::size_t k) const {
        if (k == 0) return 0.0;
        if (k >= cumulative.size()) return 1.0;
        return cumulative[k - 1];
    }

    // Smallest k with coverage_at(k) >= fraction.
    std::size_t ranks_for(double fraction) const {
        auto it = std::lower_bound(cumulative.begin(), cumulative.end(), fraction);
        return it == cumulative.end() ? cumulative.size() : static_cast<std::size_t>(it - cumulative.begin()) + 1;
    }
};

inline CdfProfile cdf_profile_from_scores(std::vector<double> scores, std::string label) {
    std::sort(scores.begin(), scores.end(), std::greater<>());
    CdfProfile p;
    p.label = std::move(label);
    if (scores.empty()) return p;
    const double top = scores.front();
    std::vector<double> w(scores.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp(scores[i] - top);
    CompensatedSum total;
    for (double x : w) total.add(x);
    const double z = total.value();
    p.cumulative.resize(w.size());
    CompensatedSum run;
    for (std::size_t i = 0; i < w.size(); ++i) {
        run.add(w[i]);
        p.cumulative[i] = std::min(1.0, run.value() / z);
    }
    p.cumulative.back() = 1.0;
    return p;
}

inline CdfProfile cdf_profile(const EmbeddingMatrix& v, std::span<const double> q, std::string label) {
    return cdf_profile_from_scores(all_scores(v, q), std::move(label));
}

inline std::string cdf_csv(const CdfProfile& p) {
    std::ostringstream out;
    out << "rank,cum_fraction\n";
    for (std::size_t i = 0; i < p.cumulative.size(); ++i) out << (i + 1) << ',' << format_double(p.cumulative[i]) << '\n';
    return out.str();
}

struct UnitHeuristicComparison {
    double abse_estimator = 0.0;  // sum |Z_hat - Z|
    double abse_unit = 0.0;       // sum |1 - Z|
    double pct_better = 0.0;      // share of queries with |Z_hat - Z| < |1 - Z|, percent
    std::size_t n_better = 0;
    std::size_t n = 0;
};

inline UnitHeuristicComparison compare_to_unit_heuristic(std::span<const double> log_z_hat,
                                                         std::span<const double> log_z_true) {
    if (log_z_hat.size() != log_z_true.size()) throw std::invalid_argument("estimate and truth sizes differ");
    UnitHeuristicComparison c;
    c.n = log_z_hat.size();
    std::vector<double> est(c.n), unit(c.n);
    for (std::size_t i = 0; i < c.n; ++i) {
        const double le = log_abs_diff(log_z_hat[i], log_z_true[i]);
        const double lu = log_abs_diff(0.0, log_z_true[i]);
        est[i] = std::exp(le);
        unit[i] = std::exp(lu);
        if (le < lu) ++c.n_better;
    }
    c.abse_estimator = pairwise_sum(est);
    c.abse_unit = pairwise_sum(unit);
    c.pct_better = c.n ? 100.0 * static_cast<double>(c.n_better) / static_cast<double>(c.n) : 0.0;
    return c;
}

struct EndToEndRow {
    std::size_t k = 0;
    std::size_t l = 0;
    double abse_mips = 0.0;  // mean over seeds of sum |Z_hat - Z|
    double abse_nce = 0.0;   // sum |1 - Z|
    double pct_better = 0.0;
    double speedup = 0.0;
    double recall = 0.0;
    std::size_t n_queries = 0;
    std::size_t n_seeds = 0;
};

struct EndToEndReport {
    SearchBudget budget{};
    std::vector<EndToEndRow> rows;
    std::vector<double> true_log_z;
};

// MIMPS with the head retrieved through the index instead of the oracle.
inline EndToEndReport run_end_to_end(const EmbeddingMatrix& v, const QuerySet& queries, const AugmentedIndex& index,
                                     std::span<const std::pair<std::size_t, std::size_t>> grid,
                                     std::span<const std::uint64_t> seeds, SearchBudget budget,
                                     const SweepOptions& opts = {}) {
    if (seeds.empty()) throw std::invalid_argument("need at least one seed");
    if (queries.size() == 0) throw std::invalid_argument("need at least one query");
    if (index.size() != v.size() || index.dim() != v.dim()) throw std::invalid_argument("index built on other data");
    const std::size_t n = v.size();
    for (auto [k, l] : grid)
        if (k == 0 || l == 0 || k + l > n) throw std::invalid_argument("end-to-end needs k, l >= 1 and k + l <= N");

    const std::size_t m = queries.size();
    EndToEndReport rep;
    rep.budget = budget;
    rep.true_log_z.resize(m);
    parallel_for(m, opts.threads, [&](std::size_t qi) { rep.true_log_z[qi] = exact_z(v, queries.query(qi)).log_z; });

    for (std::size_t g = 0; g < grid.size(); ++g) {
        const auto [k, l] = grid[g];
        std::vector<std::vector<double>> est(seeds.size(), std::vector<double>(m));
        parallel_for(m, opts.threads, [&](std::size_t qi) {
            const auto q = queries.query(qi);
            const TopKResult head = approx_top_k(index, q, k, budget);
            for (std::size_t si = 0; si < seeds.size(); ++si) {
                std::mt19937_64 rng(derive_seed(seeds[si], qi));
                TailSample tail;
                tail.indices = sample_complement(n, head.indices, l, rng);
                for (std::size_t i : tail.indices) tail.scores.push_back(dot(v.row(i), q));
                est[si][qi] = estimate_mimps(head, tail, n).log_z;
            }
        });
        EndToEndRow row;
        row.k = k;
        row.l = l;
        row.n_queries = m;
        row.n_seeds = seeds.size();
        std::vector<double> abse(seeds.size());
        std::size_t better = 0;
        for (std::size_t si = 0; si < seeds.size(); ++si) {
            const auto c = compare_to_unit_heuristic(est[si], rep.true_log_z);
            abse[si] = c.abse_estimator;
            row.abse_nce = c.abse_unit;
            better += c.n_better;
        }
        row.abse_mips = mean(abse);
        row.pct_better = 100.0 * static_cast<double>(better) / static_cast<double>(m * seeds.size());
        const auto sp = measure_speedup(index, v, queries, k, budget);
        row.speedup = sp.speedup;
        row.recall = sp.recall;
        rep.rows.push_back(row);
    }
    return rep;
}

inline constexpr const char* kEndToEndCsvHeader = "k,l,abse_mips,abse_nce,pct_better,speedup,recall,n_queries,n_seeds";

inline std::string end_to_end_csv(const EndToEndReport& rep) {
    std::ostringstream out;
    out << "# budget (scored candidates): " << rep.budget.max_leaf_checks << "\n";
    out << "# speedup is wall-clock and hardware dependent\n";
    out << kEndToEndCsvHeader << "\n";
    for (const auto& r : rep.rows)
        out << r.k << ',' << r.l << ',' << format_double(r.abse_mips) << ',' << format_double(r.abse_nce) << ','
            << format_fixed(r.pct_better, 2) << ',' << format_fixed(r.speedup, 2) << ',' << format_fixed(r.recall, 4)
            << ',' << r.n_queries << ',' << r.n_seeds << '\n';
    return out.str();
}

}  // namespace pfe
