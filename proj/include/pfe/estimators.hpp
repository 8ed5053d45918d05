#pragma once

// Partition function estimators. Every estimate is carried in the log
// domain; z_hat is exp(log_z) and may be +inf when that overflows.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "pfe/dataset.hpp"
#include "pfe/numeric.hpp"
#include "pfe/retrieval.hpp"

namespace pfe {

enum class Method { Exact, Uniform, NMIMPS, MIMPS, MINCE, FMBE };

inline const char* to_string(Method m) {
    switch (m) {
        case Method::Exact: return "Exact";
        case Method::Uniform: return "Uniform";
        case Method::NMIMPS: return "NMIMPS";
        case Method::MIMPS: return "MIMPS";
        case Method::MINCE: return "MINCE";
        case Method::FMBE: return "FMBE";
    }
    return "?";
}

inline Method parse_method(std::string_view s) {
    std::string lower(s);
    for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (lower == "exact") return Method::Exact;
    if (lower == "uniform") return Method::Uniform;
    if (lower == "nmimps") return Method::NMIMPS;
    if (lower == "mimps") return Method::MIMPS;
    if (lower == "mince") return Method::MINCE;
    if (lower == "fmbe") return Method::FMBE;
    throw std::invalid_argument("unknown estimator '" + std::string(s) + "'");
}

struct EstimateDiagnostics {
    int iterations = 0;
    int bracket_steps = 0;
    bool converged = true;
    bool clamped = false;  // FMBE: raw estimate was <= 0 and was floored
};

struct Estimate {
    double log_z = 0.0;
    double z_hat = 1.0;
    Method method = Method::Exact;
    EstimateDiagnostics diagnostics{};

    static Estimate from_log(double log_z, Method m, EstimateDiagnostics diag = {}) {
        return Estimate{log_z, std::exp(log_z), m, diag};
    }
};

struct EstimatorConfig {
    std::size_t k = 0;
    std::size_t l = 0;
    std::uint64_t seed = 0;
    double mince_tol = 1e-10;
    int mince_max_iter = 100;

    void validate(std::size_t n_total) const {
        if (k + l == 0) throw std::invalid_argument("need k + l >= 1");
        if (k + l > n_total)
            throw std::invalid_argument("k + l = " + std::to_string(k + l) + " exceeds N = " +
                                        std::to_string(n_total));
        if (!(mince_tol > 0.0)) throw std::invalid_argument("mince_tol must be positive");
        if (mince_max_iter < 1) throw std::invalid_argument("mince_max_iter must be >= 1");
    }
};

inline Estimate exact_z_from_scores(std::span<const double> scores) {
    return Estimate::from_log(log_sum_exp(scores), Method::Exact);
}

// Z(q) = sum_i exp(v_i . q)
inline Estimate exact_z(const EmbeddingMatrix& v, std::span<const double> q) {
    return exact_z_from_scores(all_scores(v, q));
}

// Head sum only; never exceeds the true Z.
inline Estimate estimate_nmimps(const TopKResult& head) {
    if (head.empty()) throw std::invalid_argument("NMIMPS needs a non-empty head");
    return Estimate::from_log(log_sum_exp(head.scores), Method::NMIMPS);
}

namespace detail {

inline void check_disjoint(const TopKResult& head, const TailSample& tail) {
    std::unordered_set<std::size_t> h(head.indices.begin(), head.indices.end());
    for (std::size_t i : tail.indices)
        if (h.count(i)) throw std::invalid_argument("head and tail overlap at index " + std::to_string(i));
}

inline void check_tail_scores(const TailSample& tail) {
    if (tail.scores.size() != tail.indices.size())
        throw std::invalid_argument("tail sample carries no scores (sample it with a query)");
}

}  // namespace detail

// Exact head plus the uniformly sampled tail scaled by (N - k) / l. With an
// empty head this is the plain uniform estimator N/l * sum exp(u).
inline Estimate estimate_mimps(const TopKResult& head, const TailSample& tail, std::size_t n_total) {
    const std::size_t k = head.size();
    const std::size_t l = tail.size();
    detail::check_tail_scores(tail);
    if (k > n_total || k + l > n_total) throw std::invalid_argument("k + l exceeds N");
    if (k + l == 0) throw std::invalid_argument("MIMPS needs k + l >= 1");
    if (l == 0 && k < n_total) throw std::invalid_argument("MIMPS with l = 0 requires k = N");
    detail::check_disjoint(head, tail);

    const double log_head = log_sum_exp(head.scores);
    double log_tail = kNegInf;
    if (l > 0)
        log_tail = log_sum_exp(tail.scores) + std::log(static_cast<double>(n_total - k)) -
                   std::log(static_cast<double>(l));
    return Estimate::from_log(log_add_exp(log_head, log_tail), k == 0 ? Method::Uniform : Method::MIMPS);
}

inline Estimate estimate_uniform(const TailSample& tail, std::size_t n_total) {
    return estimate_mimps(TopKResult{}, tail, n_total);
}

// One-parameter NCE objective with the head as "data" samples and the
// uniform tail as noise samples. With a_i = exp(u_i) k (N-k) / l for the head
// and b_j defined the same way for the tail,
//     -J(Z) = sum_i log(Z/a_i + 1) + sum_j log(b_j/Z + 1)
// and Z dJ/dZ = -g(Z) with
//     g(Z) = sum_i Z/(Z + a_i) - sum_j b_j/(Z + b_j),
// strictly increasing from -l to k. The estimate is the root of g.
class MinceObjective {
public:
    MinceObjective(std::span<const double> head_scores, std::span<const double> tail_scores, std::size_t n_total) {
        const double k = static_cast<double>(head_scores.size());
        const double l = static_cast<double>(tail_scores.size());
        const double log_c = std::log(k) + std::log(static_cast<double>(n_total) - k) - std::log(l);
        log_a_.reserve(head_scores.size());
        log_b_.reserve(tail_scores.size());
        for (double u : head_scores) log_a_.push_back(u + log_c);
        for (double u : tail_scores) log_b_.push_back(u + log_c);
    }

    std::span<const double> log_a() const { return log_a_; }
    std::span<const double> log_b() const { return log_b_; }

    // g at Z = exp(t), evaluated through logistic terms so any t is safe.
    double g_at_log(double t) const {
        double s = 0.0;
        for (double la : log_a_) s += logistic(t - la);
        for (double lb : log_b_) s -= logistic(lb - t);
        return s;
    }

    struct Derivs {
        double g, dg, d2g;
    };

    // g, g' and g'' with respect to Z, at Z = exp(t). With s = Z/(Z+a) and
    // r = b/(Z+b):
    //   g'  = [sum s(1-s) + sum r(1-r)] / Z
    //   g'' = -2 [sum s^2(1-s) + sum r(1-r)^2] / Z^2
    // Returned scaled to Z = 1, i.e. as g, Z g', Z^2 g''.
    Derivs scaled_derivs_at_log(double t) const {
        double g = 0.0, d1 = 0.0, d2 = 0.0;
        for (double la : log_a_) {
            const double s = logistic(t - la);
            const double c = logistic(la - t);  // 1 - s without cancellation
            g += s;
            d1 += s * c;
            d2 += s * s * c;
        }
        for (double lb : log_b_) {
            const double r = logistic(lb - t);
            const double c = logistic(t - lb);
            g -= r;
            d1 += r * c;
            d2 += r * c * c;
        }
        return {g, d1, -2.0 * d2};
    }

private:
    std::vector<double> log_a_;
    std::vector<double> log_b_;
};

// Root of g by Halley's method in Z, kept inside a sign-change bracket
// found by doubling/halving from the NMIMPS value; bisection whenever a
// Halley step leaves the bracket. Z is represented as exp(shift) * z so the
// iteration stays in range for any score magnitude.
inline Estimate estimate_mince(const TopKResult& head, const TailSample& tail, std::size_t n_total,
                               const EstimatorConfig& config) {
    const std::size_t k = head.size();
    const std::size_t l = tail.size();
    if (k == 0 || l == 0) throw std::invalid_argument("MINCE needs k >= 1 and l >= 1");
    if (k + l > n_total) throw std::invalid_argument("k + l exceeds N");
    detail::check_tail_scores(tail);
    detail::check_disjoint(head, tail);
    if (!(config.mince_tol > 0.0) || config.mince_max_iter < 1)
        throw std::invalid_argument("invalid MINCE solver settings");

    const MinceObjective obj(head.scores, tail.scores, n_total);
    EstimateDiagnostics diag;

    // Bracket [t_lo, t_hi] in log Z with g(lo) <= 0 <= g(hi).
    constexpr double kLn2 = 0.69314718055994530942;
    constexpr int kMaxBracketSteps = 4200;  // covers the whole double exponent range twice
    const double t0 = log_sum_exp(head.scores);
    double t_lo = t0, t_hi = t0;
    double g0 = obj.g_at_log(t0);
    if (g0 == 0.0) return Estimate::from_log(t0, Method::MINCE, diag);
    if (g0 < 0.0) {
        while (obj.g_at_log(t_hi) < 0.0) {
            t_lo = t_hi;
            t_hi += kLn2;
            if (++diag.bracket_steps > kMaxBracketSteps) throw std::runtime_error("MINCE bracket search failed");
        }
    } else {
        while (obj.g_at_log(t_lo) > 0.0) {
            t_hi = t_lo;
            t_lo -= kLn2;
            if (++diag.bracket_steps > kMaxBracketSteps) throw std::runtime_error("MINCE bracket search failed");
        }
    }
    if (t_lo == t_hi) return Estimate::from_log(t_lo, Method::MINCE, diag);

    // Scaled Z-space: Z = exp(shift) * z, bracket z in [1, 2].
    const double shift = t_lo;
    double lo = 1.0;
    double hi = std::exp(t_hi - shift);
    double z = std::exp(t0 - shift);
    if (!(z > lo && z < hi)) z = 0.5 * (lo + hi);

    diag.converged = false;
    for (int it = 0; it < config.mince_max_iter; ++it) {
        diag.iterations = it + 1;
        const double t = shift + std::log(z);
        const auto d = obj.scaled_derivs_at_log(t);
        if (d.g == 0.0) {
            diag.converged = true;
            break;
        }
        if (d.g < 0.0)
            lo = z;
        else
            hi = z;
        // Halley step on g(Z); scaled derivatives give g'(z) = d1 / z etc.
        const double g1 = d.dg / z;
        const double g2 = d.d2g / (z * z);
        const double denom = 2.0 * g1 * g1 - d.g * g2;
        double next = (denom != 0.0 && std::isfinite(denom)) ? z - 2.0 * d.g * g1 / denom : hi + 1.0;
        if (!(next > lo && next < hi)) next = 0.5 * (lo + hi);
        const double step = std::abs(next - z);
        z = next;
        if (step <= config.mince_tol * z || (hi - lo) <= 4.0 * std::numeric_limits<double>::epsilon() * hi) {
            diag.converged = true;
            break;
        }
    }
    if (!diag.converged) z = 0.5 * (lo + hi);
    return Estimate::from_log(shift + std::log(z), Method::MINCE, diag);
}

// p(class) = exp(u_class - log Z)
inline double predict_prob(const EmbeddingMatrix& v, std::span<const double> q, std::size_t class_index,
                           const Estimate& z) {
    check_query_dim(v, q);
    if (class_index >= v.size()) throw std::out_of_range("class index out of range");
    if (!std::isfinite(z.log_z)) throw std::invalid_argument("partition estimate must be positive and finite");
    return std::exp(dot(v.row(class_index), q) - z.log_z);
}

}  // namespace pfe
