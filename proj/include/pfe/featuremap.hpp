#pragma once

// Random Maclaurin features for the kernel exp(x . y).
//
// Feature j draws a degree M_j ~ P[M = m] = (1 - 1/p) p^-m and M_j
// Rademacher vectors w_1..w_M, and evaluates
//     phi_j(x) = sqrt(a_M / P[M]) * prod_r (w_r . x),    a_m = 1/m!
// so that E[phi_j(x) phi_j(y)] = sum_m a_m (x . y)^m = exp(x . y). For the
// default p = 2 the scale is sqrt(a_M p^(M+1)).
//
// Since Z(q) = sum_i exp(v_i . q) ~ sum_j phi_j(q) lambda_j with
//     lambda_j = (1/P) sum_i phi_j(v_i),
// the O(N) sum collapses to O(P) once lambda is precomputed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pfe/binary_io.hpp"
#include "pfe/dataset.hpp"
#include "pfe/estimators.hpp"
#include "pfe/numeric.hpp"

namespace pfe {

// sign in {-1, 0, +1}; value = sign * exp(log_abs).
struct SignedLog {
    int sign = 0;
    double log_abs = kNegInf;

    double value() const { return sign == 0 ? 0.0 : sign * std::exp(log_abs); }

    static SignedLog from_value(double x) {
        if (x == 0.0) return {};
        return {x > 0 ? 1 : -1, std::log(std::abs(x))};
    }

    bool operator==(const SignedLog&) const = default;
};

// Running signed sum in the log domain.
class SignedLogSum {
public:
    void add(SignedLog x) {
        if (x.sign > 0)
            pos_.push_back(x.log_abs);
        else if (x.sign < 0)
            neg_.push_back(x.log_abs);
    }

    SignedLog result() const {
        const double lp = log_sum_exp(pos_);
        const double ln = log_sum_exp(neg_);
        if (lp == ln) return {};
        if (lp > ln) return {1, lp + std::log1p(-std::exp(ln - lp))};
        return {-1, ln + std::log1p(-std::exp(lp - ln))};
    }

private:
    std::vector<double> pos_;
    std::vector<double> neg_;
};

inline constexpr std::uint32_t kMaxFeatureDegree = 64;

class FeatureMapModel {
public:
    FeatureMapModel() = default;

    std::size_t dim() const noexcept { return dim_; }
    std::size_t features() const noexcept { return degrees_.size(); }
    double p() const noexcept { return p_; }
    std::uint64_t seed() const noexcept { return seed_; }
    std::span<const std::uint32_t> degrees() const noexcept { return degrees_; }
    std::uint32_t degree(std::size_t j) const { return degrees_[j]; }

    // Rademacher vector r (0-based, r < degree(j)) of feature j.
    std::span<const std::int8_t> sign_row(std::size_t j, std::size_t r) const {
        return {signs_.data() + (row_offset_[j] + r) * dim_, dim_};
    }

    // log sqrt(a_M / P[M = M_j])
    double log_coeff(std::size_t j) const { return log_coeff_for(degrees_[j], p_); }

    bool has_lambda() const noexcept { return !lambda_.empty(); }
    std::span<const SignedLog> lambda_tilde() const noexcept { return lambda_; }
    bool lambda_finite() const noexcept { return lambda_finite_; }

    static double log_coeff_for(std::uint32_t m, double p) {
        const double log_pmf = std::log1p(-1.0 / p) - static_cast<double>(m) * std::log(p);
        return 0.5 * (-std::lgamma(static_cast<double>(m) + 1.0) - log_pmf);
    }

    bool operator==(const FeatureMapModel&) const = default;

private:
    friend FeatureMapModel build_feature_map(std::size_t, std::size_t, double, std::uint64_t);
    friend FeatureMapModel precompute_lambda_tilde(FeatureMapModel, const EmbeddingMatrix&);
    friend FeatureMapModel load_feature_map(const std::string&);
    friend FeatureMapModel with_lambda_tilde(FeatureMapModel, std::vector<SignedLog>);

    void index_rows() {
        row_offset_.assign(degrees_.size() + 1, 0);
        for (std::size_t j = 0; j < degrees_.size(); ++j) row_offset_[j + 1] = row_offset_[j] + degrees_[j];
    }

    std::size_t dim_ = 0;
    double p_ = 2.0;
    std::uint64_t seed_ = 0;
    std::vector<std::uint32_t> degrees_;
    std::vector<std::size_t> row_offset_;
    std::vector<std::int8_t> signs_;
    std::vector<SignedLog> lambda_;
    bool lambda_finite_ = true;
};

// Degrees are drawn from the geometric law truncated at kMaxFeatureDegree
// (tail mass below 1e-19 at p = 2).
inline FeatureMapModel build_feature_map(std::size_t d, std::size_t n_features, double p, std::uint64_t seed) {
    if (d == 0) throw std::invalid_argument("feature map needs d >= 1");
    if (n_features == 0) throw std::invalid_argument("feature map needs P >= 1");
    if (!(p >= 2.0) || !std::isfinite(p)) throw std::invalid_argument("feature map needs p >= 2");

    FeatureMapModel m;
    m.dim_ = d;
    m.p_ = p;
    m.seed_ = seed;
    m.degrees_.resize(n_features);
    std::mt19937_64 rng(seed);
    std::geometric_distribution<std::uint32_t> geo(1.0 - 1.0 / p);
    for (auto& deg : m.degrees_) {
        do {
            deg = geo(rng);
        } while (deg > kMaxFeatureDegree);
    }
    m.index_rows();
    m.signs_.resize(m.row_offset_.back() * d);
    std::uint64_t bits = 0;
    int left = 0;
    for (auto& s : m.signs_) {
        if (left == 0) {
            bits = rng();
            left = 64;
        }
        s = (bits & 1u) ? std::int8_t{1} : std::int8_t{-1};
        bits >>= 1;
        --left;
    }
    return m;
}

inline SignedLog apply_feature(const FeatureMapModel& model, std::size_t j, std::span<const double> x) {
    if (x.size() != model.dim()) throw std::invalid_argument("feature input dimension mismatch");
    if (j >= model.features()) throw std::out_of_range("feature index out of range");
    SignedLog out{1, model.log_coeff(j)};
    for (std::size_t r = 0; r < model.degree(j); ++r) {
        const auto w = model.sign_row(j, r);
        double proj = 0.0;
        for (std::size_t c = 0; c < x.size(); ++c) proj += w[c] * x[c];
        if (proj == 0.0) return {};
        if (proj < 0) out.sign = -out.sign;
        out.log_abs += std::log(std::abs(proj));
    }
    return out;
}

inline FeatureMapModel with_lambda_tilde(FeatureMapModel model, std::vector<SignedLog> lambda) {
    if (lambda.size() != model.features()) throw std::invalid_argument("lambda size does not equal P");
    model.lambda_finite_ = std::all_of(lambda.begin(), lambda.end(),
                                       [](const SignedLog& s) { return s.sign == 0 || std::isfinite(s.log_abs); });
    model.lambda_ = std::move(lambda);
    return model;
}

// lambda_j = (1/P) sum_i phi_j(v_i). Products are formed in linear space
// over cache-sized blocks of vectors and summed with compensation; any
// feature whose products leave the normal double range is redone in the
// log domain.
inline FeatureMapModel precompute_lambda_tilde(FeatureMapModel model, const EmbeddingMatrix& v) {
    if (v.dim() != model.dim()) throw std::invalid_argument("feature map and embedding dimensions differ");
    const std::size_t n = v.size();
    const std::size_t d = v.dim();
    const std::size_t n_feat = model.features();
    constexpr std::size_t kBlock = 256;
    constexpr double kTiny = 1e-280;

    std::vector<CompensatedSum> pos(n_feat), neg(n_feat);
    std::vector<char> needs_log(n_feat, 0);
    std::vector<double> vt(d * kBlock), prod(kBlock), proj(kBlock);

    for (std::size_t start = 0; start < n; start += kBlock) {
        const std::size_t b = std::min(kBlock, n - start);
        for (std::size_t i = 0; i < b; ++i) {
            const auto row = v.row(start + i);
            for (std::size_t c = 0; c < d; ++c) vt[c * kBlock + i] = row[c];
        }
        for (std::size_t j = 0; j < n_feat; ++j) {
            const std::uint32_t deg = model.degree(j);
            if (deg == 0 || needs_log[j]) continue;
            std::fill(prod.begin(), prod.begin() + static_cast<std::ptrdiff_t>(b), 1.0);
            for (std::uint32_t r = 0; r < deg; ++r) {
                const auto w = model.sign_row(j, r);
                std::fill(proj.begin(), proj.begin() + static_cast<std::ptrdiff_t>(b), 0.0);
                for (std::size_t c = 0; c < d; ++c) {
                    const double* col = vt.data() + c * kBlock;
                    if (w[c] > 0)
                        for (std::size_t i = 0; i < b; ++i) proj[i] += col[i];
                    else
                        for (std::size_t i = 0; i < b; ++i) proj[i] -= col[i];
                }
                for (std::size_t i = 0; i < b; ++i) prod[i] *= proj[i];
            }
            for (std::size_t i = 0; i < b; ++i) {
                const double x = prod[i];
                const double ax = std::abs(x);
                if (!std::isfinite(x) || (ax != 0.0 && ax < kTiny) || ax > 1e280) {
                    needs_log[j] = 1;
                    break;
                }
                if (x > 0)
                    pos[j].add(x);
                else
                    neg[j].add(-x);
            }
        }
    }

    const double log_n_feat = std::log(static_cast<double>(n_feat));
    std::vector<SignedLog> lambda(n_feat);
    std::vector<double> x(d);
    for (std::size_t j = 0; j < n_feat; ++j) {
        const double lc = model.log_coeff(j);
        if (model.degree(j) == 0) {
            lambda[j] = {1, lc + std::log(static_cast<double>(n)) - log_n_feat};
            continue;
        }
        if (!needs_log[j]) {
            const double diff = pos[j].value() - neg[j].value();
            if (std::isfinite(diff)) {
                SignedLog s = SignedLog::from_value(diff);
                if (s.sign != 0) s.log_abs += lc - log_n_feat;
                lambda[j] = s;
                continue;
            }
        }
        SignedLogSum acc;
        for (std::size_t i = 0; i < n; ++i) {
            const auto row = v.row(i);
            std::copy(row.begin(), row.end(), x.begin());
            acc.add(apply_feature(model, j, x));
        }
        SignedLog s = acc.result();
        if (s.sign != 0) s.log_abs -= log_n_feat;
        lambda[j] = s;
    }
    return with_lambda_tilde(std::move(model), std::move(lambda));
}

struct FmbeOptions {
    // Lower bound applied when the signed sum is not positive.
    double floor = std::numeric_limits<double>::min();
};

// Z_hat(q) = sum_j lambda_j phi_j(q)
inline Estimate estimate_fmbe(const FeatureMapModel& model, std::span<const double> q, FmbeOptions opts = {}) {
    if (!model.has_lambda()) throw std::invalid_argument("feature map has no precomputed lambda");
    if (!(opts.floor > 0.0)) throw std::invalid_argument("FMBE floor must be positive");
    SignedLogSum acc;
    const auto lambda = model.lambda_tilde();
    for (std::size_t j = 0; j < model.features(); ++j) {
        if (lambda[j].sign == 0) continue;
        const SignedLog phi = apply_feature(model, j, q);
        if (phi.sign == 0) continue;
        acc.add({lambda[j].sign * phi.sign, lambda[j].log_abs + phi.log_abs});
    }
    const SignedLog z = acc.result();
    EstimateDiagnostics diag;
    if (z.sign <= 0 || z.log_abs < std::log(opts.floor)) {
        diag.clamped = true;
        auto est = Estimate::from_log(std::log(opts.floor), Method::FMBE, diag);
        est.z_hat = opts.floor;
        return est;
    }
    return Estimate::from_log(z.log_abs, Method::FMBE, diag);
}

// File layout (little-endian):
//   "PFEFMAP\0", u32 version, u64 d, u64 P, f64 p, u64 seed,
//   u32 degrees[P], sign bits (1 = +1) packed LSB-first over all rows,
//   u8 has_lambda, then per feature {i8 sign, f64 log_abs}.
inline constexpr std::uint32_t kFeatureMapVersion = 1;

inline void save_feature_map(const FeatureMapModel& m, const std::string& path) {
    io::Writer w;
    w.put_bytes(std::string_view("PFEFMAP\0", 8));
    w.put<std::uint32_t>(kFeatureMapVersion);
    w.put<std::uint64_t>(m.dim());
    w.put<std::uint64_t>(m.features());
    w.put<double>(m.p());
    w.put<std::uint64_t>(m.seed());
    for (auto deg : m.degrees()) w.put<std::uint32_t>(deg);
    std::uint8_t byte = 0;
    int nbits = 0;
    for (std::size_t j = 0; j < m.features(); ++j)
        for (std::size_t r = 0; r < m.degree(j); ++r)
            for (auto s : m.sign_row(j, r)) {
                if (s > 0) byte |= static_cast<std::uint8_t>(1u << nbits);
                if (++nbits == 8) {
                    w.put<std::uint8_t>(byte);
                    byte = 0;
                    nbits = 0;
                }
            }
    if (nbits) w.put<std::uint8_t>(byte);
    w.put<std::uint8_t>(m.has_lambda() ? 1 : 0);
    for (const auto& l : m.lambda_tilde()) {
        w.put<std::int8_t>(static_cast<std::int8_t>(l.sign));
        w.put<double>(l.log_abs);
    }
    w.save(path);
}

inline FeatureMapModel load_feature_map(const std::string& path) {
    auto r = io::Reader::from_file(path);
    if (r.get_bytes(8) != std::string_view("PFEFMAP\0", 8)) throw std::runtime_error("not a feature map file");
    const auto version = r.get<std::uint32_t>();
    if (version != kFeatureMapVersion)
        throw std::runtime_error("unsupported feature map version " + std::to_string(version));
    FeatureMapModel m;
    m.dim_ = r.get<std::uint64_t>();
    const auto n_feat = r.get<std::uint64_t>();
    m.p_ = r.get<double>();
    m.seed_ = r.get<std::uint64_t>();
    if (m.dim_ == 0 || n_feat == 0 || !(m.p_ >= 2.0)) throw std::runtime_error("corrupt feature map header");
    m.degrees_.resize(n_feat);
    for (auto& deg : m.degrees_) {
        deg = r.get<std::uint32_t>();
        if (deg > kMaxFeatureDegree) throw std::runtime_error("corrupt feature degree");
    }
    m.index_rows();
    m.signs_.resize(m.row_offset_.back() * m.dim_);
    std::uint8_t byte = 0;
    for (std::size_t i = 0; i < m.signs_.size(); ++i) {
        if (i % 8 == 0) byte = r.get<std::uint8_t>();
        m.signs_[i] = ((byte >> (i % 8)) & 1u) ? std::int8_t{1} : std::int8_t{-1};
    }
    if (r.get<std::uint8_t>()) {
        std::vector<SignedLog> lambda(n_feat);
        for (auto& l : lambda) {
            l.sign = r.get<std::int8_t>();
            l.log_abs = r.get<double>();
        }
        m = with_lambda_tilde(std::move(m), std::move(lambda));
    }
    if (!r.at_end()) throw std::runtime_error("trailing bytes in feature map file");
    return m;
}

}  // namespace pfe
