#pragma once

// Exact top-k inner-product retrieval, rank-based retrieval-error
// injection, and uniform sampling of the tail outside the head.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

#include "pfe/dataset.hpp"
#include "pfe/numeric.hpp"

namespace pfe {

// Indices sorted by descending score, ties by ascending index.
struct TopKResult {
    std::vector<std::size_t> indices;
    std::vector<double> scores;
    bool clamped = false;  // requested k exceeded N

    std::size_t size() const noexcept { return indices.size(); }
    bool empty() const noexcept { return indices.empty(); }

    // First m entries (m <= size()).
    TopKResult prefix(std::size_t m) const {
        TopKResult r;
        r.indices.assign(indices.begin(), indices.begin() + static_cast<std::ptrdiff_t>(m));
        r.scores.assign(scores.begin(), scores.begin() + static_cast<std::ptrdiff_t>(m));
        return r;
    }
};

struct TailSample {
    std::vector<std::size_t> indices;
    std::vector<double> scores;  // empty when no query was supplied

    std::size_t size() const noexcept { return indices.size(); }
};

// 1-based ranks of the true neighbours that retrieval fails to return.
struct RetrievalErrorSpec {
    std::vector<std::size_t> dropped_ranks;

    RetrievalErrorSpec() = default;
    explicit RetrievalErrorSpec(std::vector<std::size_t> ranks) : dropped_ranks(std::move(ranks)) {
        std::sort(dropped_ranks.begin(), dropped_ranks.end());
        dropped_ranks.erase(std::unique(dropped_ranks.begin(), dropped_ranks.end()), dropped_ranks.end());
        if (!dropped_ranks.empty() && dropped_ranks.front() == 0)
            throw std::invalid_argument("dropped ranks are 1-based");
    }

    bool none() const noexcept { return dropped_ranks.empty(); }

    // "None" or "[1 2]".
    std::string label() const {
        if (none()) return "None";
        std::string s = "[";
        for (std::size_t i = 0; i < dropped_ranks.size(); ++i) {
            if (i) s += ' ';
            s += std::to_string(dropped_ranks[i]);
        }
        return s + "]";
    }

    bool operator==(const RetrievalErrorSpec&) const = default;
};

inline bool score_order(double sa, std::size_t ia, double sb, std::size_t ib) {
    return sa > sb || (sa == sb && ia < ib);
}

inline void check_query_dim(const EmbeddingMatrix& v, std::span<const double> q) {
    if (q.size() != v.dim())
        throw std::invalid_argument("query dimension " + std::to_string(q.size()) + " does not match d = " +
                                    std::to_string(v.dim()));
}

// u_i = v_i . q for every stored vector.
inline std::vector<double> all_scores(const EmbeddingMatrix& v, std::span<const double> q) {
    check_query_dim(v, q);
    std::vector<double> u(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) u[i] = dot(v.row(i), q);
    return u;
}

inline TopKResult top_k_from_scores(std::span<const double> scores, std::size_t k) {
    TopKResult r;
    if (k > scores.size()) {
        k = scores.size();
        r.clamped = true;
    }
    std::vector<std::size_t> idx(scores.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    auto cmp = [&](std::size_t a, std::size_t b) { return score_order(scores[a], a, scores[b], b); };
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), cmp);
    idx.resize(k);
    r.scores.reserve(k);
    for (std::size_t i : idx) r.scores.push_back(scores[i]);
    r.indices = std::move(idx);
    return r;
}

inline TopKResult exact_top_k(const EmbeddingMatrix& v, std::span<const double> q, std::size_t k) {
    if (k == 0) throw std::invalid_argument("exact_top_k needs k >= 1");
    const auto u = all_scores(v, q);
    return top_k_from_scores(u, k);
}

// Removes the given ranks from a ranked list that holds at least
// k + |dropped| true neighbours and keeps the first k survivors.
inline TopKResult drop_ranks(const TopKResult& deep, const RetrievalErrorSpec& spec, std::size_t k) {
    const std::size_t need = k + spec.dropped_ranks.size();
    if (deep.size() < need) throw std::invalid_argument("ranked list too short for the requested drops");
    for (std::size_t r : spec.dropped_ranks)
        if (r == 0 || r > need)
            throw std::invalid_argument("dropped rank " + std::to_string(r) + " unreachable with k = " +
                                        std::to_string(k));
    TopKResult out;
    out.indices.reserve(k);
    out.scores.reserve(k);
    for (std::size_t pos = 0; pos < need && out.size() < k; ++pos) {
        if (std::binary_search(spec.dropped_ranks.begin(), spec.dropped_ranks.end(), pos + 1)) continue;
        out.indices.push_back(deep.indices[pos]);
        out.scores.push_back(deep.scores[pos]);
    }
    return out;
}

// Simulated retrieval failure: the true top-(k + |dropped|) with the
// dropped ranks removed, so the result still has k entries.
inline TopKResult inject_retrieval_error(const TopKResult& truth, const RetrievalErrorSpec& spec,
                                         const EmbeddingMatrix& v, std::span<const double> q) {
    if (spec.none()) return truth;
    const std::size_t k = truth.size();
    const std::size_t need = k + spec.dropped_ranks.size();
    if (need > v.size())
        throw std::invalid_argument("k + |dropped ranks| exceeds N");
    for (std::size_t r : spec.dropped_ranks)
        if (r > need)
            throw std::invalid_argument("dropped rank " + std::to_string(r) + " unreachable with k = " +
                                        std::to_string(k));
    return drop_ranks(exact_top_k(v, q, need), spec, k);
}

// l distinct indices drawn uniformly from [0, n) minus `exclude`.
template <class Rng>
std::vector<std::size_t> sample_complement(std::size_t n, std::span<const std::size_t> exclude, std::size_t l,
                                           Rng& rng) {
    std::unordered_set<std::size_t> excluded(exclude.begin(), exclude.end());
    for (std::size_t e : excluded)
        if (e >= n) throw std::out_of_range("excluded index out of range");
    const std::size_t available = n - excluded.size();
    if (l > available)
        throw std::invalid_argument("tail size l = " + std::to_string(l) + " exceeds the " +
                                    std::to_string(available) + " vectors outside the head");
    std::vector<std::size_t> out;
    if (l == 0) return out;
    out.reserve(l);
    if (4 * (l + excluded.size()) <= n) {
        // Rejection against the excluded and already chosen sets.
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        std::unordered_set<std::size_t> chosen;
        chosen.reserve(2 * l);
        while (out.size() < l) {
            const std::size_t c = pick(rng);
            if (excluded.count(c) || !chosen.insert(c).second) continue;
            out.push_back(c);
        }
    } else {
        // Partial Fisher-Yates over the explicit complement.
        std::vector<std::size_t> pool;
        pool.reserve(available);
        for (std::size_t i = 0; i < n; ++i)
            if (!excluded.count(i)) pool.push_back(i);
        for (std::size_t i = 0; i < l; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
            std::swap(pool[i], pool[pick(rng)]);
            out.push_back(pool[i]);
        }
    }
    return out;
}

inline TailSample sample_tail(const EmbeddingMatrix& v, std::span<const std::size_t> exclude, std::size_t l,
                              std::uint64_t seed, std::optional<std::span<const double>> q = std::nullopt) {
    if (q) check_query_dim(v, *q);
    std::mt19937_64 rng(seed);
    TailSample t;
    t.indices = sample_complement(v.size(), exclude, l, rng);
    if (q) {
        t.scores.reserve(l);
        for (std::size_t i : t.indices) t.scores.push_back(dot(v.row(i), *q));
    }
    return t;
}

}  // namespace pfe
