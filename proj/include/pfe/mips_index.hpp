#pragma once

// Approximate maximum inner product search.
//
// Each v_i is lifted to v~_i = [v_i ; sqrt(Phi^2 - |v_i|^2)] with
// Phi = max_i |v_i|, and the query to q~ = [q ; 0]. Then
//     |v~_i - q~|^2 = Phi^2 + |q|^2 - 2 v_i . q,
// so the Euclidean nearest neighbours of q~ are the largest inner products.
// The lifted rows are indexed by a hierarchical k-means tree searched
// best-bin-first under a budget of scored candidates.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <queue>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "pfe/binary_io.hpp"
#include "pfe/dataset.hpp"
#include "pfe/numeric.hpp"
#include "pfe/retrieval.hpp"

namespace pfe {

struct IndexParams {
    std::size_t branching = 32;
    std::size_t leaf_size = 64;
    std::uint64_t seed = 0;
    int max_iterations = 25;

    void validate() const {
        if (branching < 2) throw std::invalid_argument("branching factor must be >= 2");
        if (leaf_size < 1) throw std::invalid_argument("leaf size must be >= 1");
        if (max_iterations < 1) throw std::invalid_argument("k-means iterations must be >= 1");
    }
};

// Number of candidate points scored before the search stops.
struct SearchBudget {
    std::size_t max_leaf_checks = 0;

    static SearchBudget exhaustive() { return {std::numeric_limits<std::size_t>::max()}; }
};

class AugmentedIndex {
public:
    struct Node {
        std::vector<double> centroid;  // d + 1 coordinates
        std::vector<std::uint32_t> children;
        std::size_t begin = 0;  // leaf range into the permutation
        std::size_t end = 0;

        bool is_leaf() const noexcept { return children.empty(); }
    };

    std::size_t size() const noexcept { return n_; }
    std::size_t dim() const noexcept { return d_; }
    double phi() const noexcept { return phi_; }
    const IndexParams& params() const noexcept { return params_; }
    const std::vector<Node>& nodes() const noexcept { return nodes_; }

    // sqrt(Phi^2 - |v_i|^2)
    double augmented_coordinate(std::size_t i) const { return aug_[i]; }

    // Phi^2 - |v_i|^2 without the square root.
    double augmented_coordinate_sq(std::size_t i) const { return aug_sq_[i]; }

    std::vector<std::vector<std::size_t>> leaves() const {
        std::vector<std::vector<std::size_t>> out;
        for (const auto& node : nodes_)
            if (node.is_leaf())
                out.emplace_back(perm_.begin() + static_cast<std::ptrdiff_t>(node.begin),
                                 perm_.begin() + static_cast<std::ptrdiff_t>(node.end));
        return out;
    }

    TopKResult search(std::span<const double> q, std::size_t k, SearchBudget budget,
                      std::size_t* checks_out = nullptr) const {
        if (q.size() != d_) throw std::invalid_argument("query dimension does not match index");
        if (k == 0) throw std::invalid_argument("approx_top_k needs k >= 1");
        if (budget.max_leaf_checks == 0) throw std::invalid_argument("search budget must be >= 1");

        using Entry = std::pair<double, std::uint32_t>;
        std::priority_queue<Entry, std::vector<Entry>, std::greater<>> frontier;
        frontier.emplace(0.0, 0u);
        std::vector<std::pair<double, std::size_t>> cand;
        cand.reserve(std::min(budget.max_leaf_checks, n_));
        std::size_t checks = 0;

        while (!frontier.empty() && checks < budget.max_leaf_checks) {
            std::uint32_t id = frontier.top().second;
            frontier.pop();
            while (!nodes_[id].is_leaf()) {
                const auto& kids = nodes_[id].children;
                double best = std::numeric_limits<double>::infinity();
                std::uint32_t best_id = kids.front();
                for (std::uint32_t c : kids) {
                    const double dist = centroid_distance(c, q);
                    if (dist < best) {
                        if (best_id != c && best < std::numeric_limits<double>::infinity())
                            frontier.emplace(best, best_id);
                        best = dist;
                        best_id = c;
                    } else {
                        frontier.emplace(dist, c);
                    }
                }
                id = best_id;
            }
            const Node& leaf = nodes_[id];
            for (std::size_t pos = leaf.begin; pos < leaf.end && checks < budget.max_leaf_checks; ++pos, ++checks)
                cand.emplace_back(dot(ordered_row(pos), q), perm_[pos]);
        }
        if (checks_out) *checks_out = checks;

        TopKResult r;
        if (k > n_) r.clamped = true;
        const std::size_t take = std::min(k, cand.size());
        auto cmp = [](const auto& a, const auto& b) { return score_order(a.first, a.second, b.first, b.second); };
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(), cmp);
        for (std::size_t i = 0; i < take; ++i) {
            r.indices.push_back(cand[i].second);
            r.scores.push_back(cand[i].first);
        }
        return r;
    }

    friend AugmentedIndex build_index(const EmbeddingMatrix&, IndexParams);
    friend AugmentedIndex load_index(const std::string&, const EmbeddingMatrix&);

private:
    std::span<const float> ordered_row(std::size_t pos) const { return {ordered_.data() + pos * d_, d_}; }

    // Squared distance from [q ; 0] to the node centroid, less |q|^2.
    double centroid_distance(std::uint32_t id, std::span<const double> q) const {
        const auto& c = nodes_[id].centroid;
        return centroid_sq_[id] - 2.0 * dot(std::span<const double>(c.data(), d_), q);
    }

    void lift(const EmbeddingMatrix& v) {
        n_ = v.size();
        d_ = v.dim();
        std::vector<double> sq(n_);
        double max_sq = 0.0;
        for (std::size_t i = 0; i < n_; ++i) {
            sq[i] = squared_norm(v.row(i));
            max_sq = std::max(max_sq, sq[i]);
        }
        phi_ = std::sqrt(max_sq);
        aug_sq_.resize(n_);
        aug_.resize(n_);
        for (std::size_t i = 0; i < n_; ++i) {
            aug_sq_[i] = std::max(0.0, max_sq - sq[i]);
            aug_[i] = std::sqrt(aug_sq_[i]);
        }
    }

    void reorder(const EmbeddingMatrix& v) {
        centroid_sq_.resize(nodes_.size());
        for (std::size_t i = 0; i < nodes_.size(); ++i) centroid_sq_[i] = squared_norm(nodes_[i].centroid);
        ordered_.resize(n_ * d_);
        for (std::size_t pos = 0; pos < n_; ++pos) {
            const auto row = v.row(perm_[pos]);
            std::copy(row.begin(), row.end(), ordered_.begin() + static_cast<std::ptrdiff_t>(pos * d_));
        }
    }

    std::size_t n_ = 0;
    std::size_t d_ = 0;
    double phi_ = 0.0;
    IndexParams params_{};
    std::vector<double> aug_;
    std::vector<double> aug_sq_;
    std::vector<Node> nodes_;
    std::vector<std::size_t> perm_;
    std::vector<float> ordered_;
    std::vector<double> centroid_sq_;
};

namespace detail {

// Lloyd's k-means over the lifted rows v.row(i) ++ aug[i] for i in pts.
// Returns the cluster of each point and fills `centroids`.
class KMeans {
public:
    KMeans(const EmbeddingMatrix& v, std::span<const double> aug) : v_(v), aug_(aug), d_(v.dim()) {}

    std::vector<std::uint32_t> run(std::span<const std::size_t> pts, std::size_t k, int max_iter,
                                   std::uint64_t seed, std::vector<std::vector<double>>& centroids) const {
        std::mt19937_64 rng(seed);
        seed_plus_plus(pts, k, rng, centroids);
        std::vector<std::uint32_t> assign(pts.size(), 0);
        std::vector<double> best_dist(pts.size(), 0.0);
        for (int it = 0; it < max_iter; ++it) {
            bool changed = false;
            for (std::size_t p = 0; p < pts.size(); ++p) {
                double best = std::numeric_limits<double>::infinity();
                std::uint32_t arg = 0;
                for (std::size_t c = 0; c < k; ++c) {
                    const double dist = sq_distance(pts[p], centroids[c]);
                    if (dist < best) {
                        best = dist;
                        arg = static_cast<std::uint32_t>(c);
                    }
                }
                if (it == 0 || arg != assign[p]) changed = true;
                assign[p] = arg;
                best_dist[p] = best;
            }
            repair_empty(pts, k, assign, best_dist, centroids);
            if (!changed && it > 0) break;
            recompute(pts, k, assign, centroids);
        }
        return assign;
    }

    double sq_distance(std::size_t i, std::span<const double> c) const {
        const auto row = v_.row(i);
        double s = 0.0;
        for (std::size_t j = 0; j < d_; ++j) {
            const double diff = row[j] - c[j];
            s += diff * diff;
        }
        const double last = aug_[i] - c[d_];
        return s + last * last;
    }

    std::vector<double> point(std::size_t i) const {
        std::vector<double> x(d_ + 1);
        const auto row = v_.row(i);
        std::copy(row.begin(), row.end(), x.begin());
        x[d_] = aug_[i];
        return x;
    }

private:
    void seed_plus_plus(std::span<const std::size_t> pts, std::size_t k, std::mt19937_64& rng,
                        std::vector<std::vector<double>>& centroids) const {
        centroids.clear();
        std::uniform_int_distribution<std::size_t> first(0, pts.size() - 1);
        centroids.push_back(point(pts[first(rng)]));
        std::vector<double> d2(pts.size());
        for (std::size_t p = 0; p < pts.size(); ++p) d2[p] = sq_distance(pts[p], centroids[0]);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        while (centroids.size() < k) {
            double total = 0.0;
            for (double x : d2) total += x;
            std::size_t pick = 0;
            if (total > 0.0) {
                double target = unif(rng) * total;
                for (pick = 0; pick + 1 < pts.size(); ++pick) {
                    target -= d2[pick];
                    if (target < 0.0) break;
                }
            } else {
                pick = first(rng);
            }
            centroids.push_back(point(pts[pick]));
            for (std::size_t p = 0; p < pts.size(); ++p)
                d2[p] = std::min(d2[p], sq_distance(pts[p], centroids.back()));
        }
    }

    // An empty cluster takes the point farthest from its centroid in the
    // currently largest cluster.
    void repair_empty(std::span<const std::size_t> pts, std::size_t k, std::vector<std::uint32_t>& assign,
                      std::vector<double>& best_dist, std::vector<std::vector<double>>& centroids) const {
        std::vector<std::size_t> count(k, 0);
        for (auto a : assign) ++count[a];
        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] != 0) continue;
            const auto largest = static_cast<std::uint32_t>(
                std::max_element(count.begin(), count.end()) - count.begin());
            if (count[largest] < 2) break;
            std::size_t far = pts.size();
            double far_d = -1.0;
            for (std::size_t p = 0; p < pts.size(); ++p)
                if (assign[p] == largest && best_dist[p] > far_d) {
                    far_d = best_dist[p];
                    far = p;
                }
            assign[far] = static_cast<std::uint32_t>(c);
            best_dist[far] = 0.0;
            centroids[c] = point(pts[far]);
            --count[largest];
            ++count[c];
        }
    }

    void recompute(std::span<const std::size_t> pts, std::size_t k, const std::vector<std::uint32_t>& assign,
                   std::vector<std::vector<double>>& centroids) const {
        std::vector<std::vector<double>> sum(k, std::vector<double>(d_ + 1, 0.0));
        std::vector<std::size_t> count(k, 0);
        for (std::size_t p = 0; p < pts.size(); ++p) {
            const auto row = v_.row(pts[p]);
            auto& s = sum[assign[p]];
            for (std::size_t j = 0; j < d_; ++j) s[j] += row[j];
            s[d_] += aug_[pts[p]];
            ++count[assign[p]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (count[c] == 0) continue;
            for (auto& x : sum[c]) x /= static_cast<double>(count[c]);
            centroids[c] = std::move(sum[c]);
        }
    }

    const EmbeddingMatrix& v_;
    std::span<const double> aug_;
    std::size_t d_;
};

}  // namespace detail

// Recursive k-means partitioning until every part holds at most leaf_size
// rows. Each node's clustering is seeded from (seed, node path), so the
// tree does not depend on construction order.
inline AugmentedIndex build_index(const EmbeddingMatrix& v, IndexParams params) {
    params.validate();
    AugmentedIndex idx;
    idx.params_ = params;
    idx.lift(v);
    idx.perm_.resize(idx.n_);
    for (std::size_t i = 0; i < idx.n_; ++i) idx.perm_[i] = i;

    const detail::KMeans km(v, idx.aug_);
    const std::size_t d = idx.d_;

    auto mean_of = [&](std::size_t begin, std::size_t end) {
        std::vector<double> c(d + 1, 0.0);
        for (std::size_t pos = begin; pos < end; ++pos) {
            const auto x = km.point(idx.perm_[pos]);
            for (std::size_t j = 0; j <= d; ++j) c[j] += x[j];
        }
        for (auto& x : c) x /= static_cast<double>(end - begin);
        return c;
    };

    struct Pending {
        std::uint32_t node;
        std::uint64_t seed;
    };
    idx.nodes_.push_back({mean_of(0, idx.n_), {}, 0, idx.n_});
    std::vector<Pending> stack{{0u, derive_seed(params.seed, 0)}};
    while (!stack.empty()) {
        const Pending cur = stack.back();
        stack.pop_back();
        const std::size_t begin = idx.nodes_[cur.node].begin;
        const std::size_t end = idx.nodes_[cur.node].end;
        const std::size_t count = end - begin;
        if (count <= params.leaf_size) continue;

        // Small nodes split only as far as needed to reach leaf_size.
        const std::size_t k = std::min(params.branching, (count + params.leaf_size - 1) / params.leaf_size);
        std::vector<std::vector<double>> centroids;
        std::span<const std::size_t> pts(idx.perm_.data() + begin, count);
        const auto assign = km.run(pts, k, params.max_iterations, cur.seed, centroids);

        std::vector<std::vector<std::size_t>> groups(k);
        for (std::size_t p = 0; p < count; ++p) groups[assign[p]].push_back(pts[p]);
        std::size_t non_empty = 0;
        for (const auto& g : groups) non_empty += !g.empty();
        if (non_empty < 2) continue;  // all rows identical: keep as an oversized leaf

        std::size_t pos = begin;
        std::vector<std::uint32_t> kids;
        for (std::size_t c = 0; c < k; ++c) {
            if (groups[c].empty()) continue;
            const std::size_t child_begin = pos;
            for (std::size_t i : groups[c]) idx.perm_[pos++] = i;
            kids.push_back(static_cast<std::uint32_t>(idx.nodes_.size()));
            idx.nodes_.push_back({std::move(centroids[c]), {}, child_begin, pos});
        }
        idx.nodes_[cur.node].children = kids;
        for (std::size_t c = kids.size(); c-- > 0;)
            stack.push_back({kids[c], derive_seed(cur.seed, c + 1)});
    }
    idx.reorder(v);
    return idx;
}

// Best-bin-first search returning the top-k scored candidates, re-ranked
// by the true inner product.
inline TopKResult approx_top_k(const AugmentedIndex& index, std::span<const double> q, std::size_t k,
                               SearchBudget budget) {
    return index.search(q, k, budget);
}

// File layout (little-endian):
//   "PFEKMTR\0", u32 version, u64 branching, u64 leaf_size, u64 seed,
//   u32 max_iterations, u64 N, u64 d, f64 Phi, u64 node_count, then per
//   node: u8 is_leaf, f64 centroid[d+1], and either
//   {u64 count, u64 index[count]} (leaf) or {u32 count, u32 child[count]}.
inline constexpr std::uint32_t kIndexVersion = 1;

inline void save_index(const AugmentedIndex& index, const std::string& path) {
    io::Writer w;
    w.put_bytes(std::string_view("PFEKMTR\0", 8));
    w.put<std::uint32_t>(kIndexVersion);
    w.put<std::uint64_t>(index.params().branching);
    w.put<std::uint64_t>(index.params().leaf_size);
    w.put<std::uint64_t>(index.params().seed);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(index.params().max_iterations));
    w.put<std::uint64_t>(index.size());
    w.put<std::uint64_t>(index.dim());
    w.put<double>(index.phi());
    w.put<std::uint64_t>(index.nodes().size());
    const auto leaves = index.leaves();
    std::size_t leaf_no = 0;
    for (const auto& node : index.nodes()) {
        w.put<std::uint8_t>(node.is_leaf() ? 1 : 0);
        for (double c : node.centroid) w.put<double>(c);
        if (node.is_leaf()) {
            const auto& members = leaves[leaf_no++];
            w.put<std::uint64_t>(members.size());
            for (std::size_t i : members) w.put<std::uint64_t>(i);
        } else {
            w.put<std::uint32_t>(static_cast<std::uint32_t>(node.children.size()));
            for (auto c : node.children) w.put<std::uint32_t>(c);
        }
    }
    w.save(path);
}

// The file holds the tree only; rows come from the matrix it was built on.
inline AugmentedIndex load_index(const std::string& path, const EmbeddingMatrix& v) {
    auto r = io::Reader::from_file(path);
    if (r.get_bytes(8) != std::string_view("PFEKMTR\0", 8)) throw std::runtime_error("not an index file");
    const auto version = r.get<std::uint32_t>();
    if (version != kIndexVersion) throw std::runtime_error("unsupported index version " + std::to_string(version));
    AugmentedIndex idx;
    idx.params_.branching = r.get<std::uint64_t>();
    idx.params_.leaf_size = r.get<std::uint64_t>();
    idx.params_.seed = r.get<std::uint64_t>();
    idx.params_.max_iterations = static_cast<int>(r.get<std::uint32_t>());
    const auto n = r.get<std::uint64_t>();
    const auto d = r.get<std::uint64_t>();
    const double phi = r.get<double>();
    if (n != v.size() || d != v.dim())
        throw std::runtime_error("index was built for a " + std::to_string(n) + "x" + std::to_string(d) +
                                 " matrix, got " + std::to_string(v.size()) + "x" + std::to_string(v.dim()));
    idx.lift(v);
    if (idx.phi_ != phi) throw std::runtime_error("index Phi does not match the supplied matrix");

    const auto node_count = r.get<std::uint64_t>();
    if (node_count == 0 || node_count > 2 * n + 1) throw std::runtime_error("corrupt index node count");
    std::vector<char> seen(n, 0);
    idx.nodes_.resize(node_count);
    for (auto& node : idx.nodes_) {
        const bool leaf = r.get<std::uint8_t>() != 0;
        node.centroid.resize(d + 1);
        for (auto& c : node.centroid) c = r.get<double>();
        if (leaf) {
            const auto count = r.get<std::uint64_t>();
            if (count > n) throw std::runtime_error("corrupt leaf size");
            node.begin = idx.perm_.size();
            for (std::uint64_t i = 0; i < count; ++i) {
                const auto m = r.get<std::uint64_t>();
                if (m >= n || seen[m]) throw std::runtime_error("index leaves do not partition the rows");
                seen[m] = 1;
                idx.perm_.push_back(m);
            }
            node.end = idx.perm_.size();
        } else {
            const auto count = r.get<std::uint32_t>();
            for (std::uint32_t i = 0; i < count; ++i) {
                const auto c = r.get<std::uint32_t>();
                if (c == 0 || c >= node_count) throw std::runtime_error("corrupt child id");
                node.children.push_back(c);
            }
        }
    }
    if (idx.perm_.size() != n) throw std::runtime_error("index leaves do not cover every row");
    if (!r.at_end()) throw std::runtime_error("trailing bytes in index file");
    idx.reorder(v);
    return idx;
}

struct SpeedupReport {
    double speedup = 0.0;  // brute-force time / index time
    double recall = 0.0;   // mean |approx top-k  intersect  exact top-k| / k
    double brute_seconds = 0.0;
    double index_seconds = 0.0;
    std::size_t n_queries = 0;
};

// Wall-clock comparison of a full scan against the index on the same
// queries. Timings are hardware dependent; recall is not.
inline SpeedupReport measure_speedup(const AugmentedIndex& index, const EmbeddingMatrix& v, const QuerySet& queries,
                                     std::size_t k, SearchBudget budget) {
    if (index.size() != v.size() || index.dim() != v.dim())
        throw std::invalid_argument("index and matrix differ");
    if (queries.size() == 0) throw std::invalid_argument("no queries");
    using Clock = std::chrono::steady_clock;
    const std::size_t m = queries.size();
    std::vector<TopKResult> exact(m), approx(m);

    const auto t0 = Clock::now();
    for (std::size_t i = 0; i < m; ++i) exact[i] = exact_top_k(v, queries.query(i), k);
    const auto t1 = Clock::now();
    for (std::size_t i = 0; i < m; ++i) approx[i] = approx_top_k(index, queries.query(i), k, budget);
    const auto t2 = Clock::now();

    SpeedupReport rep;
    rep.n_queries = m;
    rep.brute_seconds = std::chrono::duration<double>(t1 - t0).count();
    rep.index_seconds = std::chrono::duration<double>(t2 - t1).count();
    rep.speedup = rep.index_seconds > 0.0 ? rep.brute_seconds / rep.index_seconds
                                          : std::numeric_limits<double>::infinity();
    std::vector<double> rec(m);
    for (std::size_t i = 0; i < m; ++i) {
        std::vector<std::size_t> a = exact[i].indices, b = approx[i].indices;
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        std::vector<std::size_t> common;
        std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
        rec[i] = a.empty() ? 1.0 : static_cast<double>(common.size()) / static_cast<double>(a.size());
    }
    rep.recall = mean(rec);
    return rep;
}

}  // namespace pfe
