#pragma once

// Embedding matrices, query sets and the two vector file formats.
//
// Text:   "N d\n" followed by N lines "label f_1 ... f_d".
// Binary: "N d\n" followed by N records
//         label bytes, 0x20, d little-endian float32, 0x0A
// which is the layout used by the published word2vec binaries.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pfe/numeric.hpp"

namespace pfe {

enum class VectorFormat { Text, Binary };

inline VectorFormat parse_vector_format(std::string_view s) {
    if (s == "text") return VectorFormat::Text;
    if (s == "binary") return VectorFormat::Binary;
    throw std::invalid_argument("unknown vector format '" + std::string(s) + "' (expected text or binary)");
}

enum class ParseErrorKind { MalformedHeader, EmptyMatrix, RowLength, BadNumber, NonFinite, Truncated, Io };

inline const char* to_string(ParseErrorKind k) {
    switch (k) {
        case ParseErrorKind::MalformedHeader: return "malformed header";
        case ParseErrorKind::EmptyMatrix: return "empty matrix";
        case ParseErrorKind::RowLength: return "row length mismatch";
        case ParseErrorKind::BadNumber: return "invalid number";
        case ParseErrorKind::NonFinite: return "non-finite value";
        case ParseErrorKind::Truncated: return "truncated file";
        case ParseErrorKind::Io: return "i/o error";
    }
    return "parse error";
}

// `location` is a 1-based line for text files and a byte offset for binary.
class ParseError : public std::runtime_error {
public:
    ParseError(ParseErrorKind kind, std::size_t location, const std::string& what)
        : std::runtime_error(what), kind_(kind), location_(location) {}
    ParseErrorKind kind() const noexcept { return kind_; }
    std::size_t location() const noexcept { return location_; }

private:
    ParseErrorKind kind_;
    std::size_t location_;
};

// N class-weight vectors, row-major, stored exactly as ingested.
class EmbeddingMatrix {
public:
    EmbeddingMatrix(std::size_t n, std::size_t d, std::vector<float> data,
                    std::vector<std::string> labels = {})
        : n_(n), d_(d), data_(std::move(data)), labels_(std::move(labels)) {
        if (n_ == 0 || d_ == 0) throw std::invalid_argument("embedding matrix needs N >= 1 and d >= 1");
        if (data_.size() != n_ * d_) throw std::invalid_argument("embedding data size does not equal N*d");
        if (!labels_.empty() && labels_.size() != n_)
            throw std::invalid_argument("label count does not equal N");
        for (float x : data_)
            if (!std::isfinite(x)) throw std::invalid_argument("embedding contains a non-finite value");
    }

    std::size_t size() const noexcept { return n_; }
    std::size_t dim() const noexcept { return d_; }
    std::span<const float> row(std::size_t i) const { return {data_.data() + i * d_, d_}; }
    std::span<const float> data() const noexcept { return data_; }
    const std::vector<std::string>& labels() const noexcept { return labels_; }
    bool has_labels() const noexcept { return !labels_.empty(); }

    // Label of row i; rows of an unlabeled matrix are named by their index.
    std::string label(std::size_t i) const { return has_labels() ? labels_[i] : std::to_string(i); }

    std::optional<std::size_t> find_label(std::string_view name) const {
        for (std::size_t i = 0; i < labels_.size(); ++i)
            if (labels_[i] == name) return i;
        return std::nullopt;
    }

    std::vector<double> row_as_double(std::size_t i) const {
        auto r = row(i);
        return {r.begin(), r.end()};
    }

    bool operator==(const EmbeddingMatrix&) const = default;

private:
    std::size_t n_;
    std::size_t d_;
    std::vector<float> data_;
    std::vector<std::string> labels_;
};

// M queries of dimension d. source_indices[i] names the stored vector the
// query was derived from, when there is one.
struct QuerySet {
    std::size_t dim = 0;
    std::vector<double> data;
    std::vector<std::optional<std::size_t>> source_indices;
    double noise_level = 0.0;

    std::size_t size() const noexcept { return dim == 0 ? 0 : data.size() / dim; }
    std::span<const double> query(std::size_t i) const { return {data.data() + i * dim, dim}; }

    void add(std::span<const double> q, std::optional<std::size_t> source = std::nullopt) {
        if (dim == 0) dim = q.size();
        if (q.size() != dim) throw std::invalid_argument("query dimension mismatch");
        for (double x : q)
            if (!std::isfinite(x)) throw std::invalid_argument("query contains a non-finite value");
        data.insert(data.end(), q.begin(), q.end());
        source_indices.push_back(source);
    }
};

namespace detail {

inline std::string_view trim_cr(std::string_view s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < s.size()) {
        while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
        std::size_t j = i;
        while (j < s.size() && s[j] != ' ' && s[j] != '\t') ++j;
        if (j > i) out.push_back(s.substr(i, j - i));
        i = j;
    }
    return out;
}

template <class T>
bool parse_number(std::string_view tok, T& out) {
    const char* first = tok.data();
    const char* last = tok.data() + tok.size();
    if (first != last && *first == '+') ++first;
    auto [ptr, ec] = std::from_chars(first, last, out);
    return ec == std::errc() && ptr == last;
}

// Parses "N d" (shared by both formats).
inline std::pair<std::size_t, std::size_t> parse_header(std::string_view line) {
    const auto toks = split_ws(trim_cr(line));
    std::size_t n = 0, d = 0;
    if (toks.size() != 2 || !parse_number(toks[0], n) || !parse_number(toks[1], d))
        throw ParseError(ParseErrorKind::MalformedHeader, 1,
                         "line 1: malformed header, expected \"N d\"");
    if (n == 0 || d == 0)
        throw ParseError(ParseErrorKind::EmptyMatrix, 1, "line 1: header declares N or d equal to 0");
    return {n, d};
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError(ParseErrorKind::Io, 0, "cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return std::move(ss).str();
}

inline void write_le_f32(std::string& out, float f) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
}

inline float read_le_f32(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
    return std::bit_cast<float>(bits);
}

}  // namespace detail

inline EmbeddingMatrix parse_text_embeddings(std::string_view text) {
    std::size_t pos = 0;
    std::size_t line_no = 0;
    auto next_line = [&]() -> std::optional<std::string_view> {
        if (pos >= text.size()) return std::nullopt;
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        auto line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        return detail::trim_cr(line);
    };

    auto header = next_line();
    if (!header) throw ParseError(ParseErrorKind::MalformedHeader, 1, "line 1: missing header");
    const auto [n, d] = detail::parse_header(*header);

    std::vector<float> data;
    data.reserve(n * d);
    std::vector<std::string> labels;
    labels.reserve(n);
    for (std::size_t r = 0; r < n; ++r) {
        auto line = next_line();
        if (!line)
            throw ParseError(ParseErrorKind::Truncated, line_no + 1,
                             "line " + std::to_string(line_no + 1) + ": expected " + std::to_string(n) +
                                 " rows, file ends after " + std::to_string(r));
        const auto toks = detail::split_ws(*line);
        if (toks.size() != d + 1)
            throw ParseError(ParseErrorKind::RowLength, line_no,
                             "line " + std::to_string(line_no) + ": expected label and " + std::to_string(d) +
                                 " values, found " + std::to_string(toks.empty() ? 0 : toks.size() - 1));
        labels.emplace_back(toks[0]);
        for (std::size_t c = 0; c < d; ++c) {
            float x = 0;
            if (!detail::parse_number(toks[c + 1], x))
                throw ParseError(ParseErrorKind::BadNumber, line_no,
                                 "line " + std::to_string(line_no) + ": invalid number '" +
                                     std::string(toks[c + 1]) + "'");
            if (!std::isfinite(x))
                throw ParseError(ParseErrorKind::NonFinite, line_no,
                                 "line " + std::to_string(line_no) + ": non-finite value");
            data.push_back(x);
        }
    }
    return EmbeddingMatrix(n, d, std::move(data), std::move(labels));
}

inline EmbeddingMatrix parse_binary_embeddings(std::string_view bytes) {
    const std::size_t nl = bytes.find('\n');
    if (nl == std::string_view::npos)
        throw ParseError(ParseErrorKind::MalformedHeader, 0, "offset 0: missing header line");
    const auto [n, d] = detail::parse_header(bytes.substr(0, nl));

    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    std::size_t off = nl + 1;
    std::vector<float> data;
    data.reserve(n * d);
    std::vector<std::string> labels;
    labels.reserve(n);
    for (std::size_t r = 0; r < n; ++r) {
        // Some writers omit the record terminator; tolerate a stray newline.
        while (off < bytes.size() && bytes[off] == '\n') ++off;
        const std::size_t label_start = off;
        while (off < bytes.size() && bytes[off] != ' ') ++off;
        if (off >= bytes.size())
            throw ParseError(ParseErrorKind::Truncated, label_start,
                             "offset " + std::to_string(label_start) + ": record " + std::to_string(r) +
                                 " truncated in label");
        labels.emplace_back(bytes.substr(label_start, off - label_start));
        ++off;
        if (bytes.size() - off < 4 * d)
            throw ParseError(ParseErrorKind::RowLength, off,
                             "offset " + std::to_string(off) + ": record " + std::to_string(r) + " has fewer than " +
                                 std::to_string(d) + " floats");
        for (std::size_t c = 0; c < d; ++c) {
            const float x = detail::read_le_f32(p + off);
            if (!std::isfinite(x))
                throw ParseError(ParseErrorKind::NonFinite, off,
                                 "offset " + std::to_string(off) + ": non-finite value");
            data.push_back(x);
            off += 4;
        }
        if (off < bytes.size() && bytes[off] == '\n') ++off;
    }
    return EmbeddingMatrix(n, d, std::move(data), std::move(labels));
}

inline EmbeddingMatrix load_embeddings(const std::string& path, VectorFormat format) {
    const std::string bytes = detail::read_file(path);
    return format == VectorFormat::Text ? parse_text_embeddings(bytes) : parse_binary_embeddings(bytes);
}

inline std::string format_float(float x) {
    char buf[32];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, ptr);
}

inline std::string format_double(double x) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, x);
    return std::string(buf, ptr);
}

// Shortest round-trip decimal, so text save/load is bit-exact.
inline std::string to_text(const EmbeddingMatrix& m) {
    std::string out = std::to_string(m.size()) + " " + std::to_string(m.dim()) + "\n";
    for (std::size_t i = 0; i < m.size(); ++i) {
        out += m.label(i);
        for (float x : m.row(i)) {
            out.push_back(' ');
            out += format_float(x);
        }
        out.push_back('\n');
    }
    return out;
}

inline std::string to_binary(const EmbeddingMatrix& m) {
    std::string out = std::to_string(m.size()) + " " + std::to_string(m.dim()) + "\n";
    out.reserve(out.size() + m.size() * (m.dim() * 4 + 16));
    for (std::size_t i = 0; i < m.size(); ++i) {
        out += m.label(i);
        out.push_back(' ');
        for (float x : m.row(i)) detail::write_le_f32(out, x);
        out.push_back('\n');
    }
    return out;
}

inline void save_embeddings(const EmbeddingMatrix& m, const std::string& path, VectorFormat format) {
    for (std::size_t i = 0; m.has_labels() && i < m.size(); ++i)
        if (m.labels()[i].empty() || m.labels()[i].find_first_of(" \t\n\r") != std::string::npos)
            throw std::invalid_argument("label " + std::to_string(i) + " is empty or contains whitespace");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
    const std::string bytes = format == VectorFormat::Text ? to_text(m) : to_binary(m);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write to '" + path + "' failed");
}

// i.i.d. N(0, scale^2) entries; unlabeled.
inline EmbeddingMatrix synthesize_gaussian(std::size_t n, std::size_t d, double scale, std::uint64_t seed) {
    if (n == 0 || d == 0) throw std::invalid_argument("synthesize_gaussian needs n >= 1 and d >= 1");
    if (!(scale >= 0.0) || !std::isfinite(scale)) throw std::invalid_argument("scale must be finite and >= 0");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<float> data(n * d);
    for (auto& x : data) x = static_cast<float>(scale * normal(rng));
    return EmbeddingMatrix(n, d, std::move(data));
}

// Uniform sample of m distinct row indices, in ascending order.
inline std::vector<std::size_t> sample_query_indices(std::size_t n, std::size_t m, std::uint64_t seed) {
    if (m > n) throw std::invalid_argument("cannot sample more queries than stored vectors");
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    std::vector<std::size_t> out;
    out.reserve(m);
    std::mt19937_64 rng(seed);
    std::sample(all.begin(), all.end(), std::back_inserter(out), m, rng);
    return out;
}

// Each query is q0 + e where e is an isotropic Gaussian draw rescaled to
// ||e|| = noise_level * ||q0||. noise_level = 0 returns the sources unchanged.
inline QuerySet perturb_queries(const EmbeddingMatrix& base, std::span<const std::size_t> indices,
                                double noise_level, std::uint64_t seed) {
    if (!(noise_level >= 0.0) || !std::isfinite(noise_level))
        throw std::invalid_argument("noise level must be finite and >= 0");
    for (std::size_t idx : indices)
        if (idx >= base.size())
            throw std::out_of_range("query index " + std::to_string(idx) + " out of range (N = " +
                                    std::to_string(base.size()) + ")");

    QuerySet out;
    out.dim = base.dim();
    out.noise_level = noise_level;
    out.data.reserve(indices.size() * base.dim());
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> eps(base.dim());
    for (std::size_t idx : indices) {
        std::vector<double> q = base.row_as_double(idx);
        const double q_norm = std::sqrt(squared_norm(std::span<const double>(q)));
        if (noise_level > 0.0 && q_norm > 0.0) {
            double e_norm = 0.0;
            do {
                for (auto& e : eps) e = normal(rng);
                e_norm = std::sqrt(squared_norm(std::span<const double>(eps)));
            } while (e_norm == 0.0);
            const double s = noise_level * q_norm / e_norm;
            for (std::size_t c = 0; c < q.size(); ++c) q[c] += s * eps[c];
        }
        out.add(q, idx);
    }
    return out;
}

}  // namespace pfe
