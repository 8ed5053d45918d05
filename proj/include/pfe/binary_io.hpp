#pragma once

// Little-endian writer/reader used by the index and feature-map files.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>

namespace pfe::io {

class Writer {
public:
    template <class T>
        requires std::is_arithmetic_v<T>
    void put(T value) {
        using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                  std::conditional_t<sizeof(T) == 2, std::uint16_t,
                  std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
        const U bits = std::bit_cast<U>(value);
        for (std::size_t b = 0; b < sizeof(T); ++b) buf_.push_back(static_cast<char>((bits >> (8 * b)) & 0xFF));
    }
    void put_bytes(std::string_view s) { buf_.append(s); }
    const std::string& bytes() const noexcept { return buf_; }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
        out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        if (!out) throw std::runtime_error("write to '" + path + "' failed");
    }

private:
    std::string buf_;
};

class Reader {
public:
    explicit Reader(std::string bytes) : buf_(std::move(bytes)) {}

    static Reader from_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("cannot open '" + path + "'");
        std::ostringstream ss;
        ss << in.rdbuf();
        return Reader(std::move(ss).str());
    }

    template <class T>
        requires std::is_arithmetic_v<T>
    T get() {
        using U = std::conditional_t<sizeof(T) == 1, std::uint8_t,
                  std::conditional_t<sizeof(T) == 2, std::uint16_t,
                  std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>>;
        need(sizeof(T));
        U bits = 0;
        for (std::size_t b = 0; b < sizeof(T); ++b)
            bits |= static_cast<U>(static_cast<std::uint8_t>(buf_[pos_ + b])) << (8 * b);
        pos_ += sizeof(T);
        return std::bit_cast<T>(bits);
    }

    std::string_view get_bytes(std::size_t n) {
        need(n);
        auto s = std::string_view(buf_).substr(pos_, n);
        pos_ += n;
        return s;
    }

    std::size_t offset() const noexcept { return pos_; }
    bool at_end() const noexcept { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) const {
        if (buf_.size() - pos_ < n)
            throw std::runtime_error("unexpected end of file at offset " + std::to_string(pos_));
    }

    std::string buf_;
    std::size_t pos_ = 0;
};

}  // namespace pfe::io
