#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <vector>

#include "vlmatch/error.hpp"

namespace vlmatch::detail {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class ByteWriter {
public:
    template <class T>
    void put(T v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        buf.insert(buf.end(), p, p + sizeof(T));
    }
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(data);
        buf.insert(buf.end(), p, p + n);
    }
    template <class T>
    void array(const std::vector<T>& v) {
        bytes(v.data(), v.size() * sizeof(T));
    }
    std::vector<std::uint8_t> buf;
};

class ByteReader {
public:
    ByteReader(std::span<const std::uint8_t> b, std::string what) : b_(b), what_(std::move(what)) {}

    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, b_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::span<const std::uint8_t> take(std::size_t n) {
        need(n);
        auto s = b_.subspan(pos_, n);
        pos_ += n;
        return s;
    }
    template <class T>
    std::vector<T> array(std::uint64_t count) {
        if (count > (b_.size() - pos_) / sizeof(T)) throw FormatError(what_ + ": truncated file");
        std::vector<T> v(static_cast<std::size_t>(count));
        const auto raw = take(v.size() * sizeof(T));
        if (!v.empty()) std::memcpy(v.data(), raw.data(), raw.size());
        return v;
    }
    void expect_magic(const char (&magic)[5]) {
        const auto m = take(4);
        if (std::memcmp(m.data(), magic, 4) != 0) throw FormatError(what_ + ": bad magic");
    }
    bool done() const { return pos_ == b_.size(); }

private:
    void need(std::size_t n) const {
        if (n > b_.size() - pos_) throw FormatError(what_ + ": truncated file");
    }
    std::span<const std::uint8_t> b_;
    std::string what_;
    std::size_t pos_ = 0;
};

}  // namespace vlmatch::detail
