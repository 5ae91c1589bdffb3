#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "campfire/error.hpp"

namespace campfire::binary {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    }
    return v;
}

/// Append-only little-endian byte buffer.
class Writer {
public:
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        buf_.insert(buf_.end(), p, p + n);
    }

    template <class T>
    void put(T v) {
        v = to_little(v);
        bytes(&v, sizeof(T));
    }

    void u16(std::uint16_t v) { put(v); }
    void u32(std::uint32_t v) { put(v); }
    void u64(std::uint64_t v) { put(v); }
    void f32(float v) { put(v); }

    void str16(const std::string& s) {
        if (s.size() > UINT16_MAX) fail(ErrorCode::IOFailure, "string too long for u16 prefix");
        u16(static_cast<std::uint16_t>(s.size()));
        bytes(s.data(), s.size());
    }

    void str32(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    void f32_array(std::span<const float> v) {
        if constexpr (std::endian::native == std::endian::little) {
            bytes(v.data(), v.size_bytes());
        } else {
            for (float x : v) f32(x);
        }
    }

    const std::vector<unsigned char>& data() const { return buf_; }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) fail(ErrorCode::IOFailure, "cannot open for writing: " + path);
        out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
        if (!out) fail(ErrorCode::IOFailure, "write failed: " + path);
    }

private:
    std::vector<unsigned char> buf_;
};

/// Bounds-checked reader; running past the end raises `eof_code`.
class Reader {
public:
    Reader(std::vector<unsigned char> data, ErrorCode eof_code) : buf_(std::move(data)), code_(eof_code) {}

    static Reader from_file(const std::string& path, ErrorCode eof_code) {
        std::ifstream in(path, std::ios::binary);
        if (!in) fail(ErrorCode::IOFailure, "cannot open: " + path);
        std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return Reader(std::move(data), eof_code);
    }

    void need(std::size_t n) const {
        if (pos_ + n > buf_.size()) fail(code_, "unexpected end of data");
    }

    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, buf_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return to_little(v);
    }

    std::uint16_t u16() { return get<std::uint16_t>(); }
    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    float f32() { return get<float>(); }

    std::string fixed(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
        pos_ += n;
        return s;
    }

    std::string str16() { return fixed(u16()); }
    std::string str32() { return fixed(u32()); }

    void f32_array(std::span<float> out) {
        need(out.size_bytes());
        if constexpr (std::endian::native == std::endian::little) {
            std::memcpy(out.data(), buf_.data() + pos_, out.size_bytes());
            pos_ += out.size_bytes();
        } else {
            for (auto& x : out) x = f32();
        }
    }

    std::size_t remaining() const { return buf_.size() - pos_; }

private:
    std::vector<unsigned char> buf_;
    std::size_t pos_ = 0;
    ErrorCode code_;
};

}  // namespace campfire::binary
