// Copyright 2026 The ConceptGuard Authors
// SPDX-License-Identifier: Apache-2.0

// Little-endian byte writer/reader shared by the bank, matrix and
// checkpoint formats.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "conceptguard/error.hpp"

namespace cg::binio {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

class Writer {
public:
    void u8(std::uint8_t v) { bytes_.push_back(v); }
    void u16(std::uint16_t v) { raw(&v, sizeof v); }
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void i32(std::int32_t v) { raw(&v, sizeof v); }
    void f32(float v) { raw(&v, sizeof v); }
    void bytes(std::string_view s) { raw(s.data(), s.size()); }

    void str16(std::string_view s, std::string_view what) {
        if (s.size() > 0xFFFF) {
            fail(ErrorKind::Reject, std::string(what) + " longer than 65535 bytes");
        }
        u16(static_cast<std::uint16_t>(s.size()));
        bytes(s);
    }

    void patch_u32(std::size_t offset, std::uint32_t v) {
        std::memcpy(bytes_.data() + offset, &v, sizeof v);
    }

    std::size_t size() const { return bytes_.size(); }
    const std::vector<std::uint8_t>& data() const { return bytes_; }

private:
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        bytes_.insert(bytes_.end(), b, b + n);
    }

    std::vector<std::uint8_t> bytes_;
};

/// Bounds-checked reader; running past the end raises Error(Corrupt).
class Reader {
public:
    Reader(const std::uint8_t* data, std::size_t size) : data_(data), size_(size) {}

    std::uint8_t u8() { return take<std::uint8_t>(); }
    std::uint16_t u16() { return take<std::uint16_t>(); }
    std::uint32_t u32() { return take<std::uint32_t>(); }
    std::int32_t i32() { return take<std::int32_t>(); }
    float f32() { return take<float>(); }

    std::string bytes(std::size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }

    std::string str16() { return bytes(u16()); }

    void skip(std::size_t n) {
        need(n);
        pos_ += n;
    }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return size_ - pos_; }
    bool done() const { return pos_ == size_; }

private:
    template <typename T>
    T take() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_ + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    void need(std::size_t n) const {
        if (n > size_ - pos_) {
            fail(ErrorKind::Corrupt, "unexpected end of payload at byte " + std::to_string(pos_));
        }
    }

    const std::uint8_t* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes);
void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

}  // namespace cg::binio
