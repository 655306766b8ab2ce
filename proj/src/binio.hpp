#pragma once

#include "flexdiff/error.hpp"

#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

namespace flexdiff::detail {

class ByteWriter {
public:
    void raw(const void* p, size_t n) {
        const auto* b = static_cast<const uint8_t*>(p);
        bytes_.insert(bytes_.end(), b, b + n);
    }
    void u8(uint8_t v) { bytes_.push_back(v); }
    void u32(uint32_t v) {
        for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void u64(uint64_t v) {
        for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<uint8_t>(v >> (8 * i)));
    }
    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f32s(const float* p, size_t n) {
        for (size_t i = 0; i < n; ++i) f32(p[i]);
    }
    void str(const std::string& s) {
        u64(s.size());
        raw(s.data(), s.size());
    }

    std::vector<uint8_t>& bytes() { return bytes_; }

private:
    std::vector<uint8_t> bytes_;
};

class ByteReader {
public:
    ByteReader(const std::vector<uint8_t>& bytes, std::string what)
        : bytes_(bytes), what_(std::move(what)) {}

    void raw(void* p, size_t n) {
        need(n);
        std::memcpy(p, bytes_.data() + pos_, n);
        pos_ += n;
    }
    uint8_t u8() {
        need(1);
        return bytes_[pos_++];
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(bytes_[pos_++]) << (8 * i);
        return v;
    }
    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(bytes_[pos_++]) << (8 * i);
        return v;
    }
    double f64() {
        const uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    float f32() {
        const uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    void f32s(float* p, size_t n) {
        need(4 * n);
        for (size_t i = 0; i < n; ++i) p[i] = f32();
    }
    std::string str() {
        const uint64_t n = u64();
        need(n);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    void need(size_t n) const {
        if (bytes_.size() - pos_ < n) fail(ErrorKind::Io, what_ + ": file is truncated");
    }

    const std::vector<uint8_t>& bytes_;
    std::string what_;
    size_t pos_ = 0;
};

std::vector<uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<uint8_t>& bytes);

} // namespace flexdiff::detail
