#pragma once

// Shared error categories, deterministic RNG, and little-endian binary I/O
// helpers used by every module.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace canopyuq {

// Error categories aligned with the CLI exit codes: bad arguments (2),
// data/format errors (3), numeric failures (4).
class ArgError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// xoshiro256++ seeded through splitmix64. Not std::* distributions: those are
// implementation-defined, and folds, model init, and synthetic scenes must be
// reproducible bit-for-bit from a seed.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& word : state_) {
            x += 0x9e3779b97f4a7c15ULL;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            word = z ^ (z >> 31);
        }
    }

    uint64_t next() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) by rejection.
    uint64_t bounded(uint64_t n) {
        if (n == 0) throw ArgError("Rng::bounded: n must be positive");
        const uint64_t threshold = (0ULL - n) % n;
        for (;;) {
            const uint64_t r = next();
            if (r >= threshold) return r % n;
        }
    }

    // Standard normal via Box-Muller; caches the second variate.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename It>
    void shuffle(It first, It last) {
        const auto n = static_cast<uint64_t>(last - first);
        for (uint64_t i = n; i > 1; --i) {
            const uint64_t j = bounded(i);
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t state_[4] = {};
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Explicit little-endian serialization. The host is almost certainly LE, but
// the on-disk formats are specified LE so spell it out.
class ByteWriter {
public:
    explicit ByteWriter(std::ostream& os) : os_(os) {}

    void u8(uint8_t v) { raw(&v, 1); }
    void u16(uint16_t v) {
        uint8_t b[2] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8)};
        raw(b, 2);
    }
    void u32(uint32_t v) {
        uint8_t b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
        raw(b, 4);
    }
    void u64(uint64_t v) {
        uint8_t b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
        raw(b, 8);
    }
    void f32(float v) {
        uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f64(double v) {
        uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void f32_array(const float* data, size_t count) {
        for (size_t i = 0; i < count; ++i) f32(data[i]);
    }
    void bytes(const void* data, size_t count) { raw(data, count); }
    void magic(const char tag[5]) { raw(tag, 4); }

private:
    void raw(const void* data, size_t count) {
        os_.write(static_cast<const char*>(data), static_cast<std::streamsize>(count));
        if (!os_) throw DataError("ByteWriter: write failed");
    }

    std::ostream& os_;
};

class ByteReader {
public:
    explicit ByteReader(std::istream& is, std::string context = "")
        : is_(is), context_(std::move(context)) {}

    uint8_t u8() {
        uint8_t v;
        raw(&v, 1);
        return v;
    }
    uint16_t u16() {
        uint8_t b[2];
        raw(b, 2);
        return static_cast<uint16_t>(b[0] | (b[1] << 8));
    }
    uint32_t u32() {
        uint8_t b[4];
        raw(b, 4);
        uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
        return v;
    }
    uint64_t u64() {
        uint8_t b[8];
        raw(b, 8);
        uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
        return v;
    }
    float f32() {
        const uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64() {
        const uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    void f32_array(float* data, size_t count) {
        for (size_t i = 0; i < count; ++i) data[i] = f32();
    }
    void bytes(void* data, size_t count) { raw(data, count); }
    void expect_magic(const char tag[5], const std::string& what) {
        char got[4];
        raw(got, 4);
        if (std::memcmp(got, tag, 4) != 0)
            throw DataError(what + ": bad magic (expected '" + std::string(tag, 4) + "')");
    }
    bool at_eof() {
        is_.peek();
        return is_.eof();
    }

private:
    void raw(void* data, size_t count) {
        is_.read(static_cast<char*>(data), static_cast<std::streamsize>(count));
        if (static_cast<size_t>(is_.gcount()) != count)
            throw DataError(context_.empty() ? "ByteReader: truncated input"
                                             : context_ + ": truncated input");
    }

    std::istream& is_;
    std::string context_;
};

inline bool nearly_equal(double a, double b, double rel_tol, double abs_tol = 0.0) {
    const double diff = std::abs(a - b);
    return diff <= abs_tol || diff <= rel_tol * std::max(std::abs(a), std::abs(b));
}

}  // namespace canopyuq
