#pragma once

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace neuromoco {

// Exit codes used by the CLI: 0 success, 1 validation/config, 2 data format,
// 3 numerical failure.
class Error : public std::runtime_error {
public:
    Error(std::string msg, int exit_code)
        : std::runtime_error(std::move(msg)), exit_code_(exit_code) {}
    int exit_code() const { return exit_code_; }

private:
    int exit_code_;
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& msg) : Error(msg, 1) {}
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error(msg, 1) {}
};

class ShapeError : public ValidationError {
public:
    explicit ShapeError(const std::string& msg) : ValidationError(msg) {}
};

class FormatError : public Error {
public:
    explicit FormatError(const std::string& msg) : Error(msg, 2) {}
};

class NumericalError : public Error {
public:
    explicit NumericalError(const std::string& msg) : Error(msg, 3) {}
};

// Little-endian scalar IO. The formats below are byte-exact, so every field
// goes through these helpers instead of raw struct writes.
namespace io {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!os) throw FormatError("write failed");
}

inline void read_bytes(std::istream& is, void* p, size_t n, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is.gcount()) != n)
        throw FormatError(std::string("truncated input while reading ") + what);
}

template <typename T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_integral_v<T> && std::is_unsigned_v<T>);
    unsigned char buf[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    write_bytes(os, buf, sizeof(T));
}

template <typename T>
T read_le(std::istream& is, const char* what) {
    static_assert(std::is_integral_v<T> && std::is_unsigned_v<T>);
    unsigned char buf[sizeof(T)];
    read_bytes(is, buf, sizeof(T), what);
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
    return v;
}

inline void write_f32(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_le<uint32_t>(os, bits);
}

inline float read_f32(std::istream& is, const char* what) {
    uint32_t bits = read_le<uint32_t>(is, what);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

} // namespace io
} // namespace neuromoco
