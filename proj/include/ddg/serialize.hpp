#pragma once

// DDGT binary tensor files. Layout, all integers little-endian:
//   "DDGT" | u32 version | u32 count
//   per tensor: u16 name_len | name | u8 rank | u64 dims[rank] | u8 dtype | payload
// dtype 0 = f32, 1 = f64; payload is the raw IEEE-754 little-endian values.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "ddg/error.hpp"
#include "ddg/tensor.hpp"

namespace ddg {

inline constexpr std::uint32_t kTensorFileVersion = 1;

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

struct NamedTensor {
    std::string name;
    AnyTensor tensor;
};

using TensorFile = std::vector<NamedTensor>;

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class Reader {
public:
    explicit Reader(std::string_view bytes) : b_(bytes) {}

    template <typename U>
    U get(const char* what) {
        need(sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i)
            v |= static_cast<U>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
        pos_ += sizeof(U);
        return v;
    }

    std::string_view bytes(std::size_t n, const char* what) {
        need(n, what);
        auto s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const { return pos_ == b_.size(); }
    std::size_t pos() const { return pos_; }

private:
    void need(std::size_t n, const char* what) const {
        if (b_.size() - pos_ < n)
            throw FormatError(std::string("tensor file truncated while reading ") + what + " at byte " +
                              std::to_string(pos_));
    }
    std::string_view b_;
    std::size_t pos_ = 0;
};

template <typename T>
void put_payload(std::string& out, const Tensor<T>& t) {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    for (T v : t.vec()) put_le(out, std::bit_cast<Bits>(v));
}

template <typename T>
Tensor<T> get_payload(Reader& r, Shape shape) {
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    const std::size_t n = shape_numel(shape);
    if (n > (std::size_t(1) << 40)) throw FormatError("tensor file declares an implausible element count");
    std::vector<T> data(n);
    for (auto& v : data) v = std::bit_cast<T>(r.get<Bits>("payload"));
    return Tensor<T>(std::move(shape), std::move(data));
}

} // namespace detail

inline std::string encode_tensor_file(const TensorFile& file) {
    std::string out = "DDGT";
    detail::put_le<std::uint32_t>(out, kTensorFileVersion);
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(file.size()));
    for (const auto& nt : file) {
        if (nt.name.size() > 0xFFFF) throw FormatError("tensor name too long: " + nt.name.substr(0, 32) + "...");
        detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(nt.name.size()));
        out += nt.name;
        const Shape& shape = std::visit([](const auto& t) -> const Shape& { return t.shape(); }, nt.tensor);
        if (shape.size() > 0xFF) throw FormatError("tensor rank too large: " + nt.name);
        detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(shape.size()));
        for (std::size_t d : shape) detail::put_le<std::uint64_t>(out, d);
        detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(nt.tensor.index()));
        std::visit([&](const auto& t) { detail::put_payload(out, t); }, nt.tensor);
    }
    return out;
}

inline TensorFile decode_tensor_file(std::string_view bytes) {
    detail::Reader r(bytes);
    if (r.bytes(4, "magic") != "DDGT") throw FormatError("not a DDGT tensor file (bad magic)");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kTensorFileVersion)
        throw FormatError("unsupported tensor file version " + std::to_string(version) + " (expected " +
                          std::to_string(kTensorFileVersion) + ")");
    const auto count = r.get<std::uint32_t>("tensor count");
    TensorFile file;
    for (std::uint32_t i = 0; i < count; ++i) {
        NamedTensor nt;
        const auto len = r.get<std::uint16_t>("name length");
        nt.name = std::string(r.bytes(len, "name"));
        const auto rank = r.get<std::uint8_t>("rank");
        Shape shape(rank);
        for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>("dims"));
        const auto dtype = r.get<std::uint8_t>("dtype");
        if (dtype == 0)
            nt.tensor = detail::get_payload<float>(r, std::move(shape));
        else if (dtype == 1)
            nt.tensor = detail::get_payload<double>(r, std::move(shape));
        else
            throw FormatError("tensor '" + nt.name + "' has unknown dtype " + std::to_string(dtype));
        file.push_back(std::move(nt));
    }
    if (!r.done()) throw FormatError("tensor file has " + std::to_string(bytes.size() - r.pos()) + " trailing bytes");
    return file;
}

inline std::string read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw UsageError("cannot open file '" + path + "'");
    return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file_bytes(const std::string& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot write file '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw UsageError("short write to '" + path + "'");
}

inline void save_tensor_file(const std::string& path, const TensorFile& file) {
    write_file_bytes(path, encode_tensor_file(file));
}

inline TensorFile load_tensor_file(const std::string& path) { return decode_tensor_file(read_file_bytes(path)); }

/// Looks up a tensor by name and dtype.
template <typename T>
const Tensor<T>& find_tensor(const TensorFile& file, const std::string& name) {
    for (const auto& nt : file)
        if (nt.name == name) {
            if (const auto* t = std::get_if<Tensor<T>>(&nt.tensor)) return *t;
            throw FormatError("tensor '" + name + "' has the wrong dtype");
        }
    throw FormatError("tensor file has no entry '" + name + "'");
}

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

template <typename T>
std::uint64_t fnv1a(const T* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    return fnv1a(std::string_view(reinterpret_cast<const char*>(data), n * sizeof(T)), h);
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[i] = digits[v & 0xF];
    return s;
}

} // namespace ddg
