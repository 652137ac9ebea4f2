#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "haltingvt/tensor.hpp"

namespace haltingvt {

// Binary parameter container. All integers and values are little-endian.
//
//   offset  size  field
//   0       8     magic "HVTCKPT\0"
//   8       4     u32 format version (1)
//   12      4     u32 precision tag: bytes per value (4 = float32, 8 = float64)
//   16      4     u32 record count
//   then per record, in order:
//           4     u32 name length N
//           N     name bytes
//           4     u32 rank R
//           8*R   u64 dims
//           P*V   raw values, P = precision tag, V = product(dims)
inline constexpr char checkpoint_magic[8] = {'H', 'V', 'T', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t checkpoint_version = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename T>
using NamedTensors = std::vector<std::pair<std::string, Tensor<T>>>;

namespace detail {

template <typename U>
void put_le(std::ostream& os, U value) {
    static_assert(std::is_integral_v<U> || std::is_floating_point_v<U>);
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
    static_assert(sizeof(U) == sizeof(Bits));
    const Bits bits = std::bit_cast<Bits>(value);
    char bytes[sizeof(Bits)];
    for (std::size_t i = 0; i < sizeof(Bits); ++i) {
        bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
    }
    os.write(bytes, sizeof(bytes));
}

template <typename U>
U get_le(std::istream& is) {
    using Bits = std::conditional_t<sizeof(U) == 8, std::uint64_t, std::uint32_t>;
    unsigned char bytes[sizeof(Bits)];
    if (!is.read(reinterpret_cast<char*>(bytes), sizeof(bytes))) {
        throw CheckpointError("checkpoint: truncated file");
    }
    Bits bits = 0;
    for (std::size_t i = 0; i < sizeof(Bits); ++i) {
        bits |= static_cast<Bits>(bytes[i]) << (8 * i);
    }
    return std::bit_cast<U>(bits);
}

}  // namespace detail

template <typename T>
void save_checkpoint(const std::string& path, const NamedTensors<T>& tensors) {
    static_assert(sizeof(T) == 4 || sizeof(T) == 8);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw CheckpointError("checkpoint: cannot open " + path + " for writing");
    }
    os.write(checkpoint_magic, sizeof(checkpoint_magic));
    detail::put_le<std::uint32_t>(os, checkpoint_version);
    detail::put_le<std::uint32_t>(os, sizeof(T));
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, tensor] : tensors) {
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensor.rank()));
        for (std::size_t d : tensor.shape()) {
            detail::put_le<std::uint64_t>(os, d);
        }
        for (T v : tensor.values()) {
            detail::put_le<T>(os, v);
        }
    }
    if (!os) {
        throw CheckpointError("checkpoint: write failed for " + path);
    }
}

struct CheckpointRecord {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct CheckpointContents {
    std::uint32_t version = 0;
    std::uint32_t precision = 0;
    std::vector<CheckpointRecord> records;
};

inline CheckpointContents read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw CheckpointError("checkpoint: cannot open " + path);
    }
    char magic[sizeof(checkpoint_magic)];
    if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, checkpoint_magic, sizeof(magic)) != 0) {
        throw CheckpointError("checkpoint: bad magic in " + path);
    }
    CheckpointContents contents;
    contents.version = detail::get_le<std::uint32_t>(is);
    if (contents.version != checkpoint_version) {
        throw CheckpointError("checkpoint: unsupported format version " +
                              std::to_string(contents.version));
    }
    contents.precision = detail::get_le<std::uint32_t>(is);
    if (contents.precision != 4 && contents.precision != 8) {
        throw CheckpointError("checkpoint: unknown precision tag " + std::to_string(contents.precision));
    }
    const auto count = detail::get_le<std::uint32_t>(is);
    for (std::uint32_t r = 0; r < count; ++r) {
        CheckpointRecord rec;
        rec.name.resize(detail::get_le<std::uint32_t>(is));
        if (!is.read(rec.name.data(), static_cast<std::streamsize>(rec.name.size()))) {
            throw CheckpointError("checkpoint: truncated file");
        }
        const auto rank = detail::get_le<std::uint32_t>(is);
        for (std::uint32_t d = 0; d < rank; ++d) {
            rec.shape.push_back(static_cast<std::size_t>(detail::get_le<std::uint64_t>(is)));
        }
        rec.values.resize(shape_size(rec.shape));
        for (double& v : rec.values) {
            v = contents.precision == 4 ? static_cast<double>(detail::get_le<float>(is))
                                        : detail::get_le<double>(is);
        }
        contents.records.push_back(std::move(rec));
    }
    return contents;
}

// Copies checkpoint values into existing tensors; names, order and shapes must match.
template <typename T>
void load_checkpoint(const std::string& path, NamedTensors<T>& tensors) {
    const CheckpointContents contents = read_checkpoint(path);
    if (contents.records.size() != tensors.size()) {
        throw CheckpointError("checkpoint: " + path + " holds " +
                              std::to_string(contents.records.size()) + " tensors, model expects " +
                              std::to_string(tensors.size()));
    }
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& rec = contents.records[i];
        auto& [name, tensor] = tensors[i];
        if (rec.name != name || rec.shape != tensor.shape()) {
            throw CheckpointError("checkpoint: record " + rec.name + shape_string(rec.shape) +
                                  " does not match model tensor " + name +
                                  shape_string(tensor.shape()));
        }
        auto dst = tensor.mutable_values();
        for (std::size_t j = 0; j < dst.size(); ++j) {
            dst[j] = static_cast<T>(rec.values[j]);
        }
    }
}

}  // namespace haltingvt
