#include "hitt/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts unsupported");

namespace hitt {
namespace {

constexpr char kTensorMagic[4] = {'H', 'T', 'T', '1'};
constexpr char kContainerMagic[4] = {'H', 'T', 'T', 'C'};
constexpr int kMaxRank = 8;

void put_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t get_u32(std::istream& is, const std::string& path) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4))
        throw FormatError(path + ": truncated file");
    return v;
}

void write_tensor_record(std::ostream& os, const Tensor& t) {
    os.write(kTensorMagic, 4);
    const auto rank = static_cast<std::uint8_t>(t.rank());
    os.write(reinterpret_cast<const char*>(&rank), 1);
    for (int d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * sizeof(float)));
}

Tensor read_tensor_record(std::istream& is, const std::string& path) {
    char magic[4] = {};
    if (!is.read(magic, 4) || std::memcmp(magic, kTensorMagic, 4) != 0)
        throw FormatError(path + ": bad tensor magic");
    std::uint8_t rank = 0;
    if (!is.read(reinterpret_cast<char*>(&rank), 1))
        throw FormatError(path + ": truncated file");
    if (rank == 0 || rank > kMaxRank)
        throw FormatError(path + ": unsupported tensor rank " + std::to_string(rank));
    std::vector<int> shape(rank);
    std::size_t numel = 1;
    for (int i = 0; i < rank; ++i) {
        const std::uint32_t d = get_u32(is, path);
        if (d == 0 || d > (1u << 28)) throw FormatError(path + ": bad dim");
        shape[static_cast<std::size_t>(i)] = static_cast<int>(d);
        numel *= d;
    }
    Tensor t = Tensor::zeros(shape);
    if (!is.read(reinterpret_cast<char*>(t.data()),
                 static_cast<std::streamsize>(numel * sizeof(float))))
        throw FormatError(path + ": payload shorter than header promises");
    return t;
}

}  // namespace

void write_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw StateError("cannot open for write: " + path);
    write_tensor_record(os, t);
    if (!os) throw StateError("write failed: " + path);
}

Tensor read_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw StateError("cannot open: " + path);
    Tensor t = read_tensor_record(is, path);
    // Trailing bytes would mean a corrupt or mislabeled file.
    is.peek();
    if (!is.eof()) throw FormatError(path + ": trailing bytes after payload");
    return t;
}

void write_named_tensors(const std::string& path, const NamedTensors& entries) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw StateError("cannot open for write: " + path);
    os.write(kContainerMagic, 4);
    put_u32(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& [name, tensor] : entries) {
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_tensor_record(os, tensor);
    }
    if (!os) throw StateError("write failed: " + path);
}

NamedTensors read_named_tensors(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw StateError("cannot open: " + path);
    char magic[4] = {};
    if (!is.read(magic, 4) || std::memcmp(magic, kContainerMagic, 4) != 0)
        throw FormatError(path + ": bad container magic");
    const std::uint32_t count = get_u32(is, path);
    NamedTensors out;
    out.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = get_u32(is, path);
        if (len > 4096) throw FormatError(path + ": entry name too long");
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw FormatError(path + ": truncated name");
        out.emplace_back(std::move(name), read_tensor_record(is, path));
    }
    return out;
}

std::string bytes_hash(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
}

std::string file_content_hash(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw StateError("cannot open: " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    const std::string s = buf.str();
    return bytes_hash(s.data(), s.size());
}

}  // namespace hitt
