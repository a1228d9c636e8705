#include "pr2r/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <vector>

namespace pr2r {

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

void put_f64(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(os, bits);
}

std::uint32_t get_u32(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) fail("truncated checkpoint file " + path);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

std::uint64_t get_u64(std::istream& is, const std::string& path) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) fail("truncated checkpoint file " + path);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

double get_f64(std::istream& is, const std::string& path) {
    std::uint64_t bits = get_u64(is, path);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

void write_entries(std::ostream& os, const std::map<std::string, Tensor>& tensors) {
    os.write("PR2R", 4);
    put_u32(os, kCheckpointVersion);
    put_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) put_u64(os, static_cast<std::uint64_t>(e));
        for (std::int64_t i = 0; i < t.numel(); ++i) put_f64(os, t[i]);
    }
}

std::map<std::string, Tensor> read_entries(std::istream& is, const std::string& path) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "PR2R", 4) != 0)
        fail("bad magic in checkpoint file " + path);
    const std::uint32_t version = get_u32(is, path);
    if (version != kCheckpointVersion)
        fail("unsupported checkpoint version " + std::to_string(version) + " in " + path);
    const std::uint32_t count = get_u32(is, path);
    std::map<std::string, Tensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = get_u32(is, path);
        std::string name(name_len, '\0');
        if (name_len && !is.read(name.data(), name_len)) fail("truncated checkpoint file " + path);
        const std::uint32_t rank = get_u32(is, path);
        Shape shape(rank);
        for (std::uint32_t r = 0; r < rank; ++r) shape[r] = static_cast<std::int64_t>(get_u64(is, path));
        const std::int64_t n = Tensor::numel_of(shape);
        std::vector<double> data(static_cast<std::size_t>(n));
        for (std::int64_t k = 0; k < n; ++k) data[static_cast<std::size_t>(k)] = get_f64(is, path);
        out.emplace(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return out;
}

}  // namespace

void write_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail("cannot open " + path + " for writing");
    write_entries(os, tensors);
    if (!os) fail("write failure on " + path);
}

std::map<std::string, Tensor> read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail("cannot open " + path);
    return read_entries(is, path);
}

void write_single_tensor(const std::string& path, const Tensor& t) {
    std::map<std::string, Tensor> m;
    m.emplace("", t);
    write_checkpoint(path, m);
}

Tensor read_single_tensor(const std::string& path) {
    auto m = read_checkpoint(path);
    if (m.size() != 1) fail("expected a single tensor in " + path);
    return m.begin()->second;
}

}  // namespace pr2r
