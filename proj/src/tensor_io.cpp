#include "dcn/tensor_io.hpp"

#include <cstring>
#include <fstream>

namespace dcn {

namespace {

constexpr char kMagic[4] = {'D', 'C', 'T', '1'};

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32(std::istream& is, const std::string& context) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw IoError("truncated tensor data in " + context);
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 |
           static_cast<uint32_t>(b[2]) << 16 | static_cast<uint32_t>(b[3]) << 24;
}

uint32_t f32_bits(float f) {
    uint32_t u;
    std::memcpy(&u, &f, 4);
    return u;
}

float bits_f32(uint32_t u) {
    float f;
    std::memcpy(&f, &u, 4);
    return f;
}

} // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write(kMagic, 4);
    put_u32(os, static_cast<uint32_t>(t.rank()));
    for (int d : t.shape()) put_u32(os, static_cast<uint32_t>(d));
    for (double v : t.values()) put_u32(os, f32_bits(static_cast<float>(v)));
}

Tensor read_tensor(std::istream& is, const std::string& context) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("bad tensor magic in " + context);
    uint32_t rank = get_u32(is, context);
    if (rank > 8) throw IoError("implausible tensor rank " + std::to_string(rank) + " in " + context);
    Shape s;
    for (uint32_t i = 0; i < rank; ++i) {
        uint32_t d = get_u32(is, context);
        if (d == 0 || d > (1u << 24)) throw IoError("bad tensor extent in " + context);
        s.push_back(static_cast<int>(d));
    }
    int64_t n = numel(s);
    std::vector<double> vals(n);
    for (int64_t i = 0; i < n; ++i) vals[i] = static_cast<double>(bits_f32(get_u32(is, context)));
    return Tensor::from_values(s, std::move(vals));
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    write_tensor(f, t);
    if (!f) throw IoError("write failed: " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    return read_tensor(f, path);
}

} // namespace dcn
