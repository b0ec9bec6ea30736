#include "mpcache/tensor.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace mpcache {

namespace {

constexpr char kMagic[4] = {'M', 'P', 'C', 'T'};
constexpr std::uint8_t kVersion = 1;

std::size_t checked_numel(const std::vector<std::uint32_t>& dims) {
    std::size_t n = 1;
    for (std::uint32_t d : dims) {
        if (d != 0 && n > SIZE_MAX / d) throw std::runtime_error("tensor extent product overflows");
        n *= d;
    }
    return n;
}

std::uint64_t load_le64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

void store_le64(unsigned char* p, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) p[i] = static_cast<unsigned char>(v >> (8 * i));
}

}  // namespace

PlainTensor PlainTensor::zeros(std::vector<std::uint32_t> dims) {
    PlainTensor t;
    t.dims = std::move(dims);
    t.reals.assign(checked_numel(t.dims), 0.0);
    return t;
}

PlainTensor PlainTensor::from_reals(std::vector<std::uint32_t> dims, std::vector<double> data) {
    if (checked_numel(dims) != data.size()) throw std::invalid_argument("from_reals: extent/payload mismatch");
    PlainTensor t;
    t.dims = std::move(dims);
    t.reals = std::move(data);
    return t;
}

PlainTensor PlainTensor::from_raws(std::vector<std::uint32_t> dims, std::vector<ring_t> data) {
    if (checked_numel(dims) != data.size()) throw std::invalid_argument("from_raws: extent/payload mismatch");
    PlainTensor t;
    t.dims = std::move(dims);
    t.dtype = DType::Raw;
    t.raws = std::move(data);
    return t;
}

std::size_t PlainTensor::numel() const { return checked_numel(dims); }

PlainTensor PlainTensor::encoded(int frac_bits) const {
    if (dtype == DType::Raw) return *this;
    PlainTensor t;
    t.dims = dims;
    t.dtype = DType::Raw;
    t.raws.reserve(reals.size());
    for (double x : reals) t.raws.push_back(fx::encode(x, frac_bits));
    return t;
}

PlainTensor PlainTensor::decoded(int frac_bits) const {
    if (dtype == DType::Real64) return *this;
    PlainTensor t;
    t.dims = dims;
    t.reals.reserve(raws.size());
    for (ring_t r : raws) t.reals.push_back(fx::decode(r, frac_bits));
    return t;
}

PlainTensor mpct_read_stream(std::istream& in, const std::string& name) {
    auto fail = [&](std::size_t offset, const std::string& what) -> void {
        std::ostringstream os;
        os << "mpct: " << name << ": " << what << " at byte offset " << offset;
        throw std::runtime_error(os.str());
    };

    unsigned char header[8];
    in.read(reinterpret_cast<char*>(header), 8);
    if (in.gcount() != 8) fail(static_cast<std::size_t>(in.gcount()), "truncated header");
    if (std::memcmp(header, kMagic, 4) != 0) fail(0, "bad magic");
    if (header[4] != kVersion) fail(4, "unsupported version");
    if (header[5] > 1) fail(5, "unknown dtype");
    const DType dtype = static_cast<DType>(header[5]);
    const unsigned rank = header[6];
    if (rank == 0) fail(6, "rank 0 not allowed");

    std::vector<std::uint32_t> dims(rank);
    std::size_t offset = 8;
    for (unsigned i = 0; i < rank; ++i) {
        unsigned char e[4];
        in.read(reinterpret_cast<char*>(e), 4);
        if (in.gcount() != 4) fail(offset + static_cast<std::size_t>(in.gcount()), "truncated extent list");
        dims[i] = static_cast<std::uint32_t>(e[0]) | (static_cast<std::uint32_t>(e[1]) << 8) |
                  (static_cast<std::uint32_t>(e[2]) << 16) | (static_cast<std::uint32_t>(e[3]) << 24);
        offset += 4;
    }

    const std::size_t n = checked_numel(dims);
    std::vector<unsigned char> payload(n * 8);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (static_cast<std::size_t>(in.gcount()) != payload.size())
        fail(offset + static_cast<std::size_t>(in.gcount()), "truncated payload");

    PlainTensor t;
    t.dims = std::move(dims);
    t.dtype = dtype;
    if (dtype == DType::Real64) {
        t.reals.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::uint64_t bits = load_le64(payload.data() + 8 * i);
            double d;
            std::memcpy(&d, &bits, 8);
            t.reals[i] = d;
        }
    } else {
        t.raws.resize(n);
        for (std::size_t i = 0; i < n; ++i) t.raws[i] = load_le64(payload.data() + 8 * i);
    }
    return t;
}

PlainTensor mpct_read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("mpct: cannot open " + path);
    return mpct_read_stream(in, path);
}

void mpct_write_stream(std::ostream& out, const PlainTensor& t) {
    if (t.dims.empty()) throw std::invalid_argument("mpct: rank 0 not allowed");
    unsigned char header[8] = {};
    std::memcpy(header, kMagic, 4);
    header[4] = kVersion;
    header[5] = static_cast<std::uint8_t>(t.dtype);
    if (t.dims.size() > 255) throw std::invalid_argument("mpct: rank too large");
    header[6] = static_cast<std::uint8_t>(t.dims.size());
    out.write(reinterpret_cast<const char*>(header), 8);
    for (std::uint32_t d : t.dims) {
        unsigned char e[4] = {static_cast<unsigned char>(d), static_cast<unsigned char>(d >> 8),
                              static_cast<unsigned char>(d >> 16), static_cast<unsigned char>(d >> 24)};
        out.write(reinterpret_cast<const char*>(e), 4);
    }
    const std::size_t n = t.numel();
    std::vector<unsigned char> payload(n * 8);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits;
        if (t.dtype == DType::Real64) {
            std::memcpy(&bits, &t.reals[i], 8);
        } else {
            bits = t.raws[i];
        }
        store_le64(payload.data() + 8 * i, bits);
    }
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!out) throw std::runtime_error("mpct: write failed");
}

void mpct_write(const std::string& path, const PlainTensor& t) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("mpct: cannot open " + path + " for writing");
    mpct_write_stream(out, t);
}

}  // namespace mpcache
