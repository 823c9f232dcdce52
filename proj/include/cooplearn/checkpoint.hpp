#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "cooplearn/numarray.hpp"
#include "cooplearn/params.hpp"

namespace coop {

// Checkpoint container. Byte layout (all integers and floats little-endian):
//
//   bytes 0..3   magic "CLCK"
//   u32          format version (1)
//   u64          entry count
//   per entry:   u64 name length, name bytes (UTF-8),
//                u64 ndim, u64 dims[ndim],
//                u64 byte offset of the entry's first float within the body
//   u64          body size in bytes
//   body         f64 values, row-major, in declared entry order
namespace ckpt {

constexpr char kMagic[4] = {'C', 'L', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(out, bits);
}

class Reader {
public:
    Reader(const std::string& bytes, const std::string& path) : b_(bytes), path_(path) {}
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte()) << (8 * i);
        return v;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte()) << (8 * i);
        return v;
    }
    double f64() {
        std::uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    std::string str(std::uint64_t n) {
        need(n);
        std::string s = b_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    void need(std::uint64_t n) const {
        if (pos_ + n > b_.size())
            throw std::runtime_error("checkpoint '" + path_ + "': truncated at byte " +
                                     std::to_string(pos_));
    }
    std::size_t pos() const { return pos_; }

private:
    unsigned char byte() { return static_cast<unsigned char>(b_[pos_++]); }
    const std::string& b_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace ckpt

inline void save_checkpoint(const std::string& path, const ParamStore& store) {
    std::string header;
    header.append(ckpt::kMagic, 4);
    ckpt::put_u32(header, ckpt::kVersion);
    ckpt::put_u64(header, store.count());
    std::uint64_t offset = 0;
    for (std::size_t i = 0; i < store.count(); ++i) {
        const std::string& name = store.names()[i];
        const NumArray& v = store.value(i);
        ckpt::put_u64(header, name.size());
        header.append(name);
        ckpt::put_u64(header, v.shape().size());
        for (std::size_t d : v.shape()) ckpt::put_u64(header, d);
        ckpt::put_u64(header, offset);
        offset += 8 * v.size();
    }
    ckpt::put_u64(header, offset);

    std::string body;
    body.reserve(offset);
    for (std::size_t i = 0; i < store.count(); ++i)
        for (double x : store.value(i).values()) ckpt::put_f64(body, x);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot write '" + path + "'");
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

inline ParamStore load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    ckpt::Reader r(bytes, path);
    if (r.str(4) != std::string(ckpt::kMagic, 4))
        throw std::runtime_error("checkpoint '" + path + "': bad magic");
    const std::uint32_t version = r.u32();
    if (version != ckpt::kVersion)
        throw std::runtime_error("checkpoint '" + path + "': unsupported version " +
                                 std::to_string(version));
    const std::uint64_t count = r.u64();

    struct Entry {
        std::string name;
        std::vector<std::size_t> shape;
        std::uint64_t offset;
    };
    std::vector<Entry> entries;
    entries.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        Entry e;
        e.name = r.str(r.u64());
        const std::uint64_t ndim = r.u64();
        for (std::uint64_t d = 0; d < ndim; ++d) e.shape.push_back(r.u64());
        e.offset = r.u64();
        entries.push_back(std::move(e));
    }
    const std::uint64_t body_bytes = r.u64();
    const std::size_t body_start = r.pos();
    r.need(body_bytes);

    ParamStore store;
    for (const auto& e : entries) {
        const std::size_t n = NumArray::element_count(e.shape);
        if (e.offset + 8 * n > body_bytes)
            throw std::runtime_error("checkpoint '" + path + "': entry '" + e.name +
                                     "' overruns body");
        ckpt::Reader vr(bytes, path);
        vr.str(body_start + e.offset);  // skip to the entry's floats
        std::vector<double> data(n);
        for (std::size_t k = 0; k < n; ++k) data[k] = vr.f64();
        store.add(e.name, NumArray(e.shape, std::move(data)));
    }
    return store;
}

}  // namespace coop
