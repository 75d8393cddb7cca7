#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "tensor.hpp"

// Binary tensor container:
//   NDTN: magic "NDTN" | u8 dtype (0=f64, 1=f32) | u8 rank |
//         rank x u64 dims (LE) | raw values (LE)
//   NDAR: magic "NDAR" | u64 count | count x (u16 name-len | name bytes |
//         embedded NDTN record) — used for model checkpoints.
// Written little-endian; this project targets little-endian hosts only.

namespace nd {

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& is, void* p, size_t n, const char* what) {
    is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    ND_CHECK(static_cast<size_t>(is.gcount()) == n, ArtifactError,
             "truncated tensor stream while reading " << what);
}

template <class T>
void write_pod(std::ostream& os, T v) {
    write_bytes(os, &v, sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const char* what) {
    T v{};
    read_bytes(is, &v, sizeof(T), what);
    return v;
}

template <class S>
constexpr uint8_t dtype_tag() {
    if constexpr (std::is_same_v<S, double>)
        return 0;
    else
        return 1;
}

}  // namespace detail

template <class S>
void save_tensor_stream(std::ostream& os, const TensorT<S>& t) {
    detail::write_bytes(os, "NDTN", 4);
    detail::write_pod<uint8_t>(os, detail::dtype_tag<S>());
    detail::write_pod<uint8_t>(os, static_cast<uint8_t>(t.rank()));
    for (i64 d : t.shape()) detail::write_pod<uint64_t>(os, static_cast<uint64_t>(d));
    detail::write_bytes(os, t.v().data(), t.v().size() * sizeof(S));
}

template <class S>
TensorT<S> load_tensor_stream(std::istream& is) {
    char magic[4];
    detail::read_bytes(is, magic, 4, "magic");
    ND_CHECK(std::memcmp(magic, "NDTN", 4) == 0, ArtifactError,
             "bad tensor magic (not an NDTN record)");
    const auto tag = detail::read_pod<uint8_t>(is, "dtype");
    ND_CHECK(tag == detail::dtype_tag<S>(), ArtifactError,
             "tensor dtype tag " << int(tag) << " does not match requested scalar type");
    const auto rank = detail::read_pod<uint8_t>(is, "rank");
    ND_CHECK(rank <= 8, ArtifactError, "implausible tensor rank " << int(rank));
    Shape shape(rank);
    i64 numel = 1;
    for (auto& d : shape) {
        d = static_cast<i64>(detail::read_pod<uint64_t>(is, "dims"));
        ND_CHECK(d > 0 && numel <= (i64(1) << 40) / std::max<i64>(d, 1), ArtifactError,
                 "implausible tensor dimension " << d);
        numel *= d;
    }
    std::vector<S> data(static_cast<size_t>(numel));
    detail::read_bytes(is, data.data(), data.size() * sizeof(S), "values");
    return TensorT<S>::from_data(std::move(shape), std::move(data));
}

template <class S>
void save_tensor(const std::filesystem::path& path, const TensorT<S>& t) {
    std::ofstream os(path, std::ios::binary);
    ND_CHECK(os.good(), ArtifactError, "cannot open for write: " << path.string());
    save_tensor_stream(os, t);
    ND_CHECK(os.good(), ArtifactError, "write failed: " << path.string());
}

template <class S = double>
TensorT<S> load_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    ND_CHECK(is.good(), ArtifactError, "cannot open tensor file: " << path.string());
    return load_tensor_stream<S>(is);
}

// Named-tensor archive; ordered map keeps file layout deterministic.
template <class S = double>
class TensorArchive {
public:
    void put(const std::string& name, const TensorT<S>& t) { entries_[name] = t.clone(); }

    const TensorT<S>& get(const std::string& name) const {
        auto it = entries_.find(name);
        ND_CHECK(it != entries_.end(), ArtifactError, "archive has no tensor named '" << name
                                                                                      << "'");
        return it->second;
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }
    size_t size() const { return entries_.size(); }
    const std::map<std::string, TensorT<S>>& entries() const { return entries_; }

    void save(const std::filesystem::path& path) const {
        std::ofstream os(path, std::ios::binary);
        ND_CHECK(os.good(), ArtifactError, "cannot open for write: " << path.string());
        detail::write_bytes(os, "NDAR", 4);
        detail::write_pod<uint64_t>(os, entries_.size());
        for (const auto& [name, t] : entries_) {
            ND_CHECK(name.size() < 65536, ArtifactError, "archive entry name too long");
            detail::write_pod<uint16_t>(os, static_cast<uint16_t>(name.size()));
            detail::write_bytes(os, name.data(), name.size());
            save_tensor_stream(os, t);
        }
        ND_CHECK(os.good(), ArtifactError, "write failed: " << path.string());
    }

    static TensorArchive load(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        ND_CHECK(is.good(), ArtifactError, "cannot open archive: " << path.string());
        char magic[4];
        detail::read_bytes(is, magic, 4, "archive magic");
        ND_CHECK(std::memcmp(magic, "NDAR", 4) == 0, ArtifactError,
                 "bad archive magic (not an NDAR file): " << path.string());
        const auto count = detail::read_pod<uint64_t>(is, "entry count");
        ND_CHECK(count < 1u << 20, ArtifactError, "implausible archive entry count " << count);
        TensorArchive ar;
        for (uint64_t i = 0; i < count; ++i) {
            const auto len = detail::read_pod<uint16_t>(is, "name length");
            std::string name(len, '\0');
            detail::read_bytes(is, name.data(), len, "name");
            ar.entries_[name] = load_tensor_stream<S>(is);
        }
        return ar;
    }

private:
    std::map<std::string, TensorT<S>> entries_;
};

// FNV-1a 64-bit; used for artifact fingerprints in run manifests.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    uint64_t h = seed;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline uint64_t fnv1a64_file(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    ND_CHECK(is.good(), ArtifactError, "cannot hash missing file: " << path.string());
    uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (is) {
        is.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<size_t>(is.gcount()), h);
    }
    return h;
}

inline std::string hex64(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<size_t>(i)] = digits[h & 0xf];
        h >>= 4;
    }
    return s;
}

}  // namespace nd
