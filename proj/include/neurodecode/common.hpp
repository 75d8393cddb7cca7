#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace nd {

inline constexpr const char* kVersion = "neurodecode 0.1.0";

using i64 = std::int64_t;
using u64 = std::uint64_t;

// Error taxonomy. The CLI maps these onto process exit codes:
// ConfigError/DimensionError -> 2, ArtifactError -> 3,
// NumericError/SolverError -> 4.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& m) : std::runtime_error(m) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};
struct SolverError : std::runtime_error {
    explicit SolverError(const std::string& m) : std::runtime_error(m) {}
};
struct ArtifactError : std::runtime_error {
    explicit ArtifactError(const std::string& m) : std::runtime_error(m) {}
};

using Shape = std::vector<i64>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

inline i64 shape_numel(const Shape& s) {
    i64 n = 1;
    for (i64 d : s) {
        if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(s));
        n *= d;
    }
    return n;
}

}  // namespace nd

#define ND_CHECK(cond, ExType, msg)              \
    do {                                         \
        if (!(cond)) {                           \
            std::ostringstream nd_check_os_;     \
            nd_check_os_ << msg;                 \
            throw ExType(nd_check_os_.str());    \
        }                                        \
    } while (0)
