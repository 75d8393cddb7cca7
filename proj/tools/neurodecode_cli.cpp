// Placeholder entry point; the full pipeline CLI lands with the pipeline
// module.
#include <cstdio>

#include "neurodecode/gradcheck.hpp"
#include "neurodecode/image.hpp"
#include "neurodecode/linalg.hpp"
#include "neurodecode/ops.hpp"
#include "neurodecode/parallel.hpp"
#include "neurodecode/serialize.hpp"

int main() {
    std::puts(nd::kVersion);
    return 0;
}
