#pragma once

#include <stdexcept>
#include <string>

namespace capst {

struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Mismatched tensor shapes or layer dimensions.
struct shape_error : error {
    using error::error;
};

// Bad config file, unknown key, out-of-range value.
struct config_error : error {
    using error::error;
};

// Dataset, manifest, or file-format problems.
struct data_error : error {
    using error::error;
};

// NaN/Inf loss, diverged training.
struct numeric_error : error {
    using error::error;
};

}  // namespace capst
