#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace vlmoe {

// Operand dimensions disagree.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// API misuse: wrong call sequence, non-scalar loss, consumed tape, plan/batch mismatch.
struct ContractError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Out-of-range id, index, or overlong input.
struct IndexError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Training aborted (non-finite loss or similar).
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += " x ";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace vlmoe
