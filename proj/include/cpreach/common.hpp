#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace cpreach {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Infeasible configuration (delta/tau/m combinations, bad initial sets, ...).
// The CLI maps this to exit code 2.
struct InfeasibleError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Numeric failure (divergent training loss, non-finite state, ...). Exit code 3.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File I/O failure. Exit code 4.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

} // namespace cpreach
