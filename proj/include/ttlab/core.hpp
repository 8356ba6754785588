#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace ttlab {

using count_t = std::size_t;

// Dimension/shape violations (mismatched matrix sizes, empty inputs).
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

// Value-domain violations (negative eigenvalues, zero task vector, ...).
struct DomainError : std::domain_error {
    explicit DomainError(const std::string& what) : std::domain_error(what) {}
};

// A theory predictor was asked for a regime it does not cover
// (e.g. noisy data with the isotropic-pretrained predictor).
struct RegimeError : std::runtime_error {
    explicit RegimeError(const std::string& what) : std::runtime_error(what) {}
};

// Config-file syntax or schema problems; message carries line context.
struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

// Kahan-compensated accumulator. Summation order is fixed by the caller,
// which is what makes parallel runs reproduce serial results bitwise.
class KahanSum {
public:
    void add(double x) {
        const double y = x - c_;
        const double t = s_ + y;
        c_ = (t - s_) - y;
        s_ = t;
    }
    double value() const { return s_; }

private:
    double s_ = 0.0;
    double c_ = 0.0;
};

}  // namespace detail

}  // namespace ttlab
