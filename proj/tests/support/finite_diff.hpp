#pragma once

#include <cstddef>
#include <functional>

#include "recast/tensor.hpp"

namespace testsupport {

// Central finite difference of a scalar-valued function with respect to one
// entry of a parameter tensor. The function must re-evaluate from the tensor's
// current contents on every call.
inline double central_diff(recast::Tensor& param, std::size_t index,
                           const std::function<double()>& f, double h = 1e-6) {
    const double saved = param[index];
    param[index] = saved + h;
    const double plus = f();
    param[index] = saved - h;
    const double minus = f();
    param[index] = saved;
    return (plus - minus) / (2.0 * h);
}

inline double rel_err(double got, double want) {
    const double denom = std::max({std::abs(got), std::abs(want), 1e-8});
    return std::abs(got - want) / denom;
}

} // namespace testsupport
