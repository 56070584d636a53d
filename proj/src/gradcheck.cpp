#include "dcl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace dcl::ad {

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
    double diff = 0, na = 0, nn = 0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
        na = std::max(na, std::abs(analytic[i]));
        nn = std::max(nn, std::abs(numeric[i]));
    }
    return diff / std::max({na, nn, 1e-12});
}

template <class T>
GradCheckResult gradient_check(const LossFn<T>& loss, std::vector<Tensor<T>>& params, T step) {
    Gradients<T> grads;
    {
        Tape<T> tape;
        const Tensor<T> l = loss(params);
        grads = backward(l, tape);
    }
    GradCheckResult result;
    for (std::size_t p = 0; p < params.size(); ++p) {
        const NdArray<T> g = grads.of(params[p]);
        std::vector<double> analytic(g.size()), numeric(g.size());
        NdArray<T>& v = params[p].mutable_value();
        for (std::size_t i = 0; i < v.size(); ++i) {
            analytic[i] = static_cast<double>(g[i]);
            const T saved = v[i];
            v[i] = saved + step;
            const double up = static_cast<double>(loss(params).item());
            v[i] = saved - step;
            const double down = static_cast<double>(loss(params).item());
            v[i] = saved;
            numeric[i] = (up - down) / (2.0 * static_cast<double>(step));
            result.evaluations += 2;
        }
        const double err = relative_error(analytic, numeric);
        if (err > result.max_rel_error || p == 0) {
            if (err >= result.max_rel_error) result.worst_param = p;
            result.max_rel_error = std::max(result.max_rel_error, err);
        }
    }
    return result;
}

template GradCheckResult gradient_check<float>(const LossFn<float>&, std::vector<Tensor<float>>&, float);
template GradCheckResult gradient_check<double>(const LossFn<double>&, std::vector<Tensor<double>>&, double);

} // namespace dcl::ad
