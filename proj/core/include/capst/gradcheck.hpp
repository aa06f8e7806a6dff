#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "capst/tensor.hpp"

namespace capst {

struct GradCheckReport {
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    std::size_t checked = 0;
    std::string worst;  // "name[i]" of the worst coordinate
    bool passed = false;
};

// Central-difference check of reverse-mode gradients. `loss` evaluates the
// scalar objective from the current contents of `inputs` (which are
// perturbed in place and restored). Intended for 64-bit tensors; finite
// differences are unreliable in 32-bit.
template <class T>
GradCheckReport gradcheck(const std::function<Tensor<T>()>& loss,
                          std::vector<std::pair<std::string, Tensor<T>>> inputs,
                          double epsilon = 1e-5, double tolerance = 1e-5) {
    GradCheckReport report;
    report.tolerance = tolerance;

    // Analytic pass.
    for (auto& [name, t] : inputs) t.zero_grad();
    {
        Tape<T> tape;
        typename Tape<T>::Scope scope(tape);
        Tensor<T> l = loss();
        tape.backward(l);
    }
    std::vector<std::vector<T>> analytic;
    analytic.reserve(inputs.size());
    for (auto& [name, t] : inputs) {
        if (!t.requires_grad()) throw error("gradcheck: input " + name + " has no grad");
        analytic.emplace_back(t.grad(), t.grad() + t.numel());
    }

    const T eps = static_cast<T>(epsilon);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& [name, t] = inputs[k];
        for (std::size_t i = 0; i < t.numel(); ++i) {
            const T saved = t[i];
            typename Tape<T>::NoGrad off;
            t[i] = saved + eps;
            const T fp = loss()[0];
            t[i] = saved - eps;
            const T fm = loss()[0];
            t[i] = saved;
            const double numeric = static_cast<double>(fp - fm) / (2.0 * epsilon);
            const double exact = static_cast<double>(analytic[k][i]);
            const double denom = std::max({std::abs(numeric), std::abs(exact), 1.0});
            const double rel = std::abs(numeric - exact) / denom;
            ++report.checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst = name + "[" + std::to_string(i) + "]";
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    return report;
}

}  // namespace capst
