#pragma once

// Central-difference verification of the tape's backward rules.
//
// build_loss must construct a scalar loss on the tape from the current leaf
// values; it is invoked repeatedly while leaf values are perturbed, with the
// tape reset between invocations. Deterministic forward passes only (dropout
// off, batchnorm in eval mode or on a fixed batch).

#include <functional>
#include <vector>

#include "dsparse/array.hpp"

namespace dsparse {

// Gradients via backward(); one vector per param, in param order.
std::vector<std::vector<double>> analytic_grad(Tape& tape,
                                               const std::function<Var()>& build_loss,
                                               const std::vector<Var>& params);

// Central differences: (f(x+eps) - f(x-eps)) / (2 eps), elementwise.
std::vector<std::vector<double>> numeric_grad(Tape& tape,
                                              const std::function<Var()>& build_loss,
                                              const std::vector<Var>& params,
                                              double eps = 1e-5);

// max over elements of |analytic - numeric| / max(1, |numeric|)
double max_rel_err(const std::vector<std::vector<double>>& analytic,
                   const std::vector<std::vector<double>>& numeric);

double grad_check(Tape& tape, const std::function<Var()>& build_loss,
                  const std::vector<Var>& params, double eps = 1e-5);

} // namespace dsparse
