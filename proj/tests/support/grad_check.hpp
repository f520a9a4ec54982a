#pragma once

// Central finite-difference gradient checking in double precision. The loss
// builder is re-invoked per perturbation so every check sees a fresh tape.

#include <cmath>
#include <functional>
#include <string>

#include "diffprompt/autograd.hpp"
#include "diffprompt/nn.hpp"

namespace dp::testing {

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;  // "param[index]" of the worst element
    int64_t checked = 0;
};

// build_loss must assemble the forward pass from current parameter values and
// return a scalar loss Value on the given tape.
template <typename BuildLoss>
GradCheckResult check_gradients(ParamSetT<double>& params, BuildLoss&& build_loss,
                                double h = 1e-4) {
    params.zero_grad();
    {
        TapeT<double> tape;
        auto loss = build_loss(tape);
        tape.backward(loss);
    }

    GradCheckResult res;
    for (auto* p : params.params()) {
        if (!p->trainable) continue;
        for (size_t i = 0; i < p->value.data.size(); ++i) {
            const double orig = p->value.data[i];
            p->value.data[i] = orig + h;
            double up;
            {
                TapeT<double> tape(false);
                up = build_loss(tape).val().at(0);
            }
            p->value.data[i] = orig - h;
            double down;
            {
                TapeT<double> tape(false);
                down = build_loss(tape).val().at(0);
            }
            p->value.data[i] = orig;

            const double numeric = (up - down) / (2.0 * h);
            const double analytic = p->grad.data[i];
            const double denom = std::max(std::abs(numeric), std::abs(analytic));
            double rel;
            if (denom < 1e-7)
                rel = std::abs(numeric - analytic) < 1e-7 ? 0.0 : 1.0;
            else
                rel = std::abs(numeric - analytic) / denom;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = p->name + "[" + std::to_string(i) + "]";
            }
            ++res.checked;
        }
    }
    return res;
}

}  // namespace dp::testing
