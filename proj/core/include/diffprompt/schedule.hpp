#pragma once

// Cosine (squaredcos_cap_v2) noise schedule. Tables are kept in double so the
// closed-form and iterative noising paths agree to tight tolerances.

#include <cstdint>
#include <vector>

namespace dp {

struct NoiseSchedule {
    int64_t T = 0;
    std::vector<double> alpha_bar;  // size T+1, alpha_bar[0] == 1
    std::vector<double> beta;       // size T, beta[i] is the step (i+1) beta

    double alpha_bar_at(int64_t t) const { return alpha_bar[static_cast<size_t>(t)]; }
};

// alpha_bar[t] = f(t)/f(0) with f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2),
// betas 1 - alpha_bar[t]/alpha_bar[t-1] clipped to beta_cap, and alpha_bar
// recomputed from the clipped betas so the product invariant holds exactly.
NoiseSchedule build_cosine_schedule(int64_t T, double s = 0.008, double beta_cap = 0.999);

}  // namespace dp
