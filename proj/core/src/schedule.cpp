#include "diffprompt/schedule.hpp"

#include <cmath>

#include "diffprompt/errors.hpp"

namespace dp {

NoiseSchedule build_cosine_schedule(int64_t T, double s, double beta_cap) {
    if (T < 2) throw ConfigError("cosine schedule needs T >= 2, got " + std::to_string(T));
    auto f = [&](int64_t t) {
        const double x = ((static_cast<double>(t) / static_cast<double>(T)) + s) / (1.0 + s);
        const double c = std::cos(x * 1.5707963267948966);
        return c * c;
    };
    const double f0 = f(0);

    NoiseSchedule sched;
    sched.T = T;
    sched.beta.resize(static_cast<size_t>(T));
    sched.alpha_bar.resize(static_cast<size_t>(T) + 1);
    sched.alpha_bar[0] = 1.0;
    double prev = 1.0;
    for (int64_t t = 1; t <= T; ++t) {
        const double ab = f(t) / f0;
        double beta = 1.0 - ab / prev;
        if (beta > beta_cap) beta = beta_cap;
        sched.beta[static_cast<size_t>(t - 1)] = beta;
        // Recompute from the clipped beta so alpha_bar stays an exact product.
        sched.alpha_bar[static_cast<size_t>(t)] =
            sched.alpha_bar[static_cast<size_t>(t - 1)] * (1.0 - beta);
        prev = ab;
    }
    return sched;
}

}  // namespace dp
