#include "featalign/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace featalign {

grad_check_result grad_check(const scalar_fn& f, const tensor& point, double h)
{
    if (!(h > 0.0)) throw std::invalid_argument("grad_check: step must be positive");

    std::vector<double> analytic;
    {
        tape t;
        var x = t.variable(point);
        t.backward(f(x));
        auto g = t.grad(x);
        analytic.assign(g.begin(), g.end());
    }

    auto eval = [&](const tensor& p) {
        tape t;
        return f(t.constant(p)).value().item();
    };

    grad_check_result res;
    tensor probe = point;
    for (std::size_t i = 0; i < point.size(); ++i) {
        const double x0 = point[i];
        // Steps actually taken after rounding x0 +- h.
        probe[i] = x0 + h;
        const double hp = probe[i] - x0;
        const double fp = eval(probe);
        probe[i] = x0 - h;
        const double hm = x0 - probe[i];
        const double fm = eval(probe);
        probe[i] = x0;
        const double numeric = (fp - fm) / (hp + hm);
        const double diff = std::abs(numeric - analytic[i]);
        const double mag = std::max(std::abs(numeric), std::abs(analytic[i]));
        const double err = mag < 1e-8 ? diff : diff / mag;
        if (err > res.max_error) {
            res.max_error = err;
            res.worst_index = i;
        }
    }
    return res;
}

} // namespace featalign
