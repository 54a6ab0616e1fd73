#include "vct/optim.hpp"

#include <cmath>

namespace vct {

Adam::Adam(const std::vector<Shape>& shapes, Options opts) : opts_(opts) {
    for (const auto& s : shapes) {
        m_.emplace_back(s);
        v_.emplace_back(s);
    }
}

void Adam::step(std::vector<Tensor*> params, const std::vector<const Tensor*>& grads, double lr) {
    if (params.size() != m_.size() || grads.size() != m_.size()) {
        throw ValidationError("adam: expected " + std::to_string(m_.size()) + " tensors");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = *grads[i];
        require_same_shape(p, g, "adam param/grad");
        require_same_shape(p, m_[i], "adam param/state");
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = opts_.beta1 * m[k] + (1.0 - opts_.beta1) * g[k];
            v[k] = opts_.beta2 * v[k] + (1.0 - opts_.beta2) * g[k] * g[k];
            p[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + opts_.epsilon);
        }
    }
}

}  // namespace vct
