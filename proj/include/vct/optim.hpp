#pragma once

#include <vector>

#include "vct/tensor.hpp"

namespace vct {

// Adam with bias correction. Holds moment buffers for a fixed list of tensors.
class Adam {
public:
    struct Options {
        double beta1 = 0.9;
        double beta2 = 0.999;
        double epsilon = 1e-8;
    };

    Adam() = default;
    explicit Adam(const std::vector<Shape>& shapes, Options opts);
    explicit Adam(const std::vector<Shape>& shapes) : Adam(shapes, Options{}) {}

    // params[i] -= lr * mhat / (sqrt(vhat) + eps)
    void step(std::vector<Tensor*> params, const std::vector<const Tensor*>& grads, double lr);
    void step(Tensor& param, const Tensor& grad, double lr) { step({&param}, {&grad}, lr); }

    long steps_taken() const { return t_; }

private:
    Options opts_{};
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    long t_ = 0;
};

}  // namespace vct
