#pragma once

#include <string>
#include <vector>

#include "kgnc/rng.hpp"
#include "kgnc/tensor/tensor.hpp"

namespace kgnc {

enum class Init {
    NormalStdOne,  // N(0,1), used by the convolutional encoders
    GlorotUniform, // U(-a,a) with a = sqrt(6/(fan_in+fan_out))
    Zeros,
};

template <class T>
struct Parameter {
    Tensor<T> tensor;
    std::string name;
    Init init = Init::Zeros;
};

// Glorot fans are read from the shape assuming right-multiplication
// convention for matrices (in x out); that is the only family initialised
// with Glorot here.
template <class T>
Parameter<T> make_parameter(std::string name, Shape shape, Init init, Rng& rng) {
    Tensor<T> t(shape);
    auto& v = t.values();
    switch (init) {
        case Init::NormalStdOne:
            for (auto& x : v) x = static_cast<T>(rng.normal());
            break;
        case Init::GlorotUniform: {
            const std::size_t fan_in = shape.size() >= 1 ? shape[0] : 1;
            const std::size_t fan_out = shape.size() >= 2 ? shape[1] : 1;
            const double a = std::sqrt(6.0 / double(fan_in + fan_out));
            for (auto& x : v) x = static_cast<T>(rng.uniform(-a, a));
            break;
        }
        case Init::Zeros:
            break;
    }
    t.set_requires_grad();
    return Parameter<T>{std::move(t), std::move(name), init};
}

template <class T>
void zero_grads(std::vector<Parameter<T>>& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

} // namespace kgnc
