#include "hsb/tensor.hpp"

// Tensor is header-only; this unit pins the template's common instantiations
// so every downstream object file links against one copy.

namespace hsb {

template struct Tensor<float>;
template struct Tensor<double>;

}  // namespace hsb
