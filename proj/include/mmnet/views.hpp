#pragma once

#include <stdexcept>
#include <string>

#include "mmnet/ops.hpp"

namespace mmnet {

/// View 1 is the identity, view 2 swaps the spatial axes, view 3 reverses H.
inline void require_view(int i) {
  if (i < 1 || i > 3) throw std::invalid_argument("view id must be 1, 2 or 3, got " + std::to_string(i));
}

template <class T>
Tensor<T> make_view(const Tensor<T>& x, int i) {
  require_view(i);
  if (x.ndim() != 4) throw ShapeError("make_view: expected [N,C,H,W], got " + shape_str(x.shape()));
  switch (i) {
    case 2: return permute(x, {0, 1, 3, 2});
    case 3: return flip(x, 2);
    default: return x;
  }
}

// Each view is an involution, so reverting applies the same movement.
template <class T>
Tensor<T> revert_view(const Tensor<T>& x, int i) {
  return make_view(x, i);
}

}  // namespace mmnet
