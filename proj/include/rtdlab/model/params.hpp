// Named parameter handles. Tensors are shared handles, so a ParamList aliases
// the storage of the structs it was collected from.

#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "rtdlab/autodiff/tensor.hpp"

namespace rtdlab::model {

template <typename T>
struct NamedTensor {
  std::string name;
  ad::Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

template <typename T>
void zero_grads(ParamList<T>& params) {
  for (auto& p : params) p.tensor.zero_grad();
}

template <typename T>
double grad_norm(const ParamList<T>& params);

template <typename T>
ad::Tensor<T>& find_param(ParamList<T>& params, std::string_view name);

// Deep copies of the current values, in list order.
template <typename T>
std::vector<std::vector<T>> snapshot_values(const ParamList<T>& params);

}  // namespace rtdlab::model
