#include "rtdlab/model/params.hpp"

#include <cmath>
#include <stdexcept>

namespace rtdlab::model {

template <typename T>
double grad_norm(const ParamList<T>& params) {
  double total = 0.0;
  for (const auto& p : params) {
    for (T g : p.tensor.grad()) total += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(total);
}

template <typename T>
ad::Tensor<T>& find_param(ParamList<T>& params, std::string_view name) {
  for (auto& p : params) {
    if (p.name == name) return p.tensor;
  }
  throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

template <typename T>
std::vector<std::vector<T>> snapshot_values(const ParamList<T>& params) {
  std::vector<std::vector<T>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

template double grad_norm(const ParamList<float>&);
template double grad_norm(const ParamList<double>&);
template ad::Tensor<float>& find_param(ParamList<float>&, std::string_view);
template ad::Tensor<double>& find_param(ParamList<double>&, std::string_view);
template std::vector<std::vector<float>> snapshot_values(const ParamList<float>&);
template std::vector<std::vector<double>> snapshot_values(const ParamList<double>&);

}  // namespace rtdlab::model
