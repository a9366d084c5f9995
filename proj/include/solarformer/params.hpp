// Named model parameters. Construction order is fixed by the module
// constructors, which pins the checkpoint layout and the optimizer state
// ordering. Parameters are staged onto a fresh tape before every forward pass.
#pragma once

#include "solarformer/autodiff.hpp"
#include "solarformer/rng.hpp"
#include "solarformer/tensor.hpp"

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

namespace sf {

template <typename T>
class ParamStore {
public:
  struct Entry {
    std::string name;
    Tensor<T> value;
    VarId node;  // valid after stage()
  };

  int add(const std::string& name, Tensor<T> init) {
    if (index_.count(name)) throw std::runtime_error("duplicate parameter: " + name);
    index_[name] = static_cast<int>(entries_.size());
    entries_.push_back(Entry{name, std::move(init), VarId{}});
    return static_cast<int>(entries_.size() - 1);
  }

  void stage(Tape<T>& tape) {
    for (auto& e : entries_) e.node = tape.leaf(e.value, /*requires_grad=*/true);
  }

  VarId node(int h) const { return entries_[static_cast<std::size_t>(h)].node; }
  Tensor<T>& value(int h) { return entries_[static_cast<std::size_t>(h)].value; }
  const Tensor<T>& value(int h) const { return entries_[static_cast<std::size_t>(h)].value; }
  const std::string& name(int h) const { return entries_[static_cast<std::size_t>(h)].name; }

  std::size_t count() const { return entries_.size(); }
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  int find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
  }

  std::int64_t total_scalars() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.value.numel();
    return n;
  }

private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> index_;
};

// ---- initializers ----------------------------------------------------------

template <typename T>
Tensor<T> init_normal(Rng& rng, Shape shape, double stddev) {
  Tensor<T> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

// He/Kaiming init for conv weights [Cout,Cin,kh,kw].
template <typename T>
Tensor<T> init_conv(Rng& rng, std::int64_t cout, std::int64_t cin, std::int64_t kh,
                    std::int64_t kw) {
  const double fan_in = static_cast<double>(cin * kh * kw);
  return init_normal<T>(rng, {cout, cin, kh, kw}, std::sqrt(2.0 / fan_in));
}

// Xavier init for linear weights stored [in,out].
template <typename T>
Tensor<T> init_linear(Rng& rng, std::int64_t in, std::int64_t out) {
  return init_normal<T>(rng, {in, out}, std::sqrt(2.0 / static_cast<double>(in + out)));
}

}  // namespace sf
