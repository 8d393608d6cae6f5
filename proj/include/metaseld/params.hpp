#pragma once

#include <string>
#include <utility>
#include <vector>

#include "metaseld/autodiff.hpp"
#include "metaseld/common.hpp"

namespace metaseld::nn {

/// Ordered, name-keyed parameter collection. Order is part of the contract:
/// gradient lists and optimizer states align with it elementwise.
template <class S>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Var<S> var;
  };

  void add(std::string name, Tensor<S> init) {
    for (const auto& e : entries_)
      if (e.name == name) fail_config("duplicate parameter name: " + name);
    entries_.push_back({std::move(name), Var<S>(std::move(init), true)});
  }

  void add_var(std::string name, Var<S> v) {
    for (const auto& e : entries_)
      if (e.name == name) fail_config("duplicate parameter name: " + name);
    entries_.push_back({std::move(name), std::move(v)});
  }

  const Var<S>& at(const std::string& name) const {
    for (const auto& e : entries_)
      if (e.name == name) return e.var;
    fail_config("unknown parameter: " + name);
  }

  size_t size() const { return entries_.size(); }
  const Entry& entry(size_t i) const { return entries_[i]; }
  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  std::vector<Var<S>> vars() const {
    std::vector<Var<S>> v;
    v.reserve(entries_.size());
    for (const auto& e : entries_) v.push_back(e.var);
    return v;
  }

  int64_t numel() const {
    int64_t n = 0;
    for (const auto& e : entries_) n += e.var.value().numel();
    return n;
  }

  /// Fresh leaf copies (values copied, graph history dropped).
  ParamSet clone_detached(bool requires_grad = true) const {
    ParamSet out;
    for (const auto& e : entries_) out.add_var(e.name, e.var.detach(requires_grad));
    return out;
  }

  template <class T>
  ParamSet<T> cast() const {
    ParamSet<T> out;
    for (const auto& e : entries_) out.add(e.name, e.var.value().template cast<T>());
    return out;
  }

  /// Bit-level content checksum, used to assert that inner loops never touch
  /// meta-parameters.
  uint64_t checksum() const;

 private:
  std::vector<Entry> entries_;
};

template <class S>
uint64_t ParamSet<S>::checksum() const {
  uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, size_t n) {
    const unsigned char* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& e : entries_) {
    mix(e.name.data(), e.name.size());
    const auto& t = e.var.value();
    mix(t.data(), sizeof(S) * static_cast<size_t>(t.numel()));
  }
  return h;
}

void save_checkpoint(const ParamSet<float>& params, const std::string& path);
ParamSet<float> load_checkpoint(const std::string& path);

}  // namespace metaseld::nn
