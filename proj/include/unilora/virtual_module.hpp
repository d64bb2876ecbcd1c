// Copyright 2026 The unilora Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Virtual models: per-instance adapter overlays over one shared, immutable
// base, plus void/unvoid migration of an instance's adapter and training
// state through a base-free byte bundle.

#include <algorithm>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "unilora/container.hpp"
#include "unilora/mixed_lora.hpp"
#include "unilora/model.hpp"

namespace unilora {

enum class VmMode { inference, training };

inline std::string_view vm_mode_name(VmMode m) { return m == VmMode::inference ? "inference" : "training"; }

inline VmMode parse_vm_mode(std::string_view s) {
  if (s == "inference") return VmMode::inference;
  if (s == "training") return VmMode::training;
  throw Error("unknown virtual model mode '" + std::string(s) + "'");
}

/// Opaque training state carried through a bundle: tensors (optimizer
/// moments, accumulation partials) plus a JSON record of counters.
template <typename T>
struct TrainingSnapshot {
  std::string job_id;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, Matrix<T>>> tensors;

  friend bool operator==(const TrainingSnapshot&, const TrainingSnapshot&) = default;
};

template <typename T>
class VirtualModel {
 public:
  VirtualModel(std::string id, std::shared_ptr<const BaseWeights<T>> base, VmMode mode = VmMode::inference)
      : id_(std::move(id)), base_(std::move(base)), mode_(mode) {
    if (!base_) throw Error("virtual model '" + id_ + "': base is not loaded");
  }

  const std::string& id() const { return id_; }
  VmMode mode() const { return mode_; }
  const BaseWeights<T>& base() const { return *base_; }
  const std::shared_ptr<const BaseWeights<T>>& base_handle() const { return base_; }
  nlohmann::json& overrides() { return overrides_; }
  const nlohmann::json& overrides() const { return overrides_; }

  /// Binds an adapter. Inference instances fold the static scale in here.
  LoraAdapter<T>& attach_adapter(LoraAdapter<T> adapter) {
    adapter.check_compatible(base_->config);
    if (find(adapter.id())) throw Error("virtual model '" + id_ + "': adapter '" + adapter.id() + "' already bound");
    if (mode_ == VmMode::inference && !adapter.baked()) adapter.bake();
    adapters_.push_back(std::make_unique<LoraAdapter<T>>(std::move(adapter)));
    return *adapters_.back();
  }

  LoraAdapter<T> detach_adapter(const std::string& adapter_id) {
    auto it = std::find_if(adapters_.begin(), adapters_.end(), [&](const auto& a) { return a->id() == adapter_id; });
    if (it == adapters_.end()) throw Error("virtual model '" + id_ + "': unknown adapter '" + adapter_id + "'");
    LoraAdapter<T> out = std::move(**it);
    adapters_.erase(it);
    return out;
  }

  const LoraAdapter<T>* find(const std::string& adapter_id) const {
    for (const auto& a : adapters_)
      if (a->id() == adapter_id) return a.get();
    return nullptr;
  }
  LoraAdapter<T>* find_mut(const std::string& adapter_id) {
    return const_cast<LoraAdapter<T>*>(std::as_const(*this).find(adapter_id));
  }

  std::vector<const LoraAdapter<T>*> adapters() const {
    std::vector<const LoraAdapter<T>*> out;
    for (const auto& a : adapters_) out.push_back(a.get());
    return out;
  }
  std::size_t adapter_bytes() const {
    std::size_t n = 0;
    for (const auto& a : adapters_) n += a->byte_size();
    return n;
  }

  /// Cache-free forward through this instance; no adapter means base only.
  Matrix<T> forward(std::span<const TokenId> tokens, const std::string& adapter_id = {}, double dynamic_scale = 1.0) const {
    AdapterView<T> view;
    if (!adapter_id.empty()) {
      view.adapter = find(adapter_id);
      if (view.adapter == nullptr) throw Error("virtual model '" + id_ + "': unknown adapter '" + adapter_id + "'");
    }
    view.dynamic_scale = dynamic_scale;
    return forward_full(*base_, tokens, view);
  }

  /// Rows of this instance queued or running in the owning runtime.
  std::size_t in_flight() const { return in_flight_; }
  void pin() { ++in_flight_; }
  void unpin() {
    if (in_flight_ == 0) throw Error("virtual model '" + id_ + "': unbalanced unpin");
    --in_flight_;
  }

 private:
  std::string id_;
  std::shared_ptr<const BaseWeights<T>> base_;
  VmMode mode_;
  nlohmann::json overrides_ = nlohmann::json::object();
  std::vector<std::unique_ptr<LoraAdapter<T>>> adapters_;  // stable addresses
  std::size_t in_flight_ = 0;
};

/// Serialized instance state: adapter payloads, their metadata and any
/// training snapshots. Never contains base weights.
struct VoidedAdapterBundle {
  std::vector<std::byte> bytes;

  std::size_t size() const { return bytes.size(); }
  void save(const std::string& path) const { write_bytes(path, bytes); }
  static VoidedAdapterBundle load(const std::string& path) { return {read_bytes(path)}; }
};

/// Serializes an instance and empties it. Throws "not quiescent" while any
/// of its rows are queued or running.
template <typename T>
VoidedAdapterBundle void_model(VirtualModel<T>& vm, const std::vector<TrainingSnapshot<T>>& training = {}) {
  if (vm.in_flight() != 0) {
    throw Error("virtual model '" + vm.id() + "' is not quiescent (" + std::to_string(vm.in_flight()) +
                " requests in flight)");
  }
  TensorContainer<T> c;
  nlohmann::json adapters = nlohmann::json::array();
  const auto bound = vm.adapters();
  for (std::size_t i = 0; i < bound.size(); ++i) {
    bound[i]->export_tensors(c, "adapter/" + std::to_string(i) + "/");
    adapters.push_back(bound[i]->metadata());
  }
  nlohmann::json jobs = nlohmann::json::array();
  for (std::size_t i = 0; i < training.size(); ++i) {
    nlohmann::json names = nlohmann::json::array();
    for (const auto& [name, m] : training[i].tensors) {
      c.add("job/" + std::to_string(i) + "/" + name, m);
      names.push_back(name);
    }
    jobs.push_back({{"job_id", training[i].job_id}, {"metadata", training[i].metadata}, {"tensors", names}});
  }
  c.metadata = {{"kind", "bundle"},         {"vm_id", vm.id()},  {"mode", vm_mode_name(vm.mode())},
                {"overrides", vm.overrides()}, {"adapters", adapters}, {"training", jobs}};
  VoidedAdapterBundle bundle{encode_container(c)};
  for (const auto* a : bound) vm.detach_adapter(a->id());
  return bundle;
}

/// Rebinds a bundle's adapters onto `vm` and returns its training snapshots.
/// Shape mismatches against the target base throw before anything binds.
template <typename T>
std::vector<TrainingSnapshot<T>> unvoid_into(const VoidedAdapterBundle& bundle, VirtualModel<T>& vm) {
  const auto c = decode_container<T>(bundle.bytes);
  if (c.metadata.value("kind", "") != "bundle") throw Error("unvoid: not an adapter bundle");
  std::vector<LoraAdapter<T>> adapters;
  const auto& metas = c.metadata.at("adapters");
  for (std::size_t i = 0; i < metas.size(); ++i) {
    auto a = LoraAdapter<T>::import_tensors(c, metas[i], "adapter/" + std::to_string(i) + "/");
    try {
      a.check_compatible(vm.base().config);
    } catch (const Error& e) {
      throw Error(std::string("unvoid: bundle does not fit the target base: ") + e.what());
    }
    if (vm.find(a.id())) throw Error("unvoid: adapter '" + a.id() + "' already bound on target");
    adapters.push_back(std::move(a));
  }
  for (auto& a : adapters) vm.attach_adapter(std::move(a));
  vm.overrides() = c.metadata.value("overrides", nlohmann::json::object());

  std::vector<TrainingSnapshot<T>> out;
  const auto& jobs = c.metadata.at("training");
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    TrainingSnapshot<T> s;
    s.job_id = jobs[i].at("job_id").template get<std::string>();
    s.metadata = jobs[i].at("metadata");
    for (const auto& name : jobs[i].at("tensors")) {
      const auto n = name.template get<std::string>();
      s.tensors.emplace_back(n, c.at("job/" + std::to_string(i) + "/" + n));
    }
    out.push_back(std::move(s));
  }
  return out;
}

/// Owns every virtual model of one runtime instance. Adapter ids are unique
/// across the registry so requests can name an adapter without its instance.
template <typename T>
class ModelRegistry {
 public:
  ModelRegistry() = default;
  explicit ModelRegistry(std::shared_ptr<const BaseWeights<T>> base) : base_(std::move(base)) {
    if (!base_) throw Error("registry: base is not loaded");
  }

  const std::shared_ptr<const BaseWeights<T>>& base_handle() const { return base_; }

  VirtualModel<T>& create_virtual_model(const std::string& id, VmMode mode = VmMode::inference) {
    return create_virtual_model(id, base_, mode);
  }
  VirtualModel<T>& create_virtual_model(const std::string& id, std::shared_ptr<const BaseWeights<T>> base,
                                        VmMode mode = VmMode::inference) {
    if (id.empty()) throw Error("registry: empty virtual model id");
    if (find(id)) throw Error("registry: duplicate virtual model id '" + id + "'");
    vms_.push_back(std::make_unique<VirtualModel<T>>(id, std::move(base), mode));
    return *vms_.back();
  }

  void destroy(const std::string& id) {
    auto it = std::find_if(vms_.begin(), vms_.end(), [&](const auto& v) { return v->id() == id; });
    if (it == vms_.end()) throw Error("registry: unknown virtual model '" + id + "'");
    if ((*it)->in_flight() != 0) throw Error("registry: virtual model '" + id + "' is not quiescent");
    vms_.erase(it);
  }

  VirtualModel<T>* find(const std::string& id) const {
    for (const auto& v : vms_)
      if (v->id() == id) return v.get();
    return nullptr;
  }
  VirtualModel<T>& at(const std::string& id) const {
    if (auto* v = find(id)) return *v;
    throw Error("registry: unknown virtual model '" + id + "'");
  }

  LoraAdapter<T>& attach_adapter(const std::string& vm_id, LoraAdapter<T> adapter) {
    if (owner_of(adapter.id())) throw Error("registry: adapter id '" + adapter.id() + "' already bound");
    return at(vm_id).attach_adapter(std::move(adapter));
  }
  LoraAdapter<T> detach_adapter(const std::string& vm_id, const std::string& adapter_id) {
    return at(vm_id).detach_adapter(adapter_id);
  }

  /// Instance holding the adapter, or null.
  VirtualModel<T>* owner_of(const std::string& adapter_id) const {
    for (const auto& v : vms_)
      if (v->find(adapter_id)) return v.get();
    return nullptr;
  }

  /// Every bound adapter, in instance-creation then attach order.
  std::vector<const LoraAdapter<T>*> all_adapters() const {
    std::vector<const LoraAdapter<T>*> out;
    for (const auto& v : vms_)
      for (const auto* a : v->adapters()) out.push_back(a);
    return out;
  }

  std::vector<VirtualModel<T>*> models() const {
    std::vector<VirtualModel<T>*> out;
    for (const auto& v : vms_) out.push_back(v.get());
    return out;
  }
  std::size_t size() const { return vms_.size(); }

  /// Weight bytes held by this registry: each distinct base once, plus
  /// every adapter.
  std::size_t resident_bytes() const {
    std::vector<const BaseWeights<T>*> bases;
    if (base_) bases.push_back(base_.get());
    std::size_t n = 0;
    for (const auto& v : vms_) {
      if (std::find(bases.begin(), bases.end(), &v->base()) == bases.end()) bases.push_back(&v->base());
      n += v->adapter_bytes();
    }
    for (const auto* b : bases) n += b->byte_size();
    return n;
  }

 private:
  std::shared_ptr<const BaseWeights<T>> base_;
  std::vector<std::unique_ptr<VirtualModel<T>>> vms_;
};

}  // namespace unilora
