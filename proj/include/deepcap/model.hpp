#pragma once

// The DeepCap network: primary capsules, a strided capsule down path, an
// upsampling path with skip concatenation, and a blurred softmax head.
//
// Parameters live in one flat float vector in declaration order; the network
// functions are templated so tests can run the same graph at 64-bit.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "deepcap/capsules.hpp"
#include "deepcap/model_config.hpp"

namespace deepcap {

struct ParamSlot {
  std::string name;
  std::size_t offset = 0;
  std::size_t count = 0;
};

enum class OpKind { Conv, Upsample, Concat };

struct CapsuleOp {
  OpKind kind = OpKind::Conv;
  std::string name;
  CapsuleConvShape shape;  // unused for Concat
  std::size_t slot = 0;    // weight slot, unused for Concat
  int source = -1;         // Concat: index into the value list
};

// Materialized layer list of a config. values[0] is the primary output and
// op i maps values[i] (plus values[source] for Concat) to values[i + 1].
struct NetworkPlan {
  ModelConfig config;
  std::vector<ParamSlot> slots;
  std::size_t param_count = 0;
  int primary_hidden_w = -1;  // slot indices, -1 when absent
  int primary_hidden_b = -1;
  int primary_w = -1;
  int primary_b = -1;
  std::vector<CapsuleOp> ops;

  static NetworkPlan build(const ModelConfig& config);

  template <typename T>
  std::span<const T> slice(std::span<const T> params, std::size_t slot) const {
    return params.subspan(slots[slot].offset, slots[slot].count);
  }
  template <typename T>
  std::span<T> slice(std::span<T> params, std::size_t slot) const {
    return params.subspan(slots[slot].offset, slots[slot].count);
  }
};

template <std::floating_point T>
struct ForwardCache {
  Grid2D<T> hidden_pre;
  Grid2D<T> hidden;
  std::vector<CapsuleGrid<T>> values;
  Grid2D<T> logits;
  Grid2D<T> blurred;
  Grid2D<T> probs;
};

// Returns per-pixel class probabilities (2 x side x side); channel 1 is lumen.
template <std::floating_point T>
Grid2D<T> network_forward(const NetworkPlan& plan, std::span<const T> params, const Grid2D<T>& input,
                          ForwardCache<T>* cache = nullptr);

// Accumulates dL/dparams given dL/dprobs and a cache filled by network_forward.
template <std::floating_point T>
void network_backward(const NetworkPlan& plan, std::span<const T> params, const Grid2D<T>& input,
                      const ForwardCache<T>& cache, const Grid2D<T>& grad_probs, std::span<T> grad_params);

template <std::floating_point T>
CapsuleGrid<T> network_primary(const NetworkPlan& plan, std::span<const T> params, const Grid2D<T>& input);

// 1 where the lumen probability strictly exceeds the background probability.
template <std::floating_point T>
Mask argmax_mask(const Grid2D<T>& probs);

class Model {
 public:
  static Model build(const ModelConfig& config, std::uint64_t seed);
  static Model from_parameters(const ModelConfig& config, std::vector<float> params);

  const ModelConfig& config() const noexcept { return plan_.config; }
  const NetworkPlan& plan() const noexcept { return plan_; }
  std::size_t param_count() const noexcept { return plan_.param_count; }
  std::span<const float> parameters() const noexcept { return params_; }
  std::span<float> mutable_parameters() noexcept { return params_; }

  Grid2D<float> forward(const Grid2D<float>& input) const;
  Mask predict(const Grid2D<float>& input) const;
  CapsuleGrid<float> primary(const Grid2D<float>& input) const;

 private:
  NetworkPlan plan_;
  std::vector<float> params_;
};

// Checkpoint layout: "DCAP", u32 version, u32 header length, UTF-8 config
// text, float32 parameters, CRC-32 of the parameter bytes. Integers and
// floats are little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);
std::uintmax_t expected_checkpoint_size(const ModelConfig& config);
std::uintmax_t disk_size(const std::string& path);

}  // namespace deepcap
