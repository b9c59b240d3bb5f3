#pragma once

// Multi-branch classifier: one MLP encoder per modality, a fusion block, one
// linear classifier head per stream (each modality plus the fused stream),
// the conditional map feeding the domain discriminator, and the discriminator.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mmpda/ndgraph.hpp"

namespace mmpda::model {

enum class FusionKind { kGatedConcat, kCrossAttention };

std::string to_string(FusionKind kind);
FusionKind fusion_kind_from_string(const std::string& name);

struct FusionStrategy {
  FusionKind kind = FusionKind::kGatedConcat;
  // Cross-attention only.
  std::size_t heads = 2;
  std::size_t head_width = 8;
};

struct ModelDims {
  std::vector<std::size_t> modality_inputs;  // raw feature width per modality
  std::size_t unimodal_width = 32;           // d_u
  std::size_t fused_width = 16;              // d
  std::vector<std::size_t> encoder_hidden = {32, 32};
  std::vector<std::size_t> discriminator_hidden = {32};
  std::size_t num_classes = 2;
  FusionStrategy fusion;

  std::size_t conditional_width() const { return fused_width * num_classes; }
};

// Whether a forward pass binds parameters as differentiable leaves or as
// frozen constants (the stop-gradient target branch).
enum class ParamMode { kTrainable, kFrozen };

// y = x W + b with W stored in x fan_in x fan_out.
struct Linear {
  nd::Tensor weight;
  nd::Tensor bias;
};

struct NamedParam {
  std::string name;
  nd::Tensor* tensor;
};

struct ForwardResult {
  std::vector<nd::Var> features;  // F_u per modality
  nd::Var fused;                  // M
  std::vector<nd::Var> logits;    // per stream; fused stream last
};

class ModelBundle {
 public:
  // Glorot-uniform weights, zero biases, seeded.
  ModelBundle(ModelDims dims, std::uint64_t seed);

  const ModelDims& dims() const { return dims_; }
  std::size_t modality_count() const { return dims_.modality_inputs.size(); }
  std::size_t stream_count() const { return modality_count() + 1; }
  std::size_t fused_stream() const { return modality_count(); }

  // Every operation is batched: row r of each input is sample r.
  nd::Var encode(nd::Graph& g, nd::Var x, std::size_t modality,
                 ParamMode mode = ParamMode::kTrainable);
  nd::Var fuse(nd::Graph& g, const std::vector<nd::Var>& features,
               ParamMode mode = ParamMode::kTrainable);
  nd::Var predict(nd::Graph& g, nd::Var feature, std::size_t stream,
                  ParamMode mode = ParamMode::kTrainable);
  // Discriminator logit clamped to +-kLogitClamp.
  nd::Var discriminator_logit(nd::Graph& g, nd::Var h);
  // Probability that h comes from a source domain (source = 1, target = 0).
  nd::Var discriminate(nd::Graph& g, nd::Var h);

  ForwardResult forward(nd::Graph& g, const std::vector<nd::Tensor>& inputs,
                        ParamMode feature_mode = ParamMode::kTrainable);

  // All parameters in checkpoint order.
  std::vector<NamedParam> parameters();
  // Encoders and fusion (theta_{E,g}).
  std::vector<NamedParam> feature_parameters();
  std::vector<NamedParam> head_parameters();
  std::vector<NamedParam> discriminator_parameters();
  std::size_t parameter_count();

  void zero_grad();

  static constexpr double kLogitClamp = 30.0;

  std::vector<std::vector<Linear>>& encoders() { return encoders_; }
  std::vector<Linear>& fusion_layers() { return fusion_; }
  std::vector<Linear>& heads() { return heads_; }
  std::vector<Linear>& discriminator() { return discriminator_; }

 private:
  nd::Var bind(nd::Graph& g, nd::Tensor& t, ParamMode mode);
  nd::Var apply(nd::Graph& g, nd::Var x, Linear& layer, ParamMode mode);
  nd::Var fuse_gated(nd::Graph& g, const std::vector<nd::Var>& features,
                     ParamMode mode);
  nd::Var fuse_attention(nd::Graph& g, const std::vector<nd::Var>& features,
                         ParamMode mode);

  ModelDims dims_;
  std::vector<std::vector<Linear>> encoders_;
  // Gated concat: {gate, projection}. Cross-attention: {query, key, value}
  // per head followed by the projection.
  std::vector<Linear> fusion_;
  std::vector<Linear> heads_;
  std::vector<Linear> discriminator_;
};

// h = M (x) p flattened row-major: h[i * C + c] = M[i] * p[c], per row.
// Each row of `probs` must sum to 1 within 1e-9.
nd::Var conditional_map(nd::Var fused, nd::Var probs);

// Gradient-reversal scale 2 / (1 + exp(-10 p)) - 1 for progress p in [0, 1].
double grl_schedule(double progress);

// Checkpoint: {"format": "mmpda-checkpoint", "version": 1, "dims": {...},
// "params": [{"name", "shape", "values"}, ...]} in parameters() order.
nlohmann::json to_checkpoint(ModelBundle& model);
ModelBundle from_checkpoint(const nlohmann::json& doc);

nlohmann::json dims_to_json(const ModelDims& dims);
ModelDims dims_from_json(const nlohmann::json& doc);

}  // namespace mmpda::model
