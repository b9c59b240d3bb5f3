#include "mmpda/model.hpp"

#include <cmath>
#include <utility>

#include <nlohmann/json.hpp>

#include "mmpda/errors.hpp"
#include "mmpda/rng.hpp"

namespace mmpda::model {

using nd::Graph;
using nd::Shape;
using nd::Tensor;
using nd::Var;

std::string to_string(FusionKind kind) {
  return kind == FusionKind::kGatedConcat ? "gated-concat" : "cross-attention";
}

FusionKind fusion_kind_from_string(const std::string& name) {
  if (name == "gated-concat") return FusionKind::kGatedConcat;
  if (name == "cross-attention") return FusionKind::kCrossAttention;
  throw ContractError("unknown fusion kind '" + name + "'");
}

namespace {

Linear make_linear(std::size_t fan_in, std::size_t fan_out, CounterRng& rng) {
  Linear layer{Tensor(Shape{fan_in, fan_out}), Tensor(Shape{1, fan_out})};
  const double limit =
      std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto& w : layer.weight.data()) w = rng.uniform(-limit, limit);
  layer.weight.set_requires_grad(true);
  layer.bias.set_requires_grad(true);
  return layer;
}

std::vector<Linear> make_mlp(std::size_t in,
                             const std::vector<std::size_t>& hidden,
                             std::size_t out, CounterRng& rng) {
  std::vector<Linear> layers;
  std::size_t width = in;
  for (std::size_t h : hidden) {
    layers.push_back(make_linear(width, h, rng));
    width = h;
  }
  layers.push_back(make_linear(width, out, rng));
  return layers;
}

void validate(const ModelDims& d) {
  if (d.modality_inputs.empty()) throw ContractError("model: no modalities");
  for (auto w : d.modality_inputs)
    if (w == 0) throw ContractError("model: modality width must be positive");
  if (d.num_classes < 2) throw ContractError("model: num_classes must be >= 2");
  if (d.unimodal_width == 0 || d.fused_width == 0) {
    throw ContractError("model: feature widths must be positive");
  }
  if (d.fusion.kind == FusionKind::kCrossAttention &&
      (d.fusion.heads == 0 || d.fusion.head_width == 0)) {
    throw ContractError("model: cross-attention needs heads and head_width");
  }
}

void require_width(std::string_view op, const Var& x, std::size_t width) {
  if (x.cols() != width) {
    throw ContractError(std::string(op) + ": expected width " +
                        std::to_string(width) + ", got " +
                        std::to_string(x.cols()));
  }
}

}  // namespace

ModelBundle::ModelBundle(ModelDims dims, std::uint64_t seed)
    : dims_(std::move(dims)) {
  validate(dims_);
  const CounterRng root(seed);
  for (std::size_t u = 0; u < modality_count(); ++u) {
    CounterRng rng = root.fork(100 + u);
    encoders_.push_back(make_mlp(dims_.modality_inputs[u], dims_.encoder_hidden,
                                 dims_.unimodal_width, rng));
  }
  CounterRng fusion_rng = root.fork(200);
  const std::size_t concat = modality_count() * dims_.unimodal_width;
  if (dims_.fusion.kind == FusionKind::kGatedConcat) {
    fusion_.push_back(make_linear(concat, concat, fusion_rng));
    fusion_.push_back(make_linear(concat, dims_.fused_width, fusion_rng));
  } else {
    for (std::size_t h = 0; h < dims_.fusion.heads; ++h)
      for (int k = 0; k < 3; ++k)
        fusion_.push_back(make_linear(dims_.unimodal_width,
                                      dims_.fusion.head_width, fusion_rng));
    fusion_.push_back(make_linear(
        modality_count() * dims_.fusion.heads * dims_.fusion.head_width,
        dims_.fused_width, fusion_rng));
  }
  CounterRng head_rng = root.fork(300);
  for (std::size_t u = 0; u < modality_count(); ++u)
    heads_.push_back(
        make_linear(dims_.unimodal_width, dims_.num_classes, head_rng));
  heads_.push_back(make_linear(dims_.fused_width, dims_.num_classes, head_rng));
  CounterRng disc_rng = root.fork(400);
  discriminator_ = make_mlp(dims_.conditional_width(),
                            dims_.discriminator_hidden, 1, disc_rng);
}

Var ModelBundle::bind(Graph& g, Tensor& t, ParamMode mode) {
  return mode == ParamMode::kTrainable ? g.param(t) : g.constant(t);
}

Var ModelBundle::apply(Graph& g, Var x, Linear& layer, ParamMode mode) {
  return nd::add_row(nd::matmul(x, bind(g, layer.weight, mode)),
                     bind(g, layer.bias, mode));
}

Var ModelBundle::encode(Graph& g, Var x, std::size_t modality, ParamMode mode) {
  if (modality >= modality_count()) {
    throw ContractError("encode: unknown modality " + std::to_string(modality));
  }
  require_width("encode", x, dims_.modality_inputs[modality]);
  auto& layers = encoders_[modality];
  Var h = x;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    h = apply(g, h, layers[k], mode);
    if (k + 1 < layers.size()) h = nd::tanh(h);
  }
  return h;
}

Var ModelBundle::fuse(Graph& g, const std::vector<Var>& features,
                      ParamMode mode) {
  if (features.size() != modality_count()) {
    throw ContractError("fuse: expected " + std::to_string(modality_count()) +
                        " features, got " + std::to_string(features.size()));
  }
  for (const Var& f : features) require_width("fuse", f, dims_.unimodal_width);
  return dims_.fusion.kind == FusionKind::kGatedConcat
             ? fuse_gated(g, features, mode)
             : fuse_attention(g, features, mode);
}

// M = (sigmoid(z Wg + bg) * z) Wp + bp with z the concatenated features.
Var ModelBundle::fuse_gated(Graph& g, const std::vector<Var>& features,
                            ParamMode mode) {
  Var z = features.size() == 1 ? features.front() : nd::concat_cols(features);
  Var gate = nd::sigmoid(apply(g, z, fusion_[0], mode));
  return apply(g, nd::mul(gate, z), fusion_[1], mode);
}

// One block of scaled dot-product attention where every modality stream
// attends over all streams, per head; outputs are concatenated and projected.
Var ModelBundle::fuse_attention(Graph& g, const std::vector<Var>& features,
                                ParamMode mode) {
  const std::size_t streams = features.size();
  const std::size_t heads = dims_.fusion.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dims_.fusion.head_width));
  std::vector<Var> outputs;
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<Var> q, k, v;
    for (const Var& f : features) {
      q.push_back(apply(g, f, fusion_[3 * h + 0], mode));
      k.push_back(apply(g, f, fusion_[3 * h + 1], mode));
      v.push_back(apply(g, f, fusion_[3 * h + 2], mode));
    }
    for (std::size_t i = 0; i < streams; ++i) {
      std::vector<Var> scores;
      for (std::size_t j = 0; j < streams; ++j)
        scores.push_back(nd::scale(nd::sum_cols(nd::mul(q[i], k[j])), inv_sqrt));
      Var attn = nd::softmax_rows(
          scores.size() == 1 ? scores.front() : nd::concat_cols(scores));
      Var out = nd::mul_col(v[0], nd::slice_cols(attn, 0, 1));
      for (std::size_t j = 1; j < streams; ++j)
        out = nd::add(out, nd::mul_col(v[j], nd::slice_cols(attn, j, 1)));
      outputs.push_back(out);
    }
  }
  Var joined = outputs.size() == 1 ? outputs.front() : nd::concat_cols(outputs);
  return apply(g, joined, fusion_.back(), mode);
}

Var ModelBundle::predict(Graph& g, Var feature, std::size_t stream,
                         ParamMode mode) {
  if (stream >= stream_count()) {
    throw ContractError("predict: unknown stream " + std::to_string(stream));
  }
  require_width("predict", feature,
                stream == fused_stream() ? dims_.fused_width
                                         : dims_.unimodal_width);
  return apply(g, feature, heads_[stream], mode);
}

Var ModelBundle::discriminator_logit(Graph& g, Var h) {
  require_width("discriminate", h, dims_.conditional_width());
  Var x = h;
  for (std::size_t k = 0; k < discriminator_.size(); ++k) {
    x = apply(g, x, discriminator_[k], ParamMode::kTrainable);
    if (k + 1 < discriminator_.size()) x = nd::relu(x);
  }
  return nd::clamp(x, -kLogitClamp, kLogitClamp);
}

Var ModelBundle::discriminate(Graph& g, Var h) {
  return nd::sigmoid(discriminator_logit(g, h));
}

ForwardResult ModelBundle::forward(Graph& g, const std::vector<Tensor>& inputs,
                                   ParamMode feature_mode) {
  if (inputs.size() != modality_count()) {
    throw ContractError("forward: expected " + std::to_string(modality_count()) +
                        " modality inputs, got " + std::to_string(inputs.size()));
  }
  ForwardResult r;
  for (std::size_t u = 0; u < modality_count(); ++u)
    r.features.push_back(encode(g, g.constant(inputs[u]), u, feature_mode));
  r.fused = fuse(g, r.features, feature_mode);
  for (std::size_t u = 0; u < modality_count(); ++u)
    r.logits.push_back(predict(g, r.features[u], u));
  r.logits.push_back(predict(g, r.fused, fused_stream()));
  return r;
}

namespace {

void append_linear(std::vector<NamedParam>& out, const std::string& prefix,
                   Linear& layer) {
  out.push_back({prefix + ".weight", &layer.weight});
  out.push_back({prefix + ".bias", &layer.bias});
}

}  // namespace

std::vector<NamedParam> ModelBundle::feature_parameters() {
  std::vector<NamedParam> out;
  for (std::size_t u = 0; u < encoders_.size(); ++u)
    for (std::size_t k = 0; k < encoders_[u].size(); ++k)
      append_linear(out, "encoder." + std::to_string(u) + ".layer" + std::to_string(k),
                    encoders_[u][k]);
  if (dims_.fusion.kind == FusionKind::kGatedConcat) {
    append_linear(out, "fusion.gate", fusion_[0]);
    append_linear(out, "fusion.proj", fusion_[1]);
  } else {
    static const char* kRoles[] = {"query", "key", "value"};
    for (std::size_t i = 0; i + 1 < fusion_.size(); ++i)
      append_linear(out, "fusion.head" + std::to_string(i / 3) + "." + kRoles[i % 3],
                    fusion_[i]);
    append_linear(out, "fusion.proj", fusion_.back());
  }
  return out;
}

std::vector<NamedParam> ModelBundle::head_parameters() {
  std::vector<NamedParam> out;
  for (std::size_t s = 0; s < heads_.size(); ++s)
    append_linear(out, s == fused_stream() ? std::string("head.fused")
                                           : "head." + std::to_string(s),
                  heads_[s]);
  return out;
}

std::vector<NamedParam> ModelBundle::discriminator_parameters() {
  std::vector<NamedParam> out;
  for (std::size_t k = 0; k < discriminator_.size(); ++k)
    append_linear(out, "discriminator.layer" + std::to_string(k), discriminator_[k]);
  return out;
}

std::vector<NamedParam> ModelBundle::parameters() {
  std::vector<NamedParam> out = feature_parameters();
  for (auto& p : head_parameters()) out.push_back(p);
  for (auto& p : discriminator_parameters()) out.push_back(p);
  return out;
}

std::size_t ModelBundle::parameter_count() {
  std::size_t n = 0;
  for (auto& p : parameters()) n += p.tensor->size();
  return n;
}

void ModelBundle::zero_grad() {
  for (auto& p : parameters()) p.tensor->zero_grad();
}

Var conditional_map(Var fused, Var probs) {
  const Tensor& p = probs.value();
  if (p.rows() != fused.rows()) {
    throw ContractError("conditional_map: batch sizes differ");
  }
  for (std::size_t r = 0; r < p.rows(); ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < p.cols(); ++c) total += p.at(r, c);
    if (std::abs(total - 1.0) > 1e-9) {
      throw ContractError("conditional_map: probability row " +
                          std::to_string(r) + " sums to " + std::to_string(total));
    }
  }
  return nd::outer_rows(fused, probs);
}

double grl_schedule(double progress) {
  if (!(progress >= 0.0 && progress <= 1.0)) {
    throw ContractError("grl_schedule: progress must lie in [0, 1]");
  }
  return 2.0 / (1.0 + std::exp(-10.0 * progress)) - 1.0;
}

// ---- checkpoints ----------------------------------------------------------

nlohmann::json dims_to_json(const ModelDims& d) {
  return {
      {"modality_inputs", d.modality_inputs},
      {"unimodal_width", d.unimodal_width},
      {"fused_width", d.fused_width},
      {"encoder_hidden", d.encoder_hidden},
      {"discriminator_hidden", d.discriminator_hidden},
      {"num_classes", d.num_classes},
      {"fusion",
       {{"kind", to_string(d.fusion.kind)},
        {"heads", d.fusion.heads},
        {"head_width", d.fusion.head_width}}},
  };
}

ModelDims dims_from_json(const nlohmann::json& doc) {
  ModelDims d;
  d.modality_inputs = doc.at("modality_inputs").get<std::vector<std::size_t>>();
  d.unimodal_width = doc.at("unimodal_width").get<std::size_t>();
  d.fused_width = doc.at("fused_width").get<std::size_t>();
  d.encoder_hidden = doc.at("encoder_hidden").get<std::vector<std::size_t>>();
  d.discriminator_hidden =
      doc.at("discriminator_hidden").get<std::vector<std::size_t>>();
  d.num_classes = doc.at("num_classes").get<std::size_t>();
  const auto& f = doc.at("fusion");
  d.fusion.kind = fusion_kind_from_string(f.at("kind").get<std::string>());
  d.fusion.heads = f.at("heads").get<std::size_t>();
  d.fusion.head_width = f.at("head_width").get<std::size_t>();
  return d;
}

nlohmann::json to_checkpoint(ModelBundle& model) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : model.parameters()) {
    params.push_back({{"name", p.name},
                      {"shape", p.tensor->shape()},
                      {"values", p.tensor->values()}});
  }
  return {{"format", "mmpda-checkpoint"},
          {"version", 1},
          {"dims", dims_to_json(model.dims())},
          {"params", std::move(params)}};
}

ModelBundle from_checkpoint(const nlohmann::json& doc) {
  if (doc.value("format", "") != "mmpda-checkpoint" ||
      doc.value("version", 0) != 1) {
    throw ContractError("checkpoint: unsupported format or version");
  }
  ModelBundle model(dims_from_json(doc.at("dims")), 0);
  auto params = model.parameters();
  const auto& stored = doc.at("params");
  if (stored.size() != params.size()) {
    throw ContractError("checkpoint: expected " + std::to_string(params.size()) +
                        " tensors, found " + std::to_string(stored.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = stored[i];
    if (entry.at("name").get<std::string>() != params[i].name) {
      throw ContractError("checkpoint: expected tensor '" + params[i].name +
                          "' at position " + std::to_string(i));
    }
    Tensor t(entry.at("shape").get<Shape>(),
             entry.at("values").get<std::vector<double>>());
    if (t.shape() != params[i].tensor->shape()) {
      throw ContractError("checkpoint: shape mismatch for '" + params[i].name + "'");
    }
    t.set_requires_grad(true);
    *params[i].tensor = std::move(t);
  }
  return model;
}

}  // namespace mmpda::model
