// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#include "crackseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <utility>

#include <nlohmann/json.hpp>

#include "crackseg/archive.hpp"
#include "crackseg/logging.hpp"
#include "crackseg/version.hpp"

namespace crackseg {

namespace {

void add_inplace(Tensor& acc, const Tensor& other) {
  if (!acc.same_shape(other)) {
    throw std::logic_error("residual add: shape " + acc.shape_str() +
                           " vs " + other.shape_str());
  }
  float* a = acc.data();
  const float* b = other.data();
  const int64_t n = acc.numel();
  for (int64_t i = 0; i < n; ++i) a[i] += b[i];
}

}  // namespace

void ModelConfig::validate() const {
  if (num_classes != 2) {
    throw std::invalid_argument(
        "model config: num_classes must be 2 (crack / non-crack), got " +
        std::to_string(num_classes));
  }
  // The stem and two strided stages divide the extent by 8; below 32 the
  // deepest feature planes degenerate.
  if (input_size < 32) {
    throw std::invalid_argument("model config: input_size must be >= 32, got " +
                                std::to_string(input_size));
  }
  if (output_stride != 8) {
    throw std::invalid_argument("model config: output_stride is fixed at 8, got " +
                                std::to_string(output_stride));
  }
  pooling.validate();
  if (!(bn_momentum > 0.0f) || !(bn_momentum <= 1.0f)) {
    throw std::invalid_argument("model config: bn_momentum must lie in (0, 1], got " +
                                std::to_string(bn_momentum));
  }
}

int ModelConfig::map_size() const {
  return (input_size + output_stride - 1) / output_stride;
}

std::optional<std::string> ModelConfig::describe_mismatch(const ModelConfig& a,
                                                          const ModelConfig& b) {
  auto diff = [](const std::string& field, const auto& x, const auto& y) {
    std::ostringstream os;
    os << field << " (" << x << " vs " << y << ")";
    return os.str();
  };
  if (a.num_classes != b.num_classes)
    return diff("num_classes", a.num_classes, b.num_classes);
  if (a.input_size != b.input_size)
    return diff("input_size", a.input_size, b.input_size);
  if (a.output_stride != b.output_stride)
    return diff("output_stride", a.output_stride, b.output_stride);
  if (a.pooling.p != b.pooling.p)
    return diff("pooling.p", a.pooling.p_str(), b.pooling.p_str());
  if (a.pooling.epsilon != b.pooling.epsilon)
    return diff("pooling.epsilon", a.pooling.epsilon, b.pooling.epsilon);
  if (a.bn_momentum != b.bn_momentum)
    return diff("bn_momentum", a.bn_momentum, b.bn_momentum);
  return std::nullopt;
}

void to_json(nlohmann::json& j, const ModelConfig& cfg) {
  j = nlohmann::json{
      {"num_classes", cfg.num_classes},
      {"input_size", cfg.input_size},
      {"output_stride", cfg.output_stride},
      // serialized as text so the infinity case survives the round trip
      {"pooling_p", cfg.pooling.p_str()},
      {"pooling_epsilon", cfg.pooling.epsilon},
      {"pretrained_weights_path", cfg.pretrained_weights_path},
      {"seed", cfg.seed},
      {"bn_momentum", cfg.bn_momentum},
  };
}

void from_json(const nlohmann::json& j, ModelConfig& cfg) {
  const ModelConfig defaults;
  cfg.num_classes = j.value("num_classes", defaults.num_classes);
  cfg.input_size = j.value("input_size", defaults.input_size);
  cfg.output_stride = j.value("output_stride", defaults.output_stride);
  if (j.contains("pooling_p")) {
    const auto& p = j.at("pooling_p");
    if (p.is_string()) {
      const auto parsed = parse_exponent(p.get<std::string>());
      if (!parsed) {
        throw std::invalid_argument("model config: unparsable pooling_p '" +
                                    p.get<std::string>() + "'");
      }
      cfg.pooling.p = *parsed;
    } else {
      cfg.pooling.p = p.get<double>();
    }
  } else {
    cfg.pooling.p = defaults.pooling.p;
  }
  cfg.pooling.epsilon = j.value("pooling_epsilon", defaults.pooling.epsilon);
  cfg.pretrained_weights_path =
      j.value("pretrained_weights_path", defaults.pretrained_weights_path);
  cfg.seed = j.value("seed", defaults.seed);
  cfg.bn_momentum = j.value("bn_momentum", defaults.bn_momentum);
}

std::span<const float> ActivationMaps::channel(int c) const {
  if (grid.ndim() != 3 || grid.dim(0) != 2) {
    throw std::logic_error("activation maps: expected [2, H, W] grid, got " +
                           grid.shape_str());
  }
  if (c < 0 || c > 1) {
    throw std::invalid_argument("activation maps: channel " + std::to_string(c) +
                                " out of range [0, 1]");
  }
  const size_t plane = static_cast<size_t>(grid.dim(1)) * grid.dim(2);
  return {grid.data() + static_cast<size_t>(c) * plane, plane};
}

const char* to_string(CrackLabel label) {
  return label == CrackLabel::kCrack ? "crack" : "non-crack";
}

Classification classify(const std::array<double, 2>& scores) {
  if (!std::isfinite(scores[0]) || !std::isfinite(scores[1])) {
    throw std::invalid_argument("classify: non-finite score");
  }
  const double peak = std::max(scores[0], scores[1]);
  const double e0 = std::exp(scores[0] - peak);
  const double e1 = std::exp(scores[1] - peak);
  Classification out;
  out.scores = scores;
  out.probabilities = {e0 / (e0 + e1), e1 / (e0 + e1)};
  out.label = scores[0] > scores[1] ? CrackLabel::kCrack : CrackLabel::kNonCrack;
  return out;
}

ActivationMaps image_maps(const ForwardResult& result, int index) {
  const Tensor& maps = result.maps;
  if (maps.ndim() != 4 || maps.dim(1) != 2) {
    throw std::logic_error("image_maps: expected [N, 2, H, W] maps, got " +
                           maps.shape_str());
  }
  if (index < 0 || index >= maps.dim(0)) {
    throw std::invalid_argument("image_maps: index " + std::to_string(index) +
                                " out of range for batch of " +
                                std::to_string(maps.dim(0)));
  }
  const int h = maps.dim(2);
  const int w = maps.dim(3);
  ActivationMaps out;
  out.grid = Tensor({2, h, w});
  const size_t count = static_cast<size_t>(2) * h * w;
  const float* src = maps.data() + static_cast<size_t>(index) * count;
  std::copy(src, src + count, out.grid.data());
  return out;
}

namespace nn {

Bottleneck::Bottleneck(int in_channels, int width, int stride, int dilation,
                       float bn_momentum)
    : conv1_(in_channels, width, 1, stride),
      conv2_(width, width, 3, 1, dilation, dilation),
      conv3_(width, width * 4, 1),
      bn1_(width, bn_momentum),
      bn2_(width, bn_momentum),
      bn3_(width * 4, bn_momentum),
      has_downsample_(stride != 1 || in_channels != width * 4) {
  if (has_downsample_) {
    down_conv_.emplace(in_channels, width * 4, 1, stride);
    down_bn_.emplace(width * 4, bn_momentum);
  }
}

Tensor Bottleneck::forward(const Tensor& x, bool train) {
  Tensor out = relu1_.forward(bn1_.forward(conv1_.forward(x, train), train), train);
  out = relu2_.forward(bn2_.forward(conv2_.forward(out, train), train), train);
  out = bn3_.forward(conv3_.forward(out, train), train);
  if (has_downsample_) {
    add_inplace(out, down_bn_->forward(down_conv_->forward(x, train), train));
  } else {
    add_inplace(out, x);
  }
  return relu3_.forward(out, train);
}

Tensor Bottleneck::backward(const Tensor& dy) {
  const Tensor g = relu3_.backward(dy);
  Tensor main = conv3_.backward(bn3_.backward(g));
  main = conv2_.backward(bn2_.backward(relu2_.backward(main)));
  main = conv1_.backward(bn1_.backward(relu1_.backward(main)));
  if (has_downsample_) {
    add_inplace(main, down_conv_->backward(down_bn_->backward(g)));
  } else {
    add_inplace(main, g);
  }
  return main;
}

void Bottleneck::visit_params(const std::string& prefix, const ParamVisitor& fn) {
  conv1_.visit_params(prefix + ".conv1", fn);
  bn1_.visit_params(prefix + ".bn1", fn);
  conv2_.visit_params(prefix + ".conv2", fn);
  bn2_.visit_params(prefix + ".bn2", fn);
  conv3_.visit_params(prefix + ".conv3", fn);
  bn3_.visit_params(prefix + ".bn3", fn);
  if (has_downsample_) {
    down_conv_->visit_params(prefix + ".downsample.0", fn);
    down_bn_->visit_params(prefix + ".downsample.1", fn);
  }
}

void Bottleneck::visit_buffers(const std::string& prefix, const BufferVisitor& fn) {
  bn1_.visit_buffers(prefix + ".bn1", fn);
  bn2_.visit_buffers(prefix + ".bn2", fn);
  bn3_.visit_buffers(prefix + ".bn3", fn);
  if (has_downsample_) down_bn_->visit_buffers(prefix + ".downsample.1", fn);
}

void Bottleneck::init(std::mt19937_64& rng) {
  conv1_.init_kaiming(rng);
  conv2_.init_kaiming(rng);
  conv3_.init_kaiming(rng);
  if (has_downsample_) down_conv_->init_kaiming(rng);
}

void Bottleneck::drop_saved() {
  conv1_.drop_saved();
  conv2_.drop_saved();
  conv3_.drop_saved();
  bn1_.drop_saved();
  bn2_.drop_saved();
  bn3_.drop_saved();
  relu1_.drop_saved();
  relu2_.drop_saved();
  relu3_.drop_saved();
  if (has_downsample_) {
    down_conv_->drop_saved();
    down_bn_->drop_saved();
  }
}

}  // namespace nn

namespace {

ModelConfig validated(ModelConfig cfg) {
  cfg.validate();
  return cfg;
}

}  // namespace

Model::Model(const ModelConfig& config)
    : config_(validated(config)),
      conv1_(3, 64, 7, 2, 3),
      bn1_(64, config_.bn_momentum),
      maxpool_(3, 2, 1),
      head_(2048, 2, 1, 1, 0, 1, /*bias=*/true) {
  // Nothing upstream of the stem needs dL/dx.
  conv1_.set_need_input_grad(false);

  auto make_stage = [this](std::vector<nn::Bottleneck>& stage, int in_channels,
                           int width, int blocks, int stride, int dilation) {
    stage.reserve(static_cast<size_t>(blocks));
    stage.emplace_back(in_channels, width, stride, dilation, config_.bn_momentum);
    for (int b = 1; b < blocks; ++b) {
      stage.emplace_back(width * 4, width, 1, 1, config_.bn_momentum);
    }
  };
  // Stages 4 and 5 keep stride 1; the block that downsamples in the stock
  // network instead dilates its 3x3 by 2. Stage 5 also loses its third
  // block.
  make_stage(layer1_, 64, 64, 3, 1, 1);
  make_stage(layer2_, 256, 128, 4, 2, 1);
  make_stage(layer3_, 512, 256, 6, 1, 2);
  make_stage(layer4_, 1024, 512, 2, 1, 2);

  init_random();
  init_head();
}

ForwardResult Model::forward(const Tensor& batch) {
  if (batch.ndim() != 4 || batch.dim(1) != 3 ||
      batch.dim(2) != config_.input_size || batch.dim(3) != config_.input_size) {
    throw std::invalid_argument(
        "model: expected input " +
        Tensor::shape_str({-1, 3, config_.input_size, config_.input_size}) +
        ", got " + batch.shape_str());
  }
  const bool train = training_;
  Tensor x = relu_.forward(bn1_.forward(conv1_.forward(batch, train), train), train);
  x = maxpool_.forward(x, train);
  for (auto& block : layer1_) x = block.forward(x, train);
  for (auto& block : layer2_) x = block.forward(x, train);
  for (auto& block : layer3_) x = block.forward(x, train);
  for (auto& block : layer4_) x = block.forward(x, train);
  Tensor maps = head_.forward(x, train);

  const int expect = config_.map_size();
  if (maps.dim(2) != expect || maps.dim(3) != expect) {
    throw std::logic_error("model: activation maps " + maps.shape_str() +
                           " violate the fixed output stride (expected " +
                           std::to_string(expect) + "x" + std::to_string(expect) +
                           ")");
  }

  ForwardResult result;
  const int n = maps.dim(0);
  const size_t plane = static_cast<size_t>(maps.dim(2)) * maps.dim(3);
  result.scores.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 2; ++c) {
      std::span<const float> span{
          maps.data() + (static_cast<size_t>(i) * 2 + c) * plane, plane};
      result.scores[static_cast<size_t>(i)][static_cast<size_t>(c)] =
          lp_pool_forward(span, config_.pooling);
    }
  }
  if (train) saved_maps_ = maps;
  result.maps = std::move(maps);
  return result;
}

void Model::backward(const std::vector<std::array<double, 2>>& score_grads) {
  if (!training_) {
    throw std::logic_error("model: backward requires training mode");
  }
  if (saved_maps_.empty()) {
    throw std::logic_error("model: backward without a preceding forward");
  }
  const int n = saved_maps_.dim(0);
  if (static_cast<int>(score_grads.size()) != n) {
    throw std::invalid_argument("model: " + std::to_string(score_grads.size()) +
                                " score gradients for a batch of " +
                                std::to_string(n));
  }
  const size_t plane = static_cast<size_t>(saved_maps_.dim(2)) * saved_maps_.dim(3);
  Tensor dmaps(saved_maps_.shape());
  for (int i = 0; i < n; ++i) {
    for (int c = 0; c < 2; ++c) {
      const size_t offset = (static_cast<size_t>(i) * 2 + c) * plane;
      std::span<const float> map{saved_maps_.data() + offset, plane};
      std::span<float> grad{dmaps.data() + offset, plane};
      lp_pool_backward(map, config_.pooling,
                       score_grads[static_cast<size_t>(i)][static_cast<size_t>(c)],
                       grad);
    }
  }

  Tensor dx = head_.backward(dmaps);
  for (auto it = layer4_.rbegin(); it != layer4_.rend(); ++it) dx = it->backward(dx);
  for (auto it = layer3_.rbegin(); it != layer3_.rend(); ++it) dx = it->backward(dx);
  for (auto it = layer2_.rbegin(); it != layer2_.rend(); ++it) dx = it->backward(dx);
  for (auto it = layer1_.rbegin(); it != layer1_.rend(); ++it) dx = it->backward(dx);
  dx = bn1_.backward(relu_.backward(maxpool_.backward(dx)));
  (void)conv1_.backward(dx);
  saved_maps_ = Tensor();
}

void Model::zero_grad() {
  visit_params([](const std::string&, Tensor&, Tensor& grad) { grad.fill(0.0f); });
}

void Model::visit_params(const nn::ParamVisitor& fn) {
  conv1_.visit_params("conv1", fn);
  bn1_.visit_params("bn1", fn);
  const std::array<std::pair<const char*, std::vector<nn::Bottleneck>*>, 4> stages{
      {{"layer1", &layer1_}, {"layer2", &layer2_}, {"layer3", &layer3_},
       {"layer4", &layer4_}}};
  for (const auto& [name, stage] : stages) {
    for (size_t i = 0; i < stage->size(); ++i) {
      (*stage)[i].visit_params(std::string(name) + "." + std::to_string(i), fn);
    }
  }
  head_.visit_params("head", fn);
}

void Model::visit_buffers(const nn::BufferVisitor& fn) {
  bn1_.visit_buffers("bn1", fn);
  const std::array<std::pair<const char*, std::vector<nn::Bottleneck>*>, 4> stages{
      {{"layer1", &layer1_}, {"layer2", &layer2_}, {"layer3", &layer3_},
       {"layer4", &layer4_}}};
  for (const auto& [name, stage] : stages) {
    for (size_t i = 0; i < stage->size(); ++i) {
      (*stage)[i].visit_buffers(std::string(name) + "." + std::to_string(i), fn);
    }
  }
}

void Model::drop_saved() {
  conv1_.drop_saved();
  bn1_.drop_saved();
  relu_.drop_saved();
  maxpool_.drop_saved();
  for (auto& block : layer1_) block.drop_saved();
  for (auto& block : layer2_) block.drop_saved();
  for (auto& block : layer3_) block.drop_saved();
  for (auto& block : layer4_) block.drop_saved();
  head_.drop_saved();
  saved_maps_ = Tensor();
}

void Model::init_random() {
  std::mt19937_64 rng(config_.seed);
  conv1_.init_kaiming(rng);
  for (auto& block : layer1_) block.init(rng);
  for (auto& block : layer2_) block.init(rng);
  for (auto& block : layer3_) block.init(rng);
  for (auto& block : layer4_) block.init(rng);
}

void Model::init_head() {
  // A separate stream keeps the head draw identical whether or not the
  // backbone is later overwritten by pretrained weights.
  std::mt19937_64 rng(config_.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<float> dist(0.0f, 0.01f);
  for (float& w : head_.weight().storage()) w = dist(rng);
  head_.bias().fill(0.0f);
}

void Model::visit_backbone(const nn::ParamVisitor& params,
                           const nn::BufferVisitor& buffers) {
  conv1_.visit_params("conv1", params);
  bn1_.visit_params("bn1", params);
  bn1_.visit_buffers("bn1", buffers);
  const std::array<std::pair<const char*, std::vector<nn::Bottleneck>*>, 4> stages{
      {{"layer1", &layer1_}, {"layer2", &layer2_}, {"layer3", &layer3_},
       {"layer4", &layer4_}}};
  for (const auto& [name, stage] : stages) {
    for (size_t i = 0; i < stage->size(); ++i) {
      const std::string prefix = std::string(name) + "." + std::to_string(i);
      (*stage)[i].visit_params(prefix, params);
      (*stage)[i].visit_buffers(prefix, buffers);
    }
  }
}

void Model::load_pretrained(const std::filesystem::path& path) {
  const TensorArchive archive = TensorArchive::load(path);
  size_t loaded = 0;
  auto copy_into = [&](const std::string& name, Tensor& dst) {
    const ArchiveEntry* entry = archive.find(name);
    if (entry == nullptr) {
      throw std::runtime_error("pretrained weights '" + path.string() +
                               "': missing tensor '" + name + "'");
    }
    if (entry->shape != dst.shape()) {
      throw std::runtime_error("pretrained weights '" + path.string() +
                               "': tensor '" + name + "' has shape " +
                               Tensor::shape_str(entry->shape) +
                               ", model expects " + dst.shape_str());
    }
    std::copy(entry->data.begin(), entry->data.end(), dst.data());
    ++loaded;
  };
  visit_backbone(
      [&](const std::string& name, Tensor& value, Tensor&) { copy_into(name, value); },
      [&](const std::string& name, Tensor& value) { copy_into(name, value); });
  log::info("model: loaded " + std::to_string(loaded) + " backbone tensors from '" +
            path.string() + "'");
}

void Model::save_checkpoint(const std::filesystem::path& path,
                            const nlohmann::json* extra_meta) {
  TensorArchive archive;
  auto add = [&](const std::string& name, Tensor& value) {
    archive.add(name, value.shape(),
                std::span<const float>(value.data(),
                                       static_cast<size_t>(value.numel())));
  };
  visit_params([&](const std::string& name, Tensor& value, Tensor&) { add(name, value); });
  visit_buffers([&](const std::string& name, Tensor& value) { add(name, value); });

  nlohmann::json& meta = archive.meta();
  meta["kind"] = "checkpoint";
  meta["model_config"] = config_;
  meta["crackseg_version"] = kVersion;
  meta["git_revision"] = kGitRevision;
  if (extra_meta != nullptr) {
    for (const auto& [key, value] : extra_meta->items()) meta[key] = value;
  }
  archive.save(path);
}

Model Model::load_checkpoint(const std::filesystem::path& path) {
  const TensorArchive archive = TensorArchive::load(path);
  const nlohmann::json& meta = archive.meta();
  if (!meta.contains("model_config")) {
    throw std::runtime_error("checkpoint '" + path.string() +
                             "': missing model_config metadata");
  }
  ModelConfig cfg = meta.at("model_config").get<ModelConfig>();
  // Weights come from the archive itself, never from the original source.
  cfg.pretrained_weights_path.clear();
  Model model(cfg);

  size_t loaded = 0;
  auto copy_into = [&](const std::string& name, Tensor& dst) {
    const ArchiveEntry* entry = archive.find(name);
    if (entry == nullptr) {
      throw std::runtime_error("checkpoint '" + path.string() +
                               "': missing tensor '" + name + "'");
    }
    if (entry->shape != dst.shape()) {
      throw std::runtime_error("checkpoint '" + path.string() + "': tensor '" +
                               name + "' has shape " +
                               Tensor::shape_str(entry->shape) +
                               ", model expects " + dst.shape_str());
    }
    std::copy(entry->data.begin(), entry->data.end(), dst.data());
    ++loaded;
  };
  model.visit_params(
      [&](const std::string& name, Tensor& value, Tensor&) { copy_into(name, value); });
  model.visit_buffers(
      [&](const std::string& name, Tensor& value) { copy_into(name, value); });
  log::debug("checkpoint: restored " + std::to_string(loaded) + " tensors from '" +
             path.string() + "'");
  return model;
}

Model Model::load_checkpoint(const std::filesystem::path& path,
                             const ModelConfig& expected) {
  Model model = load_checkpoint(path);
  if (const auto mismatch = ModelConfig::describe_mismatch(model.config(), expected)) {
    throw std::runtime_error("checkpoint '" + path.string() +
                             "': config mismatch on " + *mismatch);
  }
  return model;
}

Model build_model(const ModelConfig& config) {
  Model model(config);
  if (!config.pretrained_weights_path.empty()) {
    model.load_pretrained(config.pretrained_weights_path);
  } else {
    log::warn(
        "model: no pretrained weights configured; backbone starts from random "
        "initialization");
  }
  return model;
}

}  // namespace crackseg
