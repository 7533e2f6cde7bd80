// Copyright (c) 2026 The crackseg Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "crackseg/nn/layers.hpp"
#include "crackseg/pooling.hpp"
#include "crackseg/tensor.hpp"

namespace crackseg {

/// Hyperparameters of the modified ResNet-50 classifier.
struct ModelConfig {
  int num_classes = 2;    // crack / non-crack, fixed
  int input_size = 300;   // square inputs, pixels
  int output_stride = 8;  // fixed; 300 -> 38 via ceiling division
  PoolingSpec pooling{};
  std::string pretrained_weights_path;  // empty: random init (logged warning)
  uint64_t seed = 0;
  float bn_momentum = 0.1f;

  void validate() const;
  int map_size() const;  // spatial extent of the class activation maps

  /// First structurally differing field between two configs, or nullopt.
  /// seed and weight paths are provenance, not structure.
  static std::optional<std::string> describe_mismatch(const ModelConfig& a,
                                                      const ModelConfig& b);
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

/// Spatial class evidence for one image. Channel 0 is 'crack',
/// channel 1 is 'non-crack'; this ordering is part of the contract.
struct ActivationMaps {
  static constexpr int kCrackChannel = 0;
  static constexpr int kNonCrackChannel = 1;

  Tensor grid;  // [2, H', W']

  int height() const { return grid.dim(1); }
  int width() const { return grid.dim(2); }
  std::span<const float> channel(int c) const;
};

enum class CrackLabel { kCrack = 0, kNonCrack = 1 };
const char* to_string(CrackLabel label);

struct Classification {
  CrackLabel label = CrackLabel::kNonCrack;
  std::array<double, 2> probabilities{0.5, 0.5};
  std::array<double, 2> scores{0.0, 0.0};
};

/// Softmax over the two pooled scores; argmax label, ties resolved to
/// non-crack so a tie never triggers segmentation.
Classification classify(const std::array<double, 2>& scores);

struct ForwardResult {
  Tensor maps;  // [N, 2, H', W']
  std::vector<std::array<double, 2>> scores;
};

/// Copies image `index` out of a batched forward result.
ActivationMaps image_maps(const ForwardResult& result, int index);

namespace nn {

/// Standard bottleneck residual block (1x1 -> 3x3 -> 1x1, expansion 4).
/// `stride` sits on the first 1x1 convolution, `dilation` on the 3x3.
class Bottleneck {
 public:
  Bottleneck(int in_channels, int width, int stride, int dilation,
             float bn_momentum);

  Tensor forward(const Tensor& x, bool train);
  Tensor backward(const Tensor& dy);
  void visit_params(const std::string& prefix, const ParamVisitor& fn);
  void visit_buffers(const std::string& prefix, const BufferVisitor& fn);
  void init(std::mt19937_64& rng);
  void drop_saved();

 private:
  Conv2d conv1_, conv2_, conv3_;
  BatchNorm2d bn1_, bn2_, bn3_;
  ReLU relu1_, relu2_, relu3_;
  bool has_downsample_;
  std::optional<Conv2d> down_conv_;
  std::optional<BatchNorm2d> down_bn_;
};

}  // namespace nn

/// The modified 50-layer residual classifier.
///
/// Stage layout (input stride in parentheses): stem 7x7/2 + maxpool/2,
/// conv2.x 3 blocks (1), conv3.x 4 blocks (2), conv4.x 6 blocks (1,
/// dilation 2 on the de-strided block), conv5.x 2 blocks (1, dilation 2;
/// the stage's third block is removed). Total output stride 8, so a
/// 300x300 input yields 38x38 maps. A 1x1 head produces the two class
/// maps, and normalized L_p pooling turns them into two scores.
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  void train_mode(bool enabled) { training_ = enabled; }
  bool is_training() const { return training_; }

  /// Runs a preprocessed [N, 3, S, S] batch; returns activation maps and
  /// one pooled score per class per image. Rejects wrong channel counts
  /// or spatial sizes with expected-vs-actual shapes.
  ForwardResult forward(const Tensor& batch);

  /// Backpropagates per-image score gradients; accumulates parameter
  /// gradients. Requires a prior forward in training mode.
  void backward(const std::vector<std::array<double, 2>>& score_grads);

  void zero_grad();
  void visit_params(const nn::ParamVisitor& fn);
  void visit_buffers(const nn::BufferVisitor& fn);
  /// Frees training context tensors.
  void drop_saved();

  nn::Conv2d& head() { return head_; }

  /// Overwrites the backbone (everything but the head) with tensors from
  /// a weights archive; throws naming the first missing or misshaped
  /// tensor.
  void load_pretrained(const std::filesystem::path& path);

  void save_checkpoint(const std::filesystem::path& path,
                       const nlohmann::json* extra_meta = nullptr);
  static Model load_checkpoint(const std::filesystem::path& path);
  /// Additionally verifies the stored config structurally matches
  /// `expected`; throws naming the first differing field.
  static Model load_checkpoint(const std::filesystem::path& path,
                               const ModelConfig& expected);

 private:
  ModelConfig config_;
  nn::Conv2d conv1_;
  nn::BatchNorm2d bn1_;
  nn::ReLU relu_;
  nn::MaxPool2d maxpool_;
  std::vector<nn::Bottleneck> layer1_, layer2_, layer3_, layer4_;
  nn::Conv2d head_;
  bool training_ = false;
  Tensor saved_maps_;

  void init_random();
  void init_head();
  void visit_backbone(const nn::ParamVisitor& params,
                      const nn::BufferVisitor& buffers);
};

/// Spec-level constructor: validates the config, builds the network,
/// loads pretrained backbone weights when configured.
Model build_model(const ModelConfig& config);

}  // namespace crackseg
