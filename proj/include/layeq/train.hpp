#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "layeq/group.hpp"
#include "layeq/model.hpp"

namespace layeq {

enum class Task { Autoencode, Classify };
std::string task_name(Task t);
Task parse_task(const std::string& name);

enum class DatasetKind { Stripes, Blobs, LabeledPairs };
std::string dataset_kind_name(DatasetKind k);
DatasetKind parse_dataset_kind(const std::string& name);

/// Images are (channels, height, width), flattened row-major per channel.
/// When `patch` is nonzero the inputs are token grids: one token per
/// patch x patch block, tokens in row-major grid order, token features
/// ordered (channel, dy, dx).
struct Dataset {
  std::vector<Latent> inputs;
  std::vector<std::size_t> labels;
  std::size_t classes = 0;
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t patch = 0;
  /// Gather permutation mirroring a flattened image; an involution.
  std::vector<std::size_t> mirror_map;

  std::size_t size() const noexcept { return inputs.size(); }
  std::size_t pixels() const noexcept { return channels * height * width; }
  /// Mirroring on the input latents (token gather plus in-patch mirror for
  /// token grids).
  LatentAction input_action() const;
  /// Mirroring on a flattened image output.
  LatentAction image_action() const;
  /// The image of sample i as a flat vector.
  Latent image(std::size_t i) const;
};

/// Pairs x with mirror(x): sample 2k + 1 is the mirror of sample 2k. Throws
/// ConfigError for odd `size` or odd `n`.
Dataset make_synthetic_mirror_dataset(DatasetKind kind, std::size_t n, std::size_t size, std::uint64_t seed);

/// Re-expresses a flat image dataset as token grids of patch x patch blocks.
Dataset tokenize(const Dataset& flat, std::size_t patch);
/// Token gather and in-token permutation realizing a left-right mirror on
/// patch token grids.
LatentAction token_mirror_action(std::size_t channels, std::size_t height, std::size_t width, std::size_t patch);
Latent image_to_tokens(const Latent& image, std::size_t channels, std::size_t height, std::size_t width,
                       std::size_t patch);

/// Optional first-layer attention: patch tokens, a single learned query
/// token and `heads` heads of dimension `head_dim`.
struct AttentionConfig {
  std::size_t patch = 2;
  std::size_t heads = 4;
  std::size_t head_dim = 4;
  bool positional = true;

  bool operator==(const AttentionConfig&) const = default;
};

struct DatasetSpec {
  DatasetKind kind = DatasetKind::Blobs;
  std::size_t n = 256;
  std::size_t size = 8;
  std::uint64_t seed = 1;

  bool operator==(const DatasetSpec&) const = default;
};

struct TrainConfig {
  Task task = Task::Autoencode;
  /// d_0..d_L. d_0 is the pixel count; with attention, d_1 = heads * head_dim.
  std::vector<std::size_t> widths{64, 16, 64};
  /// One per hidden layer (L - 1 entries); the last layer is linear.
  std::vector<Activation> activations{Activation::tanh()};
  std::size_t epochs = 400;
  std::size_t batch_size = 64;
  double learning_rate = 1e-2;
  /// Multiplicative factor applied to every non-bias parameter after each step.
  double weight_decay = 0.999;
  double warmup_fraction = 0.5;
  double lambda = 5.0;
  std::uint64_t seed = 0;
  /// Epoch interval of checkpoint callbacks; 0 disables them.
  std::size_t save_interval = 0;
  DatasetSpec dataset;
  std::optional<AttentionConfig> attention;

  /// Throws ConfigError on inconsistent fields (the data is checked by train).
  void validate() const;
  /// Lambda in effect during `epoch` (0-based).
  double lambda_at(std::size_t epoch) const;
  nlohmann::json to_json() const;
  /// Missing fields keep their defaults; throws ParseError on bad values.
  static TrainConfig from_json(const nlohmann::json& doc);
};

/// The mirror actions the equivariance loss compares.
struct MirrorActions {
  LatentAction input;
  /// Trivial for classification.
  LatentAction output;
};
MirrorActions mirror_actions(const Dataset& data, Task task);

/// Autoencode: MSE(f(x), g f(g x)). Classify: MSE(f(x), f(g x)).
double equivariance_loss(const Model& model, const Latent& x, Task task, const Dataset& data);

struct LossValue {
  double task = 0.0;
  double equiv = 0.0;
  double total = 0.0;
};

/// Mean losses over `batch` (indices into data), total = task + lambda * equiv.
/// The task loss is MSE against the image for autoencoding and mean
/// cross-entropy of the softmax of the outputs for classification.
LossValue batch_loss(const Model& model, const Dataset& data, std::span<const std::size_t> batch, Task task,
                     double lambda);

/// Per-layer gradients of the total batch loss, in flatten_params order.
std::vector<std::vector<double>> loss_gradient(const Model& model, const Dataset& data,
                                               std::span<const std::size_t> batch, Task task, double lambda,
                                               LossValue* loss = nullptr);

struct GradientCheck {
  /// Per layer (index 0 unused): max relative error over sampled coordinates.
  std::vector<double> max_relative;
  std::size_t coordinates = 0;

  double worst() const;
};

/// Central differences with step `h` on `per_layer` random coordinates of
/// every layer. Relative error is |a - n| / max(|a|, |n|, floor).
GradientCheck gradient_check(const Model& model, const Dataset& data, std::span<const std::size_t> batch, Task task,
                             double lambda, std::size_t per_layer = 20, double h = 1e-5, std::uint64_t seed = 0x6c,
                             double floor = 1e-6);

/// Seeded initialization; throws ConfigError when `data` does not fit the widths.
Model initial_model(const TrainConfig& config, const Dataset& data);

struct CurveRow {
  std::size_t epoch = 0;
  double task_loss = 0.0;
  double equiv_loss = 0.0;
};

struct TrainResult {
  Model model;
  /// Row 0 holds the losses before training, row e those after epoch e.
  std::vector<CurveRow> curve;
  bool diverged = false;
  std::size_t steps = 0;
};

using CheckpointHook = std::function<void(std::size_t epoch, const Model&)>;

/// Mini-batch gradient descent. When a step produces a non-finite loss or
/// parameter the run stops with `diverged` set and returns the model of the
/// last finite curve row.
TrainResult train(const TrainConfig& config, const Dataset& data, const CheckpointHook& on_checkpoint = {});
/// Inputs are tokenized as the config requires.
Dataset prepare_dataset(const TrainConfig& config);

std::string curve_csv(const std::vector<CurveRow>& curve);
double accuracy(const Model& model, const Dataset& data);

}  // namespace layeq
