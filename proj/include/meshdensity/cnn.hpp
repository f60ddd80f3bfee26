#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "meshdensity/dataset.hpp"
#include "meshdensity/tensor.hpp"

namespace meshdensity::cnn {

namespace fs = std::filesystem;
using Json = nlohmann::json;

enum class LeakyPlacement { All, DownOnly, None };
enum class BatchNormMode { None, Middle };
enum class SkipType { None, Scalar, Tensor };
enum class LossKind { L1, L2 };

struct NetworkConfig {
  int depth = 5;
  int base_channels = 8;
  int convs_per_depth = 2;
  int kernel_size = 3;
  double leaky_slope = 0.2;
  LeakyPlacement leaky_placement = LeakyPlacement::All;
  BatchNormMode batchnorm = BatchNormMode::Middle;
  SkipType skip_type = SkipType::Tensor;
  std::set<int> skip_depths{2, 3, 4, 5};
  bool constrained_output = true;
  LossKind loss = LossKind::L1;
  int in_channels = 1;
};

void validate(const NetworkConfig& cfg);
// Channels of encoder stage d (1-based): base * 2^(d-1), capped at 8 * base.
int stage_channels(const NetworkConfig& cfg, int d);
Json to_json(const NetworkConfig& cfg);
// Missing keys keep their defaults; unknown enum strings throw.
NetworkConfig network_config_from_json(const Json& j);

struct OptimizerConfig {
  double lr0 = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay_factor = 0.89;
  long decay_every = 650;
};

void validate(const OptimizerConfig& cfg);
Json to_json(const OptimizerConfig& cfg);
OptimizerConfig optimizer_config_from_json(const Json& j);

// lr0 * decay_factor^floor(step / decay_every), step counted from 0.
double learning_rate(const OptimizerConfig& cfg, long step);

// ---------------------------------------------------------------------------
// Differentiable primitives. Every layer caches what its backward pass needs;
// backward accumulates parameter gradients and returns the input gradient.

template <class S>
struct Param {
  std::string name;
  Tensor<S> value;
  Tensor<S> grad;
  bool trainable = true;
};

template <class S>
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor<S> forward(const Tensor<S>& x, bool training) = 0;
  virtual Tensor<S> backward(const Tensor<S>& dy) = 0;
  virtual void parameters(std::vector<Param<S>*>& out) { (void)out; }
};

// Zero "same" padding (TensorFlow convention for even kernels and strides):
// output size ceil(in / stride), extra padding on the bottom/right.
template <class S>
class Conv2d : public Layer<S> {
 public:
  Conv2d(std::string name, int in_channels, int out_channels, int kernel, int stride = 1);
  Tensor<S> forward(const Tensor<S>& x, bool training) override;
  Tensor<S> backward(const Tensor<S>& dy) override;
  void parameters(std::vector<Param<S>*>& out) override;

  int in_channels() const { return cin_; }
  int out_channels() const { return cout_; }
  int kernel() const { return k_; }
  int stride() const { return stride_; }

  Param<S> weight;  // (out, in, k, k)
  Param<S> bias;    // (1, out, 1, 1)

 private:
  int cin_, cout_, k_, stride_;
  Tensor<S> x_;
};

// Nearest-neighbour x2.
template <class S>
class Upsample2x : public Layer<S> {
 public:
  Tensor<S> forward(const Tensor<S>& x, bool training) override;
  Tensor<S> backward(const Tensor<S>& dy) override;

 private:
  Shape in_;
};

template <class S>
class LeakyRelu : public Layer<S> {
 public:
  explicit LeakyRelu(double slope) : slope_(static_cast<S>(slope)) {}
  Tensor<S> forward(const Tensor<S>& x, bool training) override;
  Tensor<S> backward(const Tensor<S>& dy) override;

 private:
  S slope_;
  Tensor<S> x_;
};

// Per-batch statistics in training, running averages (momentum 0.9) otherwise.
template <class S>
class BatchNorm2d : public Layer<S> {
 public:
  BatchNorm2d(std::string name, int channels);
  Tensor<S> forward(const Tensor<S>& x, bool training) override;
  Tensor<S> backward(const Tensor<S>& dy) override;
  void parameters(std::vector<Param<S>*>& out) override;

  Param<S> gamma, beta;
  Param<S> running_mean, running_var;  // not trainable
  static constexpr double momentum = 0.9;
  static constexpr double eps = 1e-5;

 private:
  Tensor<S> xhat_;
  Eigen::Array<S, Eigen::Dynamic, 1> inv_std_;
  bool training_ = false;
};

template <class S>
class Sigmoid : public Layer<S> {
 public:
  Tensor<S> forward(const Tensor<S>& x, bool training) override;
  Tensor<S> backward(const Tensor<S>& dy) override;

 private:
  Tensor<S> y_;
};

template <class S>
class Sequential : public Layer<S> {
 public:
  void add(std::unique_ptr<Layer<S>> layer) { layers_.push_back(std::move(layer)); }
  bool empty() const { return layers_.empty(); }
  Tensor<S> forward(const Tensor<S>& x, bool training) override;
  Tensor<S> backward(const Tensor<S>& dy) override;
  void parameters(std::vector<Param<S>*>& out) override;

 private:
  std::vector<std::unique_ptr<Layer<S>>> layers_;
};

template <class S>
Tensor<S> concat_channels(const Tensor<S>& a, const Tensor<S>& b);
// Inverse of concat_channels for gradients: first `channels_a` channels to a.
template <class S>
std::pair<Tensor<S>, Tensor<S>> split_channels(const Tensor<S>& x, int channels_a);

// decoder + s * encoder with a trainable scalar s (initialised to 0).
template <class S>
class ScalarSkip {
 public:
  explicit ScalarSkip(std::string name);
  Tensor<S> forward(const Tensor<S>& decoder, const Tensor<S>& encoder);
  // Returns (d decoder, d encoder).
  std::pair<Tensor<S>, Tensor<S>> backward(const Tensor<S>& dy);
  Param<S> gate;

 private:
  Tensor<S> encoder_;
};

// Channel concatenation followed by a 1x1 mixing conv back to `channels`.
template <class S>
class TensorSkip {
 public:
  TensorSkip(std::string name, int channels);
  Tensor<S> forward(const Tensor<S>& decoder, const Tensor<S>& encoder, bool training);
  std::pair<Tensor<S>, Tensor<S>> backward(const Tensor<S>& dy);
  Conv2d<S> mix;

 private:
  int channels_;
};

// ---------------------------------------------------------------------------

template <class S>
class UNet {
 public:
  // Weights uniform in +-sqrt(6 / fan_in), biases 0, drawn in parameter order.
  UNet(const NetworkConfig& cfg, std::uint64_t seed);
  UNet(UNet&&) noexcept = default;
  UNet& operator=(UNet&&) noexcept = default;

  const NetworkConfig& config() const { return cfg_; }

  // Throws ShapeError unless height and width are positive multiples of 2^depth.
  Tensor<S> forward(const Tensor<S>& x, bool training);
  // Accumulates parameter gradients; returns d input.
  Tensor<S> backward(const Tensor<S>& dy);

  // Trainable parameters only.
  std::vector<Param<S>*> parameters();
  // Everything a checkpoint holds (adds batch-norm running statistics).
  std::vector<Param<S>*> state();
  std::size_t parameter_count();
  void zero_grad();

 private:
  struct DecoderStage {
    Sequential<S> up;
    std::unique_ptr<ScalarSkip<S>> scalar_skip;
    std::unique_ptr<TensorSkip<S>> tensor_skip;
    Sequential<S> convs;
  };

  NetworkConfig cfg_;
  std::vector<Sequential<S>> encoder_;  // convs of stage d at index d-1
  std::vector<Sequential<S>> down_;
  Sequential<S> bottleneck_;
  std::vector<DecoderStage> decoder_;  // stage d at index d-1
  Sequential<S> head_;
};

// Copies every state tensor by name, converting the scalar type.
template <class To, class From>
void copy_state(UNet<From>& from, UNet<To>& to);

// ---------------------------------------------------------------------------

template <class S>
struct LossResult {
  S loss = 0;
  Tensor<S> grad;  // d loss / d pred
  std::size_t count = 0;  // unmasked pixels
};

// Mean over mask == 0 pixels of |d| (L1) or d^2 (L2); masked pixels are skipped
// entirely and get a zero gradient.
template <class S>
LossResult<S> masked_loss(const Tensor<S>& pred, const Tensor<S>& target, const Tensor<S>& mask, LossKind kind);

// 100 * (1 - mean |pred - target|) over mask == 0 pixels; 100 when all masked.
template <class S>
double accuracy(const Tensor<S>& pred, const Tensor<S>& target, const Tensor<S>& mask);

template <class S>
class Adam {
 public:
  explicit Adam(OptimizerConfig cfg) : cfg_(cfg) { validate(cfg_); }
  // One update using the gradients currently stored in params.
  void step(const std::vector<Param<S>*>& params);
  long steps_taken() const { return t_; }
  double current_lr() const { return learning_rate(cfg_, t_); }

 private:
  OptimizerConfig cfg_;
  long t_ = 0;
  std::vector<Eigen::Array<S, Eigen::Dynamic, 1>> m_, v_;
};

// ---------------------------------------------------------------------------
// Checkpoints: MSHD containers with zero pixel size, one array per state
// tensor, the network config and tensor shapes in the metadata.

void save_checkpoint(const fs::path& path, UNet<float>& net, const Json& extra = Json::object());
// `metadata`, when given, receives the container metadata (config, extras).
UNet<float> load_checkpoint(const fs::path& path, Json* metadata = nullptr);
// Loads into an existing network; throws ShapeError naming the first tensor
// that is missing or has a different shape.
void load_state(const dataset::Container& c, UNet<float>& net);

// ---------------------------------------------------------------------------

struct TrainConfig {
  int epochs = 10;
  long max_steps = 0;  // 0: no cap
  int batch_size = 16;
  std::uint64_t seed = 0;
  dataset::InputChannel input = dataset::InputChannel::Geo;
  dataset::MaskChannel mask = dataset::MaskChannel::DillutePrism;
  fs::path out_dir;  // empty: nothing written
  Json checkpoint_extra = Json::object();  // merged into every saved checkpoint
};

struct EpochRecord {
  int epoch = 0;
  long step = 0;
  double loss_train = 0.0;
  double loss_val = 0.0;
  double acc_val = 0.0;
  double lr = 0.0;
};

struct Metrics {
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainResult {
  UNet<float> net;  // parameters with the best validation loss
  std::vector<EpochRecord> history;
  Metrics initial;  // validation metrics before the first step
  int best_epoch = 0;
  long steps = 0;
  bool diverged = false;
};

// Pixel-weighted loss and accuracy over the given samples (evaluation mode).
Metrics evaluate(UNet<float>& net, dataset::SampleStore& store, const std::vector<std::string>& ids,
                 const TrainConfig& cfg);

TrainResult train(dataset::SampleStore& store, const dataset::Split& split, const NetworkConfig& net_cfg,
                  const OptimizerConfig& opt_cfg, const TrainConfig& cfg);

std::string history_csv(const std::vector<EpochRecord>& history);

// Single-sample prediction in evaluation mode; rows as in the sample.
dataset::FloatChannel predict(UNet<float>& net, const dataset::Sample& sample, dataset::InputChannel input);

}  // namespace meshdensity::cnn
