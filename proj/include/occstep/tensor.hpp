#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "occstep/common.hpp"

namespace occstep {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode {
  Shape shape;
  Eigen::ArrayXf value;
  Eigen::ArrayXf grad;  // empty until backward reaches this node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  std::function<void(TensorNode&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad = Eigen::ArrayXf::Zero(value.size());
  }
};

// Shared handle to a node. Copies alias the same storage; ops return fresh
// nodes. Leaf values may be mutated in place (parameters, inputs).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, const std::vector<float>& data,
                     bool requires_grad = false);
  static Tensor scalar(float v, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::int64_t size() const { return n_->value.size(); }
  bool requires_grad() const { return n_ && n_->requires_grad; }

  Eigen::ArrayXf& values() { return n_->value; }
  const Eigen::ArrayXf& values() const { return n_->value; }
  Eigen::ArrayXf& grad() { n_->ensure_grad(); return n_->grad; }
  bool has_grad() const { return n_->grad.size() == n_->value.size(); }

  float item() const;
  std::vector<float> to_vector() const;

  const std::shared_ptr<TensorNode>& node() const { return n_; }

 private:
  std::shared_ptr<TensorNode> n_;
};

// Records op nodes in execution order. Constructing a Tape makes it the
// active tape for the current thread; destruction restores the previous one.
// Ops record themselves only while a tape is active and an input wants
// gradients, so inference runs build no graph.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::shared_ptr<TensorNode> n) { nodes_.push_back(std::move(n)); }
  const std::vector<std::shared_ptr<TensorNode>>& nodes() const { return nodes_; }

  static Tape* active();

 private:
  std::vector<std::shared_ptr<TensorNode>> nodes_;
  Tape* prev_ = nullptr;
};

// Reverse-mode sweep from a scalar loss. Visits each recorded node once,
// newest first; gradients accumulate into every requires_grad tensor.
void backward(Tape& tape, const Tensor& loss);

// ---- ops ----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor affine(const Tensor& x, float scale, float shift);  // scale*x + shift
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor silu(const Tensor& x);

// x viewed as (C_in, N) channel-major; W is (C_out, C_in); optional bias.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// 3x3x3 convolution, padding 1. x is (C_in, D, H, W); k is
// (C_out, C_in, 3, 3, 3); optional bias (C_out). planar_stride selects
// stride (1,2,2), halving H and W only.
Tensor conv3(const Tensor& x, const Tensor& k, const Tensor& b,
             bool planar_stride);

Tensor softmax_channel(const Tensor& x);        // (K, N), softmax over axis 0
Tensor concat_channel(const Tensor& a, const Tensor& b);
Tensor gather_positions(const Tensor& x, const std::vector<std::int32_t>& idx);

// field (C, D, H, W); coords (3, N) fractional voxel coordinates in
// (d, h, w) order, integer values on voxel centers. Out-of-grid corners
// contribute zero. Differentiable in the field only.
Tensor trilinear_sample(const Tensor& field,
                        const Eigen::Matrix<double, 3, Eigen::Dynamic>& coords,
                        const std::array<int, 3>& dims);

// h_i = decay_i * h_{i-1} + drive_i along axis 1 of (C, L) inputs, h_{-1}=0.
Tensor scan(const Tensor& decay, const Tensor& drive);

Tensor channel_scale(const Tensor& x, const Tensor& v);  // x (C,...), v (C)
Tensor repeat_rows(const Tensor& x, int k);  // (R, L) -> (R*k, L)
Tensor upsample_planar2(const Tensor& x);    // (C,D,H,W) -> (C,D,2H,2W), nearest
Tensor reshape(const Tensor& x, Shape shape);
Tensor slice_flat(const Tensor& x, std::int64_t offset, std::int64_t len);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor spatial_mean(const Tensor& x);  // (C, N...) -> (C)
Tensor detach(const Tensor& x);

// Embedding lookup: labels (N, int8, -1 maps to row 0), table (K, C_e).
// Output is channel-major (C_e, N). Gradient flows into the table.
Tensor embed_lookup(const std::vector<std::int8_t>& labels, const Tensor& table);

// Mean of -log softmax(logits)[label] over labels >= 0; logits (K, N).
// All-ignore input yields the zero scalar. valid_out reports the count.
Tensor cross_entropy(const Tensor& logits, const std::vector<std::int8_t>& labels,
                     std::int64_t* valid_out = nullptr);

Tensor smooth_l1(const Tensor& pred, const std::vector<float>& target);

// |wrap(pred[0]) - wrap(target)|, wrap to (-pi, pi].
Tensor yaw_abs_error(const Tensor& pred1, double target);

// ---- optimizer -----------------------------------------------------------

// Adam with decoupled weight decay. Decay applies only to tensors of rank
// >= 2 (weight matrices and conv kernels), never to bias/state vectors.
class AdamW {
 public:
  explicit AdamW(std::vector<Tensor> params, double lr = 1e-3,
                 double weight_decay = 0.01);
  void zero_grad();
  void step();
  double lr;

  // Serialization access: per-parameter moment buffers and the shared
  // update counter, in the order the params were registered.
  std::vector<Eigen::ArrayXf>& moments_m() { return m_; }
  std::vector<Eigen::ArrayXf>& moments_v() { return v_; }
  long& update_count() { return t_; }

 private:
  std::vector<Tensor> params_;
  std::vector<Eigen::ArrayXf> m_, v_;
  double wd_;
  long t_ = 0;
};

// ---- gradient checking ----------------------------------------------------

// Compares analytic gradients of a scalar projection of fn(inputs) against
// Richardson-extrapolated central finite differences. Returns the max over
// probed elements of |analytic - numeric| relative to the larger estimate,
// floored at one percent of the input tensor's strongest gradient component
// (float32 evaluation noise on near-zero components is not disagreement).
// Probes every element unless max_probes_per_input limits it (seeded
// subsample). Pick eps by the op's structure: large steps (~0.25) are exact
// for ops linear in the probed input; smooth nonlinear ops want ~0.05-0.1.
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                  std::vector<Tensor> inputs, std::uint64_t seed,
                  double eps = 0.05, int max_probes_per_input = -1);

// Directional variant for deep compositions. Per-element probing cannot
// verify a full float32 network: evaluation noise (~1e-7 on an O(1) scalar)
// swamps components whose true gradient is small, and parameter gradient
// magnitudes in a multi-block model span many orders. Instead this draws
// num_directions random +-1 directions v over all inputs jointly and compares
// sum(grad . v) against the Richardson-extrapolated central difference of
// the scalar output along v. The directional derivative is dominated by the
// strongest gradient paths, so the comparison is well-conditioned (relative
// errors are floored at a tenth of the total gradient L2 norm, the typical
// magnitude of grad . v), while any backward error that materially affects
// the output shifts sum(grad . v). Returns the max relative error over
// directions.
double grad_check_directional(
    const std::function<Tensor(const std::vector<Tensor>&)>& fn,
    std::vector<Tensor> inputs, std::uint64_t seed, double eps = 0.04,
    int num_directions = 4);

struct OpGradCase {
  std::string name;
  std::function<double(std::uint64_t)> run;  // seed -> max rel err
};

// One case per registered op, used by tests and the gradcheck command.
std::vector<OpGradCase> standard_op_grad_cases();

}  // namespace occstep
