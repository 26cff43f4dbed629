#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "rfga/tensor.hpp"

namespace rfga {

// Handle into a Tape. Only valid for the tape that produced it.
struct Var {
    int32_t id = -1;
    bool valid() const { return id >= 0; }
};

enum class View { channel, height, width };
enum class Mode { train, eval };

// Which lanes batch normalization keeps separate:
//   per_lane    — stats over the batch axis only; one stat per trailing position
//   per_channel — rank-4 [N,C,H,W] input, stats over (N,H,W) per channel
enum class BnLanes { per_lane, per_channel };

// Batch-norm parameter + state bundle. gamma/beta are learnable (lifted onto
// the tape by callers); running stats are updated as a forward side effect in
// train mode.
struct BatchNorm {
    Tensor gamma, beta;
    Tensor running_mean, running_var;
    int64_t updates = 0;  // running-stat update count
    double eps = 1e-5;
    double momentum = 0.1;
    bool warned_fresh_eval = false;

    static BatchNorm make(Shape lane_shape);
};

// Recorded-operation tape for reverse-mode differentiation over the fixed op
// set used by the rest of the system. Nodes are append-only, so node order is
// a topological order; backward walks it in reverse. One tape per forward
// pass; tapes are single-writer.
class Tape {
  public:
    Var leaf(Tensor value, bool requires_grad = false);

    const Tensor& value(Var v) const;
    const Tensor& grad(Var v) const;
    bool requires_grad(Var v) const;
    size_t node_count() const { return nodes_.size(); }

    // ---- elementwise / broadcast ----
    Var add(Var a, Var b);  // broadcasting elementwise sum
    Var mul(Var a, Var b);  // broadcasting Hadamard product
    Var sigmoid(Var x);
    Var relu(Var x);
    Var scale(Var x, double c);

    // ---- pooling and convolution ----
    Var avg_pool(Var x, View view);          // [C,H,W] -> pooled view (Eq. 1-3 shapes)
    Var avg_pool_batched(Var x, View view);  // [N,C,H,W], maps over the batch
    Var conv1d_shared(Var signal, Var kernel, int64_t axis);  // shared k-tap kernel per lane
    Var conv2d(Var x, Var w, int64_t pad);   // x [N,Ci,H,W], w [Co,Ci,kh,kw], stride 1
    Var avg_pool2x2(Var x);                  // [N,C,H,W] -> [N,C,H/2,W/2]

    // ---- normalization / reductions / loss ----
    Var batch_norm(Var x, Var gamma, Var beta, BatchNorm& state, Mode mode, BnLanes lanes);
    Var spatial_mean(Var x);  // [N,C,H,W] -> [N,C]
    Var mean_all(Var x);      // -> scalar
    Var sum_all(Var x);       // -> scalar
    Var softmax_cross_entropy(Var logits, const std::vector<int32_t>& labels);  // mean loss

    // Populates gradients for every node reachable from the scalar loss.
    void backward(Var loss);

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        std::function<void(Tape&)> backprop;  // accumulates into input grads
    };

    Var push(Tensor value, bool requires_grad, std::function<void(Tape&)> backprop);
    Node& node(Var v);
    const Node& node(Var v) const;
    Tensor& grad_mut(Var v);

    std::vector<Node> nodes_;
};

// Broadcast helpers shared by ops and tests. Shapes must have equal rank and
// each dim pair must match or have one side equal to 1.
Shape broadcast_shape(const Shape& a, const Shape& b);

}  // namespace rfga
