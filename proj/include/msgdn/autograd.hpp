#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "msgdn/tensor.hpp"

namespace msgdn::autograd {

// Reverse-mode autodiff over Tensor4. Ops build an expression graph eagerly;
// backward() walks it in reverse creation order. When grads are globally
// disabled (NoGradGuard) ops keep no parents or closures, so intermediate
// values free as soon as the last Var referencing them dies.
//
// Determinism: every op writes each output element from exactly one thread
// with a fixed inner accumulation order, so results are bitwise reproducible
// for any thread count.

struct Node {
  Tensor4 value;
  Tensor4 grad;  // allocated on first backward contribution
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  std::uint64_t index = 0;
  bool requires_grad = false;
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Var leaf(Tensor4 value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor4& value() const { return node_->value; }
  Tensor4& mutable_value() { return node_->value; }
  const Tensor4& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void clear_grad() { node_->grad = Tensor4(); }
  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

// RAII switch that disables graph recording on this thread.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Seeds d(root)/d(root) = 1 and accumulates grads into every reachable node
// with requires_grad. root must hold a single element.
void backward(const Var& root);

// --- elementwise and arithmetic ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double k);
Var neg(const Var& x);
Var relu(const Var& x);
Var leaky_relu(const Var& x, double slope);
Var square(const Var& x);
Var softplus(const Var& x);  // log(1 + e^x), overflow-safe

// --- reductions and broadcasts ---
Var mean_all(const Var& x);                     // -> (1,1,1,1)
Var mean_abs(const Var& x);                     // mean |x|, subgradient 0 at 0
Var mean_square(const Var& x);                  // mean x^2
Var channel_mean(const Var& x);                 // -> (1,C,1,1), mean over n,h,w
Var sub_bcast(const Var& x, const Var& s);      // s is (1,1,1,1) or (1,C,1,1)
Var add_bcast(const Var& x, const Var& s);
Var mul_bcast(const Var& x, const Var& s);
Var rsqrt_eps(const Var& x, double eps);        // 1/sqrt(x + eps), elementwise

// --- structure ---
Var concat_channels(const std::vector<Var>& xs);
Var reshape(const Var& x, int n, int c, int h, int w);
Var crop_spatial(const Var& x, int y0, int x0, int h, int w);
Var embed_spatial(const Var& x, int out_h, int out_w, int y0, int x0);
// Reflect-pads on the right/bottom only (out_h >= h, out_w >= w).
Var reflect_pad_br(const Var& x, int out_h, int out_w);

// --- conv / pooling / resampling ---
// w: (co, ci, kh, kw); b: (1, co, 1, 1). Zero padding.
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
// Transposed conv, kernel 2 stride 2 (non-overlapping); w: (ci, co, 2, 2).
Var conv_transpose2x(const Var& x, const Var& w, const Var& b);
Var maxpool2x2(const Var& x);
Var upsample_bilinear2x(const Var& x);

// --- attention primitives ---
Var matmul(const Var& a, const Var& b);       // (N,1,R,K) x (N,1,K,C)
Var transpose_mat(const Var& x);              // (N,1,R,C) -> (N,1,C,R)
Var softmax_lastdim(const Var& x);            // softmax over W per (n,c,h)

}  // namespace msgdn::autograd
