#include "msgdn/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <unordered_set>

#include "msgdn/common.hpp"

namespace msgdn::autograd {
namespace {

thread_local bool g_grad_enabled = true;
thread_local std::uint64_t g_next_index = 1;

void ensure_grad(Node& n) {
  if (n.grad.empty()) n.grad = Tensor4::zeros(n.value.n, n.value.c, n.value.h, n.value.w);
}

bool wants_grad(const std::shared_ptr<Node>& n) { return n && n->requires_grad; }

Var make_op(Tensor4 value, std::vector<std::shared_ptr<Node>> parents,
            std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->index = g_next_index++;
  bool track = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) track = track || wants_grad(p);
  }
  if (track) {
    node->requires_grad = true;
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
  }
  return Var(node);
}

double stable_softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

double stable_sigmoid(double x) {
  const double t = std::exp(-std::abs(x));
  return x >= 0.0 ? 1.0 / (1.0 + t) : t / (1.0 + t);
}

void check_same_shape(const Tensor4& a, const Tensor4& b, const char* op) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch");
}

Var elementwise_unary(const Var& x, double (*f)(double), double (*df)(double)) {
  Tensor4 out = x.value();
  for (auto& v : out.data) v = f(v);
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn, df](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const std::size_t sz = self.value.size();
    for (std::size_t i = 0; i < sz; ++i) xn->grad.data[i] += self.grad.data[i] * df(xn->value.data[i]);
  });
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Var Var::leaf(Tensor4 value, bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->index = g_next_index++;
  node->requires_grad = requires_grad;
  return Var(node);
}

void backward(const Var& root) {
  if (!root.defined()) throw Error("backward: undefined root");
  if (root.value().size() != 1) throw Error("backward: root must be a scalar");
  if (!root.node()->requires_grad) throw Error("backward: root does not require grad");

  // Topological order = descending creation index over the reachable graph.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.node().get()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p && p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->index > b->index; });

  root.node()->grad = Tensor4::full(1, 1, 1, 1, 1.0);
  for (Node* n : order) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// --- elementwise ---

Var add(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "add");
  Tensor4 out = a.value();
  const std::size_t sz = out.size();
  for (std::size_t i = 0; i < sz; ++i) out.data[i] += b.value().data[i];
  auto an = a.node(), bn = b.node();
  return make_op(std::move(out), {an, bn}, [an, bn](Node& self) {
    const std::size_t sz = self.value.size();
    if (an->requires_grad) {
      ensure_grad(*an);
      for (std::size_t i = 0; i < sz; ++i) an->grad.data[i] += self.grad.data[i];
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      for (std::size_t i = 0; i < sz; ++i) bn->grad.data[i] += self.grad.data[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "sub");
  Tensor4 out = a.value();
  const std::size_t sz = out.size();
  for (std::size_t i = 0; i < sz; ++i) out.data[i] -= b.value().data[i];
  auto an = a.node(), bn = b.node();
  return make_op(std::move(out), {an, bn}, [an, bn](Node& self) {
    const std::size_t sz = self.value.size();
    if (an->requires_grad) {
      ensure_grad(*an);
      for (std::size_t i = 0; i < sz; ++i) an->grad.data[i] += self.grad.data[i];
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      for (std::size_t i = 0; i < sz; ++i) bn->grad.data[i] -= self.grad.data[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "mul");
  Tensor4 out = a.value();
  const std::size_t sz = out.size();
  for (std::size_t i = 0; i < sz; ++i) out.data[i] *= b.value().data[i];
  auto an = a.node(), bn = b.node();
  return make_op(std::move(out), {an, bn}, [an, bn](Node& self) {
    const std::size_t sz = self.value.size();
    if (an->requires_grad) {
      ensure_grad(*an);
      for (std::size_t i = 0; i < sz; ++i) an->grad.data[i] += self.grad.data[i] * bn->value.data[i];
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      for (std::size_t i = 0; i < sz; ++i) bn->grad.data[i] += self.grad.data[i] * an->value.data[i];
    }
  });
}

Var scale(const Var& x, double k) {
  Tensor4 out = x.value();
  for (auto& v : out.data) v *= k;
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn, k](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const std::size_t sz = self.value.size();
    for (std::size_t i = 0; i < sz; ++i) xn->grad.data[i] += self.grad.data[i] * k;
  });
}

Var neg(const Var& x) { return scale(x, -1.0); }

Var relu(const Var& x) {
  Tensor4 out = x.value();
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const std::size_t sz = self.value.size();
    for (std::size_t i = 0; i < sz; ++i) {
      if (xn->value.data[i] > 0.0) xn->grad.data[i] += self.grad.data[i];
    }
  });
}

Var leaky_relu(const Var& x, double slope) {
  Tensor4 out = x.value();
  for (auto& v : out.data) v = v > 0.0 ? v : v * slope;
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn, slope](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const std::size_t sz = self.value.size();
    for (std::size_t i = 0; i < sz; ++i) {
      xn->grad.data[i] += self.grad.data[i] * (xn->value.data[i] > 0.0 ? 1.0 : slope);
    }
  });
}

Var square(const Var& x) {
  Tensor4 out = x.value();
  for (auto& v : out.data) v *= v;
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const std::size_t sz = self.value.size();
    for (std::size_t i = 0; i < sz; ++i) {
      xn->grad.data[i] += self.grad.data[i] * 2.0 * xn->value.data[i];
    }
  });
}

Var softplus(const Var& x) { return elementwise_unary(x, &stable_softplus, &stable_sigmoid); }

// --- reductions / broadcasts ---

Var mean_all(const Var& x) {
  double sum = 0.0;
  for (double v : x.value().data) sum += v;
  const double inv = 1.0 / static_cast<double>(x.value().size());
  auto xn = x.node();
  return make_op(Tensor4::scalar(sum * inv), {xn}, [xn, inv](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const double g = self.grad.data[0] * inv;
    for (auto& v : xn->grad.data) v += g;
  });
}

Var mean_abs(const Var& x) {
  double sum = 0.0;
  for (double v : x.value().data) sum += std::abs(v);
  const double inv = 1.0 / static_cast<double>(x.value().size());
  auto xn = x.node();
  return make_op(Tensor4::scalar(sum * inv), {xn}, [xn, inv](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const double g = self.grad.data[0] * inv;
    const std::size_t sz = xn->value.size();
    for (std::size_t i = 0; i < sz; ++i) {
      const double v = xn->value.data[i];
      if (v > 0.0) xn->grad.data[i] += g;
      else if (v < 0.0) xn->grad.data[i] -= g;
      // subgradient 0 at exact ties
    }
  });
}

Var mean_square(const Var& x) {
  double sum = 0.0;
  for (double v : x.value().data) sum += v * v;
  const double inv = 1.0 / static_cast<double>(x.value().size());
  auto xn = x.node();
  return make_op(Tensor4::scalar(sum * inv), {xn}, [xn, inv](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const double g = self.grad.data[0] * inv * 2.0;
    const std::size_t sz = xn->value.size();
    for (std::size_t i = 0; i < sz; ++i) xn->grad.data[i] += g * xn->value.data[i];
  });
}

Var channel_mean(const Var& x) {
  const Tensor4& xv = x.value();
  Tensor4 out(1, xv.c, 1, 1);
  const double inv = 1.0 / (static_cast<double>(xv.n) * xv.h * xv.w);
  for (int ci = 0; ci < xv.c; ++ci) {
    double sum = 0.0;
    for (int ni = 0; ni < xv.n; ++ni) {
      const double* p = xv.plane(ni, ci);
      for (int i = 0; i < xv.h * xv.w; ++i) sum += p[i];
    }
    out.data[ci] = sum * inv;
  }
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn, inv](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const Tensor4& xv = xn->value;
    for (int ci = 0; ci < xv.c; ++ci) {
      const double g = self.grad.data[ci] * inv;
      for (int ni = 0; ni < xv.n; ++ni) {
        double* p = xn->grad.plane(ni, ci);
        for (int i = 0; i < xv.h * xv.w; ++i) p[i] += g;
      }
    }
  });
}

namespace {

enum class BcastOp { Add, Sub, Mul };

Var bcast_binary(const Var& x, const Var& s, BcastOp op) {
  const Tensor4& xv = x.value();
  const Tensor4& sv = s.value();
  const bool per_channel = sv.c == xv.c && sv.n == 1 && sv.h == 1 && sv.w == 1;
  const bool scalar = sv.size() == 1;
  if (!per_channel && !scalar) throw ShapeError("bcast: rhs must be (1,1,1,1) or (1,C,1,1)");

  Tensor4 out = xv;
  const int plane_sz = xv.h * xv.w;
  for (int ni = 0; ni < xv.n; ++ni) {
    for (int ci = 0; ci < xv.c; ++ci) {
      const double sval = scalar ? sv.data[0] : sv.data[ci];
      double* p = out.plane(ni, ci);
      switch (op) {
        case BcastOp::Add:
          for (int i = 0; i < plane_sz; ++i) p[i] += sval;
          break;
        case BcastOp::Sub:
          for (int i = 0; i < plane_sz; ++i) p[i] -= sval;
          break;
        case BcastOp::Mul:
          for (int i = 0; i < plane_sz; ++i) p[i] *= sval;
          break;
      }
    }
  }
  auto xn = x.node(), sn = s.node();
  return make_op(std::move(out), {xn, sn}, [xn, sn, op, scalar](Node& self) {
    const Tensor4& xv = xn->value;
    const Tensor4& sv = sn->value;
    const int plane_sz = xv.h * xv.w;
    if (xn->requires_grad) {
      ensure_grad(*xn);
      const std::size_t sz = xv.size();
      if (op == BcastOp::Mul) {
        for (int ni = 0; ni < xv.n; ++ni) {
          for (int ci = 0; ci < xv.c; ++ci) {
            const double sval = scalar ? sv.data[0] : sv.data[ci];
            const double* g = self.grad.plane(ni, ci);
            double* dx = xn->grad.plane(ni, ci);
            for (int i = 0; i < plane_sz; ++i) dx[i] += g[i] * sval;
          }
        }
      } else {
        for (std::size_t i = 0; i < sz; ++i) xn->grad.data[i] += self.grad.data[i];
      }
    }
    if (sn->requires_grad) {
      ensure_grad(*sn);
      for (int ci = 0; ci < xv.c; ++ci) {
        double acc = 0.0;
        for (int ni = 0; ni < xv.n; ++ni) {
          const double* g = self.grad.plane(ni, ci);
          if (op == BcastOp::Mul) {
            const double* px = xv.plane(ni, ci);
            for (int i = 0; i < plane_sz; ++i) acc += g[i] * px[i];
          } else {
            for (int i = 0; i < plane_sz; ++i) acc += g[i];
          }
        }
        if (op == BcastOp::Sub) acc = -acc;
        sn->grad.data[scalar ? 0 : ci] += acc;
      }
    }
  });
}

}  // namespace

Var sub_bcast(const Var& x, const Var& s) { return bcast_binary(x, s, BcastOp::Sub); }
Var add_bcast(const Var& x, const Var& s) { return bcast_binary(x, s, BcastOp::Add); }
Var mul_bcast(const Var& x, const Var& s) { return bcast_binary(x, s, BcastOp::Mul); }

Var rsqrt_eps(const Var& x, double eps) {
  Tensor4 out = x.value();
  for (auto& v : out.data) v = 1.0 / std::sqrt(v + eps);
  auto xn = x.node();
  Tensor4 saved = out;
  return make_op(std::move(out), {xn}, [xn, saved](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const std::size_t sz = saved.size();
    for (std::size_t i = 0; i < sz; ++i) {
      const double y = saved.data[i];
      xn->grad.data[i] += self.grad.data[i] * (-0.5 * y * y * y);
    }
  });
}

// --- structure ---

Var concat_channels(const std::vector<Var>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: empty input");
  const Tensor4& first = xs[0].value();
  int total_c = 0;
  for (const auto& x : xs) {
    const Tensor4& v = x.value();
    if (v.n != first.n || v.h != first.h || v.w != first.w)
      throw ShapeError("concat_channels: spatial/batch mismatch");
    total_c += v.c;
  }
  Tensor4 out(first.n, total_c, first.h, first.w);
  const int plane_sz = first.h * first.w;
  int c_off = 0;
  for (const auto& x : xs) {
    const Tensor4& v = x.value();
    for (int ni = 0; ni < v.n; ++ni) {
      for (int ci = 0; ci < v.c; ++ci) {
        std::copy_n(v.plane(ni, ci), plane_sz, out.plane(ni, c_off + ci));
      }
    }
    c_off += v.c;
  }
  std::vector<std::shared_ptr<Node>> parents;
  parents.reserve(xs.size());
  for (const auto& x : xs) parents.push_back(x.node());
  return make_op(std::move(out), parents, [parents, plane_sz](Node& self) {
    int c_off = 0;
    for (const auto& p : parents) {
      const Tensor4& v = p->value;
      if (p->requires_grad) {
        ensure_grad(*p);
        for (int ni = 0; ni < v.n; ++ni) {
          for (int ci = 0; ci < v.c; ++ci) {
            const double* g = self.grad.plane(ni, c_off + ci);
            double* dst = p->grad.plane(ni, ci);
            for (int i = 0; i < plane_sz; ++i) dst[i] += g[i];
          }
        }
      }
      c_off += v.c;
    }
  });
}

Var reshape(const Var& x, int n, int c, int h, int w) {
  const Tensor4& xv = x.value();
  if (static_cast<std::size_t>(n) * c * h * w != xv.size())
    throw ShapeError("reshape: element count mismatch");
  Tensor4 out(n, c, h, w);
  out.data = xv.data;
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const std::size_t sz = self.grad.size();
    for (std::size_t i = 0; i < sz; ++i) xn->grad.data[i] += self.grad.data[i];
  });
}

Var crop_spatial(const Var& x, int y0, int x0, int h, int w) {
  const Tensor4& xv = x.value();
  if (y0 < 0 || x0 < 0 || y0 + h > xv.h || x0 + w > xv.w)
    throw ShapeError("crop_spatial: window out of bounds");
  Tensor4 out(xv.n, xv.c, h, w);
  for (int ni = 0; ni < xv.n; ++ni) {
    for (int ci = 0; ci < xv.c; ++ci) {
      const double* src = xv.plane(ni, ci);
      double* dst = out.plane(ni, ci);
      for (int y = 0; y < h; ++y) {
        std::copy_n(src + static_cast<std::size_t>(y0 + y) * xv.w + x0, w,
                    dst + static_cast<std::size_t>(y) * w);
      }
    }
  }
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn, y0, x0, h, w](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const Tensor4& xv = xn->value;
    for (int ni = 0; ni < xv.n; ++ni) {
      for (int ci = 0; ci < xv.c; ++ci) {
        const double* g = self.grad.plane(ni, ci);
        double* dst = xn->grad.plane(ni, ci);
        for (int y = 0; y < h; ++y) {
          for (int xi = 0; xi < w; ++xi) {
            dst[static_cast<std::size_t>(y0 + y) * xv.w + x0 + xi] +=
                g[static_cast<std::size_t>(y) * w + xi];
          }
        }
      }
    }
  });
}

Var embed_spatial(const Var& x, int out_h, int out_w, int y0, int x0) {
  const Tensor4& xv = x.value();
  if (y0 < 0 || x0 < 0 || y0 + xv.h > out_h || x0 + xv.w > out_w)
    throw ShapeError("embed_spatial: window out of bounds");
  Tensor4 out(xv.n, xv.c, out_h, out_w);
  for (int ni = 0; ni < xv.n; ++ni) {
    for (int ci = 0; ci < xv.c; ++ci) {
      const double* src = xv.plane(ni, ci);
      double* dst = out.plane(ni, ci);
      for (int y = 0; y < xv.h; ++y) {
        std::copy_n(src + static_cast<std::size_t>(y) * xv.w, xv.w,
                    dst + static_cast<std::size_t>(y0 + y) * out_w + x0);
      }
    }
  }
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn, out_w, y0, x0](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const Tensor4& xv = xn->value;
    for (int ni = 0; ni < xv.n; ++ni) {
      for (int ci = 0; ci < xv.c; ++ci) {
        const double* g = self.grad.plane(ni, ci);
        double* dst = xn->grad.plane(ni, ci);
        for (int y = 0; y < xv.h; ++y) {
          for (int xi = 0; xi < xv.w; ++xi) {
            dst[static_cast<std::size_t>(y) * xv.w + xi] +=
                g[static_cast<std::size_t>(y0 + y) * out_w + x0 + xi];
          }
        }
      }
    }
  });
}

namespace {

// Mirror index for reflect padding, folding as often as needed; degenerates
// to a constant for extent 1.
int reflect_index(int i, int size) {
  if (i < size) return i;
  if (size == 1) return 0;
  const int period = 2 * size - 2;
  i %= period;
  return i < size ? i : period - i;
}

}  // namespace

Var reflect_pad_br(const Var& x, int out_h, int out_w) {
  const Tensor4& xv = x.value();
  if (out_h < xv.h || out_w < xv.w) throw ShapeError("reflect_pad_br: output smaller than input");
  Tensor4 out(xv.n, xv.c, out_h, out_w);
  for (int ni = 0; ni < xv.n; ++ni) {
    for (int ci = 0; ci < xv.c; ++ci) {
      const double* src = xv.plane(ni, ci);
      double* dst = out.plane(ni, ci);
      for (int y = 0; y < out_h; ++y) {
        const int sy = reflect_index(y, xv.h);
        const double* srow = src + static_cast<std::size_t>(sy) * xv.w;
        double* drow = dst + static_cast<std::size_t>(y) * out_w;
        for (int xi = 0; xi < out_w; ++xi) drow[xi] = srow[reflect_index(xi, xv.w)];
      }
    }
  }
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn, out_h, out_w](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const Tensor4& xv = xn->value;
    for (int ni = 0; ni < xv.n; ++ni) {
      for (int ci = 0; ci < xv.c; ++ci) {
        const double* g = self.grad.plane(ni, ci);
        double* dst = xn->grad.plane(ni, ci);
        for (int y = 0; y < out_h; ++y) {
          const int sy = reflect_index(y, xv.h);
          const double* grow = g + static_cast<std::size_t>(y) * out_w;
          double* drow = dst + static_cast<std::size_t>(sy) * xv.w;
          for (int xi = 0; xi < out_w; ++xi) drow[reflect_index(xi, xv.w)] += grow[xi];
        }
      }
    }
  });
}

// --- conv / pooling / resampling ---

namespace {

void conv2d_forward_kernel(const Tensor4& x, const Tensor4& w, const Tensor4& b, Tensor4& out,
                           int stride, int pad) {
  const int oh = out.h, ow = out.w;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
  for (int ni = 0; ni < x.n; ++ni) {
    for (int co = 0; co < w.n; ++co) {
      double* op = out.plane(ni, co);
      const double bias = b.data[co];
      for (int i = 0; i < oh * ow; ++i) op[i] = bias;
      for (int ci = 0; ci < x.c; ++ci) {
        const double* xp = x.plane(ni, ci);
        for (int ky = 0; ky < w.h; ++ky) {
          for (int kx = 0; kx < w.w; ++kx) {
            const double wv = w.at(co, ci, ky, kx);
            if (wv == 0.0) continue;
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= x.h) continue;
              const double* xrow = xp + static_cast<std::size_t>(iy) * x.w;
              double* orow = op + static_cast<std::size_t>(oy) * ow;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= x.w) continue;
                orow[ox] += wv * xrow[ix];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Tensor4& xv = x.value();
  const Tensor4& wv = w.value();
  const Tensor4& bv = b.value();
  if (wv.c != xv.c)
    throw ConfigError("conv2d: input has " + std::to_string(xv.c) + " channels, kernel expects " +
                      std::to_string(wv.c));
  if (bv.size() != static_cast<std::size_t>(wv.n)) throw ShapeError("conv2d: bias size mismatch");
  const int oh = (xv.h + 2 * pad - wv.h) / stride + 1;
  const int ow = (xv.w + 2 * pad - wv.w) / stride + 1;
  if (oh < 1 || ow < 1) throw ShapeError("conv2d: output would be empty");

  Tensor4 out(xv.n, wv.n, oh, ow);
  conv2d_forward_kernel(xv, wv, bv, out, stride, pad);

  auto xn = x.node(), wn = w.node(), bn = b.node();
  return make_op(std::move(out), {xn, wn, bn}, [xn, wn, bn, stride, pad](Node& self) {
    const Tensor4& xv = xn->value;
    const Tensor4& wv = wn->value;
    const Tensor4& gy = self.grad;

    if (xn->requires_grad) {
      ensure_grad(*xn);
      Tensor4& gx = xn->grad;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
      for (int ni = 0; ni < xv.n; ++ni) {
        for (int ci = 0; ci < xv.c; ++ci) {
          double* gxp = gx.plane(ni, ci);
          for (int co = 0; co < wv.n; ++co) {
            const double* gyp = gy.plane(ni, co);
            for (int ky = 0; ky < wv.h; ++ky) {
              for (int kx = 0; kx < wv.w; ++kx) {
                const double wval = wv.at(co, ci, ky, kx);
                if (wval == 0.0) continue;
                for (int oy = 0; oy < gy.h; ++oy) {
                  const int iy = oy * stride + ky - pad;
                  if (iy < 0 || iy >= xv.h) continue;
                  const double* gyrow = gyp + static_cast<std::size_t>(oy) * gy.w;
                  double* gxrow = gxp + static_cast<std::size_t>(iy) * xv.w;
                  for (int ox = 0; ox < gy.w; ++ox) {
                    const int ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= xv.w) continue;
                    gxrow[ix] += wval * gyrow[ox];
                  }
                }
              }
            }
          }
        }
      }
    }

    if (wn->requires_grad) {
      ensure_grad(*wn);
      Tensor4& gw = wn->grad;
#ifdef _OPENMP
#pragma omp parallel for collapse(2) schedule(static)
#endif
      for (int co = 0; co < wv.n; ++co) {
        for (int ci = 0; ci < wv.c; ++ci) {
          for (int ky = 0; ky < wv.h; ++ky) {
            for (int kx = 0; kx < wv.w; ++kx) {
              double acc = 0.0;
              for (int ni = 0; ni < xv.n; ++ni) {
                const double* gyp = gy.plane(ni, co);
                const double* xp = xv.plane(ni, ci);
                for (int oy = 0; oy < gy.h; ++oy) {
                  const int iy = oy * stride + ky - pad;
                  if (iy < 0 || iy >= xv.h) continue;
                  const double* gyrow = gyp + static_cast<std::size_t>(oy) * gy.w;
                  const double* xrow = xp + static_cast<std::size_t>(iy) * xv.w;
                  for (int ox = 0; ox < gy.w; ++ox) {
                    const int ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= xv.w) continue;
                    acc += gyrow[ox] * xrow[ix];
                  }
                }
              }
              gw.at(co, ci, ky, kx) += acc;
            }
          }
        }
      }
    }

    if (bn->requires_grad) {
      ensure_grad(*bn);
      for (int co = 0; co < wv.n; ++co) {
        double acc = 0.0;
        for (int ni = 0; ni < xv.n; ++ni) {
          const double* gyp = gy.plane(ni, co);
          for (int i = 0; i < gy.h * gy.w; ++i) acc += gyp[i];
        }
        bn->grad.data[co] += acc;
      }
    }
  });
}

Var conv_transpose2x(const Var& x, const Var& w, const Var& b) {
  const Tensor4& xv = x.value();
  const Tensor4& wv = w.value();  // (ci, co, 2, 2)
  if (wv.n != xv.c) throw ConfigError("conv_transpose2x: channel mismatch");
  if (wv.h != 2 || wv.w != 2) throw ShapeError("conv_transpose2x: kernel must be 2x2");
  const int co_n = wv.c;
  Tensor4 out(xv.n, co_n, xv.h * 2, xv.w * 2);
  for (int ni = 0; ni < xv.n; ++ni) {
    for (int co = 0; co < co_n; ++co) {
      double* op = out.plane(ni, co);
      const double bias = b.value().data[co];
      for (int i = 0; i < out.h * out.w; ++i) op[i] = bias;
      for (int ci = 0; ci < xv.c; ++ci) {
        const double* xp = xv.plane(ni, ci);
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const double wval = wv.at(ci, co, dy, dx);
            for (int y = 0; y < xv.h; ++y) {
              const double* xrow = xp + static_cast<std::size_t>(y) * xv.w;
              double* orow = op + static_cast<std::size_t>(2 * y + dy) * out.w + dx;
              for (int xi = 0; xi < xv.w; ++xi) orow[2 * xi] += wval * xrow[xi];
            }
          }
        }
      }
    }
  }
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return make_op(std::move(out), {xn, wn, bn}, [xn, wn, bn](Node& self) {
    const Tensor4& xv = xn->value;
    const Tensor4& wv = wn->value;
    const Tensor4& gy = self.grad;
    const int co_n = wv.c;
    if (xn->requires_grad) {
      ensure_grad(*xn);
      for (int ni = 0; ni < xv.n; ++ni) {
        for (int ci = 0; ci < xv.c; ++ci) {
          double* gxp = xn->grad.plane(ni, ci);
          for (int co = 0; co < co_n; ++co) {
            const double* gyp = gy.plane(ni, co);
            for (int dy = 0; dy < 2; ++dy) {
              for (int dx = 0; dx < 2; ++dx) {
                const double wval = wv.at(ci, co, dy, dx);
                for (int y = 0; y < xv.h; ++y) {
                  const double* gyrow = gyp + static_cast<std::size_t>(2 * y + dy) * gy.w + dx;
                  double* gxrow = gxp + static_cast<std::size_t>(y) * xv.w;
                  for (int xi = 0; xi < xv.w; ++xi) gxrow[xi] += wval * gyrow[2 * xi];
                }
              }
            }
          }
        }
      }
    }
    if (wn->requires_grad) {
      ensure_grad(*wn);
      for (int ci = 0; ci < xv.c; ++ci) {
        for (int co = 0; co < co_n; ++co) {
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              double acc = 0.0;
              for (int ni = 0; ni < xv.n; ++ni) {
                const double* xp = xv.plane(ni, ci);
                const double* gyp = gy.plane(ni, co);
                for (int y = 0; y < xv.h; ++y) {
                  const double* xrow = xp + static_cast<std::size_t>(y) * xv.w;
                  const double* gyrow = gyp + static_cast<std::size_t>(2 * y + dy) * gy.w + dx;
                  for (int xi = 0; xi < xv.w; ++xi) acc += xrow[xi] * gyrow[2 * xi];
                }
              }
              wn->grad.at(ci, co, dy, dx) += acc;
            }
          }
        }
      }
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
      for (int co = 0; co < co_n; ++co) {
        double acc = 0.0;
        for (int ni = 0; ni < gy.n; ++ni) {
          const double* gyp = gy.plane(ni, co);
          for (int i = 0; i < gy.h * gy.w; ++i) acc += gyp[i];
        }
        bn->grad.data[co] += acc;
      }
    }
  });
}

Var maxpool2x2(const Var& x) {
  const Tensor4& xv = x.value();
  if (xv.h % 2 != 0 || xv.w % 2 != 0) throw ShapeError("maxpool2x2: odd spatial dims");
  Tensor4 out(xv.n, xv.c, xv.h / 2, xv.w / 2);
  std::vector<std::uint32_t> argmax(out.size());
  for (int ni = 0; ni < xv.n; ++ni) {
    for (int ci = 0; ci < xv.c; ++ci) {
      const double* xp = xv.plane(ni, ci);
      double* op = out.plane(ni, ci);
      std::uint32_t* ap = argmax.data() + (static_cast<std::size_t>(ni) * xv.c + ci) * out.h * out.w;
      for (int oy = 0; oy < out.h; ++oy) {
        for (int ox = 0; ox < out.w; ++ox) {
          double best = -std::numeric_limits<double>::infinity();
          std::uint32_t best_idx = 0;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const std::uint32_t idx = static_cast<std::uint32_t>((2 * oy + dy) * xv.w + 2 * ox + dx);
              const double v = xp[idx];
              if (v > best) {
                best = v;
                best_idx = idx;
              }
            }
          }
          op[static_cast<std::size_t>(oy) * out.w + ox] = best;
          ap[static_cast<std::size_t>(oy) * out.w + ox] = best_idx;
        }
      }
    }
  }
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn, argmax = std::move(argmax)](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const Tensor4& xv = xn->value;
    const int plane_out = self.value.h * self.value.w;
    for (int ni = 0; ni < xv.n; ++ni) {
      for (int ci = 0; ci < xv.c; ++ci) {
        const double* g = self.grad.plane(ni, ci);
        double* dst = xn->grad.plane(ni, ci);
        const std::uint32_t* ap =
            argmax.data() + (static_cast<std::size_t>(ni) * xv.c + ci) * plane_out;
        for (int i = 0; i < plane_out; ++i) dst[ap[i]] += g[i];
      }
    }
  });
}

Var upsample_bilinear2x(const Var& x) {
  const Tensor4& xv = x.value();
  const int oh = xv.h * 2, ow = xv.w * 2;
  Tensor4 out(xv.n, xv.c, oh, ow);
  // align_corners=false source mapping: s = (o + 0.5)/2 - 0.5
  auto coords = [](int o, int limit, int& i0, int& i1, double& f) {
    const double s = (o + 0.5) * 0.5 - 0.5;
    double fl = std::floor(s);
    f = s - fl;
    i0 = static_cast<int>(fl);
    i1 = i0 + 1;
    if (i0 < 0) i0 = 0;
    if (i1 < 0) i1 = 0;
    if (i0 > limit - 1) i0 = limit - 1;
    if (i1 > limit - 1) i1 = limit - 1;
  };
  for (int ni = 0; ni < xv.n; ++ni) {
    for (int ci = 0; ci < xv.c; ++ci) {
      const double* xp = xv.plane(ni, ci);
      double* op = out.plane(ni, ci);
      for (int oy = 0; oy < oh; ++oy) {
        int y0, y1;
        double fy;
        coords(oy, xv.h, y0, y1, fy);
        for (int ox = 0; ox < ow; ++ox) {
          int x0, x1;
          double fx;
          coords(ox, xv.w, x0, x1, fx);
          const double v00 = xp[static_cast<std::size_t>(y0) * xv.w + x0];
          const double v01 = xp[static_cast<std::size_t>(y0) * xv.w + x1];
          const double v10 = xp[static_cast<std::size_t>(y1) * xv.w + x0];
          const double v11 = xp[static_cast<std::size_t>(y1) * xv.w + x1];
          op[static_cast<std::size_t>(oy) * ow + ox] =
              (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
        }
      }
    }
  }
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn, coords](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const Tensor4& xv = xn->value;
    const int oh = self.value.h, ow = self.value.w;
    for (int ni = 0; ni < xv.n; ++ni) {
      for (int ci = 0; ci < xv.c; ++ci) {
        const double* g = self.grad.plane(ni, ci);
        double* dst = xn->grad.plane(ni, ci);
        for (int oy = 0; oy < oh; ++oy) {
          int y0, y1;
          double fy;
          coords(oy, xv.h, y0, y1, fy);
          for (int ox = 0; ox < ow; ++ox) {
            int x0, x1;
            double fx;
            coords(ox, xv.w, x0, x1, fx);
            const double gv = g[static_cast<std::size_t>(oy) * ow + ox];
            dst[static_cast<std::size_t>(y0) * xv.w + x0] += (1 - fy) * (1 - fx) * gv;
            dst[static_cast<std::size_t>(y0) * xv.w + x1] += (1 - fy) * fx * gv;
            dst[static_cast<std::size_t>(y1) * xv.w + x0] += fy * (1 - fx) * gv;
            dst[static_cast<std::size_t>(y1) * xv.w + x1] += fy * fx * gv;
          }
        }
      }
    }
  });
}

// --- attention primitives ---

Var matmul(const Var& a, const Var& b) {
  const Tensor4& av = a.value();
  const Tensor4& bv = b.value();
  if (av.c != 1 || bv.c != 1 || av.n != bv.n || av.w != bv.h)
    throw ShapeError("matmul: expects (N,1,R,K) x (N,1,K,C)");
  const int R = av.h, K = av.w, C = bv.w;
  Tensor4 out(av.n, 1, R, C);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int ni = 0; ni < av.n; ++ni) {
    const double* ap = av.plane(ni, 0);
    const double* bp = bv.plane(ni, 0);
    double* op = out.plane(ni, 0);
    for (int r = 0; r < R; ++r) {
      double* orow = op + static_cast<std::size_t>(r) * C;
      for (int k = 0; k < K; ++k) {
        const double aval = ap[static_cast<std::size_t>(r) * K + k];
        if (aval == 0.0) continue;
        const double* brow = bp + static_cast<std::size_t>(k) * C;
        for (int ci = 0; ci < C; ++ci) orow[ci] += aval * brow[ci];
      }
    }
  }
  auto an = a.node(), bn = b.node();
  return make_op(std::move(out), {an, bn}, [an, bn](Node& self) {
    const Tensor4& av = an->value;
    const Tensor4& bv = bn->value;
    const Tensor4& gy = self.grad;
    const int R = av.h, K = av.w, C = bv.w;
    if (an->requires_grad) {
      ensure_grad(*an);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (int ni = 0; ni < av.n; ++ni) {
        const double* gp = gy.plane(ni, 0);
        const double* bp = bv.plane(ni, 0);
        double* dap = an->grad.plane(ni, 0);
        for (int r = 0; r < R; ++r) {
          const double* grow = gp + static_cast<std::size_t>(r) * C;
          double* darow = dap + static_cast<std::size_t>(r) * K;
          for (int k = 0; k < K; ++k) {
            const double* brow = bp + static_cast<std::size_t>(k) * C;
            double acc = 0.0;
            for (int ci = 0; ci < C; ++ci) acc += grow[ci] * brow[ci];
            darow[k] += acc;
          }
        }
      }
    }
    if (bn->requires_grad) {
      ensure_grad(*bn);
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
      for (int ni = 0; ni < av.n; ++ni) {
        const double* gp = gy.plane(ni, 0);
        const double* ap = av.plane(ni, 0);
        double* dbp = bn->grad.plane(ni, 0);
        for (int k = 0; k < K; ++k) {
          double* dbrow = dbp + static_cast<std::size_t>(k) * C;
          for (int r = 0; r < R; ++r) {
            const double aval = ap[static_cast<std::size_t>(r) * K + k];
            if (aval == 0.0) continue;
            const double* grow = gp + static_cast<std::size_t>(r) * C;
            for (int ci = 0; ci < C; ++ci) dbrow[ci] += aval * grow[ci];
          }
        }
      }
    }
  });
}

Var transpose_mat(const Var& x) {
  const Tensor4& xv = x.value();
  if (xv.c != 1) throw ShapeError("transpose_mat: expects (N,1,R,C)");
  Tensor4 out(xv.n, 1, xv.w, xv.h);
  for (int ni = 0; ni < xv.n; ++ni) {
    const double* xp = xv.plane(ni, 0);
    double* op = out.plane(ni, 0);
    for (int r = 0; r < xv.h; ++r) {
      for (int c = 0; c < xv.w; ++c) {
        op[static_cast<std::size_t>(c) * xv.h + r] = xp[static_cast<std::size_t>(r) * xv.w + c];
      }
    }
  }
  auto xn = x.node();
  return make_op(std::move(out), {xn}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const Tensor4& xv = xn->value;
    for (int ni = 0; ni < xv.n; ++ni) {
      const double* g = self.grad.plane(ni, 0);
      double* dst = xn->grad.plane(ni, 0);
      for (int r = 0; r < xv.h; ++r) {
        for (int c = 0; c < xv.w; ++c) {
          dst[static_cast<std::size_t>(r) * xv.w + c] += g[static_cast<std::size_t>(c) * xv.h + r];
        }
      }
    }
  });
}

Var softmax_lastdim(const Var& x) {
  const Tensor4& xv = x.value();
  Tensor4 out = xv;
  const int rows = xv.n * xv.c * xv.h;
  const int W = xv.w;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int r = 0; r < rows; ++r) {
    double* row = out.data.data() + static_cast<std::size_t>(r) * W;
    double mx = row[0];
    for (int i = 1; i < W; ++i) mx = std::max(mx, row[i]);
    double sum = 0.0;
    for (int i = 0; i < W; ++i) {
      row[i] = std::exp(row[i] - mx);
      sum += row[i];
    }
    const double inv = 1.0 / sum;
    for (int i = 0; i < W; ++i) row[i] *= inv;
  }
  auto xn = x.node();
  Tensor4 saved = out;
  return make_op(std::move(out), {xn}, [xn, saved](Node& self) {
    if (!xn->requires_grad) return;
    ensure_grad(*xn);
    const int W = saved.w;
    const int rows = saved.n * saved.c * saved.h;
#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int r = 0; r < rows; ++r) {
      const double* a = saved.data.data() + static_cast<std::size_t>(r) * W;
      const double* g = self.grad.data.data() + static_cast<std::size_t>(r) * W;
      double* dst = xn->grad.data.data() + static_cast<std::size_t>(r) * W;
      double dot = 0.0;
      for (int i = 0; i < W; ++i) dot += g[i] * a[i];
      for (int i = 0; i < W; ++i) dst[i] += a[i] * (g[i] - dot);
    }
  });
}

}  // namespace msgdn::autograd
