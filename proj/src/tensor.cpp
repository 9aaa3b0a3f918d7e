#include "tnt/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <utility>

namespace tnt {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace {

using detail::TensorImpl;
using ImplPtr = std::shared_ptr<TensorImpl>;

thread_local Tape* g_active_tape = nullptr;

void check_defined(const Tensor& t, const char* who) {
  if (!t.defined()) throw usage_error(msg(who, ": undefined tensor"));
}

// True when the op must record a backward rule.
bool tracing(std::initializer_list<const Tensor*> ins) {
  if (!g_active_tape) return false;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

void mark_out(Tensor& out) { out.ptr()->requires_grad = true; }

using RM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RM>;
using MMap = Eigen::Map<RM>;

// C[m,n] (+)= A[m,k] B[k,n]
void gemm_nn(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c,
             bool acc) {
  CMap A(a, m, k);
  CMap B(b, k, n);
  MMap C(c, m, n);
  if (acc)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

// C[m,n] (+)= A[m,k] * B^T, with B stored as [n,k]
void gemm_nt(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c,
             bool acc) {
  CMap A(a, m, k);
  CMap B(b, n, k);
  MMap C(c, m, n);
  if (acc)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

// C[m,n] (+)= A^T * B, with A stored as [k,m]
void gemm_tn(int64_t m, int64_t n, int64_t k, const double* a, const double* b, double* c,
             bool acc) {
  CMap A(a, k, m);
  CMap B(b, k, n);
  MMap C(c, m, n);
  if (acc)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

void transpose_raw(int64_t outer, int64_t m, int64_t n, const double* src, double* dst,
                   bool acc) {
  for (int64_t o = 0; o < outer; ++o) {
    const double* s = src + o * m * n;
    double* d = dst + o * m * n;
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) {
        if (acc)
          d[j * m + i] += s[i * n + j];
        else
          d[j * m + i] = s[i * n + j];
      }
  }
}

struct AxisSplit {
  int64_t outer, len, inner;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit a{1, s[static_cast<size_t>(axis)], 1};
  for (int i = 0; i < axis; ++i) a.outer *= s[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

void check_axis(const Tensor& t, int axis, const char* who) {
  if (axis < 0 || axis >= t.rank())
    throw shape_error(msg(who, ": axis ", axis, " out of range for shape ", shape_str(t.shape())));
}

}  // namespace

// ---- Tensor ----

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  int64_t n = shape_numel(shape);
  if (n < 0) throw shape_error(msg("zeros: negative extent in ", shape_str(shape)));
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<size_t>(n), 0.0);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t = zeros(std::move(shape));
  std::fill(t.ptr()->data.begin(), t.ptr()->data.end(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw shape_error(msg("from: ", values.size(), " values for shape ", shape_str(shape)));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double v) { return from({1}, {v}); }

const Shape& Tensor::shape() const {
  if (!impl_) throw usage_error("shape: undefined tensor");
  return impl_->shape;
}

int64_t Tensor::dim(int axis) const {
  check_axis(*this, axis, "dim");
  return shape()[static_cast<size_t>(axis)];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(data().size()); }

std::span<double> Tensor::data() {
  if (!impl_) throw usage_error("data: undefined tensor");
  return impl_->data;
}

std::span<const double> Tensor::data() const {
  if (!impl_) throw usage_error("data: undefined tensor");
  return impl_->data;
}

double Tensor::value() const {
  if (numel() != 1) throw usage_error(msg("value: tensor has shape ", shape_str(shape())));
  return data()[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  if (!impl_) throw usage_error("set_requires_grad: undefined tensor");
  impl_->requires_grad = v;
  return *this;
}

std::span<const double> Tensor::grad() const {
  if (!impl_) throw usage_error("grad: undefined tensor");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (!impl_) throw usage_error("zero_grad: undefined tensor");
  impl_->ensure_grad();
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  if (!impl_) throw usage_error("detach: undefined tensor");
  return from(impl_->shape, impl_->data, false);
}

// ---- Tape ----

Tape::Tape() {
  if (g_active_tape)
    throw usage_error("Tape: a tape is already active on this thread; tapes do not nest");
  g_active_tape = this;
}

Tape::~Tape() {
  if (g_active_tape == this) g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> rule) { rules_.push_back(std::move(rule)); }

void Tape::backward(const Tensor& loss) {
  check_defined(loss, "backward");
  if (loss.numel() != 1)
    throw usage_error(msg("backward: loss must be scalar, got ", shape_str(loss.shape())));
  if (consumed_) throw usage_error("backward: tape already consumed");
  consumed_ = true;
  loss.ptr()->ensure_grad();
  loss.ptr()->grad[0] = 1.0;
  for (auto it = rules_.rbegin(); it != rules_.rend(); ++it) (*it)();
}

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  int64_t batch = 1, m, k, n;
  Shape out_shape;
  if (sa.size() == 2 && sb.size() == 2) {
    m = sa[0], k = sa[1], n = sb[1];
    if (sb[0] != k)
      throw shape_error(msg("matmul: ", shape_str(sa), " x ", shape_str(sb)));
    out_shape = {m, n};
  } else if (sa.size() == 3 && sb.size() == 3) {
    batch = sa[0], m = sa[1], k = sa[2], n = sb[2];
    if (sb[0] != batch || sb[1] != k)
      throw shape_error(msg("matmul: ", shape_str(sa), " x ", shape_str(sb)));
    out_shape = {batch, m, n};
  } else {
    throw shape_error(msg("matmul: unsupported ranks ", shape_str(sa), " x ", shape_str(sb)));
  }
  Tensor out = Tensor::zeros(out_shape);
  {
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = out.data().data();
    for (int64_t i = 0; i < batch; ++i)
      gemm_nn(m, n, k, pa + i * m * k, pb + i * k * n, pc + i * m * n, false);
  }
  if (tracing({&a, &b})) {
    mark_out(out);
    ImplPtr ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
    g_active_tape->record([ai, bi, oi, batch, m, k, n] {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (int64_t i = 0; i < batch; ++i)
          gemm_nt(m, k, n, g + i * m * n, bi->data.data() + i * k * n,
                  ai->grad.data() + i * m * k, true);
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (int64_t i = 0; i < batch; ++i)
          gemm_tn(k, n, m, ai->data.data() + i * m * k, g + i * m * n,
                  bi->grad.data() + i * k * n, true);
      }
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  check_defined(a, "transpose");
  const Shape& s = a.shape();
  if (s.size() < 2) throw shape_error(msg("transpose: rank ", s.size(), " < 2"));
  Shape out_shape = s;
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  int64_t m = s[s.size() - 2], n = s[s.size() - 1];
  int64_t outer = shape_numel(s) / (m * n);
  Tensor out = Tensor::zeros(out_shape);
  transpose_raw(outer, m, n, a.data().data(), out.data().data(), false);
  if (tracing({&a})) {
    mark_out(out);
    ImplPtr ai = a.ptr(), oi = out.ptr();
    g_active_tape->record([ai, oi, outer, m, n] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      transpose_raw(outer, n, m, oi->grad.data(), ai->grad.data(), true);
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape s) {
  check_defined(a, "reshape");
  if (shape_numel(s) != a.numel())
    throw shape_error(msg("reshape: ", shape_str(a.shape()), " -> ", shape_str(s)));
  Tensor out = Tensor::from(std::move(s), {a.data().begin(), a.data().end()});
  if (tracing({&a})) {
    mark_out(out);
    ImplPtr ai = a.ptr(), oi = out.ptr();
    g_active_tape->record([ai, oi] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      for (size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_defined(a, "add");
  check_defined(b, "add");
  if (a.shape() != b.shape())
    throw shape_error(msg("add: ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
  Tensor out = Tensor::zeros(a.shape());
  auto pa = a.data(), pb = b.data();
  auto po = out.data();
  for (size_t i = 0; i < po.size(); ++i) po[i] = pa[i] + pb[i];
  if (tracing({&a, &b})) {
    mark_out(out);
    ImplPtr ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
    g_active_tape->record([ai, bi, oi] {
      if (oi->grad.empty()) return;
      for (ImplPtr side : {ai, bi}) {
        if (!side->requires_grad) continue;
        side->ensure_grad();
        for (size_t i = 0; i < oi->grad.size(); ++i) side->grad[i] += oi->grad[i];
      }
    });
  }
  return out;
}

Tensor add_bcast(const Tensor& x, const Tensor& p) {
  check_defined(x, "add_bcast");
  check_defined(p, "add_bcast");
  const Shape& sx = x.shape();
  const Shape& sp = p.shape();
  if (sp.size() > sx.size() ||
      !std::equal(sp.rbegin(), sp.rend(), sx.rbegin()))
    throw shape_error(
        msg("add_bcast: ", shape_str(sp), " is not a suffix of ", shape_str(sx)));
  int64_t pn = shape_numel(sp);
  Tensor out = Tensor::zeros(sx);
  auto px = x.data(), pp = p.data();
  auto po = out.data();
  for (size_t i = 0; i < po.size(); ++i) po[i] = px[i] + pp[i % pn];
  if (tracing({&x, &p})) {
    mark_out(out);
    ImplPtr xi = x.ptr(), pi = p.ptr(), oi = out.ptr();
    g_active_tape->record([xi, pi, oi, pn] {
      if (oi->grad.empty()) return;
      if (xi->requires_grad) {
        xi->ensure_grad();
        for (size_t i = 0; i < oi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
      }
      if (pi->requires_grad) {
        pi->ensure_grad();
        for (size_t i = 0; i < oi->grad.size(); ++i)
          pi->grad[i % pn] += oi->grad[i];
      }
    });
  }
  return out;
}

Tensor add_scalar(const Tensor& a, double c) {
  check_defined(a, "add_scalar");
  Tensor out = Tensor::zeros(a.shape());
  auto pa = a.data();
  auto po = out.data();
  for (size_t i = 0; i < po.size(); ++i) po[i] = pa[i] + c;
  if (tracing({&a})) {
    mark_out(out);
    ImplPtr ai = a.ptr(), oi = out.ptr();
    g_active_tape->record([ai, oi] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_defined(a, "mul");
  check_defined(b, "mul");
  if (a.shape() != b.shape())
    throw shape_error(msg("mul: ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
  Tensor out = Tensor::zeros(a.shape());
  auto pa = a.data(), pb = b.data();
  auto po = out.data();
  for (size_t i = 0; i < po.size(); ++i) po[i] = pa[i] * pb[i];
  if (tracing({&a, &b})) {
    mark_out(out);
    ImplPtr ai = a.ptr(), bi = b.ptr(), oi = out.ptr();
    g_active_tape->record([ai, bi, oi] {
      if (oi->grad.empty()) return;
      if (ai->requires_grad) {
        ai->ensure_grad();
        for (size_t i = 0; i < oi->grad.size(); ++i)
          ai->grad[i] += oi->grad[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        bi->ensure_grad();
        for (size_t i = 0; i < oi->grad.size(); ++i)
          bi->grad[i] += oi->grad[i] * ai->data[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, double s) {
  check_defined(a, "scale");
  Tensor out = Tensor::zeros(a.shape());
  auto pa = a.data();
  auto po = out.data();
  for (size_t i = 0; i < po.size(); ++i) po[i] = pa[i] * s;
  if (tracing({&a})) {
    mark_out(out);
    ImplPtr ai = a.ptr(), oi = out.ptr();
    g_active_tape->record([ai, oi, s] {
      if (oi->grad.empty() || !ai->requires_grad) return;
      ai->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * s;
    });
  }
  return out;
}

Tensor scale_last(const Tensor& x, const Tensor& s) {
  check_defined(x, "scale_last");
  check_defined(s, "scale_last");
  const Shape& sx = x.shape();
  if (sx.empty()) throw shape_error("scale_last: rank-0 input");
  Shape lead(sx.begin(), sx.end() - 1);
  if (s.shape() != lead)
    throw shape_error(msg("scale_last: scale shape ", shape_str(s.shape()), " vs input ",
                          shape_str(sx)));
  int64_t d = sx.back();
  int64_t rows = shape_numel(lead);
  Tensor out = Tensor::zeros(sx);
  auto px = x.data(), ps = s.data();
  auto po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    double sv = ps[static_cast<size_t>(r)];
    for (int64_t j = 0; j < d; ++j)
      po[static_cast<size_t>(r * d + j)] = px[static_cast<size_t>(r * d + j)] * sv;
  }
  if (tracing({&x, &s})) {
    mark_out(out);
    ImplPtr xi = x.ptr(), si = s.ptr(), oi = out.ptr();
    g_active_tape->record([xi, si, oi, rows, d] {
      if (oi->grad.empty()) return;
      const double* g = oi->grad.data();
      if (xi->requires_grad) {
        xi->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          double sv = si->data[static_cast<size_t>(r)];
          for (int64_t j = 0; j < d; ++j)
            xi->grad[static_cast<size_t>(r * d + j)] += g[r * d + j] * sv;
        }
      }
      if (si->requires_grad) {
        si->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
          double acc = 0.0;
          for (int64_t j = 0; j < d; ++j)
            acc += g[r * d + j] * xi->data[static_cast<size_t>(r * d + j)];
          si->grad[static_cast<size_t>(r)] += acc;
        }
      }
    });
  }
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  check_defined(x, "softmax");
  check_axis(x, axis, "softmax");
  AxisSplit ax = split_at(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape());
  auto px = x.data();
  auto po = out.data();
  for (int64_t o = 0; o < ax.outer; ++o)
    for (int64_t i = 0; i < ax.inner; ++i) {
      const int64_t base = o * ax.len * ax.inner + i;
      double mx = px[static_cast<size_t>(base)];
      for (int64_t l = 1; l < ax.len; ++l)
        mx = std::max(mx, static_cast<double>(px[static_cast<size_t>(base + l * ax.inner)]));
      double denom = 0.0;
      for (int64_t l = 0; l < ax.len; ++l) {
        double e = std::exp(px[static_cast<size_t>(base + l * ax.inner)] - mx);
        po[static_cast<size_t>(base + l * ax.inner)] = e;
        denom += e;
      }
      for (int64_t l = 0; l < ax.len; ++l)
        po[static_cast<size_t>(base + l * ax.inner)] /= denom;
    }
  if (tracing({&x})) {
    mark_out(out);
    ImplPtr xi = x.ptr(), oi = out.ptr();
    // dx = y * (g - <g, y>) per slice; uses the forward output, no Jacobian
    // is ever materialized.
    g_active_tape->record([xi, oi, ax] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      const double* g = oi->grad.data();
      const double* y = oi->data.data();
      for (int64_t o = 0; o < ax.outer; ++o)
        for (int64_t i = 0; i < ax.inner; ++i) {
          const int64_t base = o * ax.len * ax.inner + i;
          double dot = 0.0;
          for (int64_t l = 0; l < ax.len; ++l) {
            int64_t at = base + l * ax.inner;
            dot += g[at] * y[at];
          }
          for (int64_t l = 0; l < ax.len; ++l) {
            int64_t at = base + l * ax.inner;
            xi->grad[static_cast<size_t>(at)] += y[at] * (g[at] - dot);
          }
        }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& shift, double eps) {
  check_defined(x, "layer_norm");
  check_defined(gamma, "layer_norm");
  check_defined(shift, "layer_norm");
  if (eps <= 0.0) throw domain_error(msg("layer_norm: eps ", eps, " must be positive"));
  const Shape& sx = x.shape();
  if (sx.empty()) throw shape_error("layer_norm: rank-0 input");
  int64_t d = sx.back();
  Shape want{d};
  if (gamma.shape() != want || shift.shape() != want)
    throw shape_error(msg("layer_norm: gamma/shift must be [", d, "], got ",
                          shape_str(gamma.shape()), " and ", shape_str(shift.shape())));
  int64_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(sx);
  std::vector<double> mean_v(static_cast<size_t>(rows));
  std::vector<double> inv_v(static_cast<size_t>(rows));
  auto px = x.data(), pg = gamma.data(), pb = shift.data();
  auto po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = px.data() + r * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + eps);
    mean_v[static_cast<size_t>(r)] = mu;
    inv_v[static_cast<size_t>(r)] = inv;
    for (int64_t j = 0; j < d; ++j)
      po[static_cast<size_t>(r * d + j)] = (row[j] - mu) * inv * pg[static_cast<size_t>(j)] +
                                           pb[static_cast<size_t>(j)];
  }
  if (tracing({&x, &gamma, &shift})) {
    mark_out(out);
    ImplPtr xi = x.ptr(), gi = gamma.ptr(), bi = shift.ptr(), oi = out.ptr();
    g_active_tape->record(
        [xi, gi, bi, oi, rows, d, mean_v = std::move(mean_v), inv_v = std::move(inv_v)] {
          if (oi->grad.empty()) return;
          const double* g = oi->grad.data();
          if (xi->requires_grad) xi->ensure_grad();
          if (gi->requires_grad) gi->ensure_grad();
          if (bi->requires_grad) bi->ensure_grad();
          for (int64_t r = 0; r < rows; ++r) {
            const double* row = xi->data.data() + r * d;
            const double* grow = g + r * d;
            double mu = mean_v[static_cast<size_t>(r)];
            double inv = inv_v[static_cast<size_t>(r)];
            if (xi->requires_grad) {
              double m1 = 0.0, m2 = 0.0;
              for (int64_t j = 0; j < d; ++j) {
                double xh = (row[j] - mu) * inv;
                double gg = grow[j] * gi->data[static_cast<size_t>(j)];
                m1 += gg;
                m2 += gg * xh;
              }
              m1 /= static_cast<double>(d);
              m2 /= static_cast<double>(d);
              for (int64_t j = 0; j < d; ++j) {
                double xh = (row[j] - mu) * inv;
                double gg = grow[j] * gi->data[static_cast<size_t>(j)];
                xi->grad[static_cast<size_t>(r * d + j)] += inv * (gg - m1 - xh * m2);
              }
            }
            if (gi->requires_grad)
              for (int64_t j = 0; j < d; ++j)
                gi->grad[static_cast<size_t>(j)] += grow[j] * (row[j] - mu) * inv;
            if (bi->requires_grad)
              for (int64_t j = 0; j < d; ++j) bi->grad[static_cast<size_t>(j)] += grow[j];
          }
        });
  }
  return out;
}

Tensor gelu(const Tensor& x) {
  check_defined(x, "gelu");
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  Tensor out = Tensor::zeros(x.shape());
  auto px = x.data();
  auto po = out.data();
  for (size_t i = 0; i < po.size(); ++i)
    po[i] = 0.5 * px[i] * (1.0 + std::erf(px[i] * inv_sqrt2));
  if (tracing({&x})) {
    mark_out(out);
    ImplPtr xi = x.ptr(), oi = out.ptr();
    g_active_tape->record([xi, oi] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      for (size_t i = 0; i < oi->grad.size(); ++i) {
        double v = xi->data[i];
        double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        double pdf = std::exp(-0.5 * v * v) * inv_sqrt_2pi;
        xi->grad[i] += oi->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int64_t>& labels) {
  check_defined(logits, "cross_entropy");
  const Shape& s = logits.shape();
  if (s.size() != 2) throw shape_error(msg("cross_entropy: logits must be [B,C], got ",
                                           shape_str(s)));
  int64_t b = s[0], c = s[1];
  if (static_cast<int64_t>(labels.size()) != b)
    throw shape_error(msg("cross_entropy: ", labels.size(), " labels for batch ", b));
  for (int64_t i = 0; i < b; ++i)
    if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= c)
      throw domain_error(msg("cross_entropy: label ", labels[static_cast<size_t>(i)],
                             " outside [0,", c, ")"));
  auto px = logits.data();
  std::vector<double> probs(static_cast<size_t>(b * c));
  double loss = 0.0;
  for (int64_t i = 0; i < b; ++i) {
    const double* row = px.data() + i * c;
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
    double lse = mx + std::log(denom);
    for (int64_t j = 0; j < c; ++j)
      probs[static_cast<size_t>(i * c + j)] = std::exp(row[j] - lse);
    loss += lse - row[labels[static_cast<size_t>(i)]];
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(b));
  if (tracing({&logits})) {
    mark_out(out);
    ImplPtr xi = logits.ptr(), oi = out.ptr();
    g_active_tape->record([xi, oi, b, c, probs = std::move(probs), labels] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      double g = oi->grad[0] / static_cast<double>(b);
      for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < c; ++j) {
          double p = probs[static_cast<size_t>(i * c + j)];
          double target = (j == labels[static_cast<size_t>(i)]) ? 1.0 : 0.0;
          xi->grad[static_cast<size_t>(i * c + j)] += g * (p - target);
        }
    });
  }
  return out;
}

Tensor sum(const Tensor& x) {
  check_defined(x, "sum");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor out = Tensor::scalar(acc);
  if (tracing({&x})) {
    mark_out(out);
    ImplPtr xi = x.ptr(), oi = out.ptr();
    g_active_tape->record([xi, oi] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      double g = oi->grad[0];
      for (size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += g;
    });
  }
  return out;
}

Tensor mean_axis(const Tensor& x, int axis) {
  check_defined(x, "mean_axis");
  check_axis(x, axis, "mean_axis");
  AxisSplit ax = split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + axis);
  Tensor out = Tensor::zeros(out_shape);
  auto px = x.data();
  auto po = out.data();
  for (int64_t o = 0; o < ax.outer; ++o)
    for (int64_t i = 0; i < ax.inner; ++i) {
      double acc = 0.0;
      for (int64_t l = 0; l < ax.len; ++l)
        acc += px[static_cast<size_t>((o * ax.len + l) * ax.inner + i)];
      po[static_cast<size_t>(o * ax.inner + i)] = acc / static_cast<double>(ax.len);
    }
  if (tracing({&x})) {
    mark_out(out);
    ImplPtr xi = x.ptr(), oi = out.ptr();
    g_active_tape->record([xi, oi, ax] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      double invl = 1.0 / static_cast<double>(ax.len);
      for (int64_t o = 0; o < ax.outer; ++o)
        for (int64_t i = 0; i < ax.inner; ++i) {
          double g = oi->grad[static_cast<size_t>(o * ax.inner + i)] * invl;
          for (int64_t l = 0; l < ax.len; ++l)
            xi->grad[static_cast<size_t>((o * ax.len + l) * ax.inner + i)] += g;
        }
    });
  }
  return out;
}

Tensor slice_axis(const Tensor& x, int axis, int64_t start, int64_t len) {
  check_defined(x, "slice_axis");
  check_axis(x, axis, "slice_axis");
  AxisSplit ax = split_at(x.shape(), axis);
  if (len < 1 || start < 0 || start + len > ax.len)
    throw shape_error(msg("slice_axis: [", start, ",", start + len, ") of extent ", ax.len));
  Shape out_shape = x.shape();
  out_shape[static_cast<size_t>(axis)] = len;
  Tensor out = Tensor::zeros(out_shape);
  auto px = x.data();
  auto po = out.data();
  for (int64_t o = 0; o < ax.outer; ++o)
    for (int64_t l = 0; l < len; ++l) {
      const double* src = px.data() + (o * ax.len + start + l) * ax.inner;
      double* dst = po.data() + (o * len + l) * ax.inner;
      std::copy(src, src + ax.inner, dst);
    }
  if (tracing({&x})) {
    mark_out(out);
    ImplPtr xi = x.ptr(), oi = out.ptr();
    g_active_tape->record([xi, oi, ax, start, len] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      for (int64_t o = 0; o < ax.outer; ++o)
        for (int64_t l = 0; l < len; ++l) {
          const double* src = oi->grad.data() + (o * len + l) * ax.inner;
          double* dst = xi->grad.data() + (o * ax.len + start + l) * ax.inner;
          for (int64_t i = 0; i < ax.inner; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

Tensor concat_axis(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw shape_error("concat_axis: no inputs");
  for (const Tensor& p : parts) check_defined(p, "concat_axis");
  const Shape& s0 = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int>(s0.size()))
    throw shape_error(msg("concat_axis: axis ", axis, " for shape ", shape_str(s0)));
  int64_t total = 0;
  for (const Tensor& p : parts) {
    const Shape& sp = p.shape();
    if (sp.size() != s0.size())
      throw shape_error(msg("concat_axis: rank mismatch ", shape_str(sp)));
    for (size_t i = 0; i < sp.size(); ++i)
      if (i != static_cast<size_t>(axis) && sp[i] != s0[i])
        throw shape_error(
            msg("concat_axis: ", shape_str(sp), " vs ", shape_str(s0), " on axis ", i));
    total += sp[static_cast<size_t>(axis)];
  }
  Shape out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = total;
  Tensor out = Tensor::zeros(out_shape);
  AxisSplit ax = split_at(out_shape, axis);
  auto po = out.data();
  int64_t offset = 0;
  bool any_req = false;
  for (const Tensor& p : parts) any_req = any_req || p.requires_grad();
  const bool want_rule = any_req && g_active_tape != nullptr;
  struct Piece {
    ImplPtr impl;
    int64_t offset, len;
  };
  std::vector<Piece> pieces;
  for (const Tensor& p : parts) {
    int64_t len = p.shape()[static_cast<size_t>(axis)];
    auto pp = p.data();
    for (int64_t o = 0; o < ax.outer; ++o) {
      const double* src = pp.data() + o * len * ax.inner;
      double* dst = po.data() + (o * ax.len + offset) * ax.inner;
      std::copy(src, src + len * ax.inner, dst);
    }
    pieces.push_back({p.ptr(), offset, len});
    offset += len;
  }
  if (want_rule) {
    mark_out(out);
    ImplPtr oi = out.ptr();
    g_active_tape->record([oi, ax, pieces = std::move(pieces)] {
      if (oi->grad.empty()) return;
      for (const auto& pc : pieces) {
        if (!pc.impl->requires_grad) continue;
        pc.impl->ensure_grad();
        for (int64_t o = 0; o < ax.outer; ++o) {
          const double* src = oi->grad.data() + (o * ax.len + pc.offset) * ax.inner;
          double* dst = pc.impl->grad.data() + o * pc.len * ax.inner;
          for (int64_t i = 0; i < pc.len * ax.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

Tensor repeat_first(const Tensor& t, int64_t n) {
  check_defined(t, "repeat_first");
  if (n < 1) throw shape_error(msg("repeat_first: n = ", n));
  Shape out_shape;
  out_shape.push_back(n);
  for (int64_t d : t.shape()) out_shape.push_back(d);
  Tensor out = Tensor::zeros(out_shape);
  auto pt = t.data();
  auto po = out.data();
  for (int64_t r = 0; r < n; ++r)
    std::copy(pt.begin(), pt.end(), po.begin() + r * pt.size());
  if (tracing({&t})) {
    mark_out(out);
    ImplPtr ti = t.ptr(), oi = out.ptr();
    g_active_tape->record([ti, oi, n] {
      if (oi->grad.empty() || !ti->requires_grad) return;
      ti->ensure_grad();
      size_t chunk = ti->grad.size();
      for (int64_t r = 0; r < n; ++r)
        for (size_t i = 0; i < chunk; ++i)
          ti->grad[i] += oi->grad[static_cast<size_t>(r) * chunk + i];
    });
  }
  return out;
}

Tensor gather_axis1(const Tensor& x, const std::vector<std::vector<int64_t>>& idx) {
  check_defined(x, "gather_axis1");
  const Shape& s = x.shape();
  if (s.size() != 3) throw shape_error(msg("gather_axis1: need [B,T,D], got ", shape_str(s)));
  int64_t b = s[0], t = s[1], d = s[2];
  if (static_cast<int64_t>(idx.size()) != b)
    throw shape_error(msg("gather_axis1: ", idx.size(), " index rows for batch ", b));
  int64_t l = idx.empty() ? 0 : static_cast<int64_t>(idx[0].size());
  if (l < 1) throw shape_error("gather_axis1: empty index row");
  for (const auto& row : idx) {
    if (static_cast<int64_t>(row.size()) != l)
      throw shape_error("gather_axis1: ragged index rows");
    for (int64_t j : row)
      if (j < 0 || j >= t) throw shape_error(msg("gather_axis1: index ", j, " for extent ", t));
  }
  Tensor out = Tensor::zeros({b, l, d});
  auto px = x.data();
  auto po = out.data();
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < l; ++j) {
      const double* src = px.data() + (i * t + idx[static_cast<size_t>(i)][static_cast<size_t>(j)]) * d;
      double* dst = po.data() + (i * l + j) * d;
      std::copy(src, src + d, dst);
    }
  if (tracing({&x})) {
    mark_out(out);
    ImplPtr xi = x.ptr(), oi = out.ptr();
    g_active_tape->record([xi, oi, idx, b, t, l, d] {
      if (oi->grad.empty() || !xi->requires_grad) return;
      xi->ensure_grad();
      for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < l; ++j) {
          const double* src = oi->grad.data() + (i * l + j) * d;
          double* dst =
              xi->grad.data() + (i * t + idx[static_cast<size_t>(i)][static_cast<size_t>(j)]) * d;
          for (int64_t k = 0; k < d; ++k) dst[k] += src[k];
        }
    });
  }
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check_defined(x, "linear");
  check_defined(w, "linear");
  check_defined(b, "linear");
  const Shape& sx = x.shape();
  if (sx.size() < 2 || w.rank() != 2)
    throw shape_error(msg("linear: x ", shape_str(sx), ", w ", shape_str(w.shape())));
  int64_t k = sx.back();
  if (w.dim(0) != k || b.rank() != 1 || b.dim(0) != w.dim(1))
    throw shape_error(msg("linear: x ", shape_str(sx), ", w ", shape_str(w.shape()), ", b ",
                          shape_str(b.shape())));
  int64_t m = x.numel() / k;
  Tensor flat = reshape(x, {m, k});
  Tensor y = add_bcast(matmul(flat, w), b);
  Shape out_shape(sx.begin(), sx.end() - 1);
  out_shape.push_back(w.dim(1));
  return reshape(y, out_shape);
}

Tensor gaussian(RngStream& rng, Shape shape) {
  Tensor out = Tensor::zeros(std::move(shape));
  for (double& v : out.data()) v = rng.normal();
  return out;
}

Tensor take_first_axis(const Tensor& x, std::span<const int64_t> idx) {
  check_defined(x, "take_first_axis");
  const Shape& s = x.shape();
  if (s.empty()) throw shape_error("take_first_axis: rank-0 input");
  int64_t rows = s[0];
  int64_t stride = shape_numel(s) / rows;
  Shape out_shape = s;
  out_shape[0] = static_cast<int64_t>(idx.size());
  Tensor out = Tensor::zeros(out_shape);
  auto px = x.data();
  auto po = out.data();
  for (size_t r = 0; r < idx.size(); ++r) {
    int64_t j = idx[r];
    if (j < 0 || j >= rows)
      throw shape_error(msg("take_first_axis: index ", j, " for extent ", rows));
    std::copy(px.begin() + j * stride, px.begin() + (j + 1) * stride,
              po.begin() + static_cast<int64_t>(r) * stride);
  }
  return out;
}

}  // namespace tnt
