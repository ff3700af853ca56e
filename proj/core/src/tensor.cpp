#include "caac/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace caac {

namespace {

using detail::TensorData;
using Ptr = std::shared_ptr<TensorData>;

bool wants_grad(const Ptr& t) { return t->requires_grad || t->tracked; }

std::vector<double>& grad_of(const Ptr& t) {
  if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
  return t->grad;
}

void check_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NonFiniteError(std::string("non-finite value produced by op '") +
                           op + "'");
    }
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

double gelu_fwd(double x) {
  double u = kGeluC * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_bwd(double x) {
  double x3 = x * x * x;
  double u = kGeluC * (x + 0.044715 * x3);
  double t = std::tanh(u);
  double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " expects " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  impl_ = std::make_shared<detail::TensorData>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> d(shape_numel(shape), 0.0);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> d(shape_numel(shape), value);
  return Tensor(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  }
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool v) { impl_->requires_grad = v; }

std::span<double> Tensor::grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

std::span<const double> Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  impl_->grad.assign(impl_->data.size(), 0.0);
}

Tensor Tensor::clone() const {
  Tensor out;
  out.impl_ = std::make_shared<detail::TensorData>();
  out.impl_->shape = impl_->shape;
  out.impl_->data = impl_->data;
  out.impl_->requires_grad = impl_->requires_grad;
  return out;
}

Tensor Tape::make_output(Shape shape, std::vector<double> data, bool tracked,
                         const char* op) {
  check_finite(data, op);
  Tensor out(std::move(shape), std::move(data));
  out.impl_->tracked = tracked;
  return out;
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> c(m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      double* crow = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  bool tracked = wants_grad(a.impl_) || wants_grad(b.impl_);
  Tensor out = make_output({m, n}, std::move(c), tracked, "matmul");
  if (tracked) {
    auto ai = a.impl_, bi = b.impl_, oi = out.impl_;
    record([ai, bi, oi, m, k, n] {
      const auto& go = grad_of(oi);
      if (wants_grad(ai)) {
        auto& ga = grad_of(ai);
        // dA = dC * B^T
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j)
              s += go[i * n + j] * bi->data[p * n + j];
            ga[i * k + p] += s;
          }
      }
      if (wants_grad(bi)) {
        auto& gb = grad_of(bi);
        // dB = A^T * dC
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double av = ai->data[i * k + p];
            for (std::size_t j = 0; j < n; ++j)
              gb[p * n + j] += av * go[i * n + j];
          }
      }
    });
  }
  return out;
}

Tensor Tape::transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose expects rank-2 tensor");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> t(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a.data()[i * n + j];
  bool tracked = wants_grad(a.impl_);
  Tensor out = make_output({n, m}, std::move(t), tracked, "transpose");
  if (tracked) {
    auto ai = a.impl_, oi = out.impl_;
    record([ai, oi, m, n] {
      const auto& go = grad_of(oi);
      auto& ga = grad_of(ai);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) ga[i * n + j] += go[j * m + i];
    });
  }
  return out;
}

namespace {

enum class Bcast { Same, ScalarB, RowB };

Bcast classify(const Shape& a, const Shape& b) {
  if (a == b) return Bcast::Same;
  if (shape_numel(b) == 1) return Bcast::ScalarB;
  if (b.size() == 1 && !a.empty() && a.back() == b[0]) return Bcast::RowB;
  throw ShapeError("incompatible broadcast: " + shape_str(a) + " vs " +
                   shape_str(b));
}

}  // namespace

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  Bcast bc = classify(a.shape(), b.shape());
  const std::size_t n = a.numel(), d = b.numel();
  std::vector<double> c(n);
  const auto pa = a.data(), pb = b.data();
  switch (bc) {
    case Bcast::Same:
      for (std::size_t i = 0; i < n; ++i) c[i] = pa[i] + pb[i];
      break;
    case Bcast::ScalarB:
      for (std::size_t i = 0; i < n; ++i) c[i] = pa[i] + pb[0];
      break;
    case Bcast::RowB:
      for (std::size_t i = 0; i < n; ++i) c[i] = pa[i] + pb[i % d];
      break;
  }
  bool tracked = wants_grad(a.impl_) || wants_grad(b.impl_);
  Tensor out = make_output(a.shape(), std::move(c), tracked, "add");
  if (tracked) {
    auto ai = a.impl_, bi = b.impl_, oi = out.impl_;
    record([ai, bi, oi, bc, n, d] {
      const auto& go = grad_of(oi);
      if (wants_grad(ai)) {
        auto& ga = grad_of(ai);
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
      }
      if (wants_grad(bi)) {
        auto& gb = grad_of(bi);
        switch (bc) {
          case Bcast::Same:
            for (std::size_t i = 0; i < n; ++i) gb[i] += go[i];
            break;
          case Bcast::ScalarB:
            for (std::size_t i = 0; i < n; ++i) gb[0] += go[i];
            break;
          case Bcast::RowB:
            for (std::size_t i = 0; i < n; ++i) gb[i % d] += go[i];
            break;
        }
      }
    });
  }
  return out;
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
  Bcast bc = classify(a.shape(), b.shape());
  const std::size_t n = a.numel(), d = b.numel();
  std::vector<double> c(n);
  const auto pa = a.data(), pb = b.data();
  switch (bc) {
    case Bcast::Same:
      for (std::size_t i = 0; i < n; ++i) c[i] = pa[i] - pb[i];
      break;
    case Bcast::ScalarB:
      for (std::size_t i = 0; i < n; ++i) c[i] = pa[i] - pb[0];
      break;
    case Bcast::RowB:
      for (std::size_t i = 0; i < n; ++i) c[i] = pa[i] - pb[i % d];
      break;
  }
  bool tracked = wants_grad(a.impl_) || wants_grad(b.impl_);
  Tensor out = make_output(a.shape(), std::move(c), tracked, "sub");
  if (tracked) {
    auto ai = a.impl_, bi = b.impl_, oi = out.impl_;
    record([ai, bi, oi, bc, n, d] {
      const auto& go = grad_of(oi);
      if (wants_grad(ai)) {
        auto& ga = grad_of(ai);
        for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
      }
      if (wants_grad(bi)) {
        auto& gb = grad_of(bi);
        switch (bc) {
          case Bcast::Same:
            for (std::size_t i = 0; i < n; ++i) gb[i] -= go[i];
            break;
          case Bcast::ScalarB:
            for (std::size_t i = 0; i < n; ++i) gb[0] -= go[i];
            break;
          case Bcast::RowB:
            for (std::size_t i = 0; i < n; ++i) gb[i % d] -= go[i];
            break;
        }
      }
    });
  }
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  Bcast bc = classify(a.shape(), b.shape());
  const std::size_t n = a.numel(), d = b.numel();
  std::vector<double> c(n);
  const auto pa = a.data(), pb = b.data();
  switch (bc) {
    case Bcast::Same:
      for (std::size_t i = 0; i < n; ++i) c[i] = pa[i] * pb[i];
      break;
    case Bcast::ScalarB:
      for (std::size_t i = 0; i < n; ++i) c[i] = pa[i] * pb[0];
      break;
    case Bcast::RowB:
      for (std::size_t i = 0; i < n; ++i) c[i] = pa[i] * pb[i % d];
      break;
  }
  bool tracked = wants_grad(a.impl_) || wants_grad(b.impl_);
  Tensor out = make_output(a.shape(), std::move(c), tracked, "mul");
  if (tracked) {
    auto ai = a.impl_, bi = b.impl_, oi = out.impl_;
    record([ai, bi, oi, bc, n, d] {
      const auto& go = grad_of(oi);
      if (wants_grad(ai)) {
        auto& ga = grad_of(ai);
        switch (bc) {
          case Bcast::Same:
            for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * bi->data[i];
            break;
          case Bcast::ScalarB:
            for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * bi->data[0];
            break;
          case Bcast::RowB:
            for (std::size_t i = 0; i < n; ++i)
              ga[i] += go[i] * bi->data[i % d];
            break;
        }
      }
      if (wants_grad(bi)) {
        auto& gb = grad_of(bi);
        switch (bc) {
          case Bcast::Same:
            for (std::size_t i = 0; i < n; ++i) gb[i] += go[i] * ai->data[i];
            break;
          case Bcast::ScalarB:
            for (std::size_t i = 0; i < n; ++i) gb[0] += go[i] * ai->data[i];
            break;
          case Bcast::RowB:
            for (std::size_t i = 0; i < n; ++i)
              gb[i % d] += go[i] * ai->data[i];
            break;
        }
      }
    });
  }
  return out;
}

Tensor Tape::scale(const Tensor& a, double c) {
  const std::size_t n = a.numel();
  std::vector<double> o(n);
  for (std::size_t i = 0; i < n; ++i) o[i] = a.data()[i] * c;
  bool tracked = wants_grad(a.impl_);
  Tensor out = make_output(a.shape(), std::move(o), tracked, "scale");
  if (tracked) {
    auto ai = a.impl_, oi = out.impl_;
    record([ai, oi, c, n] {
      const auto& go = grad_of(oi);
      auto& ga = grad_of(ai);
      for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * c;
    });
  }
  return out;
}

Tensor Tape::add_const(const Tensor& a, double c) {
  const std::size_t n = a.numel();
  std::vector<double> o(n);
  for (std::size_t i = 0; i < n; ++i) o[i] = a.data()[i] + c;
  bool tracked = wants_grad(a.impl_);
  Tensor out = make_output(a.shape(), std::move(o), tracked, "add_const");
  if (tracked) {
    auto ai = a.impl_, oi = out.impl_;
    record([ai, oi, n] {
      const auto& go = grad_of(oi);
      auto& ga = grad_of(ai);
      for (std::size_t i = 0; i < n; ++i) ga[i] += go[i];
    });
  }
  return out;
}

Tensor Tape::relu(const Tensor& a) {
  const std::size_t n = a.numel();
  std::vector<double> o(n);
  for (std::size_t i = 0; i < n; ++i) o[i] = std::max(a.data()[i], 0.0);
  bool tracked = wants_grad(a.impl_);
  Tensor out = make_output(a.shape(), std::move(o), tracked, "relu");
  if (tracked) {
    auto ai = a.impl_, oi = out.impl_;
    record([ai, oi, n] {
      const auto& go = grad_of(oi);
      auto& ga = grad_of(ai);
      for (std::size_t i = 0; i < n; ++i)
        if (ai->data[i] > 0.0) ga[i] += go[i];
    });
  }
  return out;
}

Tensor Tape::gelu(const Tensor& a) {
  const std::size_t n = a.numel();
  std::vector<double> o(n);
  for (std::size_t i = 0; i < n; ++i) o[i] = gelu_fwd(a.data()[i]);
  bool tracked = wants_grad(a.impl_);
  Tensor out = make_output(a.shape(), std::move(o), tracked, "gelu");
  if (tracked) {
    auto ai = a.impl_, oi = out.impl_;
    record([ai, oi, n] {
      const auto& go = grad_of(oi);
      auto& ga = grad_of(ai);
      for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * gelu_bwd(ai->data[i]);
    });
  }
  return out;
}

Tensor Tape::activation(Activation kind, const Tensor& a) {
  return kind == Activation::Relu ? relu(a) : gelu(a);
}

Tensor Tape::exp(const Tensor& a) {
  const std::size_t n = a.numel();
  std::vector<double> o(n);
  for (std::size_t i = 0; i < n; ++i) o[i] = std::exp(a.data()[i]);
  bool tracked = wants_grad(a.impl_);
  Tensor out = make_output(a.shape(), std::move(o), tracked, "exp");
  if (tracked) {
    auto ai = a.impl_, oi = out.impl_;
    record([ai, oi, n] {
      const auto& go = grad_of(oi);
      auto& ga = grad_of(ai);
      for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * oi->data[i];
    });
  }
  return out;
}

Tensor Tape::log1p(const Tensor& a) {
  const std::size_t n = a.numel();
  std::vector<double> o(n);
  for (std::size_t i = 0; i < n; ++i) o[i] = std::log1p(a.data()[i]);
  bool tracked = wants_grad(a.impl_);
  Tensor out = make_output(a.shape(), std::move(o), tracked, "log1p");
  if (tracked) {
    auto ai = a.impl_, oi = out.impl_;
    record([ai, oi, n] {
      const auto& go = grad_of(oi);
      auto& ga = grad_of(ai);
      for (std::size_t i = 0; i < n; ++i)
        ga[i] += go[i] / (1.0 + ai->data[i]);
    });
  }
  return out;
}

Tensor Tape::softmax(const Tensor& a) {
  if (a.rank() == 0) throw ShapeError("softmax expects rank >= 1");
  const std::size_t d = a.shape().back();
  const std::size_t rows = a.numel() / d;
  std::vector<double> o(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = a.data().data() + r * d;
    double* out_row = o.data() + r * d;
    double mx = in[0];
    for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      out_row[j] = std::exp(in[j] - mx);
      sum += out_row[j];
    }
    for (std::size_t j = 0; j < d; ++j) out_row[j] /= sum;
  }
  bool tracked = wants_grad(a.impl_);
  Tensor out = make_output(a.shape(), std::move(o), tracked, "softmax");
  if (tracked) {
    auto ai = a.impl_, oi = out.impl_;
    record([ai, oi, rows, d] {
      const auto& go = grad_of(oi);
      auto& ga = grad_of(ai);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* y = oi->data.data() + r * d;
        const double* dy = go.data() + r * d;
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += dy[j] * y[j];
        for (std::size_t j = 0; j < d; ++j)
          ga[r * d + j] += y[j] * (dy[j] - dot);
      }
    });
  }
  return out;
}

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gain,
                        const Tensor& bias, double eps) {
  const std::size_t d = x.shape().back();
  if (d < 2) throw ShapeError("layer_norm expects last axis >= 2");
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm gain/bias length must equal last axis " +
                     std::to_string(d));
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> o(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double c = in[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      double h = (in[j] - mean) * is;
      xhat[r * d + j] = h;
      o[r * d + j] = h * gain.data()[j] + bias.data()[j];
    }
  }
  bool tracked = wants_grad(x.impl_) || wants_grad(gain.impl_) ||
                 wants_grad(bias.impl_);
  Tensor out = make_output(x.shape(), std::move(o), tracked, "layer_norm");
  if (tracked) {
    auto xi = x.impl_, gi = gain.impl_, bi = bias.impl_, oi = out.impl_;
    auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
    auto is = std::make_shared<std::vector<double>>(std::move(inv_std));
    record([xi, gi, bi, oi, xh, is, rows, d] {
      const auto& go = grad_of(oi);
      const double dd = static_cast<double>(d);
      if (wants_grad(gi)) {
        auto& gg = grad_of(gi);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j)
            gg[j] += go[r * d + j] * (*xh)[r * d + j];
      }
      if (wants_grad(bi)) {
        auto& gb = grad_of(bi);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += go[r * d + j];
      }
      if (wants_grad(xi)) {
        auto& gx = grad_of(xi);
        for (std::size_t r = 0; r < rows; ++r) {
          double sum_dh = 0.0, sum_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            double dh = go[r * d + j] * gi->data[j];
            sum_dh += dh;
            sum_dh_h += dh * (*xh)[r * d + j];
          }
          for (std::size_t j = 0; j < d; ++j) {
            double dh = go[r * d + j] * gi->data[j];
            double h = (*xh)[r * d + j];
            gx[r * d + j] +=
                (*is)[r] * (dh - sum_dh / dd - h * sum_dh_h / dd);
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::sum_all(const Tensor& a) {
  double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
  bool tracked = wants_grad(a.impl_);
  Tensor out = make_output({1}, {s}, tracked, "sum_all");
  if (tracked) {
    auto ai = a.impl_, oi = out.impl_;
    record([ai, oi] {
      const double g = grad_of(oi)[0];
      auto& ga = grad_of(ai);
      for (double& v : ga) v += g;
    });
  }
  return out;
}

Tensor Tape::mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor Tape::slice_cols(const Tensor& a, std::size_t c0, std::size_t c1) {
  if (a.rank() != 2 || c1 > a.dim(1) || c0 >= c1) {
    throw ShapeError("slice_cols out of range for " + shape_str(a.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1), w = c1 - c0;
  std::vector<double> o(m * w);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) o[i * w + j] = a.data()[i * n + c0 + j];
  bool tracked = wants_grad(a.impl_);
  Tensor out = make_output({m, w}, std::move(o), tracked, "slice_cols");
  if (tracked) {
    auto ai = a.impl_, oi = out.impl_;
    record([ai, oi, m, n, w, c0] {
      const auto& go = grad_of(oi);
      auto& ga = grad_of(ai);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < w; ++j)
          ga[i * n + c0 + j] += go[i * w + j];
    });
  }
  return out;
}

Tensor Tape::slice_rows(const Tensor& a, std::size_t r0, std::size_t r1) {
  if (a.rank() != 2 || r1 > a.dim(0) || r0 >= r1) {
    throw ShapeError("slice_rows out of range for " + shape_str(a.shape()));
  }
  const std::size_t n = a.dim(1), h = r1 - r0;
  std::vector<double> o(a.data().begin() + r0 * n, a.data().begin() + r1 * n);
  bool tracked = wants_grad(a.impl_);
  Tensor out = make_output({h, n}, std::move(o), tracked, "slice_rows");
  if (tracked) {
    auto ai = a.impl_, oi = out.impl_;
    record([ai, oi, n, h, r0] {
      const auto& go = grad_of(oi);
      auto& ga = grad_of(ai);
      for (std::size_t i = 0; i < h * n; ++i) ga[r0 * n + i] += go[i];
    });
  }
  return out;
}

Tensor Tape::concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols on empty list");
  const std::size_t m = parts[0].dim(0);
  std::size_t n = 0;
  bool tracked = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != m)
      throw ShapeError("concat_cols row mismatch");
    n += p.dim(1);
    tracked = tracked || wants_grad(p.impl_);
  }
  std::vector<double> o(m * n);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < w; ++j)
        o[i * n + off + j] = p.data()[i * w + j];
    off += w;
  }
  Tensor out = make_output({m, n}, std::move(o), tracked, "concat_cols");
  if (tracked) {
    std::vector<Ptr> impls;
    for (const auto& p : parts) impls.push_back(p.impl_);
    auto oi = out.impl_;
    record([impls, oi, m, n] {
      const auto& go = grad_of(oi);
      std::size_t off = 0;
      for (const auto& pi : impls) {
        const std::size_t w = pi->shape[1];
        if (wants_grad(pi)) {
          auto& gp = grad_of(pi);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j)
              gp[i * w + j] += go[i * n + off + j];
        }
        off += w;
      }
    });
  }
  return out;
}

Tensor Tape::concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows on empty list");
  const std::size_t n = parts[0].dim(1);
  std::size_t m = 0;
  bool tracked = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != n)
      throw ShapeError("concat_rows column mismatch");
    m += p.dim(0);
    tracked = tracked || wants_grad(p.impl_);
  }
  std::vector<double> o;
  o.reserve(m * n);
  for (const auto& p : parts)
    o.insert(o.end(), p.data().begin(), p.data().end());
  Tensor out = make_output({m, n}, std::move(o), tracked, "concat_rows");
  if (tracked) {
    std::vector<Ptr> impls;
    for (const auto& p : parts) impls.push_back(p.impl_);
    auto oi = out.impl_;
    record([impls, oi] {
      const auto& go = grad_of(oi);
      std::size_t off = 0;
      for (const auto& pi : impls) {
        const std::size_t k = pi->data.size();
        if (wants_grad(pi)) {
          auto& gp = grad_of(pi);
          for (std::size_t i = 0; i < k; ++i) gp[i] += go[off + i];
        }
        off += k;
      }
    });
  }
  return out;
}

Tensor Tape::reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " +
                     shape_str(shape) + " changes element count");
  }
  bool tracked = wants_grad(a.impl_);
  Tensor out = make_output(std::move(shape),
                           {a.data().begin(), a.data().end()}, tracked,
                           "reshape");
  if (tracked) {
    auto ai = a.impl_, oi = out.impl_;
    record([ai, oi] {
      const auto& go = grad_of(oi);
      auto& ga = grad_of(ai);
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
  }
  return out;
}

Tensor Tape::add_rowvec(const Tensor& a, const Tensor& row) {
  if (a.rank() != 2 || row.rank() != 2 || row.dim(0) != 1 ||
      row.dim(1) != a.dim(1)) {
    throw ShapeError("add_rowvec expects [n,d] + [1,d], got " +
                     shape_str(a.shape()) + " + " + shape_str(row.shape()));
  }
  const std::size_t m = a.dim(0), d = a.dim(1);
  std::vector<double> o(m * d);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j)
      o[i * d + j] = a.data()[i * d + j] + row.data()[j];
  bool tracked = wants_grad(a.impl_) || wants_grad(row.impl_);
  Tensor out = make_output({m, d}, std::move(o), tracked, "add_rowvec");
  if (tracked) {
    auto ai = a.impl_, ri = row.impl_, oi = out.impl_;
    record([ai, ri, oi, m, d] {
      const auto& go = grad_of(oi);
      if (wants_grad(ai)) {
        auto& ga = grad_of(ai);
        for (std::size_t i = 0; i < m * d; ++i) ga[i] += go[i];
      }
      if (wants_grad(ri)) {
        auto& gr = grad_of(ri);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < d; ++j) gr[j] += go[i * d + j];
      }
    });
  }
  return out;
}

Tensor Tape::gather(const Tensor& a, const std::vector<std::size_t>& index,
                    Shape out_shape) {
  if (shape_numel(out_shape) != index.size()) {
    throw ShapeError("gather: index length does not match output shape " +
                     shape_str(out_shape));
  }
  std::vector<double> o(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= a.numel()) throw ShapeError("gather: index out of range");
    o[i] = a.data()[index[i]];
  }
  bool tracked = wants_grad(a.impl_);
  Tensor out = make_output(std::move(out_shape), std::move(o), tracked,
                           "gather");
  if (tracked) {
    auto ai = a.impl_, oi = out.impl_;
    auto idx = std::make_shared<std::vector<std::size_t>>(index);
    record([ai, oi, idx] {
      const auto& go = grad_of(oi);
      auto& ga = grad_of(ai);
      for (std::size_t i = 0; i < idx->size(); ++i) ga[(*idx)[i]] += go[i];
    });
  }
  return out;
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward expects a scalar loss, got " +
                     shape_str(loss.shape()));
  }
  grad_of(loss.impl_)[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
}

Adam::Adam(Config cfg, const std::vector<Tensor>& params) : cfg_(cfg) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const auto& p : params) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step(std::vector<Tensor>& params) {
  if (params.size() != m_.size()) {
    throw ShapeError("adam: parameter count changed since construction");
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto g = params[p].grad();
    auto w = params[p].data();
    if (g.size() != m_[p].size()) {
      throw ShapeError("adam: grad length mismatch on parameter " +
                       std::to_string(p));
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      m_[p][i] = cfg_.beta1 * m_[p][i] + (1.0 - cfg_.beta1) * g[i];
      v_[p][i] = cfg_.beta2 * v_[p][i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m_[p][i] / bc1;
      const double vhat = v_[p][i] / bc2;
      w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.epsilon);
    }
  }
}

}  // namespace caac
