#include "crowdtree/autograd.hpp"

#include <algorithm>
#include <cmath>
#if defined(__GLIBC__)
#include <malloc.h>
#endif
#include <stdexcept>
#include <string>

namespace crowdtree {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

[[noreturn]] void mismatch(const std::string& op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(op + ": dimension mismatch " + shape_string(a) + " vs " +
                              shape_string(b));
}

void require_rank(const std::string& op, const Tensor& t, std::size_t rank) {
  if (t.ndim() != rank) {
    throw std::invalid_argument(op + ": expected rank " + std::to_string(rank) + ", got " +
                                shape_string(t.dims()));
  }
}

void same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument("autograd: operands on different tapes");
}

// Fills `cols` ((C*kh*kw) x (H*W)) from one CHW sample with zero same-padding.
void im2col(const double* x, std::size_t c_in, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, RowMatrix& cols) {
  const auto ph = static_cast<std::ptrdiff_t>(kh / 2);
  const auto pw = static_cast<std::ptrdiff_t>(kw / 2);
  const auto ih = static_cast<std::ptrdiff_t>(h);
  const auto iw = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < c_in; ++c) {
    const double* plane = x + c * h * w;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        double* row = cols.row(static_cast<Eigen::Index>((c * kh + ky) * kw + kx)).data();
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - ph;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pw;
        for (std::ptrdiff_t y = 0; y < ih; ++y) {
          const std::ptrdiff_t sy = y + dy;
          double* dst = row + y * iw;
          if (sy < 0 || sy >= ih) {
            std::fill(dst, dst + iw, 0.0);
            continue;
          }
          const double* src = plane + sy * iw;
          const std::ptrdiff_t x_lo = std::min(iw, std::max<std::ptrdiff_t>(0, -dx));
          const std::ptrdiff_t x_hi = std::max(x_lo, std::min<std::ptrdiff_t>(iw, iw - dx));
          std::fill(dst, dst + x_lo, 0.0);
          for (std::ptrdiff_t xx = x_lo; xx < x_hi; ++xx) dst[xx] = src[xx + dx];
          std::fill(dst + x_hi, dst + iw, 0.0);
        }
      }
    }
  }
}

void col2im_add(const RowMatrix& cols, std::size_t c_in, std::size_t h, std::size_t w,
                std::size_t kh, std::size_t kw, double* dx_out) {
  const auto ph = static_cast<std::ptrdiff_t>(kh / 2);
  const auto pw = static_cast<std::ptrdiff_t>(kw / 2);
  const auto ih = static_cast<std::ptrdiff_t>(h);
  const auto iw = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < c_in; ++c) {
    double* plane = dx_out + c * h * w;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const double* row = cols.row(static_cast<Eigen::Index>((c * kh + ky) * kw + kx)).data();
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - ph;
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pw;
        for (std::ptrdiff_t y = 0; y < ih; ++y) {
          const std::ptrdiff_t sy = y + dy;
          if (sy < 0 || sy >= ih) continue;
          const double* src = row + y * iw;
          double* dst = plane + sy * iw;
          const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, -dx);
          const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(iw, iw - dx);
          for (std::ptrdiff_t xx = x_lo; xx < x_hi; ++xx) dst[xx + dx] += src[xx];
        }
      }
    }
  }
}

#if defined(__GLIBC__)
// im2col buffers are several MB and are allocated per op; keep them on the
// heap instead of fresh mmap regions so repeated passes do not page-fault.
[[maybe_unused]] const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

}  // namespace

const Tensor& Var::value() const { return tape_->value(*this); }

Var Tape::constant(Tensor value) {
  Node node;
  node.owned = std::move(value);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Tape::param(ParamEntry& entry) {
  Node node;
  node.ref = &entry.value;
  if (record_) node.sink = &entry;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Tape::param(const ParamEntry& entry) {
  Node node;
  node.ref = &entry.value;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const {
  const Node& n = nodes_.at(v.id());
  return n.ref ? *n.ref : n.owned;
}

Tensor& Tape::grad(Var v) {
  Node& n = nodes_.at(v.id());
  if (n.grad.empty()) n.grad = Tensor::zeros_like(n.ref ? *n.ref : n.owned);
  return n.grad;
}

bool Tape::has_grad(Var v) const {
  const Node& n = nodes_.at(v.id());
  return n.sink != nullptr || static_cast<bool>(n.backward);
}

Var Tape::push(Tensor value, BackwardFn fn) {
  Node node;
  node.owned = std::move(value);
  if (record_) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

void Tape::backward(Var loss) {
  if (&loss.tape() != this) throw std::invalid_argument("backward: loss recorded on another tape");
  if (!record_) throw std::logic_error("backward: tape was created without recording");
  if (value(loss).size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar, got " +
                                shape_string(value(loss).dims()));
  }
  grad(loss)[0] = 1.0;
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty()) continue;
    if (n.backward) n.backward(*this, Var(this, i));
    if (n.sink) n.sink->grad.vec() += n.grad.vec();
  }
}

Var conv2d(Var input, Var weights, Var bias) {
  same_tape(input, weights);
  same_tape(input, bias);
  Tape& tape = input.tape();
  const Tensor& x = input.value();
  const Tensor& w = weights.value();
  const Tensor& b = bias.value();
  require_rank("conv2d", x, 4);
  require_rank("conv2d", w, 4);
  const std::size_t n = x.dim(0), c_in = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t c_out = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != c_in) mismatch("conv2d", x.dims(), w.dims());
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw std::invalid_argument("conv2d: kernel extents must be odd, got " + shape_string(w.dims()));
  }
  if (b.ndim() != 1 || b.dim(0) != c_out) mismatch("conv2d", w.dims(), b.dims());

  const std::size_t hw = h * wd;
  const std::size_t patch = c_in * kh * kw;
  const ConstRowMap wmat(w.data(), static_cast<Eigen::Index>(c_out), static_cast<Eigen::Index>(patch));
  const Eigen::Map<const Eigen::VectorXd> bvec(b.data(), static_cast<Eigen::Index>(c_out));

  Tensor out({n, c_out, h, wd});
  const bool keep = tape.recording() && (tape.has_grad(weights) || tape.has_grad(input) ||
                                         tape.has_grad(bias));
  std::vector<RowMatrix> saved;
  if (keep) saved.reserve(n);
  RowMatrix cols(static_cast<Eigen::Index>(patch), static_cast<Eigen::Index>(hw));
  for (std::size_t s = 0; s < n; ++s) {
    im2col(x.data() + s * c_in * hw, c_in, h, wd, kh, kw, cols);
    RowMap o(out.data() + s * c_out * hw, static_cast<Eigen::Index>(c_out), static_cast<Eigen::Index>(hw));
    o.noalias() = wmat * cols;
    o.colwise() += bvec;
    if (keep) saved.push_back(cols);
  }
  if (!keep) return tape.push(std::move(out), nullptr);

  return tape.push(std::move(out), [=, saved = std::move(saved)](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    const Tensor& wv = t.value(weights);
    const ConstRowMap wm(wv.data(), static_cast<Eigen::Index>(c_out), static_cast<Eigen::Index>(patch));
    const bool need_w = t.has_grad(weights);
    const bool need_b = t.has_grad(bias);
    const bool need_x = t.has_grad(input);
    RowMatrix dcols;
    for (std::size_t s = 0; s < n; ++s) {
      const ConstRowMap go(g.data() + s * c_out * hw, static_cast<Eigen::Index>(c_out),
                           static_cast<Eigen::Index>(hw));
      if (need_w) {
        RowMap dw(t.grad(weights).data(), static_cast<Eigen::Index>(c_out), static_cast<Eigen::Index>(patch));
        dw.noalias() += go * saved[s].transpose();
      }
      if (need_b) {
        Eigen::Map<Eigen::VectorXd> db(t.grad(bias).data(), static_cast<Eigen::Index>(c_out));
        db += go.rowwise().sum();
      }
      if (need_x) {
        dcols.noalias() = wm.transpose() * go;
        col2im_add(dcols, c_in, h, wd, kh, kw, t.grad(input).data() + s * c_in * hw);
      }
    }
  });
}

Var maxpool2(Var input) {
  Tape& tape = input.tape();
  const Tensor& x = input.value();
  require_rank("maxpool2", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) throw std::invalid_argument("maxpool2: input too small " + shape_string(x.dims()));
  Tensor out({n, c, oh, ow});
  std::vector<std::size_t> arg(out.size());
  std::size_t o = 0;
  for (std::size_t p = 0; p < n * c; ++p) {
    const double* plane = x.data() + p * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx, ++o) {
        std::size_t best = (2 * y) * w + 2 * xx;
        for (std::size_t k : {best + 1, best + w, best + w + 1}) {
          if (plane[k] > plane[best]) best = k;
        }
        out[o] = plane[best];
        arg[o] = p * h * w + best;
      }
    }
  }
  return tape.push(std::move(out), [=, arg = std::move(arg)](Tape& t, Var self) {
    if (!t.has_grad(input)) return;
    const Tensor& g = t.grad(self);
    Tensor& dx = t.grad(input);
    for (std::size_t i = 0; i < arg.size(); ++i) dx[arg[i]] += g[i];
  });
}

Var relu(Var input) {
  Tape& tape = input.tape();
  Tensor out = input.value();
  out.vec() = out.vec().cwiseMax(0.0);
  return tape.push(std::move(out), [=](Tape& t, Var self) {
    if (!t.has_grad(input)) return;
    // Subgradient at exactly 0 is taken as 0.
    const auto& xv = t.value(input).vec();
    t.grad(input).vec().array() += (xv.array() > 0.0).select(t.grad(self).vec().array(), 0.0);
  });
}

Var fully_connected(Var input, Var weights, Var bias) {
  same_tape(input, weights);
  same_tape(input, bias);
  Tape& tape = input.tape();
  const Tensor& x = input.value();
  const Tensor& w = weights.value();
  const Tensor& b = bias.value();
  require_rank("fully_connected", w, 2);
  if (x.ndim() < 2) mismatch("fully_connected", x.dims(), w.dims());
  const std::size_t n = x.dim(0);
  const std::size_t f = x.size() / n;
  const std::size_t o = w.dim(0);
  if (w.dim(1) != f) mismatch("fully_connected", x.dims(), w.dims());
  if (b.ndim() != 1 || b.dim(0) != o) mismatch("fully_connected", w.dims(), b.dims());
  Tensor out({n, o});
  out.matrix(n).noalias() = x.matrix(n) * w.matrix(o).transpose();
  out.matrix(n).rowwise() += b.vec().transpose();
  return tape.push(std::move(out), [=](Tape& t, Var self) {
    const Tensor& g = t.grad(self);
    if (t.has_grad(weights)) t.grad(weights).matrix(o).noalias() += g.matrix(n).transpose() * t.value(input).matrix(n);
    if (t.has_grad(bias)) t.grad(bias).vec() += g.matrix(n).colwise().sum().transpose();
    if (t.has_grad(input)) t.grad(input).matrix(n).noalias() += g.matrix(n) * t.value(weights).matrix(o);
  });
}

Var global_avg_pool(Var input) {
  Tape& tape = input.tape();
  const Tensor& x = input.value();
  require_rank("global_avg_pool", x, 4);
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor out({n, c});
  out.vec() = x.matrix(n * c).rowwise().mean();
  return tape.push(std::move(out), [=](Tape& t, Var self) {
    if (!t.has_grad(input)) return;
    const Tensor& g = t.grad(self);
    auto dx = t.grad(input).matrix(n * c);
    dx.colwise() += g.vec() / static_cast<double>(hw);
  });
}

Var softmax(Var input) {
  Tape& tape = input.tape();
  const Tensor& x = input.value();
  require_rank("softmax", x, 2);
  const std::size_t n = x.dim(0);
  Tensor out = x;
  auto m = out.matrix(n);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    m.row(r).array() -= m.row(r).maxCoeff();
    m.row(r) = m.row(r).array().exp().matrix();
    m.row(r) /= m.row(r).sum();
  }
  return tape.push(std::move(out), [=](Tape& t, Var self) {
    if (!t.has_grad(input)) return;
    const auto y = t.value(self).matrix(n);
    const auto g = t.grad(self).matrix(n);
    auto dx = t.grad(input).matrix(n);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double inner = g.row(r).dot(y.row(r));
      dx.row(r).array() += y.row(r).array() * (g.row(r).array() - inner);
    }
  });
}

Var crop(Var input, std::size_t y0, std::size_t x0, std::size_t h, std::size_t w) {
  Tape& tape = input.tape();
  const Tensor& x = input.value();
  require_rank("crop", x, 4);
  if (h == 0 || w == 0 || y0 + h > x.dim(2) || x0 + w > x.dim(3)) {
    throw std::invalid_argument("crop: window [" + std::to_string(y0) + "+" + std::to_string(h) +
                                ", " + std::to_string(x0) + "+" + std::to_string(w) +
                                "] outside " + shape_string(x.dims()));
  }
  const std::size_t planes = x.dim(0) * x.dim(1), ih = x.dim(2), iw = x.dim(3);
  Tensor out({x.dim(0), x.dim(1), h, w});
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < h; ++y) {
      const double* src = x.data() + (p * ih + y0 + y) * iw + x0;
      std::copy(src, src + w, out.data() + (p * h + y) * w);
    }
  }
  return tape.push(std::move(out), [=](Tape& t, Var self) {
    if (!t.has_grad(input)) return;
    const Tensor& g = t.grad(self);
    Tensor& dx = t.grad(input);
    for (std::size_t p = 0; p < planes; ++p) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t xx = 0; xx < w; ++xx) {
          dx[(p * ih + y0 + y) * iw + x0 + xx] += g[(p * h + y) * w + xx];
        }
      }
    }
  });
}

Var flip_horizontal(Var input) {
  Tape& tape = input.tape();
  const Tensor& x = input.value();
  if (x.ndim() < 2) throw std::invalid_argument("flip_horizontal: rank < 2 " + shape_string(x.dims()));
  const std::size_t w = x.dims().back();
  const std::size_t rows = x.size() / w;
  Tensor out = x;
  out.matrix(rows) = x.matrix(rows).rowwise().reverse();
  return tape.push(std::move(out), [=](Tape& t, Var self) {
    if (!t.has_grad(input)) return;
    t.grad(input).matrix(rows) += t.grad(self).matrix(rows).rowwise().reverse();
  });
}

Var sum_per_sample(Var input) {
  Tape& tape = input.tape();
  const Tensor& x = input.value();
  const std::size_t n = x.dim(0);
  Tensor out({n});
  out.vec() = x.matrix(n).rowwise().sum();
  return tape.push(std::move(out), [=](Tape& t, Var self) {
    if (!t.has_grad(input)) return;
    t.grad(input).matrix(n).colwise() += t.grad(self).vec();
  });
}

Var sum(Var input) {
  Tape& tape = input.tape();
  Tensor out({1}, input.value().sum());
  return tape.push(std::move(out), [=](Tape& t, Var self) {
    if (!t.has_grad(input)) return;
    t.grad(input).vec().array() += t.grad(self)[0];
  });
}

Var dot_constant(Var input, const Tensor& weights) {
  Tape& tape = input.tape();
  const Tensor& x = input.value();
  if (x.dims() != weights.dims()) mismatch("dot_constant", x.dims(), weights.dims());
  Tensor out({1}, x.vec().dot(weights.vec()));
  return tape.push(std::move(out), [=](Tape& t, Var self) {
    if (!t.has_grad(input)) return;
    t.grad(input).vec() += t.grad(self)[0] * weights.vec();
  });
}

Var mix(std::span<const Var> experts, Var gate) {
  if (experts.empty()) throw std::invalid_argument("mix: no experts");
  Tape& tape = gate.tape();
  const Tensor& gv = gate.value();
  require_rank("mix", gv, 2);
  const std::size_t k = experts.size();
  const Shape& dims = experts.front().dims();
  const std::size_t n = dims.at(0);
  if (gv.dim(0) != n || gv.dim(1) != k) mismatch("mix", dims, gv.dims());
  for (const Var& e : experts) {
    same_tape(e, gate);
    if (e.dims() != dims) mismatch("mix", dims, e.dims());
  }
  Tensor out(dims);
  auto om = out.matrix(n);
  for (std::size_t j = 0; j < k; ++j) {
    const auto em = experts[j].value().matrix(n);
    for (std::size_t s = 0; s < n; ++s) {
      om.row(static_cast<Eigen::Index>(s)) += gv.at(s, j) * em.row(static_cast<Eigen::Index>(s));
    }
  }
  std::vector<Var> ex(experts.begin(), experts.end());
  return tape.push(std::move(out), [=, ex = std::move(ex)](Tape& t, Var self) {
    const auto g = t.grad(self).matrix(n);
    const Tensor& gate_v = t.value(gate);
    for (std::size_t j = 0; j < k; ++j) {
      const auto em = t.value(ex[j]).matrix(n);
      for (std::size_t s = 0; s < n; ++s) {
        const auto row = static_cast<Eigen::Index>(s);
        if (t.has_grad(ex[j])) t.grad(ex[j]).matrix(n).row(row) += gate_v.at(s, j) * g.row(row);
        if (t.has_grad(gate)) t.grad(gate).at(s, j) += em.row(row).dot(g.row(row));
      }
    }
  });
}

Var l2_loss(Var pred, const Tensor& gt) {
  Tape& tape = pred.tape();
  const Tensor& p = pred.value();
  if (p.dims() != gt.dims()) mismatch("l2_loss", p.dims(), gt.dims());
  const auto n = static_cast<double>(p.dim(0));
  Eigen::VectorXd diff = p.vec() - gt.vec();
  Tensor out({1}, 0.5 * diff.squaredNorm() / n);
  return tape.push(std::move(out), [=, diff = std::move(diff)](Tape& t, Var self) {
    if (!t.has_grad(pred)) return;
    t.grad(pred).vec() += (t.grad(self)[0] / n) * diff;
  });
}

Var count_loss(Var pred, std::span<const double> gt_counts, double lambda) {
  Tape& tape = pred.tape();
  const Tensor& p = pred.value();
  const std::size_t n = p.dim(0);
  if (gt_counts.size() != n) {
    mismatch("count_loss", p.dims(), Shape{gt_counts.size()});
  }
  Eigen::VectorXd resid = p.matrix(n).rowwise().sum();
  for (std::size_t s = 0; s < n; ++s) resid[static_cast<Eigen::Index>(s)] -= gt_counts[s];
  const double scale = lambda / static_cast<double>(n);
  Tensor out({1}, 0.5 * scale * resid.squaredNorm());
  return tape.push(std::move(out), [=, resid = std::move(resid)](Tape& t, Var self) {
    if (!t.has_grad(pred)) return;
    t.grad(pred).matrix(n).colwise() += (t.grad(self)[0] * scale) * resid;
  });
}

Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
  Tape& tape = logits.tape();
  const Tensor& z = logits.value();
  require_rank("softmax_cross_entropy", z, 2);
  const std::size_t n = z.dim(0), k = z.dim(1);
  if (labels.size() != n) mismatch("softmax_cross_entropy", z.dims(), Shape{labels.size()});
  RowMatrix prob = z.matrix(n);
  double loss = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    if (labels[s] >= k) throw std::invalid_argument("softmax_cross_entropy: label out of range");
    auto row = prob.row(static_cast<Eigen::Index>(s));
    const double mx = row.maxCoeff();
    row.array() = (row.array() - mx).exp();
    const double total = row.sum();
    row /= total;
    loss -= std::log(std::max(row[static_cast<Eigen::Index>(labels[s])], 1e-300));
  }
  Tensor out({1}, loss / static_cast<double>(n));
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return tape.push(std::move(out), [=, prob = std::move(prob), lab = std::move(lab)](Tape& t, Var self) {
    if (!t.has_grad(logits)) return;
    RowMatrix d = prob;
    for (std::size_t s = 0; s < n; ++s) d(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(lab[s])) -= 1.0;
    t.grad(logits).matrix(n) += (t.grad(self)[0] / static_cast<double>(n)) * d;
  });
}

}  // namespace crowdtree
