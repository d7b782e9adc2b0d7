#include "proxbundle/core/tape.hpp"

#include "proxbundle/core/dense_ops.hpp"

#include <cmath>
#include <string>

namespace proxbundle::ad {

namespace {

Tape& tape_of(const Var& a) {
  if (!a.valid()) throw UsageError("operation on an unbound Var");
  return *a.tape();
}

Tape& common_tape(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (b.tape() != &t) throw UsageError("operands recorded on different tapes");
  return t;
}

void accumulate(Matrix& slot, const Matrix& contribution) {
  if (slot.size() == 0) {
    slot = contribution;
  } else {
    slot += contribution;
  }
}

double sign_of(double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); }

}  // namespace

const Matrix& Var::value() const {
  if (!valid()) throw UsageError("value of an unbound Var");
  return tape_->node(id_).value;
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) {
    throw DimensionError("scalar(): expected 1x1, got " + shape_of(v));
  }
  return v(0, 0);
}

Var Tape::leaf(Matrix value) {
  TapeNode n;
  n.kind = OpKind::Leaf;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  TapeNode n;
  n.kind = OpKind::Constant;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Tape::push(OpKind kind, std::vector<Var> inputs, Matrix value, std::vector<Matrix> saved,
               std::vector<double> aux, std::vector<Index> index_aux, CustomBackward custom) {
  TapeNode n;
  n.value = std::move(value);
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape() != this) throw UsageError("input recorded on a different tape");
    needs = needs || nodes_[v.id()].requires_grad;
  }
  if (recording_ && needs) {
    n.kind = kind;
    n.requires_grad = true;
    n.inputs.reserve(inputs.size());
    for (const Var& v : inputs) n.inputs.push_back(v.id());
    n.saved = std::move(saved);
    n.aux = std::move(aux);
    n.index_aux = std::move(index_aux);
    n.custom = std::move(custom);
  }
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

void Tape::set_kink_margin(const Var& v, double margin) {
  if (v.tape() != this) throw UsageError("set_kink_margin: Var from another tape");
  nodes_.at(v.id()).kink_margin = margin;
}

double Tape::min_kink_margin() const {
  double m = std::numeric_limits<double>::infinity();
  for (const TapeNode& n : nodes_) m = std::min(m, n.kink_margin);
  return m;
}

Matrix GradientMap::operator[](const Var& v) const {
  if (v.tape() != tape_) throw UsageError("GradientMap queried with a Var from another tape");
  const Matrix& adj = adjoints_.at(v.id());
  if (adj.size() == 0) return Matrix::Zero(v.rows(), v.cols());
  return adj;
}

bool GradientMap::reached(const Var& v) const {
  return v.tape() == tape_ && adjoints_.at(v.id()).size() != 0;
}

GradientMap backward(const Tape& tape, const Var& output, const Matrix& seed) {
  if (output.tape() != &tape || output.id() >= tape.size()) {
    throw UsageError("backward: seed output is not on this tape");
  }
  require_same_shape(output.value(), seed, "backward seed");

  GradientMap g;
  g.tape_ = &tape;
  g.adjoints_.assign(tape.size(), Matrix());
  g.adjoints_[output.id()] = seed;

  for (std::size_t idx = output.id() + 1; idx-- > 0;) {
    const TapeNode& n = tape.node(idx);
    if (!n.requires_grad || n.inputs.empty()) continue;
    const Matrix adj = g.adjoints_[idx];
    if (adj.size() == 0) continue;

    auto in = [&](std::size_t k) -> const Matrix& { return tape.node(n.inputs[k]).value; };
    auto give = [&](std::size_t k, const Matrix& contribution) {
      const TapeNode& target = tape.node(n.inputs[k]);
      if (target.requires_grad) accumulate(g.adjoints_[n.inputs[k]], contribution);
    };

    switch (n.kind) {
      case OpKind::Leaf:
      case OpKind::Constant:
        break;
      case OpKind::MatMul:
        give(0, adj * in(1).transpose());
        give(1, in(0).transpose() * adj);
        break;
      case OpKind::Transpose:
        give(0, adj.transpose());
        break;
      case OpKind::Add:
        give(0, adj);
        give(1, adj);
        break;
      case OpKind::Sub:
        give(0, adj);
        give(1, -adj);
        break;
      case OpKind::Hadamard:
        give(0, adj.cwiseProduct(in(1)));
        give(1, adj.cwiseProduct(in(0)));
        break;
      case OpKind::Scale:
        give(0, n.aux[0] * adj);
        break;
      case OpKind::ScaleBy:
        give(0, Matrix::Constant(1, 1, adj.cwiseProduct(in(1)).sum()));
        give(1, in(0)(0, 0) * adj);
        break;
      case OpKind::AddRowBroadcast:
        give(0, adj);
        give(1, adj.colwise().sum());
        break;
      case OpKind::AddColBroadcast:
        give(0, adj);
        give(1, adj.rowwise().sum());
        break;
      case OpKind::Gelu:
        give(0, adj.cwiseProduct(in(0).unaryExpr([](double x) { return gelu_derivative(x); })));
        break;
      case OpKind::LayerNorm: {
        // saved[0] = normalized rows x̂, saved[1] = per-row 1/sqrt(var+eps) (rows×1)
        const Matrix& xhat = n.saved[0];
        const Matrix& inv_std = n.saved[1];
        const Matrix& scale = in(1);
        const double d = static_cast<double>(xhat.cols());
        const Matrix dxhat = adj.array().rowwise() * scale.row(0).array();
        Matrix dx(xhat.rows(), xhat.cols());
        for (Index i = 0; i < xhat.rows(); ++i) {
          const double mean_dxhat = dxhat.row(i).sum() / d;
          const double mean_dxhat_xhat = dxhat.row(i).dot(xhat.row(i)) / d;
          dx.row(i) = inv_std(i, 0) * (dxhat.row(i).array() - mean_dxhat -
                                       xhat.row(i).array() * mean_dxhat_xhat)
                                          .matrix();
        }
        give(0, dx);
        give(1, adj.cwiseProduct(xhat).colwise().sum());
        give(2, adj.colwise().sum());
        break;
      }
      case OpKind::Relu:
        give(0, adj.cwiseProduct(in(0).unaryExpr([](double x) { return x > 0 ? 1.0 : 0.0; })));
        break;
      case OpKind::Sign:
        // zero almost everywhere
        break;
      case OpKind::Abs:
        give(0, adj.cwiseProduct(in(0).unaryExpr(&sign_of)));
        break;
      case OpKind::FrobeniusNorm: {
        const double norm = n.value(0, 0);
        if (norm > 0) give(0, (adj(0, 0) / norm) * in(0));
        break;
      }
      case OpKind::Sum:
        give(0, Matrix::Constant(in(0).rows(), in(0).cols(), adj(0, 0)));
        break;
      case OpKind::Cols: {
        Matrix full = Matrix::Zero(in(0).rows(), in(0).cols());
        full.middleCols(n.index_aux[0], n.index_aux[1]) = adj;
        give(0, full);
        break;
      }
      case OpKind::Rows: {
        Matrix full = Matrix::Zero(in(0).rows(), in(0).cols());
        full.middleRows(n.index_aux[0], n.index_aux[1]) = adj;
        give(0, full);
        break;
      }
      case OpKind::HCat: {
        Index offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Index c = in(k).cols();
          give(k, adj.middleCols(offset, c));
          offset += c;
        }
        break;
      }
      case OpKind::VCat: {
        Index offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Index r = in(k).rows();
          give(k, adj.middleRows(offset, r));
          offset += r;
        }
        break;
      }
      case OpKind::SoftmaxRows: {
        const Matrix& s = n.value;
        const Matrix inner = adj.cwiseProduct(s).rowwise().sum();
        give(0, s.cwiseProduct(adj - inner.replicate(1, s.cols())));
        break;
      }
      case OpKind::CrossEntropy: {
        // saved[0] = softmax probabilities, index_aux = labels
        Matrix grad = n.saved[0];
        for (Index i = 0; i < grad.rows(); ++i) grad(i, n.index_aux[i]) -= 1.0;
        give(0, (adj(0, 0) / static_cast<double>(grad.rows())) * grad);
        break;
      }
      case OpKind::Custom: {
        std::vector<Matrix> inputs;
        inputs.reserve(n.inputs.size());
        for (std::size_t k = 0; k < n.inputs.size(); ++k) inputs.push_back(in(k));
        const std::vector<Matrix> parts = n.custom(adj, inputs, n.value);
        for (std::size_t k = 0; k < parts.size() && k < n.inputs.size(); ++k) {
          if (parts[k].size() != 0) give(k, parts[k]);
        }
        break;
      }
    }
  }
  return g;
}

GradientMap backward(const Tape& tape, const Var& scalar_output) {
  return backward(tape, scalar_output, Matrix::Ones(1, 1));
}

// -- primitives -------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  return t.push(OpKind::MatMul, {a, b}, proxbundle::matmul(a.value(), b.value()));
}

Var transpose(const Var& a) {
  return tape_of(a).push(OpKind::Transpose, {a}, a.value().transpose());
}

Var add(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  return t.push(OpKind::Add, {a, b}, a.value() + b.value());
}

Var sub(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  return t.push(OpKind::Sub, {a, b}, a.value() - b.value());
}

Var hadamard(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  require_same_shape(a.value(), b.value(), "hadamard");
  return t.push(OpKind::Hadamard, {a, b}, a.value().cwiseProduct(b.value()));
}

Var scale(const Var& a, double factor) {
  return tape_of(a).push(OpKind::Scale, {a}, factor * a.value(), {}, {factor});
}

Var scale_by(const Var& s, const Var& a) {
  Tape& t = common_tape(s, a);
  if (s.rows() != 1 || s.cols() != 1) {
    throw DimensionError("scale_by: factor must be 1x1, got " + shape_of(s.value()));
  }
  return t.push(OpKind::ScaleBy, {s, a}, s.value()(0, 0) * a.value());
}

Var add_row_broadcast(const Var& a, const Var& row) {
  Tape& t = common_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row_broadcast: " + shape_of(a.value()) + " + " +
                         shape_of(row.value()));
  }
  Matrix out = a.value().rowwise() + row.value().row(0);
  return t.push(OpKind::AddRowBroadcast, {a, row}, std::move(out));
}

Var add_col_broadcast(const Var& a, const Var& col) {
  Tape& t = common_tape(a, col);
  if (col.cols() != 1 || col.rows() != a.rows()) {
    throw DimensionError("add_col_broadcast: " + shape_of(a.value()) + " + " +
                         shape_of(col.value()));
  }
  Matrix out = a.value().colwise() + col.value().col(0);
  return t.push(OpKind::AddColBroadcast, {a, col}, std::move(out));
}

Var gelu(const Var& a) { return tape_of(a).push(OpKind::Gelu, {a}, proxbundle::gelu(a.value())); }

Var layer_norm_rows(const Var& a, const Var& scale, const Var& shift) {
  Tape& t = common_tape(a, scale);
  common_tape(a, shift);
  const Matrix& x = a.value();
  Matrix out = proxbundle::layer_norm_rows(x, scale.value(), shift.value());
  if (!t.recording()) return t.push(OpKind::LayerNorm, {a, scale, shift}, std::move(out));
  Matrix xhat(x.rows(), x.cols());
  Matrix inv_std(x.rows(), 1);
  const double d = static_cast<double>(x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double mean = x.row(i).sum() / d;
    const RowVector centered = (x.row(i).array() - mean).matrix();
    const double inv = 1.0 / std::sqrt(centered.squaredNorm() / d + kLayerNormEps);
    xhat.row(i) = centered * inv;
    inv_std(i, 0) = inv;
  }
  return t.push(OpKind::LayerNorm, {a, scale, shift}, std::move(out), {xhat, inv_std});
}

Var relu(const Var& a) {
  Tape& t = tape_of(a);
  Var out = t.push(OpKind::Relu, {a}, a.value().cwiseMax(0.0));
  if (a.value().size() > 0) t.set_kink_margin(out, a.value().cwiseAbs().minCoeff());
  return out;
}

Var sign(const Var& a) {
  Tape& t = tape_of(a);
  Var out = t.push(OpKind::Sign, {a}, a.value().unaryExpr(&sign_of));
  if (a.value().size() > 0) t.set_kink_margin(out, a.value().cwiseAbs().minCoeff());
  return out;
}

Var abs(const Var& a) {
  Tape& t = tape_of(a);
  Var out = t.push(OpKind::Abs, {a}, a.value().cwiseAbs());
  if (a.value().size() > 0) t.set_kink_margin(out, a.value().cwiseAbs().minCoeff());
  return out;
}

Var frobenius_norm(const Var& a) {
  return tape_of(a).push(OpKind::FrobeniusNorm, {a}, Matrix::Constant(1, 1, a.value().norm()));
}

Var sum(const Var& a) {
  return tape_of(a).push(OpKind::Sum, {a}, Matrix::Constant(1, 1, a.value().sum()));
}

Var cols(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) {
    throw DimensionError("cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " + shape_of(a.value()));
  }
  return tape_of(a).push(OpKind::Cols, {a}, a.value().middleCols(start, count), {}, {},
                         {start, count});
}

Var col(const Var& a, Index j) { return cols(a, j, 1); }

Var rows(const Var& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    throw DimensionError("rows: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") outside " + shape_of(a.value()));
  }
  return tape_of(a).push(OpKind::Rows, {a}, a.value().middleRows(start, count), {}, {},
                         {start, count});
}

Var row(const Var& a, Index i) { return rows(a, i, 1); }

Var hcat(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("hcat: no operands");
  Tape& t = tape_of(parts.front());
  Index total = 0;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw UsageError("hcat: operands on different tapes");
    if (p.rows() != parts.front().rows()) {
      throw DimensionError("hcat: row mismatch " + shape_of(parts.front().value()) + " vs " +
                           shape_of(p.value()));
    }
    total += p.cols();
  }
  Matrix out(parts.front().rows(), total);
  Index offset = 0;
  for (const Var& p : parts) {
    out.middleCols(offset, p.cols()) = p.value();
    offset += p.cols();
  }
  return t.push(OpKind::HCat, {parts.begin(), parts.end()}, std::move(out));
}

Var vcat(std::span<const Var> parts) {
  if (parts.empty()) throw UsageError("vcat: no operands");
  Tape& t = tape_of(parts.front());
  Index total = 0;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw UsageError("vcat: operands on different tapes");
    if (p.cols() != parts.front().cols()) {
      throw DimensionError("vcat: column mismatch " + shape_of(parts.front().value()) + " vs " +
                           shape_of(p.value()));
    }
    total += p.rows();
  }
  Matrix out(total, parts.front().cols());
  Index offset = 0;
  for (const Var& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
  }
  return t.push(OpKind::VCat, {parts.begin(), parts.end()}, std::move(out));
}

Var softmax_rows(const Var& a) {
  return tape_of(a).push(OpKind::SoftmaxRows, {a}, proxbundle::softmax_rows(a.value()));
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  const Matrix& z = logits.value();
  if (static_cast<Index>(labels.size()) != z.rows() || z.rows() == 0) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         shape_of(z) + " logits");
  }
  Matrix probs = proxbundle::softmax_rows(z);
  std::vector<Index> idx;
  idx.reserve(labels.size());
  double loss = 0.0;
  for (Index i = 0; i < z.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= z.cols()) {
      throw UsageError("cross_entropy: label " + std::to_string(y) + " outside [0, " +
                       std::to_string(z.cols()) + ")");
    }
    const double shift = z.row(i).maxCoeff();
    const double lse = shift + std::log((z.row(i).array() - shift).exp().sum());
    loss += lse - z(i, y);
    idx.push_back(y);
  }
  loss /= static_cast<double>(z.rows());
  return tape_of(logits).push(OpKind::CrossEntropy, {logits}, Matrix::Constant(1, 1, loss),
                              {std::move(probs)}, {}, std::move(idx));
}

Var custom(std::vector<Var> inputs, Matrix value, CustomBackward rule) {
  if (inputs.empty()) throw UsageError("custom: no inputs");
  Tape& t = tape_of(inputs.front());
  return t.push(OpKind::Custom, std::move(inputs), std::move(value), {}, {}, {}, std::move(rule));
}

}  // namespace proxbundle::ad
