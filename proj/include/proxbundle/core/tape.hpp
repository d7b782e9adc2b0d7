#pragma once

#include "proxbundle/core/matrix.hpp"

#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

namespace proxbundle::ad {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while its tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  /// Convenience for 1×1 values.
  double scalar() const;

  std::size_t id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

enum class OpKind : std::uint8_t {
  Leaf,
  Constant,
  MatMul,
  Transpose,
  Add,
  Sub,
  Hadamard,
  Scale,
  ScaleBy,
  AddRowBroadcast,
  AddColBroadcast,
  Gelu,
  LayerNorm,
  Relu,
  Sign,
  Abs,
  FrobeniusNorm,
  Sum,
  Cols,
  Rows,
  HCat,
  VCat,
  SoftmaxRows,
  CrossEntropy,
  Custom,
};

/// Backward rule for a custom primitive: given the output adjoint, return one adjoint per
/// input (an empty matrix means "no contribution").
using CustomBackward =
    std::function<std::vector<Matrix>(const Matrix& out_adjoint, std::span<const Matrix> inputs,
                                      const Matrix& output)>;

struct TapeNode {
  OpKind kind = OpKind::Constant;
  std::vector<std::size_t> inputs;  // always ids of earlier nodes
  Matrix value;
  std::vector<Matrix> saved;
  std::vector<double> aux;
  std::vector<Index> index_aux;
  CustomBackward custom;
  bool requires_grad = false;
  // Distance of the argument of a nonsmooth primitive to its kink (infinity if smooth).
  double kink_margin = std::numeric_limits<double>::infinity();
};

/// Adjoints produced by a backward sweep, one per tape node.
class GradientMap {
 public:
  GradientMap() = default;

  /// Adjoint of `v`; nodes the sweep never reached get a zero matrix of the right shape.
  Matrix operator[](const Var& v) const;
  bool reached(const Var& v) const;

 private:
  friend GradientMap backward(const Tape&, const Var&, const Matrix&);
  const Tape* tape_ = nullptr;
  std::vector<Matrix> adjoints_;
};

/// Linear record of differentiable operations. Single owner: do not record on or sweep
/// the same tape from two threads.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input (a trainable parameter or a point of differentiation).
  Var leaf(Matrix value);
  /// Input treated as a constant; gradients are not propagated into it.
  Var constant(Matrix value);

  /// With recording off every operation stores only its value, so the tape becomes a
  /// plain evaluator and backward yields zero adjoints.
  void set_recording(bool on) { recording_ = on; }
  bool recording() const { return recording_; }

  std::size_t size() const { return nodes_.size(); }
  const TapeNode& node(std::size_t id) const { return nodes_.at(id); }

  /// Appends a node; used by the primitive implementations.
  Var push(OpKind kind, std::vector<Var> inputs, Matrix value, std::vector<Matrix> saved = {},
           std::vector<double> aux = {}, std::vector<Index> index_aux = {},
           CustomBackward custom = {});

  void set_kink_margin(const Var& v, double margin);
  /// Smallest kink margin over all recorded nodes; finite-difference checks use it to
  /// reject samples that straddle a nondifferentiable point.
  double min_kink_margin() const;

  void clear() { nodes_.clear(); }

 private:
  std::vector<TapeNode> nodes_;
  bool recording_ = true;
};

/// Reverse sweep from `output` seeded with `seed`. Adjoints accumulate additively over
/// fan-out. Throws UsageError if `output` does not belong to `tape`.
GradientMap backward(const Tape& tape, const Var& output, const Matrix& seed);

/// Shorthand for a 1×1 output seeded with 1.
GradientMap backward(const Tape& tape, const Var& scalar_output);

// -- primitives -------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var hadamard(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
/// `s` is 1×1; returns s·a.
Var scale_by(const Var& s, const Var& a);
/// Adds the 1×cols row vector `row` to every row of `a`.
Var add_row_broadcast(const Var& a, const Var& row);
/// Adds the rows×1 column vector `col` to every column of `a`.
Var add_col_broadcast(const Var& a, const Var& col);
Var gelu(const Var& a);
/// Per-row normalization over the feature axis, then the affine map (scale, shift are 1×cols).
Var layer_norm_rows(const Var& a, const Var& scale, const Var& shift);
Var relu(const Var& a);
/// Elementwise sign; derivative is zero everywhere.
Var sign(const Var& a);
Var abs(const Var& a);
Var frobenius_norm(const Var& a);
Var sum(const Var& a);
Var col(const Var& a, Index j);
Var cols(const Var& a, Index start, Index count);
Var row(const Var& a, Index i);
Var rows(const Var& a, Index start, Index count);
Var hcat(std::span<const Var> parts);
Var vcat(std::span<const Var> parts);
Var softmax_rows(const Var& a);
/// Mean cross-entropy of row-wise logits against integer labels; returns 1×1.
Var cross_entropy(const Var& logits, std::span<const int> labels);

/// Registers a user-defined primitive whose forward value was computed by the caller.
Var custom(std::vector<Var> inputs, Matrix value, CustomBackward rule);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return matmul(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

}  // namespace proxbundle::ad
