#pragma once

#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace mtil {

using Shape = std::vector<int>;

int numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

/// Dense tensor of 64-bit reals. When `node >= 0` the value is recorded on a
/// Tape and participates in reverse-mode differentiation; node == -1 means a
/// plain constant.
struct DiffArray {
  Shape shape;
  std::vector<double> data;
  int node = -1;
  const Tape* owner = nullptr;

  DiffArray() = default;
  DiffArray(Shape s, std::vector<double> d);

  static DiffArray zeros(Shape s);
  static DiffArray full(Shape s, double v);
  static DiffArray scalar(double v);

  int size() const { return static_cast<int>(data.size()); }
  int rows() const;
  int cols() const;
  bool is_scalar() const { return data.size() == 1; }
  double value() const;

  bool all_finite() const;
};

struct TapeError : std::runtime_error {
  explicit TapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Append-only reverse-mode tape. Every operation appends one node holding
/// the op kind, input node ids and the output values, which is enough to run
/// exact vector-Jacobian products in a single reverse sweep (each node is
/// visited exactly once; fan-out gradients accumulate additively).
///
/// The tape is rebuilt per training step (define-by-run). Operations whose
/// inputs are all constants are computed without recording, so evaluation-only
/// code can share one Tape without it growing.
///
/// Broadcasting is deliberately narrow: add(matrix, row-vector) and
/// mul(array, scalar). Anything else is an explicit reshape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Record a tracked leaf (parameter or differentiable input).
  DiffArray leaf(const DiffArray& values);

  DiffArray matmul(const DiffArray& a, const DiffArray& b);
  DiffArray add(const DiffArray& a, const DiffArray& b);
  DiffArray mul(const DiffArray& a, const DiffArray& b);
  DiffArray exp(const DiffArray& a);
  DiffArray log(const DiffArray& a);
  DiffArray softplus(const DiffArray& a);
  DiffArray silu(const DiffArray& a);
  DiffArray tanh(const DiffArray& a);
  DiffArray square(const DiffArray& a);
  DiffArray sum(const DiffArray& a);
  DiffArray mean(const DiffArray& a);
  DiffArray slice(const DiffArray& a, int start, int len);
  DiffArray concat(const DiffArray& a, const DiffArray& b);
  DiffArray softmax(const DiffArray& a);
  DiffArray reshape(const DiffArray& a, Shape s);
  DiffArray clamp(const DiffArray& a, double lo, double hi);

  // composed helpers
  DiffArray scale(const DiffArray& a, double c);
  DiffArray neg(const DiffArray& a);
  DiffArray sub(const DiffArray& a, const DiffArray& b);

  /// Gradient of a scalar loss w.r.t. every tracked node. May be called on
  /// one loss per tape; gradients of earlier backward calls are cleared.
  void backward(const DiffArray& loss);

  /// Gradient buffer of `a` after backward(); zeros if the loss never
  /// touched it.
  DiffArray grad(const DiffArray& a) const;

  int node_count() const { return static_cast<int>(nodes_.size()); }

 private:
  enum class Op {
    kConst,
    kLeaf,
    kMatmul,
    kAdd,
    kAddRow,
    kMul,
    kMulScalar,
    kExp,
    kLog,
    kSoftplus,
    kSilu,
    kTanh,
    kSquare,
    kSum,
    kMean,
    kSlice,
    kConcat,
    kSoftmax,
    kReshape,
    kClamp,
  };

  struct Node {
    Op op;
    int in0 = -1;
    int in1 = -1;
    int p0 = 0;
    int p1 = 0;
    double c0 = 0.0;
    double c1 = 0.0;
    Shape shape;
    std::vector<double> value;
  };

  int intern(const DiffArray& a);
  DiffArray record(Op op, Shape shape, std::vector<double> value,
                   const DiffArray& a, const DiffArray* b, int p0 = 0,
                   int p1 = 0, double c0 = 0.0, double c1 = 0.0);
  void check_owner(const DiffArray& a) const;
  void accumulate(int node, const double* g, int n);
  void backprop_node(int i);

  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
};

/// Max over components of |analytic - central difference| /
/// (|analytic| + |cd| + 1e-12) for a scalar function of theta.
double grad_check(
    const std::function<DiffArray(Tape&, const DiffArray&)>& f,
    const DiffArray& theta, double eps);

}  // namespace mtil
