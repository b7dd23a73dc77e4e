#include "mtil/numerics.hpp"

#include <cmath>
#include <cstdlib>

namespace mtil {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double softplus_val(double x) {
  // log1p(exp(x)) with the large-x branch to avoid overflow
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

}  // namespace

int numel(const Shape& shape) {
  int n = 1;
  for (int d : shape) {
    if (d <= 0) throw TapeError("non-positive dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

DiffArray::DiffArray(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
  if (numel(shape) != static_cast<int>(data.size()))
    throw TapeError("data length " + std::to_string(data.size()) +
                    " does not match shape " + shape_str(shape));
}

DiffArray DiffArray::zeros(Shape s) {
  int n = numel(s);
  return DiffArray(std::move(s), std::vector<double>(n, 0.0));
}

DiffArray DiffArray::full(Shape s, double v) {
  int n = numel(s);
  return DiffArray(std::move(s), std::vector<double>(n, v));
}

DiffArray DiffArray::scalar(double v) { return DiffArray({1}, {v}); }

int DiffArray::rows() const {
  if (shape.empty()) throw TapeError("rows() on rank-0 array");
  return shape[0];
}

int DiffArray::cols() const {
  if (shape.size() != 2) throw TapeError("cols() on non-matrix " + shape_str(shape));
  return shape[1];
}

double DiffArray::value() const {
  if (!is_scalar()) throw TapeError("value() on non-scalar " + shape_str(shape));
  return data[0];
}

bool DiffArray::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tape::check_owner(const DiffArray& a) const {
  if (a.node >= 0 && a.owner != this)
    throw TapeError("DiffArray belongs to a different tape");
}

int Tape::intern(const DiffArray& a) {
  check_owner(a);
  if (a.node >= 0) return a.node;
  Node n;
  n.op = Op::kConst;
  n.shape = a.shape;
  n.value = a.data;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

DiffArray Tape::record(Op op, Shape shape, std::vector<double> value,
                       const DiffArray& a, const DiffArray* b, int p0, int p1,
                       double c0, double c1) {
  for (double v : value)
    if (!std::isfinite(v))
      throw TapeError("non-finite output of tape op " + std::to_string(static_cast<int>(op)));
  check_owner(a);
  if (b) check_owner(*b);
  bool tracked = a.node >= 0 || (b && b->node >= 0);
  DiffArray out(std::move(shape), std::move(value));
  if (!tracked) return out;  // constant-only op: compute without recording

  Node n;
  n.op = op;
  n.in0 = intern(a);
  n.in1 = b ? intern(*b) : -1;
  n.p0 = p0;
  n.p1 = p1;
  n.c0 = c0;
  n.c1 = c1;
  n.shape = out.shape;
  n.value = out.data;
  nodes_.push_back(std::move(n));
  out.node = static_cast<int>(nodes_.size()) - 1;
  out.owner = this;
  return out;
}

DiffArray Tape::leaf(const DiffArray& values) {
  if (!values.all_finite()) throw TapeError("non-finite leaf values");
  Node n;
  n.op = Op::kLeaf;
  n.shape = values.shape;
  n.value = values.data;
  nodes_.push_back(std::move(n));
  DiffArray out = values;
  out.node = static_cast<int>(nodes_.size()) - 1;
  out.owner = this;
  return out;
}

DiffArray Tape::matmul(const DiffArray& a, const DiffArray& b) {
  if (a.shape.size() != 2)
    throw TapeError("matmul: left operand must be a matrix, got " + shape_str(a.shape));
  int m = a.shape[0], k = a.shape[1];
  bool vec = b.shape.size() == 1;
  int k2 = vec ? b.shape[0] : b.shape[0];
  int n = vec ? 1 : b.shape[1];
  if (!vec && b.shape.size() != 2)
    throw TapeError("matmul: right operand must be matrix or vector");
  if (k != k2)
    throw TapeError("matmul: inner dims mismatch " + shape_str(a.shape) + " x " +
                    shape_str(b.shape));
  std::vector<double> out(static_cast<size_t>(m) * n, 0.0);
  const double* A = a.data.data();
  const double* B = b.data.data();
  if (vec) {
    for (int i = 0; i < m; ++i) {
      double acc = 0.0;
      const double* row = A + static_cast<size_t>(i) * k;
      for (int j = 0; j < k; ++j) acc += row[j] * B[j];
      out[i] = acc;
    }
  } else {
    for (int i = 0; i < m; ++i) {
      const double* row = A + static_cast<size_t>(i) * k;
      double* orow = out.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < k; ++j) {
        double av = row[j];
        if (av == 0.0) continue;
        const double* brow = B + static_cast<size_t>(j) * n;
        for (int c = 0; c < n; ++c) orow[c] += av * brow[c];
      }
    }
  }
  Shape os = vec ? Shape{m} : Shape{m, n};
  return record(Op::kMatmul, std::move(os), std::move(out), a, &b);
}

DiffArray Tape::add(const DiffArray& a, const DiffArray& b) {
  if (a.shape == b.shape) {
    std::vector<double> out(a.data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data[i] + b.data[i];
    return record(Op::kAdd, a.shape, std::move(out), a, &b);
  }
  // (matrix, row-vector) broadcast
  if (a.shape.size() == 2 && b.shape.size() == 1 && a.shape[1] == b.shape[0]) {
    int r = a.shape[0], c = a.shape[1];
    std::vector<double> out(a.data.size());
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        out[static_cast<size_t>(i) * c + j] = a.data[static_cast<size_t>(i) * c + j] + b.data[j];
    return record(Op::kAddRow, a.shape, std::move(out), a, &b);
  }
  throw TapeError("add: incompatible shapes " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

DiffArray Tape::mul(const DiffArray& a, const DiffArray& b) {
  if (a.shape == b.shape) {
    std::vector<double> out(a.data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data[i] * b.data[i];
    return record(Op::kMul, a.shape, std::move(out), a, &b);
  }
  if (b.is_scalar()) {
    double s = b.data[0];
    std::vector<double> out(a.data.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data[i] * s;
    return record(Op::kMulScalar, a.shape, std::move(out), a, &b);
  }
  throw TapeError("mul: incompatible shapes " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

DiffArray Tape::exp(const DiffArray& a) {
  std::vector<double> out(a.data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a.data[i]);
  return record(Op::kExp, a.shape, std::move(out), a, nullptr);
}

DiffArray Tape::log(const DiffArray& a) {
  std::vector<double> out(a.data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(a.data[i]);
  return record(Op::kLog, a.shape, std::move(out), a, nullptr);
}

DiffArray Tape::softplus(const DiffArray& a) {
  std::vector<double> out(a.data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = softplus_val(a.data[i]);
  return record(Op::kSoftplus, a.shape, std::move(out), a, nullptr);
}

DiffArray Tape::silu(const DiffArray& a) {
  std::vector<double> out(a.data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data[i] * sigmoid(a.data[i]);
  return record(Op::kSilu, a.shape, std::move(out), a, nullptr);
}

DiffArray Tape::tanh(const DiffArray& a) {
  std::vector<double> out(a.data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.data[i]);
  return record(Op::kTanh, a.shape, std::move(out), a, nullptr);
}

DiffArray Tape::square(const DiffArray& a) {
  std::vector<double> out(a.data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data[i] * a.data[i];
  return record(Op::kSquare, a.shape, std::move(out), a, nullptr);
}

DiffArray Tape::sum(const DiffArray& a) {
  double acc = 0.0;
  for (double v : a.data) acc += v;
  return record(Op::kSum, {1}, {acc}, a, nullptr);
}

DiffArray Tape::mean(const DiffArray& a) {
  double acc = 0.0;
  for (double v : a.data) acc += v;
  return record(Op::kMean, {1}, {acc / static_cast<double>(a.data.size())}, a, nullptr);
}

DiffArray Tape::slice(const DiffArray& a, int start, int len) {
  if (a.shape.empty()) throw TapeError("slice: rank-0 array");
  int lead = a.shape[0];
  if (start < 0 || len < 1 || start + len > lead)
    throw TapeError("slice: range [" + std::to_string(start) + "," +
                    std::to_string(start + len) + ") out of leading dim " + std::to_string(lead));
  int inner = static_cast<int>(a.data.size()) / lead;
  std::vector<double> out(static_cast<size_t>(len) * inner);
  std::copy(a.data.begin() + static_cast<size_t>(start) * inner,
            a.data.begin() + static_cast<size_t>(start + len) * inner, out.begin());
  Shape os = a.shape;
  os[0] = len;
  return record(Op::kSlice, std::move(os), std::move(out), a, nullptr, start, len);
}

DiffArray Tape::concat(const DiffArray& a, const DiffArray& b) {
  if (a.shape.size() != b.shape.size() || a.shape.empty())
    throw TapeError("concat: rank mismatch");
  for (size_t i = 1; i < a.shape.size(); ++i)
    if (a.shape[i] != b.shape[i])
      throw TapeError("concat: trailing dims differ " + shape_str(a.shape) + " vs " +
                      shape_str(b.shape));
  Shape os = a.shape;
  os[0] += b.shape[0];
  std::vector<double> out;
  out.reserve(a.data.size() + b.data.size());
  out.insert(out.end(), a.data.begin(), a.data.end());
  out.insert(out.end(), b.data.begin(), b.data.end());
  return record(Op::kConcat, std::move(os), std::move(out), a, &b);
}

DiffArray Tape::softmax(const DiffArray& a) {
  if (a.shape.empty()) throw TapeError("softmax: rank-0 array");
  int cols = a.shape.back();
  int rows = static_cast<int>(a.data.size()) / cols;
  std::vector<double> out(a.data.size());
  for (int r = 0; r < rows; ++r) {
    const double* x = a.data.data() + static_cast<size_t>(r) * cols;
    double* y = out.data() + static_cast<size_t>(r) * cols;
    double mx = x[0];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < cols; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < cols; ++j) y[j] /= z;
  }
  return record(Op::kSoftmax, a.shape, std::move(out), a, nullptr);
}

DiffArray Tape::reshape(const DiffArray& a, Shape s) {
  if (numel(s) != static_cast<int>(a.data.size()))
    throw TapeError("reshape: " + shape_str(a.shape) + " to " + shape_str(s) +
                    " changes element count");
  return record(Op::kReshape, std::move(s), a.data, a, nullptr);
}

DiffArray Tape::clamp(const DiffArray& a, double lo, double hi) {
  if (lo > hi) throw TapeError("clamp: lo > hi");
  std::vector<double> out(a.data.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, a.data[i]));
  return record(Op::kClamp, a.shape, std::move(out), a, nullptr, 0, 0, lo, hi);
}

DiffArray Tape::scale(const DiffArray& a, double c) { return mul(a, DiffArray::scalar(c)); }

DiffArray Tape::neg(const DiffArray& a) { return scale(a, -1.0); }

DiffArray Tape::sub(const DiffArray& a, const DiffArray& b) { return add(a, neg(b)); }

void Tape::accumulate(int node, const double* g, int n) {
  if (node < 0) return;
  const Node& nd = nodes_[node];
  if (nd.op == Op::kConst) return;
  auto& buf = grads_[node];
  if (buf.empty()) buf.assign(nd.value.size(), 0.0);
  for (int i = 0; i < n; ++i) buf[i] += g[i];
}

void Tape::backprop_node(int i) {
  const Node& nd = nodes_[i];
  const std::vector<double>& g = grads_[i];
  switch (nd.op) {
    case Op::kConst:
    case Op::kLeaf:
      return;
    case Op::kMatmul: {
      const Node& na = nodes_[nd.in0];
      const Node& nb = nodes_[nd.in1];
      int m = na.shape[0], k = na.shape[1];
      bool vec = nb.shape.size() == 1;
      int n = vec ? 1 : nb.shape[1];
      // dA[i][j] += g[i][c] * B[j][c]
      if (nodes_[nd.in0].op != Op::kConst) {
        std::vector<double> da(na.value.size(), 0.0);
        for (int r = 0; r < m; ++r) {
          const double* grow = g.data() + static_cast<size_t>(r) * n;
          double* darow = da.data() + static_cast<size_t>(r) * k;
          for (int j = 0; j < k; ++j) {
            const double* brow = nb.value.data() + static_cast<size_t>(j) * n;
            double acc = 0.0;
            for (int c = 0; c < n; ++c) acc += grow[c] * brow[c];
            darow[j] += acc;
          }
        }
        accumulate(nd.in0, da.data(), static_cast<int>(da.size()));
      }
      // dB[j][c] += A[i][j] * g[i][c]
      if (nodes_[nd.in1].op != Op::kConst) {
        std::vector<double> db(nb.value.size(), 0.0);
        for (int r = 0; r < m; ++r) {
          const double* arow = na.value.data() + static_cast<size_t>(r) * k;
          const double* grow = g.data() + static_cast<size_t>(r) * n;
          for (int j = 0; j < k; ++j) {
            double av = arow[j];
            if (av == 0.0) continue;
            double* dbrow = db.data() + static_cast<size_t>(j) * n;
            for (int c = 0; c < n; ++c) dbrow[c] += av * grow[c];
          }
        }
        accumulate(nd.in1, db.data(), static_cast<int>(db.size()));
      }
      return;
    }
    case Op::kAdd:
      accumulate(nd.in0, g.data(), static_cast<int>(g.size()));
      accumulate(nd.in1, g.data(), static_cast<int>(g.size()));
      return;
    case Op::kAddRow: {
      accumulate(nd.in0, g.data(), static_cast<int>(g.size()));
      if (nodes_[nd.in1].op != Op::kConst) {
        int r = nd.shape[0], c = nd.shape[1];
        std::vector<double> db(c, 0.0);
        for (int i2 = 0; i2 < r; ++i2)
          for (int j = 0; j < c; ++j) db[j] += g[static_cast<size_t>(i2) * c + j];
        accumulate(nd.in1, db.data(), c);
      }
      return;
    }
    case Op::kMul: {
      const Node& na = nodes_[nd.in0];
      const Node& nb = nodes_[nd.in1];
      if (na.op != Op::kConst) {
        std::vector<double> da(g.size());
        for (size_t j = 0; j < g.size(); ++j) da[j] = g[j] * nb.value[j];
        accumulate(nd.in0, da.data(), static_cast<int>(da.size()));
      }
      if (nb.op != Op::kConst) {
        std::vector<double> db(g.size());
        for (size_t j = 0; j < g.size(); ++j) db[j] = g[j] * na.value[j];
        accumulate(nd.in1, db.data(), static_cast<int>(db.size()));
      }
      return;
    }
    case Op::kMulScalar: {
      const Node& na = nodes_[nd.in0];
      const Node& nb = nodes_[nd.in1];
      double s = nb.value[0];
      if (na.op != Op::kConst) {
        std::vector<double> da(g.size());
        for (size_t j = 0; j < g.size(); ++j) da[j] = g[j] * s;
        accumulate(nd.in0, da.data(), static_cast<int>(da.size()));
      }
      if (nb.op != Op::kConst) {
        double acc = 0.0;
        for (size_t j = 0; j < g.size(); ++j) acc += g[j] * na.value[j];
        accumulate(nd.in1, &acc, 1);
      }
      return;
    }
    case Op::kExp: {
      std::vector<double> da(g.size());
      for (size_t j = 0; j < g.size(); ++j) da[j] = g[j] * nd.value[j];
      accumulate(nd.in0, da.data(), static_cast<int>(da.size()));
      return;
    }
    case Op::kLog: {
      const Node& na = nodes_[nd.in0];
      std::vector<double> da(g.size());
      for (size_t j = 0; j < g.size(); ++j) da[j] = g[j] / na.value[j];
      accumulate(nd.in0, da.data(), static_cast<int>(da.size()));
      return;
    }
    case Op::kSoftplus: {
      const Node& na = nodes_[nd.in0];
      std::vector<double> da(g.size());
      for (size_t j = 0; j < g.size(); ++j) da[j] = g[j] * sigmoid(na.value[j]);
      accumulate(nd.in0, da.data(), static_cast<int>(da.size()));
      return;
    }
    case Op::kSilu: {
      const Node& na = nodes_[nd.in0];
      std::vector<double> da(g.size());
      for (size_t j = 0; j < g.size(); ++j) {
        double x = na.value[j];
        double s = sigmoid(x);
        da[j] = g[j] * (s * (1.0 + x * (1.0 - s)));
      }
      accumulate(nd.in0, da.data(), static_cast<int>(da.size()));
      return;
    }
    case Op::kTanh: {
      std::vector<double> da(g.size());
      for (size_t j = 0; j < g.size(); ++j) da[j] = g[j] * (1.0 - nd.value[j] * nd.value[j]);
      accumulate(nd.in0, da.data(), static_cast<int>(da.size()));
      return;
    }
    case Op::kSquare: {
      const Node& na = nodes_[nd.in0];
      std::vector<double> da(g.size());
      for (size_t j = 0; j < g.size(); ++j) da[j] = g[j] * 2.0 * na.value[j];
      accumulate(nd.in0, da.data(), static_cast<int>(da.size()));
      return;
    }
    case Op::kSum: {
      const Node& na = nodes_[nd.in0];
      std::vector<double> da(na.value.size(), g[0]);
      accumulate(nd.in0, da.data(), static_cast<int>(da.size()));
      return;
    }
    case Op::kMean: {
      const Node& na = nodes_[nd.in0];
      std::vector<double> da(na.value.size(), g[0] / static_cast<double>(na.value.size()));
      accumulate(nd.in0, da.data(), static_cast<int>(da.size()));
      return;
    }
    case Op::kSlice: {
      const Node& na = nodes_[nd.in0];
      if (na.op == Op::kConst) return;
      int inner = static_cast<int>(na.value.size()) / na.shape[0];
      std::vector<double> da(na.value.size(), 0.0);
      std::copy(g.begin(), g.end(), da.begin() + static_cast<size_t>(nd.p0) * inner);
      accumulate(nd.in0, da.data(), static_cast<int>(da.size()));
      return;
    }
    case Op::kConcat: {
      const Node& na = nodes_[nd.in0];
      accumulate(nd.in0, g.data(), static_cast<int>(na.value.size()));
      accumulate(nd.in1, g.data() + na.value.size(),
                 static_cast<int>(nodes_[nd.in1].value.size()));
      return;
    }
    case Op::kSoftmax: {
      int cols = nd.shape.back();
      int rows = static_cast<int>(nd.value.size()) / cols;
      std::vector<double> da(g.size());
      for (int r = 0; r < rows; ++r) {
        const double* y = nd.value.data() + static_cast<size_t>(r) * cols;
        const double* gy = g.data() + static_cast<size_t>(r) * cols;
        double dot = 0.0;
        for (int j = 0; j < cols; ++j) dot += gy[j] * y[j];
        for (int j = 0; j < cols; ++j)
          da[static_cast<size_t>(r) * cols + j] = y[j] * (gy[j] - dot);
      }
      accumulate(nd.in0, da.data(), static_cast<int>(da.size()));
      return;
    }
    case Op::kReshape:
      accumulate(nd.in0, g.data(), static_cast<int>(g.size()));
      return;
    case Op::kClamp: {
      const Node& na = nodes_[nd.in0];
      std::vector<double> da(g.size());
      for (size_t j = 0; j < g.size(); ++j) {
        double x = na.value[j];
        da[j] = (x >= nd.c0 && x <= nd.c1) ? g[j] : 0.0;
      }
      accumulate(nd.in0, da.data(), static_cast<int>(da.size()));
      return;
    }
  }
}

void Tape::backward(const DiffArray& loss) {
  if (!loss.is_scalar()) throw TapeError("backward: loss must be scalar, got " + shape_str(loss.shape));
  if (loss.node < 0 || loss.owner != this) throw TapeError("backward: loss is not on this tape");
  grads_.assign(nodes_.size(), {});
  grads_[loss.node] = {1.0};
  for (int i = loss.node; i >= 0; --i) {
    if (grads_[i].empty()) continue;
    backprop_node(i);
  }
}

DiffArray Tape::grad(const DiffArray& a) const {
  if (a.node < 0 || a.owner != this) throw TapeError("grad: array is not on this tape");
  DiffArray out = DiffArray::zeros(a.shape);
  if (a.node < static_cast<int>(grads_.size()) && !grads_[a.node].empty())
    out.data = grads_[a.node];
  return out;
}

double grad_check(const std::function<DiffArray(Tape&, const DiffArray&)>& f,
                  const DiffArray& theta, double eps) {
  if (eps <= 0.0) throw TapeError("grad_check: eps must be positive");
  Tape tape;
  DiffArray leaf = tape.leaf(theta);
  DiffArray loss = f(tape, leaf);
  if (!loss.is_scalar()) throw TapeError("grad_check: f must return a scalar");
  DiffArray analytic = DiffArray::zeros(theta.shape);
  if (loss.node >= 0) {  // a constant loss has zero gradient everywhere
    tape.backward(loss);
    analytic = tape.grad(leaf);
  }

  DiffArray probe = theta;
  probe.node = -1;
  probe.owner = nullptr;
  double worst = 0.0;
  for (int i = 0; i < probe.size(); ++i) {
    double orig = probe.data[i];
    probe.data[i] = orig + eps;
    Tape tp;
    double fp = f(tp, probe).value();
    probe.data[i] = orig - eps;
    Tape tm;
    double fm = f(tm, probe).value();
    probe.data[i] = orig;
    double cd = (fp - fm) / (2.0 * eps);
    if (!std::isfinite(cd)) throw TapeError("grad_check: non-finite central difference");
    double a = analytic.data[i];
    double rel = std::abs(a - cd) / (std::abs(a) + std::abs(cd) + 1e-12);
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace mtil
