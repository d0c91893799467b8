#include "cecsim/tensorlite.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "cecsim/errors.hpp"
#include "json.hpp"

namespace cecsim::tl {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void require(bool ok, const char* what) {
  if (!ok) throw ShapeError(what);
}

void same_shape(Var a, Var b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamSet

Param& ParamSet::add(const std::string& name, int rows, int cols) {
  if (find(name)) throw ConfigError("duplicate parameter " + name);
  auto p = std::make_unique<Param>();
  p->name = name;
  p->value = Mat::Zero(rows, cols);
  p->grad = Mat::Zero(rows, cols);
  params_.push_back(std::move(p));
  return *params_.back();
}

Param& ParamSet::add_glorot(const std::string& name, int rows, int cols, Rng& rng) {
  Param& p = add(name, rows, cols);
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  for (int c = 0; c < cols; ++c)
    for (int r = 0; r < rows; ++r) p.value(r, c) = rng.uniform(-a, a);
  return p;
}

Param* ParamSet::find(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

const Param* ParamSet::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

std::size_t ParamSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void ParamSet::zero_grad() {
  for (auto& p : params_) p->grad.setZero();
}

double ParamSet::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_) s += p->grad.squaredNorm();
  return std::sqrt(s);
}

double ParamSet::clip_grad_norm(double max_norm) {
  const double norm = grad_norm();
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (auto& p : params_) p->grad *= f;
  }
  return norm;
}

bool ParamSet::finite() const {
  for (const auto& p : params_)
    if (!p->value.allFinite()) return false;
  return true;
}

std::vector<double> ParamSet::flat_values() const {
  std::vector<double> out;
  out.reserve(scalar_count());
  for (const auto& p : params_) out.insert(out.end(), p->value.data(), p->value.data() + p->value.size());
  return out;
}

void ParamSet::set_flat_values(const std::vector<double>& v) {
  if (v.size() != scalar_count()) throw ShapeError("flat parameter vector has the wrong length");
  std::size_t off = 0;
  for (auto& p : params_) {
    std::copy(v.begin() + static_cast<std::ptrdiff_t>(off),
              v.begin() + static_cast<std::ptrdiff_t>(off + p->value.size()), p->value.data());
    off += static_cast<std::size_t>(p->value.size());
  }
}

std::vector<double> ParamSet::flat_grads() const {
  std::vector<double> out;
  out.reserve(scalar_count());
  for (const auto& p : params_) out.insert(out.end(), p->grad.data(), p->grad.data() + p->grad.size());
  return out;
}

void ParamSet::copy_values_to(ParamSet& other) const {
  if (other.size() != size()) throw ShapeError("parameter sets differ in layout");
  for (std::size_t i = 0; i < size(); ++i) {
    if (other[i].value.rows() != params_[i]->value.rows() ||
        other[i].value.cols() != params_[i]->value.cols())
      throw ShapeError("parameter sets differ in layout");
    other[i].value = params_[i]->value;
  }
}

// ---------------------------------------------------------------------------
// Tape

const Mat& Var::value() const { return tape->value(id); }

Var Tape::constant(Mat v) {
  Node n;
  n.value = std::move(v);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::param(Param& p) {
  Node n;
  n.value = p.value;
  n.needs_grad = true;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Mat value, std::vector<int> parents,
                 std::function<void(Tape&, const Mat&)> back) {
  Node n;
  n.value = std::move(value);
  for (int p : parents) n.needs_grad = n.needs_grad || nodes_[p].needs_grad;
  if (n.needs_grad) n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::accumulate(int id, const Mat& g) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var loss) {
  require(loss.tape == this, "backward: loss recorded on another tape");
  require(loss.rows() == 1 && loss.cols() == 1, "backward: loss must be a scalar");
  for (auto& n : nodes_) {
    n.has_grad = false;
  }
  accumulate(loss.id, Mat::Ones(1, 1));
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.has_grad) continue;
    if (n.param) {
      n.param->grad += n.grad;
    } else if (n.back) {
      const Mat g = n.grad;
      n.back(*this, g);
    }
  }
}

// ---------------------------------------------------------------------------
// Operations

Var matmul(Var a, Var b) {
  require(a.cols() == b.rows(), "matmul: inner dimensions differ");
  Tape& t = *a.tape;
  const int ia = a.id, ib = b.id;
  return t.record(a.value() * b.value(), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var add_row(Var x, Var row) {
  require(row.rows() == 1 && row.cols() == x.cols(), "add_row: row width differs");
  Tape& t = *x.tape;
  const int ix = x.id, ir = row.id;
  Mat v = x.value().rowwise() + row.value().row(0);
  return t.record(std::move(v), {ix, ir}, [ix, ir](Tape& t, const Mat& g) {
    t.accumulate(ix, g);
    t.accumulate(ir, g.colwise().sum());
  });
}

Var mul_col(Var x, Var col) {
  require(col.cols() == 1 && col.rows() == x.rows(), "mul_col: column height differs");
  Tape& t = *x.tape;
  const int ix = x.id, ic = col.id;
  Mat v = x.value().array().colwise() * col.value().col(0).array();
  return t.record(std::move(v), {ix, ic}, [ix, ic](Tape& t, const Mat& g) {
    if (t.needs_grad(ix))
      t.accumulate(ix, (g.array().colwise() * t.value(ic).col(0).array()).matrix());
    if (t.needs_grad(ic))
      t.accumulate(ic, (g.array() * t.value(ix).array()).rowwise().sum().matrix());
  });
}

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

Var add(Var a, Var b) {
  same_shape(a, b, "add");
  const int ia = a.id, ib = b.id;
  return a.tape->record(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  same_shape(a, b, "sub");
  const int ia = a.id, ib = b.id;
  return a.tape->record(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

Var mul(Var a, Var b) {
  same_shape(a, b, "mul");
  const int ia = a.id, ib = b.id;
  Mat v = a.value().cwiseProduct(b.value());
  return a.tape->record(std::move(v), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    if (t.needs_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.needs_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

Var scale(Var a, double s) {
  const int ia = a.id;
  return a.tape->record(a.value() * s, {ia}, [ia, s](Tape& t, const Mat& g) { t.accumulate(ia, g * s); });
}

Var tanh(Var a) {
  const int ia = a.id;
  Mat v = a.value().array().tanh().matrix();
  Tape& tape = *a.tape;
  const int out = static_cast<int>(tape.size());
  return tape.record(std::move(v), {ia}, [ia, out](Tape& t, const Mat& g) {
    const Mat& y = t.value(out);
    t.accumulate(ia, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

Var relu(Var a) {
  const int ia = a.id;
  Mat v = a.value().cwiseMax(0.0);
  return a.tape->record(std::move(v), {ia}, [ia](Tape& t, const Mat& g) {
    t.accumulate(ia, (t.value(ia).array() > 0.0).select(g, 0.0).matrix());
  });
}

Var exp(Var a) {
  const int ia = a.id;
  Mat v = a.value().array().exp().matrix();
  Tape& tape = *a.tape;
  const int out = static_cast<int>(tape.size());
  return tape.record(std::move(v), {ia}, [ia, out](Tape& t, const Mat& g) {
    t.accumulate(ia, g.cwiseProduct(t.value(out)));
  });
}

Var square(Var a) {
  const int ia = a.id;
  Mat v = a.value().array().square().matrix();
  return a.tape->record(std::move(v), {ia}, [ia](Tape& t, const Mat& g) {
    t.accumulate(ia, 2.0 * g.cwiseProduct(t.value(ia)));
  });
}

Var clamp(Var a, double lo, double hi) {
  const int ia = a.id;
  Mat v = a.value().cwiseMax(lo).cwiseMin(hi);
  return a.tape->record(std::move(v), {ia}, [ia, lo, hi](Tape& t, const Mat& g) {
    const auto& x = t.value(ia).array();
    t.accumulate(ia, ((x > lo) && (x < hi)).select(g, 0.0).matrix());
  });
}

Var minimum(Var a, Var b) {
  same_shape(a, b, "minimum");
  const int ia = a.id, ib = b.id;
  Mat v = a.value().cwiseMin(b.value());
  return a.tape->record(std::move(v), {ia, ib}, [ia, ib](Tape& t, const Mat& g) {
    const auto first = (t.value(ia).array() <= t.value(ib).array());
    if (t.needs_grad(ia)) t.accumulate(ia, first.select(g, 0.0).matrix());
    if (t.needs_grad(ib)) t.accumulate(ib, first.select(0.0, g).matrix());
  });
}

Var sum(Var a) {
  const int ia = a.id;
  const int r = a.rows(), c = a.cols();
  Mat v(1, 1);
  v(0, 0) = a.value().sum();
  return a.tape->record(std::move(v), {ia}, [ia, r, c](Tape& t, const Mat& g) {
    t.accumulate(ia, Mat::Constant(r, c, g(0, 0)));
  });
}

Var mean(Var a) {
  require(a.value().size() > 0, "mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(a.value().size()));
}

Var detach(Var a) { return a.tape->constant(a.value()); }

Var masked_log_softmax(Var logits, const Mat& mask) {
  require(mask.rows() == logits.rows() && mask.cols() == logits.cols(),
          "masked_log_softmax: mask shape differs");
  const Mat& z = logits.value();
  const int rows = logits.rows(), cols = logits.cols();
  Mat out(rows, cols);
  for (int r = 0; r < rows; ++r) {
    double m = kNegInf;
    for (int c = 0; c < cols; ++c)
      if (mask(r, c) > 0.5) m = std::max(m, z(r, c));
    require(m > kNegInf, "masked_log_softmax: row without a valid entry");
    double s = 0.0;
    for (int c = 0; c < cols; ++c)
      if (mask(r, c) > 0.5) s += std::exp(z(r, c) - m);
    const double lse = m + std::log(s);
    for (int c = 0; c < cols; ++c) out(r, c) = mask(r, c) > 0.5 ? z(r, c) - lse : kNegInf;
  }
  const int il = logits.id;
  Tape& tape = *logits.tape;
  const int self = static_cast<int>(tape.size());
  return tape.record(std::move(out), {il}, [il, self, mask](Tape& t, const Mat& g) {
    const Mat& y = t.value(self);
    Mat dz = Mat::Zero(y.rows(), y.cols());
    for (int r = 0; r < y.rows(); ++r) {
      double gs = 0.0;
      for (int c = 0; c < y.cols(); ++c)
        if (mask(r, c) > 0.5) gs += g(r, c);
      for (int c = 0; c < y.cols(); ++c)
        if (mask(r, c) > 0.5) dz(r, c) = g(r, c) - std::exp(y(r, c)) * gs;
    }
    t.accumulate(il, dz);
  });
}

Var gather(Var x, const std::vector<int>& idx) {
  require(static_cast<int>(idx.size()) == x.rows(), "gather: one index per row required");
  Mat v(x.rows(), 1);
  for (int r = 0; r < x.rows(); ++r) {
    require(idx[r] >= 0 && idx[r] < x.cols(), "gather: index out of range");
    v(r, 0) = x.value()(r, idx[r]);
  }
  const int ix = x.id, cols = x.cols();
  return x.tape->record(std::move(v), {ix}, [ix, idx, cols](Tape& t, const Mat& g) {
    Mat d = Mat::Zero(static_cast<int>(idx.size()), cols);
    for (std::size_t r = 0; r < idx.size(); ++r) d(static_cast<int>(r), idx[r]) = g(static_cast<int>(r), 0);
    t.accumulate(ix, d);
  });
}

Mat masked_softmax(const Mat& logits, const Mat& mask) {
  Mat p = Mat::Zero(logits.rows(), logits.cols());
  for (int r = 0; r < logits.rows(); ++r) {
    double m = kNegInf;
    for (int c = 0; c < logits.cols(); ++c)
      if (mask(r, c) > 0.5) m = std::max(m, logits(r, c));
    if (m == kNegInf) continue;
    double s = 0.0;
    for (int c = 0; c < logits.cols(); ++c)
      if (mask(r, c) > 0.5) s += (p(r, c) = std::exp(logits(r, c) - m));
    p.row(r) /= s;
  }
  return p;
}

Var masked_entropy(Var logits, const Mat& mask) {
  require(mask.rows() == logits.rows() && mask.cols() == logits.cols(),
          "masked_entropy: mask shape differs");
  const Mat p = masked_softmax(logits.value(), mask);
  Mat logp = Mat::Zero(p.rows(), p.cols());
  Mat h(p.rows(), 1);
  for (int r = 0; r < p.rows(); ++r) {
    double s = 0.0;
    for (int c = 0; c < p.cols(); ++c)
      if (mask(r, c) > 0.5 && p(r, c) > 0.0) {
        logp(r, c) = std::log(p(r, c));
        s -= p(r, c) * logp(r, c);
      }
    h(r, 0) = s;
  }
  const int il = logits.id;
  return logits.tape->record(h, {il}, [il, p, logp, h, mask](Tape& t, const Mat& g) {
    Mat dz = Mat::Zero(p.rows(), p.cols());
    for (int r = 0; r < p.rows(); ++r)
      for (int c = 0; c < p.cols(); ++c)
        if (mask(r, c) > 0.5) dz(r, c) = -g(r, 0) * p(r, c) * (logp(r, c) + h(r, 0));
    t.accumulate(il, dz);
  });
}

Var attention(Var q, Var k, Var v, int n, Mat* alpha_out) {
  require(n >= 1, "attention: at least one key required");
  const int b = q.rows(), dk = q.cols();
  if (dk == 0) throw ConfigError("attention: key dimension must be positive");
  require(k.rows() == b && v.rows() == b, "attention: batch sizes differ");
  require(k.cols() == n * dk, "attention: key width must be n * dk");
  require(v.cols() % n == 0, "attention: value width must be a multiple of n");
  const int dv = v.cols() / n;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dk));
  Mat alpha(b, n);
  Mat out = Mat::Zero(b, dv);
  const Mat& Q = q.value();
  const Mat& K = k.value();
  const Mat& V = v.value();
  for (int r = 0; r < b; ++r) {
    double m = kNegInf;
    for (int j = 0; j < n; ++j) {
      alpha(r, j) = Q.row(r).dot(K.row(r).segment(j * dk, dk)) * inv;
      m = std::max(m, alpha(r, j));
    }
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += (alpha(r, j) = std::exp(alpha(r, j) - m));
    for (int j = 0; j < n; ++j) {
      alpha(r, j) /= s;
      out.row(r) += alpha(r, j) * V.row(r).segment(j * dv, dv);
    }
  }
  if (alpha_out) *alpha_out = alpha;
  const int iq = q.id, ik = k.id, iv = v.id;
  return q.tape->record(std::move(out), {iq, ik, iv},
                        [iq, ik, iv, alpha, n, dk, dv, inv](Tape& t, const Mat& g) {
    const Mat& Q = t.value(iq);
    const Mat& K = t.value(ik);
    const Mat& V = t.value(iv);
    const int b = static_cast<int>(Q.rows());
    Mat dq = Mat::Zero(b, dk), dkm = Mat::Zero(b, n * dk), dvm = Mat::Zero(b, n * dv);
    for (int r = 0; r < b; ++r) {
      Eigen::VectorXd da(n);
      for (int j = 0; j < n; ++j) {
        dvm.block(r, j * dv, 1, dv) = alpha(r, j) * g.row(r);
        da(j) = g.row(r).dot(V.row(r).segment(j * dv, dv));
      }
      double mix = 0.0;
      for (int j = 0; j < n; ++j) mix += alpha(r, j) * da(j);
      for (int j = 0; j < n; ++j) {
        const double ds = alpha(r, j) * (da(j) - mix) * inv;
        dq.row(r) += ds * K.row(r).segment(j * dk, dk);
        dkm.block(r, j * dk, 1, dk) = ds * Q.row(r);
      }
    }
    t.accumulate(iq, dq);
    t.accumulate(ik, dkm);
    t.accumulate(iv, dvm);
  });
}

Var apply_activation(Var x, Activation a) {
  switch (a) {
    case Activation::kTanh: return tanh(x);
    case Activation::kRelu: return relu(x);
    case Activation::kNone: break;
  }
  return x;
}

// ---------------------------------------------------------------------------
// Mlp

Mlp::Mlp(ParamSet& ps, const std::string& prefix, const std::vector<int>& widths,
         Activation hidden, Activation output, Rng& rng)
    : widths_(widths), hidden_(hidden), output_(output) {
  if (widths.size() < 2) throw ConfigError("an MLP needs at least two widths");
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::string base = prefix + "." + std::to_string(l);
    w_.push_back(&ps.add_glorot(base + ".w", widths[l], widths[l + 1], rng));
    b_.push_back(&ps.add(base + ".b", 1, widths[l + 1]));
  }
}

Var Mlp::forward(Tape& tape, Var x) const {
  if (x.cols() != widths_.front())
    throw ShapeError("mlp input width " + std::to_string(x.cols()) + ", expected " +
                     std::to_string(widths_.front()));
  for (std::size_t l = 0; l < w_.size(); ++l) {
    x = linear(x, tape.param(*w_[l]), tape.param(*b_[l]));
    x = apply_activation(x, l + 1 == w_.size() ? output_ : hidden_);
  }
  return x;
}

Var Mlp::forward_frozen(Tape& tape, Var x) const {
  if (x.cols() != widths_.front())
    throw ShapeError("mlp input width " + std::to_string(x.cols()) + ", expected " +
                     std::to_string(widths_.front()));
  for (std::size_t l = 0; l < w_.size(); ++l) {
    x = linear(x, tape.constant(w_[l]->value), tape.constant(b_[l]->value));
    x = apply_activation(x, l + 1 == w_.size() ? output_ : hidden_);
  }
  return x;
}

Mat Mlp::eval(const Mat& x) const {
  if (x.cols() != widths_.front())
    throw ShapeError("mlp input width " + std::to_string(x.cols()) + ", expected " +
                     std::to_string(widths_.front()));
  Mat h = x;
  for (std::size_t l = 0; l < w_.size(); ++l) {
    Mat z = h * w_[l]->value;
    z.rowwise() += b_[l]->value.row(0);
    const Activation a = l + 1 == w_.size() ? output_ : hidden_;
    if (a == Activation::kTanh) z = z.array().tanh().matrix();
    if (a == Activation::kRelu) z = z.cwiseMax(0.0);
    h = std::move(z);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Adam

void Adam::step(ParamSet& ps) {
  if (m_.size() != ps.size()) {
    m_.clear();
    v_.clear();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      m_.push_back(Mat::Zero(ps[i].value.rows(), ps[i].value.cols()));
      v_.push_back(Mat::Zero(ps[i].value.rows(), ps[i].value.cols()));
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    auto& p = ps[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

std::string to_json(const ParamSet& ps) {
  nlohmann::json j;
  j["format"] = "cecsim-params";
  j["version"] = 1;
  j["params"] = nlohmann::json::array();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& p = ps[i];
    std::vector<double> data(p.value.data(), p.value.data() + p.value.size());
    j["params"].push_back({{"name", p.name},
                           {"rows", p.value.rows()},
                           {"cols", p.value.cols()},
                           {"data", data}});
  }
  return j.dump();
}

void from_json(ParamSet& ps, const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  if (j.value("format", "") != "cecsim-params") throw ConfigError("not a parameter checkpoint");
  if (j.value("version", 0) != 1) throw ConfigError("unsupported checkpoint version");
  const auto& arr = j.at("params");
  if (arr.size() != ps.size()) throw ShapeError("checkpoint parameter count differs");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const auto& e = arr[i];
    auto& p = ps[i];
    if (e.at("name").get<std::string>() != p.name) throw ShapeError("checkpoint name mismatch at " + p.name);
    const auto rows = e.at("rows").get<Eigen::Index>(), cols = e.at("cols").get<Eigen::Index>();
    if (rows != p.value.rows() || cols != p.value.cols()) throw ShapeError("checkpoint shape mismatch at " + p.name);
    const auto data = e.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != rows * cols) throw ShapeError("checkpoint data length mismatch");
    std::copy(data.begin(), data.end(), p.value.data());
  }
}

void save(const ParamSet& ps, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path);
  f << to_json(ps);
}

void load(ParamSet& ps, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  from_json(ps, ss.str());
}

}  // namespace cecsim::tl
