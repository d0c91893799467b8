#ifndef CECSIM_TENSORLITE_HPP_
#define CECSIM_TENSORLITE_HPP_

// Small reverse-mode autodiff over batched dense matrices (rows = batch).
// Only the operations the policies need are provided.

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cecsim/rng.hpp"

namespace cecsim::tl {

using Mat = Eigen::MatrixXd;

struct Param {
  std::string name;
  Mat value;
  Mat grad;
};

// Named parameters in insertion order. Pointers stay valid.
class ParamSet {
 public:
  Param& add(const std::string& name, int rows, int cols);
  // Glorot-uniform weights; biases stay zero.
  Param& add_glorot(const std::string& name, int rows, int cols, Rng& rng);

  [[nodiscard]] Param* find(const std::string& name);
  [[nodiscard]] const Param* find(const std::string& name) const;
  [[nodiscard]] std::size_t size() const { return params_.size(); }
  [[nodiscard]] std::size_t scalar_count() const;
  Param& operator[](std::size_t i) { return *params_[i]; }
  const Param& operator[](std::size_t i) const { return *params_[i]; }

  void zero_grad();
  [[nodiscard]] double grad_norm() const;
  // Scales gradients so their global norm is at most max_norm.
  double clip_grad_norm(double max_norm);
  [[nodiscard]] bool finite() const;

  [[nodiscard]] std::vector<double> flat_values() const;
  void set_flat_values(const std::vector<double>& v);
  [[nodiscard]] std::vector<double> flat_grads() const;

  // Deep copy of values into another set with identical layout.
  void copy_values_to(ParamSet& other) const;

 private:
  std::vector<std::unique_ptr<Param>> params_;
};

class Tape;

// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  [[nodiscard]] const Mat& value() const;
  [[nodiscard]] int rows() const { return static_cast<int>(value().rows()); }
  [[nodiscard]] int cols() const { return static_cast<int>(value().cols()); }
};

class Tape {
 public:
  Var constant(Mat v);
  Var param(Param& p);

  // Reverse pass from a 1x1 loss; parameter gradients are accumulated.
  void backward(Var loss);

  // Internal: record a node. `back` receives the node's output gradient.
  Var record(Mat value, std::vector<int> parents,
             std::function<void(Tape&, const Mat& grad_out)> back);
  [[nodiscard]] const Mat& value(int id) const { return nodes_[id].value; }
  void accumulate(int id, const Mat& g);
  [[nodiscard]] bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  [[nodiscard]] std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool has_grad = false;
    bool needs_grad = false;
    Param* param = nullptr;
    std::function<void(Tape&, const Mat&)> back;
  };
  std::vector<Node> nodes_;
};

// x (B x in) * W (in x out) + b (1 x out)
Var linear(Var x, Var w, Var b);
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var add_row(Var x, Var row);  // broadcast a 1 x d row over the batch
Var mul_col(Var x, Var col);  // broadcast a B x 1 column over features
Var scale(Var a, double s);
Var tanh(Var a);
Var relu(Var a);
Var exp(Var a);
Var square(Var a);
Var clamp(Var a, double lo, double hi);
Var minimum(Var a, Var b);
Var sum(Var a);   // 1 x 1
Var mean(Var a);  // 1 x 1
Var detach(Var a);

// Row-wise log-softmax restricted to mask entries equal to 1. Masked entries
// hold -infinity and receive no gradient. Every row needs one valid entry.
Var masked_log_softmax(Var logits, const Mat& mask);
// Picks column idx[b] of row b (B x 1). Indices must point at finite entries.
Var gather(Var x, const std::vector<int>& idx);
// Row-wise entropy of the masked softmax (B x 1).
Var masked_entropy(Var logits, const Mat& mask);

// Scaled dot-product attention with n keys per row. q: B x dk,
// k: B x (n*dk), v: B x (n*dv). Returns B x dv; the weights are written to
// alpha_out (B x n) when given.
Var attention(Var q, Var k, Var v, int n, Mat* alpha_out = nullptr);

// Non-recording helpers.
Mat masked_softmax(const Mat& logits, const Mat& mask);

enum class Activation { kNone, kTanh, kRelu };

// Dense layers with a fixed activation after each layer except (optionally)
// the last.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamSet& ps, const std::string& prefix, const std::vector<int>& widths,
      Activation hidden, Activation output, Rng& rng);

  Var forward(Tape& tape, Var x) const;
  // Same pass with the weights recorded as constants (no parameter gradient).
  Var forward_frozen(Tape& tape, Var x) const;
  // Non-recording pass.
  [[nodiscard]] Mat eval(const Mat& x) const;
  [[nodiscard]] int in_width() const { return widths_.front(); }
  [[nodiscard]] int out_width() const { return widths_.back(); }

 private:
  std::vector<Param*> w_;
  std::vector<Param*> b_;
  std::vector<int> widths_;
  Activation hidden_ = Activation::kTanh;
  Activation output_ = Activation::kNone;
};

Var apply_activation(Var x, Activation a);

class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamSet& ps);
  void set_lr(double lr) { lr_ = lr; }
  [[nodiscard]] double lr() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Mat> m_, v_;
};

// Checkpoint as JSON: {"format": "cecsim-params", "version": 1,
// "params": [{"name", "rows", "cols", "data"}]}. Values round-trip exactly.
std::string to_json(const ParamSet& ps);
// Loads values into an existing set; names and shapes must match.
void from_json(ParamSet& ps, const std::string& text);
void save(const ParamSet& ps, const std::string& path);
void load(ParamSet& ps, const std::string& path);

}  // namespace cecsim::tl

#endif  // CECSIM_TENSORLITE_HPP_
