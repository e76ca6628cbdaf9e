#pragma once

#include "sargraph/common.hpp"
#include "sargraph/ledger.hpp"
#include "sargraph/rng.hpp"
#include "sargraph/sarfile.hpp"
#include "sargraph/transport.hpp"

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace sargraph {

struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

/// Named parameters with f64 gradient accumulators and Adam moments.
/// Registration order is the canonical order for gradient flattening, so all
/// workers must register identically (they do: same config, same layer stack).
template <class Scalar>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Mat<Scalar> value;
    Matd grad;
    Matd m, v;
    bool trainable = true;
  };

  std::int32_t add(std::string name, Mat<Scalar> value, bool trainable = true) {
    require_input(find(name) < 0, "duplicate parameter: " + name);
    Entry e;
    e.name = std::move(name);
    e.grad = Matd::Zero(value.rows(), value.cols());
    e.m = Matd::Zero(value.rows(), value.cols());
    e.v = Matd::Zero(value.rows(), value.cols());
    e.value = std::move(value);
    e.trainable = trainable;
    entries_.push_back(std::move(e));
    return std::int32_t(entries_.size()) - 1;
  }

  std::int32_t find(const std::string& name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return std::int32_t(i);
    return -1;
  }

  Entry& entry(std::int32_t id) { return entries_.at(std::size_t(id)); }
  const Entry& entry(std::int32_t id) const { return entries_.at(std::size_t(id)); }
  std::size_t size() const { return entries_.size(); }
  std::int64_t step_count() const { return step_; }

  void zero_grads() {
    for (auto& e : entries_) e.grad.setZero();
  }
  void add_grad(std::int32_t id, const Matd& g) {
    Entry& e = entry(id);
    require_input(g.rows() == e.grad.rows() && g.cols() == e.grad.cols(),
                  "gradient shape mismatch for " + e.name);
    e.grad += g;
  }

  std::vector<double> flatten_grads() const {
    std::size_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += std::size_t(e.grad.size());
    std::vector<double> buf(n);
    std::size_t off = 0;
    for (const auto& e : entries_) {
      if (!e.trainable) continue;
      std::memcpy(buf.data() + off, e.grad.data(), std::size_t(e.grad.size()) * 8);
      off += std::size_t(e.grad.size());
    }
    return buf;
  }
  void set_grads(std::span<const double> buf) {
    std::size_t off = 0;
    for (auto& e : entries_) {
      if (!e.trainable) continue;
      std::memcpy(e.grad.data(), buf.data() + off, std::size_t(e.grad.size()) * 8);
      off += std::size_t(e.grad.size());
    }
    require_input(off == buf.size(), "set_grads: length mismatch");
  }

  void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    step_++;
    const double c1 = 1.0 - std::pow(beta1, double(step_));
    const double c2 = 1.0 - std::pow(beta2, double(step_));
    for (auto& e : entries_) {
      if (!e.trainable) continue;
      e.m = beta1 * e.m + (1.0 - beta1) * e.grad;
      e.v = beta2 * e.v + (1.0 - beta2) * e.grad.cwiseProduct(e.grad);
      const Matd update =
          (e.m / c1).array() / ((e.v / c2).array().sqrt() + eps) * lr;
      e.value = (e.value.template cast<double>() - update).template cast<Scalar>();
    }
  }

  TensorArchive to_archive() const {
    TensorArchive a;
    for (const auto& e : entries_) {
      a["param/" + e.name] = sarf_from(e.value);
      if (e.trainable) {
        a["adam_m/" + e.name] = sarf_from_f64(e.m, DType::F64);
        a["adam_v/" + e.name] = sarf_from_f64(e.v, DType::F64);
      }
    }
    Matd step(1, 1);
    step(0, 0) = double(step_);
    a["meta/step"] = sarf_from_f64(step, DType::F64);
    return a;
  }
  void load_archive(const TensorArchive& a) {
    for (auto& e : entries_) {
      const auto it = a.find("param/" + e.name);
      require_input(it != a.end(), "checkpoint missing parameter: " + e.name);
      e.value = it->second.template as<Scalar>();
      if (e.trainable) {
        e.m = a.at("adam_m/" + e.name).as_f64();
        e.v = a.at("adam_v/" + e.name).as_f64();
      }
    }
    step_ = std::int64_t(a.at("meta/step").as_f64()(0, 0));
  }

 private:
  std::vector<Entry> entries_;
  std::int64_t step_ = 0;
};

/// Reverse-mode tape over row-major matrices. Forward values carry the run's
/// scalar type; gradients are always f64. A DetachedLeaf marks the boundary
/// where gradient propagation is handed to an external mechanism: its hook
/// fires during the reverse sweep once its gradient is complete, and may
/// accumulate gradients into earlier tape variables.
template <class Scalar>
class Tape {
 public:
  using M = Mat<Scalar>;
  using DetachHook = std::function<void(const Matd& grad, Tape& tape)>;
  using BackFn = std::function<void(Tape& tape, const Matd& grad_out)>;

  explicit Tape(ParamStore<Scalar>* params = nullptr, MemoryLedger* mem = nullptr)
      : params_(params), mem_(mem) {}
  ~Tape() { release_ledger(); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(M value) { return push(std::move(value), {}, BackFn{}); }

  Var param(std::int32_t param_id) {
    require_input(params_ != nullptr, "tape has no parameter store");
    M v = params_->entry(param_id).value;
    return push(std::move(v), {}, [param_id](Tape& t, const Matd& g) {
      t.params_->add_grad(param_id, g);
    });
  }

  Var detached_leaf(M value, DetachHook hook = {}) {
    const Var v = push(std::move(value), {}, BackFn{});
    nodes_.back().detach_hook = std::move(hook);
    nodes_.back().detached = true;
    return v;
  }

  Var make_node(M value, BackFn back) { return push(std::move(value), {}, std::move(back)); }

  const M& value(Var v) const { return *vals_.at(check(v)); }
  std::shared_ptr<const M> value_ptr(Var v) const { return vals_.at(check(v)); }

  bool has_grad(Var v) const { return grads_.at(check(v)) != nullptr; }
  const Matd& grad(Var v) const {
    const auto& g = grads_.at(check(v));
    require_input(g != nullptr, "no gradient recorded for variable");
    return *g;
  }
  void accumulate_grad(Var v, const Matd& g) {
    auto& slot = grads_.at(check(v));
    const M& val = *vals_.at(std::size_t(v.id));
    require_input(g.rows() == val.rows() && g.cols() == val.cols(),
                  "accumulate_grad: shape mismatch");
    if (!slot)
      slot = std::make_unique<Matd>(g);
    else
      *slot += g;
  }

  void backward(std::span<const std::pair<Var, Matd>> seeds) {
    for (const auto& [v, g] : seeds) {
      require_input(v.valid() && std::size_t(v.id) < nodes_.size(), "backward: seed not on tape");
      accumulate_grad(v, g);
    }
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!grads_[i]) continue;
      if (n.detached) {
        if (n.detach_hook) n.detach_hook(*grads_[i], *this);
      } else if (n.back) {
        n.back(*this, *grads_[i]);
      }
    }
  }
  void backward_from(Var loss) {
    Matd seed(1, 1);
    seed(0, 0) = 1.0;
    const std::pair<Var, Matd> s{loss, seed};
    backward(std::span<const std::pair<Var, Matd>>(&s, 1));
  }

  std::size_t num_nodes() const { return nodes_.size(); }

  void note_saved_bytes(std::size_t n) {
    saved_bytes_ += n;
    if (mem_) mem_->alloc(MemTag::Activations, n);
  }
  double aux_scalar(Var v) const { return aux_.at(v.id); }
  void set_aux_scalar(Var v, double x) { aux_[v.id] = x; }
  ParamStore<Scalar>* params() { return params_; }

 private:
  struct Node {
    BackFn back;
    DetachHook detach_hook;
    bool detached = false;
  };

  std::size_t check(Var v) const {
    require_input(v.valid() && std::size_t(v.id) < vals_.size(), "invalid tape variable");
    return std::size_t(v.id);
  }

  Var push(M value, std::vector<Var>, BackFn back) {
    debug_check_finite(value, "tape op output");
    const std::size_t bytes = std::size_t(value.size()) * sizeof(Scalar);
    vals_.push_back(std::make_shared<const M>(std::move(value)));
    grads_.push_back(nullptr);
    Node n;
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    note_saved_bytes(bytes);
    return Var{std::int32_t(nodes_.size()) - 1};
  }

  void release_ledger() {
    if (mem_ && saved_bytes_) mem_->free(MemTag::Activations, saved_bytes_);
    saved_bytes_ = 0;
  }

  ParamStore<Scalar>* params_;
  MemoryLedger* mem_;
  std::vector<std::shared_ptr<const M>> vals_;
  std::vector<std::unique_ptr<Matd>> grads_;
  std::vector<Node> nodes_;
  std::map<std::int32_t, double> aux_;
  std::size_t saved_bytes_ = 0;
};

// ---------------------------------------------------------------------------
// Op kernels. Matrix products run row-by-row with f64 inner accumulation so a
// node row's result depends only on that row's bytes, never on how rows are
// batched; this is what makes per-worker outputs invariant to partitioning.

template <class Scalar>
Mat<Scalar> matmul_rowwise(const Mat<Scalar>& a, const Mat<Scalar>& b) {
  require_input(a.cols() == b.rows(), "matmul: inner dimensions differ");
  const Matd bd = b.template cast<double>();
  Mat<Scalar> out(a.rows(), b.cols());
  RowVecd ar(a.cols()), r(b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    ar = a.row(i).template cast<double>();
    r.noalias() = ar * bd;
    out.row(i) = r.template cast<Scalar>();
  }
  return out;
}

template <class Scalar>
Var matmul(Tape<Scalar>& t, Var a, Var b) {
  Mat<Scalar> out = matmul_rowwise(t.value(a), t.value(b));
  return t.make_node(std::move(out), [a, b](Tape<Scalar>& tt, const Matd& g) {
    const Matd ad = tt.value(a).template cast<double>();
    const Matd bd = tt.value(b).template cast<double>();
    Matd da(ad.rows(), ad.cols());
    const Matd bt = bd.transpose();
    for (Eigen::Index i = 0; i < g.rows(); ++i) da.row(i).noalias() = g.row(i) * bt;
    Matd db = Matd::Zero(bd.rows(), bd.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) db.noalias() += ad.row(i).transpose() * g.row(i);
    tt.accumulate_grad(a, da);
    tt.accumulate_grad(b, db);
  });
}

template <class Scalar>
Var add(Tape<Scalar>& t, Var a, Var b) {
  const auto& x = t.value(a);
  const auto& y = t.value(b);
  require_input(x.rows() == y.rows() && x.cols() == y.cols(), "add: shape mismatch");
  Mat<Scalar> out = x + y;
  return t.make_node(std::move(out), [a, b](Tape<Scalar>& tt, const Matd& g) {
    tt.accumulate_grad(a, g);
    tt.accumulate_grad(b, g);
  });
}

template <class Scalar>
Var mul_scalar(Tape<Scalar>& t, Var a, double c) {
  Mat<Scalar> out = (t.value(a).template cast<double>() * c).template cast<Scalar>();
  return t.make_node(std::move(out), [a, c](Tape<Scalar>& tt, const Matd& g) {
    tt.accumulate_grad(a, (g * c).eval());
  });
}

template <class Scalar>
Var relu(Tape<Scalar>& t, Var a) {
  Mat<Scalar> out = t.value(a).cwiseMax(Scalar(0));
  return t.make_node(std::move(out), [a](Tape<Scalar>& tt, const Matd& g) {
    // subgradient choice at 0: the positive branch
    const auto& x = tt.value(a);
    Matd dx = g;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < x.cols(); ++j)
        if (x(i, j) < Scalar(0)) dx(i, j) = 0.0;
    tt.accumulate_grad(a, dx);
  });
}

template <class Scalar>
Var leaky_relu(Tape<Scalar>& t, Var a, double slope) {
  const Matd xd = t.value(a).template cast<double>();
  Mat<Scalar> out = xd.unaryExpr([slope](double x) { return x >= 0.0 ? x : slope * x; })
                        .template cast<Scalar>();
  return t.make_node(std::move(out), [a, slope](Tape<Scalar>& tt, const Matd& g) {
    const auto& x = tt.value(a);
    Matd dx = g;
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < x.cols(); ++j)
        if (x(i, j) < Scalar(0)) dx(i, j) *= slope;
    tt.accumulate_grad(a, dx);
  });
}

template <class Scalar>
Var elu(Tape<Scalar>& t, Var a, double alpha = 1.0) {
  const Matd xd = t.value(a).template cast<double>();
  Mat<Scalar> out =
      xd.unaryExpr([alpha](double x) { return x >= 0.0 ? x : alpha * (std::exp(x) - 1.0); })
          .template cast<Scalar>();
  return t.make_node(std::move(out), [a, alpha](Tape<Scalar>& tt, const Matd& g) {
    const Matd xd = tt.value(a).template cast<double>();
    Matd dx = g;
    for (Eigen::Index i = 0; i < xd.rows(); ++i)
      for (Eigen::Index j = 0; j < xd.cols(); ++j)
        if (xd(i, j) < 0.0) dx(i, j) *= alpha * std::exp(xd(i, j));
    tt.accumulate_grad(a, dx);
  });
}

template <class Scalar>
Var mul_rowvec(Tape<Scalar>& t, Var x, Var v) {
  const auto& xm = t.value(x);
  const auto& vm = t.value(v);
  require_input(vm.rows() == 1 && vm.cols() == xm.cols(), "mul_rowvec: expected 1 x cols vector");
  Mat<Scalar> out = xm.array().rowwise() * vm.row(0).array();
  return t.make_node(std::move(out), [x, v](Tape<Scalar>& tt, const Matd& g) {
    const Matd xd = tt.value(x).template cast<double>();
    const RowVecd vd = tt.value(v).row(0).template cast<double>();
    Matd dx = g.array().rowwise() * vd.array();
    Matd dv = Matd::Zero(1, vd.size());
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      dv.row(0) += g.row(i).cwiseProduct(xd.row(i));
    tt.accumulate_grad(x, dx);
    tt.accumulate_grad(v, dv);
  });
}

template <class Scalar>
Var add_rowvec(Tape<Scalar>& t, Var x, Var v) {
  const auto& xm = t.value(x);
  const auto& vm = t.value(v);
  require_input(vm.rows() == 1 && vm.cols() == xm.cols(), "add_rowvec: expected 1 x cols vector");
  Mat<Scalar> out = xm.array().rowwise() + vm.row(0).array();
  return t.make_node(std::move(out), [x, v](Tape<Scalar>& tt, const Matd& g) {
    Matd dv = Matd::Zero(1, g.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) dv.row(0) += g.row(i);
    tt.accumulate_grad(x, g);
    tt.accumulate_grad(v, dv);
  });
}

/// Dropout with a counter-based mask keyed by (seed, epoch, stage, global row
/// id, column): the mask a node sees does not depend on which worker owns it.
template <class Scalar>
Var dropout(Tape<Scalar>& t, Var x, double p, std::uint64_t seed, std::uint64_t epoch,
            std::uint64_t stage, std::span<const NodeId> row_ids) {
  require_input(p >= 0.0 && p < 1.0, "dropout: p must be in [0, 1)");
  const auto& xm = t.value(x);
  require_input(std::int64_t(row_ids.size()) == xm.rows(), "dropout: row id count mismatch");
  if (p == 0.0) {
    Mat<Scalar> out = xm;
    return t.make_node(std::move(out),
                       [x](Tape<Scalar>& tt, const Matd& g) { tt.accumulate_grad(x, g); });
  }
  auto mask = std::make_shared<Matd>(xm.rows(), xm.cols());
  const double scale = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < xm.rows(); ++i)
    for (Eigen::Index j = 0; j < xm.cols(); ++j)
      (*mask)(i, j) = dropout_keep(seed, epoch, stage, row_ids[std::size_t(i)], j, p) ? scale : 0.0;
  t.note_saved_bytes(std::size_t(mask->size()) * 8);
  Mat<Scalar> out =
      (xm.template cast<double>().cwiseProduct(*mask)).template cast<Scalar>();
  return t.make_node(std::move(out), [x, mask](Tape<Scalar>& tt, const Matd& g) {
    tt.accumulate_grad(x, g.cwiseProduct(*mask).eval());
  });
}

/// Batch normalization over the global row set: workers exchange (sum, sum of
/// squares, count) per column, normalize with the population statistics, and
/// the backward pass all-reduces the two summary gradient terms so input
/// gradients match a single-machine pass over the concatenated rows.
/// Affine parameters live outside (mul_rowvec / add_rowvec).
template <class Scalar>
Var dist_normalize(Tape<Scalar>& t, Var x, double eps, Transport* tp, Vecd* run_mean = nullptr,
                   Vecd* run_var = nullptr, double momentum = 0.9) {
  const auto& xm = t.value(x);
  const Eigen::Index cols = xm.cols();
  std::vector<double> stats(std::size_t(2 * cols) + 1, 0.0);
  {
    std::vector<double> comp(std::size_t(2 * cols), 0.0);
    for (Eigen::Index i = 0; i < xm.rows(); ++i)
      for (Eigen::Index j = 0; j < cols; ++j) {
        const double v = double(xm(i, j));
        neumaier_add(stats[std::size_t(j)], comp[std::size_t(j)], v);
        neumaier_add(stats[std::size_t(cols + j)], comp[std::size_t(cols + j)], v * v);
      }
    for (Eigen::Index j = 0; j < 2 * cols; ++j) stats[std::size_t(j)] += comp[std::size_t(j)];
  }
  stats[std::size_t(2 * cols)] = double(xm.rows());
  if (tp) tp->allreduce_sum(stats);
  const double n = stats[std::size_t(2 * cols)];
  require_input(n > 0, "dist_normalize: zero global rows");

  auto mean = std::make_shared<Vecd>(cols);
  auto inv_std = std::make_shared<Vecd>(cols);
  for (Eigen::Index j = 0; j < cols; ++j) {
    const double mu = stats[std::size_t(j)] / n;
    const double var = std::max(0.0, stats[std::size_t(cols + j)] / n - mu * mu);
    (*mean)(j) = mu;
    (*inv_std)(j) = 1.0 / std::sqrt(var + eps);
    if (run_mean) (*run_mean)(j) = momentum * (*run_mean)(j) + (1.0 - momentum) * mu;
    if (run_var) (*run_var)(j) = momentum * (*run_var)(j) + (1.0 - momentum) * var;
  }

  auto xhat = std::make_shared<Matd>(xm.rows(), cols);
  for (Eigen::Index i = 0; i < xm.rows(); ++i)
    for (Eigen::Index j = 0; j < cols; ++j)
      (*xhat)(i, j) = (double(xm(i, j)) - (*mean)(j)) * (*inv_std)(j);
  t.note_saved_bytes(std::size_t(xhat->size()) * 8);

  Mat<Scalar> out = xhat->template cast<Scalar>();
  return t.make_node(std::move(out), [x, xhat, inv_std, n, tp](Tape<Scalar>& tt, const Matd& g) {
    const Eigen::Index cols = g.cols();
    std::vector<double> sums(std::size_t(2 * cols), 0.0);
    {
      std::vector<double> comp(std::size_t(2 * cols), 0.0);
      for (Eigen::Index i = 0; i < g.rows(); ++i)
        for (Eigen::Index j = 0; j < cols; ++j) {
          neumaier_add(sums[std::size_t(j)], comp[std::size_t(j)], g(i, j));
          neumaier_add(sums[std::size_t(cols + j)], comp[std::size_t(cols + j)],
                       g(i, j) * (*xhat)(i, j));
        }
      for (Eigen::Index j = 0; j < 2 * cols; ++j) sums[std::size_t(j)] += comp[std::size_t(j)];
    }
    if (tp) tp->allreduce_sum(sums);
    Matd dx(g.rows(), cols);
    for (Eigen::Index i = 0; i < g.rows(); ++i)
      for (Eigen::Index j = 0; j < cols; ++j)
        dx(i, j) = (*inv_std)(j) *
                   (g(i, j) - sums[std::size_t(j)] / n - (*xhat)(i, j) * sums[std::size_t(cols + j)] / n);
    tt.accumulate_grad(x, dx);
  });
}

/// Mean negative log-likelihood over the masked rows, normalized by the
/// global masked-row count; rows are max-shifted before exponentiation.
template <class Scalar>
Var nll_masked(Tape<Scalar>& t, Var logits, std::vector<std::int32_t> labels,
               std::vector<char> mask, std::int64_t global_count) {
  const auto& lm = t.value(logits);
  require_input(global_count > 0, "nll_masked: empty mask");
  require_input(std::int64_t(labels.size()) == lm.rows() && std::int64_t(mask.size()) == lm.rows(),
                "nll_masked: label/mask size mismatch");
  auto probs = std::make_shared<Matd>(Matd::Zero(lm.rows(), lm.cols()));
  auto used = std::make_shared<std::vector<char>>(std::move(mask));
  auto labs = std::make_shared<std::vector<std::int32_t>>(std::move(labels));
  double loss_sum = 0.0, loss_comp = 0.0;
  for (Eigen::Index i = 0; i < lm.rows(); ++i) {
    if (!(*used)[std::size_t(i)]) continue;
    const std::int32_t y = (*labs)[std::size_t(i)];
    require_input(y >= 0 && y < lm.cols(), "nll_masked: label out of range");
    const RowVecd row = lm.row(i).template cast<double>();
    const double m = row.maxCoeff();
    const double lse = m + std::log((row.array() - m).exp().sum());
    neumaier_add(loss_sum, loss_comp, lse - row(y));
    probs->row(i) = (row.array() - lse).exp();
  }
  const double partial = (loss_sum + loss_comp) / double(global_count);
  t.note_saved_bytes(std::size_t(probs->size()) * 8);
  Mat<Scalar> out(1, 1);
  out(0, 0) = Scalar(partial);
  const Var v = t.make_node(
      std::move(out), [logits, probs, used, labs, global_count](Tape<Scalar>& tt, const Matd& g) {
        const double s = g(0, 0) / double(global_count);
        Matd dl = Matd::Zero(probs->rows(), probs->cols());
        for (Eigen::Index i = 0; i < probs->rows(); ++i) {
          if (!(*used)[std::size_t(i)]) continue;
          dl.row(i) = probs->row(i) * s;
          dl(i, (*labs)[std::size_t(i)]) -= s;
        }
        tt.accumulate_grad(logits, dl);
      });
  t.set_aux_scalar(v, partial);
  return v;
}

/// The exact f64 partial this worker contributed to a loss node.
template <class Scalar>
double loss_partial(Tape<Scalar>& t, Var loss) {
  return t.aux_scalar(loss);
}

}  // namespace sargraph
