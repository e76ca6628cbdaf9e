#pragma once

#include "sargraph/sar.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace sargraph {

enum class Activation { Identity, Relu, LeakyRelu, Elu };

inline Activation activation_from_name(const std::string& name) {
  if (name == "identity" || name == "none") return Activation::Identity;
  if (name == "relu") return Activation::Relu;
  if (name == "leaky_relu") return Activation::LeakyRelu;
  if (name == "elu") return Activation::Elu;
  throw InputError("unknown activation: " + name);
}

template <class Scalar>
Var apply_activation(Tape<Scalar>& t, Var x, Activation act) {
  switch (act) {
    case Activation::Identity: return x;
    case Activation::Relu: return relu(t, x);
    case Activation::LeakyRelu: return leaky_relu(t, x, 0.01);
    case Activation::Elu: return elu(t, x);
  }
  return x;
}

/// Everything a layer needs for one forward call on one worker.
template <class Scalar>
struct LayerRun {
  Tape<Scalar>& tape;
  Transport& tp;
  MemoryLedger* mem = nullptr;
  const LayerCommPlan* plan = nullptr;
  SarOptions sar;
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  std::span<const NodeId> owned;  // global ids of local rows
};

/// Record the aggregation result as a detached leaf whose hook runs the
/// blockwise backward pass and seeds the z gradient when the reverse sweep
/// reaches the boundary. The aggregation itself records nothing on the tape.
template <class Scalar>
Var run_sar_detached(LayerRun<Scalar>& run, const Aggregator<Scalar>& agg, Var z) {
  Tape<Scalar>& t = run.tape;
  const std::size_t nodes_before = t.num_nodes();
  auto st = sar_forward(agg, t.value_ptr(z), *run.plan, run.tp, run.mem, run.sar);
  if (t.num_nodes() != nodes_before)
    throw std::logic_error("tape recorded nodes during aggregation");
  const Aggregator<Scalar>* aggp = &agg;
  const LayerCommPlan* plan = run.plan;
  Transport* tp = &run.tp;
  MemoryLedger* mem = run.mem;
  const SarOptions sar = run.sar;
  return t.detached_leaf(st->acc, [st, aggp, plan, tp, mem, sar, z](const Matd& g,
                                                                    Tape<Scalar>& tt) {
    const Matd e_p = sar_backward(*aggp, *st, g, *plan, *tp, mem, sar);
    tt.accumulate_grad(z, e_p);
  });
}

template <class Scalar>
class LayerBase {
 public:
  virtual ~LayerBase() = default;
  virtual Var forward(LayerRun<Scalar>& run, Var h_prev) = 0;
  virtual Eigen::Index out_dim() const = 0;
};

/// h_i = act(W_res h_i + mean_{j in N(i)} (W h)_j); the mean runs over the
/// full in-neighborhood and excludes the node itself unless it has a self
/// loop — the self contribution flows only through the residual weights.
template <class Scalar>
class GraphSageLayer final : public LayerBase<Scalar> {
 public:
  GraphSageLayer(ParamStore<Scalar>& ps, const std::string& name, Eigen::Index f_in,
                 Eigen::Index f_out, Activation act, std::shared_ptr<const Vecd> degrees,
                 std::uint64_t seed, std::uint64_t param_tag)
      : act_(act), f_out_(f_out), agg_(true, std::move(degrees)) {
    Mat<Scalar> w(f_in, f_out), wr(f_in, f_out);
    glorot_fill(w, seed, param_tag * 2 + 0, f_in, f_out);
    glorot_fill(wr, seed, param_tag * 2 + 1, f_in, f_out);
    w_id_ = ps.add(name + ".W", std::move(w));
    wres_id_ = ps.add(name + ".W_res", std::move(wr));
  }

  Var forward(LayerRun<Scalar>& run, Var h_prev) override {
    Tape<Scalar>& t = run.tape;
    const Var z = matmul(t, h_prev, t.param(w_id_));
    const Var acc = run_sar_detached(run, agg_, z);
    const Var res = matmul(t, h_prev, t.param(wres_id_));
    return apply_activation(t, add(t, res, acc), act_);
  }

  Eigen::Index out_dim() const override { return f_out_; }
  const Aggregator<Scalar>& aggregator() const { return agg_; }

 private:
  Activation act_;
  Eigen::Index f_out_;
  SageAggregator<Scalar> agg_;
  std::int32_t w_id_ = -1, wres_id_ = -1;
};

/// Multi-head attention layer; head outputs are concatenated (one head
/// matches the single-head formulation exactly). No bias: the nonlinearity
/// applies directly to the attention-weighted sum.
template <class Scalar>
class GatLayer final : public LayerBase<Scalar> {
 public:
  GatLayer(ParamStore<Scalar>& ps, const std::string& name, Eigen::Index f_in, Eigen::Index f_out,
           int heads, double slope, Activation act, std::int64_t n_local, std::uint64_t seed,
           std::uint64_t param_tag)
      : act_(act), f_out_(f_out) {
    require_input(f_out % heads == 0, "gat: output width must divide evenly across heads");
    const Eigen::Index fh = f_out / heads;
    Mat<Scalar> w(f_in, f_out), a(2 * fh, heads);
    glorot_fill(w, seed, param_tag * 2 + 0, f_in, f_out);
    glorot_fill(a, seed, param_tag * 2 + 1, 2 * fh, 1);
    w_id_ = ps.add(name + ".W", std::move(w));
    a_id_ = ps.add(name + ".a", std::move(a));
    fused_ = std::make_unique<GatAggregator<Scalar>>(&ps, a_id_, heads, slope, n_local, false);
    blockwise_ = std::make_unique<GatAggregator<Scalar>>(&ps, a_id_, heads, slope, n_local, true);
    reference_ = std::make_unique<GatReferenceAggregator<Scalar>>(&ps, a_id_, heads, slope, n_local);
  }

  Var forward(LayerRun<Scalar>& run, Var h_prev) override {
    Tape<Scalar>& t = run.tape;
    const Var z = matmul(t, h_prev, t.param(w_id_));
    const Var acc = run_sar_detached(run, pick(run.sar), z);
    return apply_activation(t, acc, act_);
  }

  void set_fused(bool fused) { use_fused_ = fused; }
  const Aggregator<Scalar>& pick(const SarOptions& sar) const {
    if (sar.policy == RematPolicy::VanillaDp) return *reference_;
    return use_fused_ ? static_cast<const Aggregator<Scalar>&>(*fused_)
                      : static_cast<const Aggregator<Scalar>&>(*blockwise_);
  }

  Eigen::Index out_dim() const override { return f_out_; }

 private:
  Activation act_;
  Eigen::Index f_out_;
  bool use_fused_ = true;
  std::int32_t w_id_ = -1, a_id_ = -1;
  std::unique_ptr<GatAggregator<Scalar>> fused_, blockwise_;
  std::unique_ptr<GatReferenceAggregator<Scalar>> reference_;
};

/// Relational layer with basis-decomposed per-relation weights; the transform
/// applies at the destination, so the layer input itself crosses the wire.
template <class Scalar>
class RgcnLayer final : public LayerBase<Scalar> {
 public:
  RgcnLayer(ParamStore<Scalar>& ps, const std::string& name, Eigen::Index f_in, Eigen::Index f_out,
            std::int32_t num_relations, int num_bases, bool self_weight, Activation act,
            std::shared_ptr<const Matd> rel_degrees, std::uint64_t seed, std::uint64_t param_tag)
      : act_(act), f_out_(f_out) {
    require_input(num_bases >= 1, "rgcn: need at least one basis tensor");
    std::vector<std::int32_t> basis_ids;
    for (int b = 0; b < num_bases; ++b) {
      Mat<Scalar> v(f_in, f_out);
      glorot_fill(v, seed, param_tag * 16 + std::uint64_t(b), f_in, f_out);
      basis_ids.push_back(ps.add(name + ".V" + std::to_string(b), std::move(v)));
    }
    Mat<Scalar> coeff(num_relations, num_bases);
    glorot_fill(coeff, seed, param_tag * 16 + 15, num_relations, num_bases);
    coeff_id_ = ps.add(name + ".a_rb", std::move(coeff));
    if (self_weight) {
      Mat<Scalar> ws(f_in, f_out);
      glorot_fill(ws, seed, param_tag * 16 + 14, f_in, f_out);
      wself_id_ = ps.add(name + ".W_self", std::move(ws));
    }
    agg_ = std::make_unique<RgcnAggregator<Scalar>>(&ps, std::move(basis_ids), coeff_id_,
                                                    num_relations, std::move(rel_degrees));
  }

  Var forward(LayerRun<Scalar>& run, Var h_prev) override {
    Tape<Scalar>& t = run.tape;
    Var out = run_sar_detached(run, *agg_, h_prev);
    if (wself_id_ >= 0) out = add(t, out, matmul(t, h_prev, t.param(wself_id_)));
    return apply_activation(t, out, act_);
  }

  Eigen::Index out_dim() const override { return f_out_; }
  const RgcnAggregator<Scalar>& aggregator() const { return *agg_; }

 private:
  Activation act_;
  Eigen::Index f_out_;
  std::int32_t coeff_id_ = -1, wself_id_ = -1;
  std::unique_ptr<RgcnAggregator<Scalar>> agg_;
};

/// Normalization over the distributed row set plus the affine pair; running
/// statistics are kept for checkpointing and inference.
template <class Scalar>
class BatchNormLayer {
 public:
  BatchNormLayer(ParamStore<Scalar>& ps, const std::string& name, Eigen::Index width)
      : name_(name), run_mean_(Vecd::Zero(width)), run_var_(Vecd::Ones(width)) {
    gamma_id_ = ps.add(name + ".gamma", Mat<Scalar>::Ones(1, width));
    beta_id_ = ps.add(name + ".beta", Mat<Scalar>::Zero(1, width));
  }

  Var forward(LayerRun<Scalar>& run, Var x) {
    Tape<Scalar>& t = run.tape;
    const Var xn = dist_normalize(t, x, eps_, &run.tp, &run_mean_, &run_var_, momentum_);
    return add_rowvec(t, mul_rowvec(t, xn, t.param(gamma_id_)), t.param(beta_id_));
  }

  void save_state(TensorArchive& a) const {
    a["state/" + name_ + ".run_mean"] = sarf_from_f64(run_mean_.transpose(), DType::F64);
    a["state/" + name_ + ".run_var"] = sarf_from_f64(run_var_.transpose(), DType::F64);
  }
  void load_state(const TensorArchive& a) {
    run_mean_ = a.at("state/" + name_ + ".run_mean").as_f64().row(0).transpose();
    run_var_ = a.at("state/" + name_ + ".run_var").as_f64().row(0).transpose();
  }

 private:
  std::string name_;
  std::int32_t gamma_id_ = -1, beta_id_ = -1;
  Vecd run_mean_, run_var_;
  double eps_ = 1e-5;
  double momentum_ = 0.9;
};

}  // namespace sargraph
