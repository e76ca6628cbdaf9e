#pragma once

#include "sargraph/autodiff.hpp"
#include "sargraph/shard.hpp"
#include "sargraph/softmax.hpp"

#include <memory>
#include <string>
#include <vector>

namespace sargraph {

enum class AggKind { Sum, Mean, AttentionSoftmax, RelationMean };

/// What an aggregator needs during backpropagation. Case 2 (input
/// rematerialization) holds whenever the gradient w.r.t. the inputs or the
/// aggregation parameters depends on the input values themselves.
struct AggregatorSpec {
  bool needs_input_rematerialization = false;
  std::string message_fn;
  AggKind aggregate = AggKind::Sum;
  bool has_theta = false;
};

/// Per-layer, per-pass accumulators. acc is the finalized aggregator output;
/// everything else is working state for the incremental fold and for the
/// blockwise backward pass.
template <class Scalar>
struct AggregationState {
  std::shared_ptr<const Mat<Scalar>> saved_local_z;

  CompensatedRows accum;                  // sum/mean raw sums
  std::vector<CompensatedRows> rel_accum; // per-relation raw sums

  Matd s_dst;                 // attention: destination logit halves [n x H]
  Matd softmax_max, softmax_den;
  Matd numer;                 // attention numerators [n x H*F_head]

  Matd acc_d;                 // finalized output, f64
  Mat<Scalar> acc;            // finalized output
  bool finalized = false;

  Matd e_acc;                 // upstream gradient of acc
  Matd coupling;              // attention: g_i . acc_i per head
  Matd theta_sum, theta_comp; // attention-vector gradient, compensated
  std::vector<Matd> rel_W;    // R-GCN materialized W_r
  std::vector<Matd> rel_dW;   // R-GCN per-relation weight gradients

  // Retained forward state for the vanilla domain-parallel policy.
  std::vector<Mat<Scalar>> retained_src;
  std::vector<std::shared_ptr<Matd>> retained_logits;  // pre-activation, [edges x H]
  std::vector<std::size_t> retained_remote_bytes;
  std::vector<std::size_t> retained_coeff_bytes;
};

template <class Scalar>
class Aggregator {
 public:
  virtual ~Aggregator() = default;
  virtual AggregatorSpec spec() const = 0;
  virtual Eigen::Index out_width(Eigen::Index z_cols) const { return z_cols; }

  virtual void begin_forward(AggregationState<Scalar>& st, const Mat<Scalar>& local_z) const = 0;
  /// Fold one shard block. src_rows holds the rows addressed by the block's
  /// local source indices (fetched, retained, or gathered locally).
  virtual void fold_block(AggregationState<Scalar>& st, const ShardBlock& block,
                          const Mat<Scalar>& src_rows, MemoryLedger* mem) const = 0;
  virtual void finalize(AggregationState<Scalar>& st) const = 0;

  virtual void begin_backward(AggregationState<Scalar>& st, const Matd& e_acc) const = 0;
  /// Error rows for the block's sources (|src_global_ids| x z_cols, f64).
  /// Destination-side input gradients accumulate into local_z_grad; parameter
  /// gradients accumulate into state and land in the store in end_backward.
  virtual Matd backward_block(AggregationState<Scalar>& st, const ShardBlock& block,
                              const Mat<Scalar>* src_rows, CompensatedRows& local_z_grad,
                              MemoryLedger* mem) const = 0;
  virtual void end_backward(AggregationState<Scalar>&) const {}
};

// ---------------------------------------------------------------------------
// GraphSage: messages are the source features, aggregation is a sum or a mean
// over the full in-neighborhood. Case 1: the backward pass never needs the
// input values, errors are scattered straight back.

template <class Scalar>
class SageAggregator final : public Aggregator<Scalar> {
 public:
  SageAggregator(bool mean, std::shared_ptr<const Vecd> degrees)
      : mean_(mean), deg_(std::move(degrees)) {}

  AggregatorSpec spec() const override {
    return {false, "copy", mean_ ? AggKind::Mean : AggKind::Sum, false};
  }

  void begin_forward(AggregationState<Scalar>& st, const Mat<Scalar>& local_z) const override {
    st.accum = CompensatedRows(deg_->size(), local_z.cols());
  }

  void fold_block(AggregationState<Scalar>& st, const ShardBlock& block,
                  const Mat<Scalar>& src_rows, MemoryLedger*) const override {
    for (const auto& [dst, src] : block.edges)
      st.accum.add_row_expr(dst, src_rows.row(src).template cast<double>());
  }

  void finalize(AggregationState<Scalar>& st) const override {
    st.acc_d = st.accum.value();
    if (mean_)
      for (Eigen::Index i = 0; i < st.acc_d.rows(); ++i)
        if ((*deg_)(i) > 0) st.acc_d.row(i) /= (*deg_)(i);
    st.acc = st.acc_d.template cast<Scalar>();
    st.finalized = true;
  }

  void begin_backward(AggregationState<Scalar>& st, const Matd& e_acc) const override {
    st.e_acc = e_acc;
  }

  Matd backward_block(AggregationState<Scalar>& st, const ShardBlock& block,
                      const Mat<Scalar>*, CompensatedRows&, MemoryLedger*) const override {
    CompensatedRows err(std::int64_t(block.src_global_ids.size()), st.e_acc.cols());
    for (const auto& [dst, src] : block.edges) {
      const double w = mean_ ? 1.0 / double((*deg_)(dst)) : 1.0;
      err.add_row_expr(src, st.e_acc.row(dst) * w);
    }
    return err.value();
  }

 private:
  bool mean_;
  std::shared_ptr<const Vecd> deg_;  // global in-degree per local destination row
};

// ---------------------------------------------------------------------------
// Attention (GAT). The per-edge logit is LeakyReLU(a . (z_i || z_j)), split
// into a destination half s_i and a source half t_j. The fused path folds
// each edge's coefficient into a running softmax as it is computed and never
// materializes a coefficient tensor; the blockwise path writes a per-block
// logit buffer first (and frees it before the next block); both normalize at
// the end with the streamed numerator/denominator. Case 2: backward refetches
// the source rows and recomputes the coefficients.

template <class Scalar>
class GatAggregator final : public Aggregator<Scalar> {
 public:
  GatAggregator(ParamStore<Scalar>* ps, std::int32_t attn_id, int heads, double slope,
                std::int64_t n_local, bool materialize_per_block)
      : ps_(ps), attn_id_(attn_id), heads_(heads), slope_(slope), n_local_(n_local),
        materialize_(materialize_per_block) {}

  AggregatorSpec spec() const override {
    return {true, "attention", AggKind::AttentionSoftmax, true};
  }

  void begin_forward(AggregationState<Scalar>& st, const Mat<Scalar>& local_z) const override {
    const Eigen::Index fh = f_head(local_z.cols());
    st.s_dst = half_logits(local_z, 0, fh);
    st.softmax_max =
        Matd::Constant(n_local_, heads_, -std::numeric_limits<double>::infinity());
    st.softmax_den = Matd::Zero(n_local_, heads_);
    st.numer = Matd::Zero(n_local_, local_z.cols());
  }

  void fold_block(AggregationState<Scalar>& st, const ShardBlock& block,
                  const Mat<Scalar>& src_rows, MemoryLedger* mem) const override {
    const Eigen::Index fh = f_head(src_rows.cols());
    const Matd t_src = half_logits(src_rows, fh, fh);
    if (!materialize_) {
      // fused: coefficients live only in registers
      for (const auto& [dst, src] : block.edges)
        for (int h = 0; h < heads_; ++h) {
          const double e = edge_logit(st.s_dst(dst, h), t_src(src, h));
          softmax_fold_one(st.softmax_max(dst, h), st.softmax_den(dst, h),
                           st.numer.row(dst).segment(h * fh, fh), e,
                           src_rows.row(src).segment(h * fh, fh).template cast<double>());
        }
      return;
    }
    // blockwise two-step: materialize this block's logits, fold, free
    const std::size_t bytes = std::size_t(block.num_edges()) * std::size_t(heads_) * 8;
    if (mem) mem->alloc(MemTag::EdgeCoefficients, bytes);
    Matd logits(block.num_edges(), heads_);
    for (std::int64_t k = 0; k < block.num_edges(); ++k)
      for (int h = 0; h < heads_; ++h)
        logits(k, h) = edge_logit(st.s_dst(block.edges[std::size_t(k)].first, h),
                                  t_src(block.edges[std::size_t(k)].second, h));
    for (std::int64_t k = 0; k < block.num_edges(); ++k) {
      const auto [dst, src] = block.edges[std::size_t(k)];
      for (int h = 0; h < heads_; ++h)
        softmax_fold_one(st.softmax_max(dst, h), st.softmax_den(dst, h),
                         st.numer.row(dst).segment(h * fh, fh), logits(k, h),
                         src_rows.row(src).segment(h * fh, fh).template cast<double>());
    }
    if (mem) mem->free(MemTag::EdgeCoefficients, bytes);
  }

  void finalize(AggregationState<Scalar>& st) const override {
    const Eigen::Index fh = st.numer.cols() / heads_;
    st.acc_d = Matd::Zero(st.numer.rows(), st.numer.cols());
    for (Eigen::Index i = 0; i < st.numer.rows(); ++i)
      for (int h = 0; h < heads_; ++h)
        if (st.softmax_den(i, h) != 0.0)
          st.acc_d.row(i).segment(h * fh, fh) =
              st.numer.row(i).segment(h * fh, fh) / st.softmax_den(i, h);
    st.acc = st.acc_d.template cast<Scalar>();
    st.finalized = true;
  }

  void begin_backward(AggregationState<Scalar>& st, const Matd& e_acc) const override {
    st.e_acc = e_acc;
    const Eigen::Index fh = e_acc.cols() / heads_;
    st.coupling = Matd::Zero(e_acc.rows(), heads_);
    for (Eigen::Index i = 0; i < e_acc.rows(); ++i)
      for (int h = 0; h < heads_; ++h)
        st.coupling(i, h) =
            e_acc.row(i).segment(h * fh, fh).dot(st.acc_d.row(i).segment(h * fh, fh));
    const auto& a = ps_->entry(attn_id_).value;
    st.theta_sum = Matd::Zero(a.rows(), a.cols());
    st.theta_comp = Matd::Zero(a.rows(), a.cols());
  }

  Matd backward_block(AggregationState<Scalar>& st, const ShardBlock& block,
                      const Mat<Scalar>* src_rows, CompensatedRows& local_z_grad,
                      MemoryLedger*) const override {
    require_proto(src_rows != nullptr, "attention backward requires rematerialized inputs");
    const Eigen::Index fh = f_head(src_rows->cols());
    const Matd ad = ps_->entry(attn_id_).value.template cast<double>();
    const Matd t_src = half_logits(*src_rows, fh, fh);
    const Mat<Scalar>& zi = *st.saved_local_z;
    Matd err = Matd::Zero(std::int64_t(block.src_global_ids.size()), src_rows->cols());
    for (const auto& [dst, src] : block.edges) {
      for (int h = 0; h < heads_; ++h) {
        const double pre = st.s_dst(dst, h) + t_src(src, h);
        const double e = pre >= 0.0 ? pre : slope_ * pre;
        const double alpha = std::exp(e - st.softmax_max(dst, h)) / st.softmax_den(dst, h);
        const RowVecd g = st.e_acc.row(dst).segment(h * fh, fh);
        const RowVecd zj = (*src_rows).row(src).segment(h * fh, fh).template cast<double>();
        const double beta = alpha * (g.dot(zj) - st.coupling(dst, h));
        const double gamma = beta * (pre >= 0.0 ? 1.0 : slope_);
        err.row(src).segment(h * fh, fh) += alpha * g + gamma * ad.col(h).segment(fh, fh).transpose();
        local_z_grad.add_row_expr(
            dst, padded_segment(gamma * ad.col(h).segment(0, fh).transpose(), h, fh,
                                src_rows->cols()));
        const RowVecd zi_h = zi.row(dst).segment(h * fh, fh).template cast<double>();
        for (Eigen::Index f = 0; f < fh; ++f) {
          neumaier_add(st.theta_sum(f, h), st.theta_comp(f, h), gamma * zi_h(f));
          neumaier_add(st.theta_sum(fh + f, h), st.theta_comp(fh + f, h), gamma * zj(f));
        }
      }
    }
    return err;
  }

  void end_backward(AggregationState<Scalar>& st) const override {
    ps_->add_grad(attn_id_, st.theta_sum + st.theta_comp);
  }

 private:
  Eigen::Index f_head(Eigen::Index z_cols) const {
    require_input(z_cols % heads_ == 0, "attention: feature width not divisible by heads");
    return z_cols / heads_;
  }
  double edge_logit(double s, double t) const {
    const double pre = s + t;
    const double e = pre >= 0.0 ? pre : slope_ * pre;
    if (!std::isfinite(e)) throw NumericError("attention: non-finite edge logit");
    return e;
  }
  /// Per-row, per-head dot product with one half of the attention vector.
  Matd half_logits(const Mat<Scalar>& z, Eigen::Index offset, Eigen::Index fh) const {
    const Matd ad = ps_->entry(attn_id_).value.template cast<double>();
    Matd out(z.rows(), heads_);
    for (Eigen::Index i = 0; i < z.rows(); ++i)
      for (int h = 0; h < heads_; ++h)
        out(i, h) = z.row(i).segment(h * fh, fh).template cast<double>().dot(
            ad.col(h).segment(offset, fh));
    return out;
  }
  static RowVecd padded_segment(const RowVecd& seg, int h, Eigen::Index fh, Eigen::Index width) {
    RowVecd full = RowVecd::Zero(width);
    full.segment(h * fh, fh) = seg;
    return full;
  }

  ParamStore<Scalar>* ps_;
  std::int32_t attn_id_;
  int heads_;
  double slope_;
  std::int64_t n_local_;
  bool materialize_;
};

// ---------------------------------------------------------------------------
// Reference (materialized two-step) attention: store every block's logits
// during the forward pass, take the exact per-destination maximum, then
// normalize and weight in a second sweep. Requires the retain-blocks policy;
// backward reads the stored logits and blocks, refetching nothing. Serves as
// the oracle the fused path is checked against and as the vanilla
// domain-parallel baseline.

template <class Scalar>
class GatReferenceAggregator final : public Aggregator<Scalar> {
 public:
  GatReferenceAggregator(ParamStore<Scalar>* ps, std::int32_t attn_id, int heads, double slope,
                         std::int64_t n_local)
      : ps_(ps), attn_id_(attn_id), heads_(heads), slope_(slope), n_local_(n_local) {}

  AggregatorSpec spec() const override {
    return {true, "attention", AggKind::AttentionSoftmax, true};
  }

  void begin_forward(AggregationState<Scalar>& st, const Mat<Scalar>& local_z) const override {
    const Eigen::Index fh = f_head(local_z.cols());
    st.s_dst = half_logits(local_z, 0, fh);
    st.retained_logits.clear();
    st.numer = Matd::Zero(n_local_, local_z.cols());
    st.softmax_max =
        Matd::Constant(n_local_, heads_, -std::numeric_limits<double>::infinity());
    st.softmax_den = Matd::Zero(n_local_, heads_);
  }

  void fold_block(AggregationState<Scalar>& st, const ShardBlock& block,
                  const Mat<Scalar>& src_rows, MemoryLedger* mem) const override {
    // step 1 only: compute and store the raw logits
    const Eigen::Index fh = f_head(src_rows.cols());
    const Matd t_src = half_logits(src_rows, fh, fh);
    auto logits = std::make_shared<Matd>(block.num_edges(), heads_);
    for (std::int64_t k = 0; k < block.num_edges(); ++k) {
      const auto [dst, src] = block.edges[std::size_t(k)];
      for (int h = 0; h < heads_; ++h) (*logits)(k, h) = st.s_dst(dst, h) + t_src(src, h);
    }
    const std::size_t bytes = std::size_t(logits->size()) * 8;
    if (mem) mem->alloc(MemTag::EdgeCoefficients, bytes);
    if (st.retained_logits.size() <= std::size_t(block.src_part))
      st.retained_logits.resize(std::size_t(block.src_part) + 1);
    if (st.retained_coeff_bytes.size() <= std::size_t(block.src_part))
      st.retained_coeff_bytes.resize(std::size_t(block.src_part) + 1, 0);
    st.retained_logits[std::size_t(block.src_part)] = std::move(logits);
    st.retained_coeff_bytes[std::size_t(block.src_part)] = bytes;
    if (st.retained_src.size() <= std::size_t(block.src_part))
      st.retained_src.resize(std::size_t(block.src_part) + 1);
    st.retained_src[std::size_t(block.src_part)] = src_rows;
  }

  /// step 2: exact max, then normalize and weight across all stored blocks.
  void finalize_blocks(AggregationState<Scalar>& st,
                       const std::vector<ShardBlock>& blocks) const {
    const Eigen::Index width = st.numer.cols();
    const Eigen::Index fh = width / heads_;
    for (const auto& b : blocks) {
      if (b.empty()) continue;
      const auto& logits = *st.retained_logits.at(std::size_t(b.src_part));
      for (std::int64_t k = 0; k < b.num_edges(); ++k)
        for (int h = 0; h < heads_; ++h)
          st.softmax_max(b.edges[std::size_t(k)].first, h) =
              std::max(st.softmax_max(b.edges[std::size_t(k)].first, h),
                       lrelu((*st.retained_logits[std::size_t(b.src_part)])(k, h)));
      (void)logits;
    }
    for (const auto& b : blocks) {
      if (b.empty()) continue;
      const auto& logits = *st.retained_logits.at(std::size_t(b.src_part));
      const auto& src = st.retained_src.at(std::size_t(b.src_part));
      for (std::int64_t k = 0; k < b.num_edges(); ++k) {
        const auto [dst, s] = b.edges[std::size_t(k)];
        for (int h = 0; h < heads_; ++h) {
          const double w = std::exp(lrelu(logits(k, h)) - st.softmax_max(dst, h));
          st.softmax_den(dst, h) += w;
          st.numer.row(dst).segment(h * fh, fh) +=
              w * src.row(s).segment(h * fh, fh).template cast<double>();
        }
      }
    }
    st.acc_d = Matd::Zero(n_local_, width);
    for (Eigen::Index i = 0; i < n_local_; ++i)
      for (int h = 0; h < heads_; ++h)
        if (st.softmax_den(i, h) != 0.0)
          st.acc_d.row(i).segment(h * fh, fh) =
              st.numer.row(i).segment(h * fh, fh) / st.softmax_den(i, h);
    st.acc = st.acc_d.template cast<Scalar>();
    st.finalized = true;
  }

  void finalize(AggregationState<Scalar>&) const override {
    // finalize_blocks does the work; the runtime calls it with the block list
  }

  void begin_backward(AggregationState<Scalar>& st, const Matd& e_acc) const override {
    st.e_acc = e_acc;
    const Eigen::Index fh = e_acc.cols() / heads_;
    st.coupling = Matd::Zero(e_acc.rows(), heads_);
    for (Eigen::Index i = 0; i < e_acc.rows(); ++i)
      for (int h = 0; h < heads_; ++h)
        st.coupling(i, h) =
            e_acc.row(i).segment(h * fh, fh).dot(st.acc_d.row(i).segment(h * fh, fh));
    const auto& a = ps_->entry(attn_id_).value;
    st.theta_sum = Matd::Zero(a.rows(), a.cols());
    st.theta_comp = Matd::Zero(a.rows(), a.cols());
  }

  Matd backward_block(AggregationState<Scalar>& st, const ShardBlock& block,
                      const Mat<Scalar>* src_rows, CompensatedRows& local_z_grad,
                      MemoryLedger*) const override {
    require_proto(src_rows != nullptr, "reference attention backward needs retained inputs");
    const Eigen::Index fh = f_head(src_rows->cols());
    const Matd ad = ps_->entry(attn_id_).value.template cast<double>();
    const auto& logits = *st.retained_logits.at(std::size_t(block.src_part));
    const Mat<Scalar>& zi = *st.saved_local_z;
    Matd err = Matd::Zero(std::int64_t(block.src_global_ids.size()), src_rows->cols());
    for (std::int64_t k = 0; k < block.num_edges(); ++k) {
      const auto [dst, src] = block.edges[std::size_t(k)];
      for (int h = 0; h < heads_; ++h) {
        const double pre = logits(k, h);
        const double e = lrelu(pre);
        const double alpha = std::exp(e - st.softmax_max(dst, h)) / st.softmax_den(dst, h);
        const RowVecd g = st.e_acc.row(dst).segment(h * fh, fh);
        const RowVecd zj = (*src_rows).row(src).segment(h * fh, fh).template cast<double>();
        const double beta = alpha * (g.dot(zj) - st.coupling(dst, h));
        const double gamma = beta * (pre >= 0.0 ? 1.0 : slope_);
        err.row(src).segment(h * fh, fh) += alpha * g + gamma * ad.col(h).segment(fh, fh).transpose();
        RowVecd dst_contrib = RowVecd::Zero(src_rows->cols());
        dst_contrib.segment(h * fh, fh) = gamma * ad.col(h).segment(0, fh).transpose();
        local_z_grad.add_row_expr(dst, dst_contrib);
        const RowVecd zi_h = zi.row(dst).segment(h * fh, fh).template cast<double>();
        for (Eigen::Index f = 0; f < fh; ++f) {
          neumaier_add(st.theta_sum(f, h), st.theta_comp(f, h), gamma * zi_h(f));
          neumaier_add(st.theta_sum(fh + f, h), st.theta_comp(fh + f, h), gamma * zj(f));
        }
      }
    }
    return err;
  }

  void end_backward(AggregationState<Scalar>& st) const override {
    ps_->add_grad(attn_id_, st.theta_sum + st.theta_comp);
  }

 private:
  Eigen::Index f_head(Eigen::Index z_cols) const {
    require_input(z_cols % heads_ == 0, "attention: feature width not divisible by heads");
    return z_cols / heads_;
  }
  double lrelu(double x) const { return x >= 0.0 ? x : slope_ * x; }
  Matd half_logits(const Mat<Scalar>& z, Eigen::Index offset, Eigen::Index fh) const {
    const Matd ad = ps_->entry(attn_id_).value.template cast<double>();
    Matd out(z.rows(), heads_);
    for (Eigen::Index i = 0; i < z.rows(); ++i)
      for (int h = 0; h < heads_; ++h)
        out(i, h) = z.row(i).segment(h * fh, fh).template cast<double>().dot(
            ad.col(h).segment(offset, fh));
    return out;
  }

  ParamStore<Scalar>* ps_;
  std::int32_t attn_id_;
  int heads_;
  double slope_;
  std::int64_t n_local_;
};

// ---------------------------------------------------------------------------
// Relational GCN with basis decomposition: W_r = sum_b a_rb V_b. The message
// transform applies at the destination, so the communicated features are the
// raw layer inputs; per-relation raw sums accumulate blockwise and W_r is
// applied once at finalization. Case 2: weight gradients need the inputs.

template <class Scalar>
class RgcnAggregator final : public Aggregator<Scalar> {
 public:
  RgcnAggregator(ParamStore<Scalar>* ps, std::vector<std::int32_t> basis_ids,
                 std::int32_t coeff_id, std::int32_t num_relations,
                 std::shared_ptr<const Matd> rel_degrees)
      : ps_(ps), basis_ids_(std::move(basis_ids)), coeff_id_(coeff_id),
        num_relations_(num_relations), rel_deg_(std::move(rel_degrees)) {}

  AggregatorSpec spec() const override {
    return {true, "relation-weighted", AggKind::RelationMean, true};
  }
  Eigen::Index out_width(Eigen::Index) const override {
    return ps_->entry(basis_ids_[0]).value.cols();
  }

  std::vector<Matd> materialize_weights() const {
    const Matd coeff = ps_->entry(coeff_id_).value.template cast<double>();
    std::vector<Matd> w(static_cast<std::size_t>(num_relations_));
    for (std::int32_t r = 0; r < num_relations_; ++r) {
      Matd acc = coeff(r, 0) * ps_->entry(basis_ids_[0]).value.template cast<double>();
      for (std::size_t b = 1; b < basis_ids_.size(); ++b)
        acc += coeff(r, std::int64_t(b)) * ps_->entry(basis_ids_[b]).value.template cast<double>();
      w[std::size_t(r)] = std::move(acc);
    }
    return w;
  }

  void begin_forward(AggregationState<Scalar>& st, const Mat<Scalar>& local_z) const override {
    st.rel_accum.assign(std::size_t(num_relations_),
                        CompensatedRows(rel_deg_->rows(), local_z.cols()));
    st.rel_W = materialize_weights();
  }

  void fold_block(AggregationState<Scalar>& st, const ShardBlock& block,
                  const Mat<Scalar>& src_rows, MemoryLedger*) const override {
    for (std::int64_t k = 0; k < block.num_edges(); ++k) {
      const auto [dst, src] = block.edges[std::size_t(k)];
      const std::int32_t r = block.edge_rel.empty() ? 0 : block.edge_rel[std::size_t(k)];
      require_input(r >= 0 && r < num_relations_, "relation id out of range");
      st.rel_accum[std::size_t(r)].add_row_expr(dst, src_rows.row(src).template cast<double>());
    }
  }

  void finalize(AggregationState<Scalar>& st) const override {
    const Eigen::Index n = rel_deg_->rows();
    const Eigen::Index f_out = out_width(0);
    st.acc_d = Matd::Zero(n, f_out);
    RowVecd mean_row, out_row(f_out);
    for (std::int32_t r = 0; r < num_relations_; ++r) {
      const Matd raw = st.rel_accum[std::size_t(r)].value();
      const Matd& w = st.rel_W[std::size_t(r)];
      for (Eigen::Index i = 0; i < n; ++i) {
        const double deg = (*rel_deg_)(i, r);
        if (deg == 0.0) continue;  // that relation contributes nothing here
        mean_row = raw.row(i) / deg;
        out_row.noalias() = mean_row * w;
        st.acc_d.row(i) += out_row;
      }
    }
    st.acc = st.acc_d.template cast<Scalar>();
    st.finalized = true;
  }

  void begin_backward(AggregationState<Scalar>& st, const Matd& e_acc) const override {
    st.e_acc = e_acc;
    if (st.rel_W.empty()) st.rel_W = materialize_weights();
    st.rel_dW.assign(std::size_t(num_relations_),
                     Matd::Zero(st.rel_W[0].rows(), st.rel_W[0].cols()));
  }

  Matd backward_block(AggregationState<Scalar>& st, const ShardBlock& block,
                      const Mat<Scalar>* src_rows, CompensatedRows&, MemoryLedger*) const override {
    require_proto(src_rows != nullptr, "relation backward requires rematerialized inputs");
    Matd err = Matd::Zero(std::int64_t(block.src_global_ids.size()), src_rows->cols());
    for (std::int64_t k = 0; k < block.num_edges(); ++k) {
      const auto [dst, src] = block.edges[std::size_t(k)];
      const std::int32_t r = block.edge_rel.empty() ? 0 : block.edge_rel[std::size_t(k)];
      const double inv_deg = 1.0 / (*rel_deg_)(dst, r);
      const RowVecd g = st.e_acc.row(dst) * inv_deg;
      err.row(src).noalias() += g * st.rel_W[std::size_t(r)].transpose();
      const RowVecd zj = (*src_rows).row(src).template cast<double>();
      st.rel_dW[std::size_t(r)].noalias() += zj.transpose() * g;
    }
    return err;
  }

  void end_backward(AggregationState<Scalar>& st) const override {
    const Matd coeff = ps_->entry(coeff_id_).value.template cast<double>();
    Matd dcoeff = Matd::Zero(coeff.rows(), coeff.cols());
    for (std::size_t b = 0; b < basis_ids_.size(); ++b) {
      const Matd vb = ps_->entry(basis_ids_[b]).value.template cast<double>();
      Matd dv = Matd::Zero(vb.rows(), vb.cols());
      for (std::int32_t r = 0; r < num_relations_; ++r) {
        dv += coeff(r, std::int64_t(b)) * st.rel_dW[std::size_t(r)];
        dcoeff(r, std::int64_t(b)) = st.rel_dW[std::size_t(r)].cwiseProduct(vb).sum();
      }
      ps_->add_grad(basis_ids_[b], dv);
    }
    ps_->add_grad(coeff_id_, dcoeff);
  }

 private:
  ParamStore<Scalar>* ps_;
  std::vector<std::int32_t> basis_ids_;
  std::int32_t coeff_id_;
  std::int32_t num_relations_;
  std::shared_ptr<const Matd> rel_deg_;  // [n_local x R] global per-relation in-degrees
};

}  // namespace sargraph
