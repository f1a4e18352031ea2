#include "pma/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

#include "pma/errors.hpp"
#include "pma/numerics.hpp"

namespace pma {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap mat(const Tensor& t) {
    return ConstMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
MutMap mat(Tensor& t) {
    return MutMap(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

Tape& same_tape(Var a, Var b) {
    if (!a.valid() || a.tape != b.tape) throw ContractError("ops mix vars from different tapes");
    return *a.tape;
}

void add_into(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// ParameterStore

Parameter& ParameterStore::add(std::string name, Tensor init) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter>();
    p->name = name;
    p->grad = Tensor(init.shape(), 0.0);
    p->value = std::move(init);
    index_.emplace(std::move(name), params_.size());
    params_.push_back(std::move(p));
    return *params_.back();
}

Parameter& ParameterStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw IndexError("no parameter named " + name);
    return *params_[it->second];
}

const Parameter& ParameterStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw IndexError("no parameter named " + name);
    return *params_[it->second];
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& p : params_) p->grad.fill(0.0);
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::record(OpKind kind, std::vector<int> inputs, Tensor value,
                 std::function<void(Tape&, const TapeNode&)> backward) {
    TapeNode n;
    n.kind = kind;
    n.requires_grad = std::any_of(inputs.begin(), inputs.end(), [this](int i) { return needs_grad(i); });
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::leaf(Tensor value) {
    TapeNode n;
    n.kind = OpKind::Leaf;
    n.value = std::move(value);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
    TapeNode n;
    n.kind = OpKind::Constant;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::param(Parameter& p) {
    TapeNode n;
    n.kind = OpKind::Param;
    n.value = p.value;
    n.requires_grad = true;
    n.param = &p;
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Tensor& Tape::grad_buffer(int id) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (n.adjoint.empty() && !n.value.empty()) n.adjoint = Tensor(n.value.shape(), 0.0);
    return n.adjoint;
}

Tensor Tape::adjoint(Var v) const {
    const auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.adjoint.empty()) return Tensor(n.value.shape(), 0.0);
    return n.adjoint;
}

void Tape::backward(Var root) {
    const auto& r = nodes_.at(static_cast<std::size_t>(root.id));
    if (r.value.size() != 1) {
        throw ContractError("backward: root must be scalar, got shape " + r.value.shape().str());
    }
    grad_buffer(root.id).fill(1.0);
    for (int id = root.id; id >= 0; --id) {
        auto& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.requires_grad || n.adjoint.empty()) continue;
        if (n.backward) n.backward(*this, n);
        if (n.param) add_into(n.param->grad, n.adjoint);
    }
}

// ---------------------------------------------------------------------------
// Ops

Var matmul(Var a, Var b) {
    Tape& t = same_tape(a, b);
    Tensor out = pma::matmul(a.value(), b.value());
    return t.record(OpKind::MatMul, {a.id, b.id}, std::move(out), [](Tape& tp, const TapeNode& n) {
        const int ia = n.inputs[0], ib = n.inputs[1];
        if (tp.needs_grad(ia)) mat(tp.grad_buffer(ia)).noalias() += mat(n.adjoint) * mat(tp.value_of(ib)).transpose();
        if (tp.needs_grad(ib)) mat(tp.grad_buffer(ib)).noalias() += mat(tp.value_of(ia)).transpose() * mat(n.adjoint);
    });
}

Var matmul_nt(Var a, Var b) {
    Tape& t = same_tape(a, b);
    Tensor out = pma::matmul_nt(a.value(), b.value());
    return t.record(OpKind::MatMulNT, {a.id, b.id}, std::move(out), [](Tape& tp, const TapeNode& n) {
        const int ia = n.inputs[0], ib = n.inputs[1];
        if (tp.needs_grad(ia)) mat(tp.grad_buffer(ia)).noalias() += mat(n.adjoint) * mat(tp.value_of(ib));
        if (tp.needs_grad(ib)) mat(tp.grad_buffer(ib)).noalias() += mat(n.adjoint).transpose() * mat(tp.value_of(ia));
    });
}

Var add(Var a, Var b) {
    Tape& t = same_tape(a, b);
    if (!(a.value().shape() == b.value().shape())) {
        throw DimensionError("add: shapes " + a.value().shape().str() + " and " + b.value().shape().str());
    }
    Tensor out = a.value();
    add_into(out, b.value());
    return t.record(OpKind::Add, {a.id, b.id}, std::move(out), [](Tape& tp, const TapeNode& n) {
        for (int i : n.inputs)
            if (tp.needs_grad(i)) add_into(tp.grad_buffer(i), n.adjoint);
    });
}

Var add_row(Var x, Var v) {
    Tape& t = same_tape(x, v);
    const Tensor& xv = x.value();
    const Tensor& vv = v.value();
    if (vv.size() != xv.cols()) {
        throw DimensionError("add_row: vector " + vv.shape().str() + " does not match width of " + xv.shape().str());
    }
    Tensor out = xv;
    const std::size_t c = xv.cols();
    for (std::size_t r = 0; r < xv.rows(); ++r)
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] += vv[j];
    return t.record(OpKind::AddRow, {x.id, v.id}, std::move(out), [](Tape& tp, const TapeNode& n) {
        const int ix = n.inputs[0], iv = n.inputs[1];
        if (tp.needs_grad(ix)) add_into(tp.grad_buffer(ix), n.adjoint);
        if (tp.needs_grad(iv)) {
            Tensor& g = tp.grad_buffer(iv);
            const std::size_t c = n.adjoint.cols();
            for (std::size_t r = 0; r < n.adjoint.rows(); ++r)
                for (std::size_t j = 0; j < c; ++j) g[j] += n.adjoint[r * c + j];
        }
    });
}

Var mul(Var a, Var b) {
    Tape& t = same_tape(a, b);
    if (!(a.value().shape() == b.value().shape())) {
        throw DimensionError("mul: shapes " + a.value().shape().str() + " and " + b.value().shape().str());
    }
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return t.record(OpKind::Mul, {a.id, b.id}, std::move(out), [](Tape& tp, const TapeNode& n) {
        const int ia = n.inputs[0], ib = n.inputs[1];
        if (tp.needs_grad(ia)) {
            Tensor& g = tp.grad_buffer(ia);
            const Tensor& bv = tp.value_of(ib);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.adjoint[i] * bv[i];
        }
        if (tp.needs_grad(ib)) {
            Tensor& g = tp.grad_buffer(ib);
            const Tensor& av = tp.value_of(ia);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.adjoint[i] * av[i];
        }
    });
}

Var scale(Var x, double s) {
    Tensor out = x.value();
    for (double& v : out.values()) v *= s;
    return x.tape->record(OpKind::Scale, {x.id}, std::move(out), [s](Tape& tp, const TapeNode& n) {
        Tensor& g = tp.grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.adjoint[i];
    });
}

Var relu(Var x) {
    Tensor out = x.value();
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    return x.tape->record(OpKind::Relu, {x.id}, std::move(out), [](Tape& tp, const TapeNode& n) {
        Tensor& g = tp.grad_buffer(n.inputs[0]);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (n.value[i] > 0.0) g[i] += n.adjoint[i];
    });
}

Var softmax_rows(Var x) {
    Tensor out = pma::softmax_rows(x.value());
    return x.tape->record(OpKind::Softmax, {x.id}, std::move(out), [](Tape& tp, const TapeNode& n) {
        Tensor& g = tp.grad_buffer(n.inputs[0]);
        const std::size_t c = n.value.cols();
        for (std::size_t r = 0; r < n.value.rows(); ++r) {
            const double* y = n.value.data() + r * c;
            const double* gy = n.adjoint.data() + r * c;
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += gy[j] * y[j];
            double* gx = g.data() + r * c;
            for (std::size_t j = 0; j < c; ++j) gx[j] += y[j] * (gy[j] - dot);
        }
    });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    Tape& t = same_tape(x, gain);
    same_tape(x, bias);
    Tensor out = pma::layer_norm(x.value(), gain.value(), bias.value(), eps);
    return t.record(OpKind::LayerNorm, {x.id, gain.id, bias.id}, std::move(out), [eps](Tape& tp, const TapeNode& n) {
        const int ix = n.inputs[0], ig = n.inputs[1], ib = n.inputs[2];
        const Tensor& xv = tp.value_of(ix);
        const Tensor& gv = tp.value_of(ig);
        const std::size_t d = xv.cols();
        const double dd = static_cast<double>(d);
        std::vector<double> xhat(d), gxhat(d);
        for (std::size_t r = 0; r < xv.rows(); ++r) {
            const double* in = xv.data() + r * d;
            const double* gy = n.adjoint.data() + r * d;
            double mean = 0.0;
            for (std::size_t j = 0; j < d; ++j) mean += in[j];
            mean /= dd;
            double var = 0.0;
            for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
            var /= dd;
            const double inv_std = 1.0 / std::sqrt(var + eps);
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                xhat[j] = (in[j] - mean) * inv_std;
                gxhat[j] = gy[j] * gv[j];
                s1 += gxhat[j];
                s2 += gxhat[j] * xhat[j];
            }
            if (tp.needs_grad(ix)) {
                double* gx = tp.grad_buffer(ix).data() + r * d;
                for (std::size_t j = 0; j < d; ++j) gx[j] += inv_std * (gxhat[j] - s1 / dd - xhat[j] * s2 / dd);
            }
            if (tp.needs_grad(ig)) {
                Tensor& gg = tp.grad_buffer(ig);
                for (std::size_t j = 0; j < d; ++j) gg[j] += gy[j] * xhat[j];
            }
            if (tp.needs_grad(ib)) {
                Tensor& gb = tp.grad_buffer(ib);
                for (std::size_t j = 0; j < d; ++j) gb[j] += gy[j];
            }
        }
    });
}

Var cross_entropy(Var logits, std::span<const std::int64_t> targets, std::int64_t ignore_index) {
    const double loss = pma::cross_entropy(logits.value(), targets, ignore_index);
    std::vector<std::int64_t> tg(targets.begin(), targets.end());
    return logits.tape->record(
        OpKind::CrossEntropy, {logits.id}, Tensor(Shape{1}, std::vector<double>{loss}),
        [tg = std::move(tg), ignore_index](Tape& tp, const TapeNode& n) {
            const int il = n.inputs[0];
            std::size_t count = 0;
            for (auto t : tg) count += (t != ignore_index);
            if (count == 0) return;
            const Tensor p = pma::softmax_rows(tp.value_of(il));
            Tensor& g = tp.grad_buffer(il);
            const double w = n.adjoint[0] / static_cast<double>(count);
            const std::size_t c = p.cols();
            for (std::size_t r = 0; r < tg.size(); ++r) {
                if (tg[r] == ignore_index) continue;
                for (std::size_t j = 0; j < c; ++j) g[r * c + j] += w * p[r * c + j];
                g[r * c + static_cast<std::size_t>(tg[r])] -= w;
            }
        });
}

Var slice(Var x, std::size_t r0, std::size_t nr, std::size_t c0, std::size_t nc) {
    const Tensor& xv = x.value();
    if (r0 + nr > xv.rows() || c0 + nc > xv.cols()) {
        throw DimensionError("slice [" + std::to_string(r0) + "+" + std::to_string(nr) + ", " + std::to_string(c0) +
                             "+" + std::to_string(nc) + "] out of range for " + xv.shape().str());
    }
    Tensor out = Tensor::matrix(nr, nc);
    const std::size_t c = xv.cols();
    for (std::size_t r = 0; r < nr; ++r) std::copy_n(xv.data() + (r0 + r) * c + c0, nc, out.data() + r * nc);
    return x.tape->record(OpKind::Slice, {x.id}, std::move(out), [r0, c0](Tape& tp, const TapeNode& n) {
        Tensor& g = tp.grad_buffer(n.inputs[0]);
        const std::size_t c = g.cols(), nr = n.value.rows(), nc = n.value.cols();
        for (std::size_t r = 0; r < nr; ++r)
            for (std::size_t j = 0; j < nc; ++j) g[(r0 + r) * c + c0 + j] += n.adjoint[r * nc + j];
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw DimensionError("concat_rows of nothing");
    Tape& t = *parts.front().tape;
    std::vector<Tensor> vals;
    vals.reserve(parts.size());
    std::vector<int> ids;
    for (const Var& p : parts) {
        same_tape(parts.front(), p);
        vals.push_back(p.value());
        ids.push_back(p.id);
    }
    Tensor out = pma::concat_rows(vals);
    return t.record(OpKind::ConcatRows, std::move(ids), std::move(out), [](Tape& tp, const TapeNode& n) {
        std::size_t offset = 0;
        for (int i : n.inputs) {
            const std::size_t len = tp.value_of(i).size();
            if (tp.needs_grad(i)) {
                Tensor& g = tp.grad_buffer(i);
                for (std::size_t k = 0; k < len; ++k) g[k] += n.adjoint[offset + k];
            }
            offset += len;
        }
    });
}

Var stitch(std::size_t rows, std::size_t cols, std::span<const Block> blocks) {
    if (blocks.empty()) throw DimensionError("stitch of nothing");
    Tape& t = *blocks.front().var.tape;
    Tensor out = Tensor::matrix(rows, cols);
    std::vector<int> ids;
    std::vector<std::pair<std::size_t, std::size_t>> at;
    for (const Block& b : blocks) {
        same_tape(blocks.front().var, b.var);
        const Tensor& v = b.var.value();
        if (b.row + v.rows() > rows || b.col + v.cols() > cols) {
            throw DimensionError("stitch: block " + v.shape().str() + " at (" + std::to_string(b.row) + ", " +
                                 std::to_string(b.col) + ") exceeds " + std::to_string(rows) + "x" +
                                 std::to_string(cols));
        }
        for (std::size_t r = 0; r < v.rows(); ++r)
            std::copy_n(v.data() + r * v.cols(), v.cols(), out.data() + (b.row + r) * cols + b.col);
        ids.push_back(b.var.id);
        at.emplace_back(b.row, b.col);
    }
    return t.record(OpKind::Stitch, std::move(ids), std::move(out), [at = std::move(at)](Tape& tp, const TapeNode& n) {
        const std::size_t cols = n.value.cols();
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            const int i = n.inputs[k];
            if (!tp.needs_grad(i)) continue;
            Tensor& g = tp.grad_buffer(i);
            const std::size_t bc = g.cols();
            for (std::size_t r = 0; r < g.rows(); ++r)
                for (std::size_t j = 0; j < bc; ++j) g[r * bc + j] += n.adjoint[(at[k].first + r) * cols + at[k].second + j];
        }
    });
}

Var gather_rows(Var table, std::span<const std::int64_t> ids) {
    const Tensor& tv = table.value();
    const std::size_t c = tv.cols();
    Tensor out = Tensor::matrix(ids.size(), c);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= tv.rows()) {
            throw IndexError("gather_rows: id " + std::to_string(ids[r]) + " outside [0, " + std::to_string(tv.rows()) +
                             ")");
        }
        std::copy_n(tv.data() + static_cast<std::size_t>(ids[r]) * c, c, out.data() + r * c);
    }
    std::vector<std::int64_t> idx(ids.begin(), ids.end());
    return table.tape->record(OpKind::GatherRows, {table.id}, std::move(out),
                              [idx = std::move(idx)](Tape& tp, const TapeNode& n) {
                                  Tensor& g = tp.grad_buffer(n.inputs[0]);
                                  const std::size_t c = g.cols();
                                  for (std::size_t r = 0; r < idx.size(); ++r) {
                                      double* dst = g.data() + static_cast<std::size_t>(idx[r]) * c;
                                      for (std::size_t j = 0; j < c; ++j) dst[j] += n.adjoint[r * c + j];
                                  }
                              });
}

Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value().values()) s += v;
    return x.tape->record(OpKind::Sum, {x.id}, Tensor(Shape{1}, std::vector<double>{s}),
                          [](Tape& tp, const TapeNode& n) {
                              Tensor& g = tp.grad_buffer(n.inputs[0]);
                              for (double& v : g.values()) v += n.adjoint[0];
                          });
}

double grad_check(const std::function<Var(Tape&, Var)>& fn, const Tensor& x, double h) {
    if (!(h > 0.0)) throw ContractError("grad_check: h must be positive");
    Tape tape;
    Var xv = tape.leaf(x);
    tape.backward(fn(tape, xv));
    const Tensor analytic = tape.adjoint(xv);

    auto eval = [&](const Tensor& at) {
        Tape t;
        return fn(t, t.leaf(at)).value()[0];
    };
    double worst = 0.0;
    Tensor probe = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double fp = eval(probe);
        probe[i] = orig - h;
        const double fm = eval(probe);
        probe[i] = orig;
        const double cd = (fp - fm) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(cd), 1e-8});
        worst = std::max(worst, std::abs(analytic[i] - cd) / denom);
    }
    return worst;
}

}  // namespace pma
