#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pma/tensor.hpp"

namespace pma {

/// A trainable tensor plus its accumulated gradient.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
};

/// Owns parameters in registration order; pointers stay valid for the
/// lifetime of the store.
class ParameterStore {
public:
    Parameter& add(std::string name, Tensor init);
    Parameter& get(const std::string& name);
    const Parameter& get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t size() const { return params_.size(); }
    std::size_t scalar_count() const;
    void zero_grad();

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::map<std::string, std::size_t> index_;
};

enum class OpKind {
    Leaf,
    Constant,
    Param,
    MatMul,
    MatMulNT,
    Add,
    AddRow,
    Mul,
    Scale,
    Relu,
    Softmax,
    LayerNorm,
    CrossEntropy,
    Slice,
    ConcatRows,
    Stitch,
    GatherRows,
    Sum,
};

class Tape;

/// Handle to a tape node.
struct Var {
    Tape* tape = nullptr;
    int id = -1;

    const Tensor& value() const;
    bool valid() const { return tape != nullptr; }
};

struct TapeNode {
    OpKind kind = OpKind::Leaf;
    std::vector<int> inputs;
    Tensor value;
    Tensor adjoint;  // empty until a contribution arrives
    bool requires_grad = false;
    Parameter* param = nullptr;
    std::function<void(Tape&, const TapeNode&)> backward;
};

/// Define-by-run reverse-mode tape. Node ids are assigned in creation order,
/// which is a topological order, so backward walks ids downward.
class Tape {
public:
    Var leaf(Tensor value);
    Var constant(Tensor value);
    Var param(Parameter& p);

    const Tensor& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
    const TapeNode& node(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]; }
    /// Adjoint of a node after backward; zeros when nothing reached it.
    Tensor adjoint(Var v) const;
    std::size_t size() const { return nodes_.size(); }

    /// Seeds the scalar root with 1 and propagates adjoints. Parameter nodes
    /// add their adjoint into Parameter::grad.
    void backward(Var root);

    // Used by op implementations.
    Var record(OpKind kind, std::vector<int> inputs, Tensor value,
               std::function<void(Tape&, const TapeNode&)> backward);
    bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
    const Tensor& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    /// Adjoint buffer of `id`, zero-initialized on first access.
    Tensor& grad_buffer(int id);

private:
    std::deque<TapeNode> nodes_;  // stable references across growth
};

// Differentiable ops. All inputs must live on the same tape.

Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
/// x[p×d] + v broadcast over rows (v has d elements).
Var add_row(Var x, Var v);
Var mul(Var a, Var b);
Var scale(Var x, double s);
Var relu(Var x);
Var softmax_rows(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps);
Var cross_entropy(Var logits, std::span<const std::int64_t> targets, std::int64_t ignore_index);
Var slice(Var x, std::size_t r0, std::size_t nr, std::size_t c0, std::size_t nc);
Var concat_rows(std::span<const Var> parts);

struct Block {
    Var var;
    std::size_t row;
    std::size_t col;
};
/// Places non-overlapping blocks into a zero rows×cols matrix.
Var stitch(std::size_t rows, std::size_t cols, std::span<const Block> blocks);
/// Rows of `table` selected by ids (embedding lookup).
Var gather_rows(Var table, std::span<const std::int64_t> ids);
Var sum(Var x);

/// Max over coordinates of |analytic − central difference| /
/// max(|analytic|, |cd|, 1e-8) for a scalar function built on a tape.
double grad_check(const std::function<Var(Tape&, Var)>& fn, const Tensor& x, double h);

}  // namespace pma
