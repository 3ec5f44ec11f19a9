#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lmread/common.hpp"

namespace lmread {

// Reverse-mode tape over dense 2-D tensors. Values are computed eagerly as
// nodes are recorded; backward() walks the tape in reverse, accumulating
// gradients by summation across fan-out. There is no broadcasting beyond
// row-vector bias addition; every shape is explicit.
class Tape {
    enum class Op {
        Leaf, Const, MatMul, Add, AddRow, Mul, Sigmoid, Tanh, Relu,
        Softmax, LogSoftmax, GatherRows, ConcatRows, ConcatCols, Slice,
        Transpose, Scale, AddConst, LayerNorm, CrossEntropy
    };

    struct Node {
        Op op;
        std::vector<int> in;
        Mat val;                    // owned value (interior nodes, Const)
        const Mat* ext = nullptr;   // external value (Leaf)
        Mat grad;
        bool needs = false;
        // op-specific extras
        double scalar = 0.0;            // Scale factor / LayerNorm eps
        int r0 = 0, nr = 0, c0 = 0, nc = 0;  // Slice bounds
        std::vector<int> idx;           // GatherRows rows / CrossEntropy targets
        std::vector<unsigned char> mask;  // CrossEntropy pad mask
        Mat aux;                        // AddConst constant / LayerNorm row stats
    };

public:
    const Mat& value(int id) const {
        const Node& n = node(id);
        return n.ext ? *n.ext : n.val;
    }

    // Zero until backward() has run over a tape containing this node.
    const Mat& grad(int id) const {
        const Node& n = node(id);
        if (n.grad.size() == 0)
            throw numeric_error("autodiff: gradient requested before backward()");
        return n.grad;
    }

    // Leaf referencing external storage; the tensor must outlive the tape.
    int leaf(const Mat& external, bool needs_grad = true) {
        Node n;
        n.op = Op::Leaf;
        n.ext = &external;
        n.needs = needs_grad;
        return push(std::move(n));
    }

    int constant(Mat m) {
        Node n;
        n.op = Op::Const;
        n.val = std::move(m);
        return push(std::move(n));
    }

    int matmul(int a, int b) {
        const Mat &A = value(a), &B = value(b);
        if (A.cols() != B.rows())
            throw std::invalid_argument("matmul: shape mismatch " + shape_str(A) + " * " + shape_str(B));
        return binary(Op::MatMul, a, b, A * B);
    }

    int add(int a, int b) {
        const Mat &A = value(a), &B = value(b);
        if (A.rows() != B.rows() || A.cols() != B.cols())
            throw std::invalid_argument("add: shape mismatch " + shape_str(A) + " + " + shape_str(B));
        return binary(Op::Add, a, b, A + B);
    }

    // y = X + 1 * bias, bias is 1 x cols
    int add_row(int a, int bias) {
        const Mat &A = value(a), &B = value(bias);
        if (B.rows() != 1 || B.cols() != A.cols())
            throw std::invalid_argument("add_row: bias must be 1x" + std::to_string(A.cols()) +
                                        ", got " + shape_str(B));
        Mat out = A;
        out.rowwise() += B.row(0);
        return binary(Op::AddRow, a, bias, std::move(out));
    }

    int mul(int a, int b) {
        const Mat &A = value(a), &B = value(b);
        if (A.rows() != B.rows() || A.cols() != B.cols())
            throw std::invalid_argument("mul: shape mismatch " + shape_str(A) + " * " + shape_str(B));
        return binary(Op::Mul, a, b, A.cwiseProduct(B));
    }

    int sigmoid(int a) {
        Mat out = (1.0 / (1.0 + (-value(a).array()).exp())).matrix();
        return unary(Op::Sigmoid, a, std::move(out));
    }

    int tanh(int a) { return unary(Op::Tanh, a, value(a).array().tanh().matrix()); }

    int relu(int a) { return unary(Op::Relu, a, value(a).cwiseMax(0.0)); }

    // Row-wise, stabilized by max subtraction. A -1e30 masked entry underflows
    // to probability exactly 0.
    int softmax_rows(int a) { return unary(Op::Softmax, a, softmax_of(value(a))); }

    int log_softmax_rows(int a) {
        const Mat& A = value(a);
        Mat out(A.rows(), A.cols());
        for (Eigen::Index i = 0; i < A.rows(); ++i) {
            const double mx = A.row(i).maxCoeff();
            const double lse = mx + std::log((A.row(i).array() - mx).exp().sum());
            out.row(i) = A.row(i).array() - lse;
        }
        return unary(Op::LogSoftmax, a, std::move(out));
    }

    // y[i] = X[rows[i]]; the gradient scatter-adds, so repeated rows accumulate.
    int gather_rows(int a, std::vector<int> rows) {
        const Mat& A = value(a);
        Mat out(static_cast<Eigen::Index>(rows.size()), A.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i] < 0 || rows[i] >= A.rows())
                throw std::invalid_argument("gather_rows: index " + std::to_string(rows[i]) +
                                            " out of range for " + shape_str(A));
            out.row(static_cast<Eigen::Index>(i)) = A.row(rows[i]);
        }
        Node n;
        n.op = Op::GatherRows;
        n.in = {a};
        n.val = std::move(out);
        n.idx = std::move(rows);
        n.needs = node(a).needs;
        return push(std::move(n));
    }

    int concat_rows(const std::vector<int>& xs) { return concat(Op::ConcatRows, xs); }
    int concat_cols(const std::vector<int>& xs) { return concat(Op::ConcatCols, xs); }

    int slice(int a, int r0, int nr, int c0, int nc) {
        const Mat& A = value(a);
        if (r0 < 0 || nr < 0 || c0 < 0 || nc < 0 || r0 + nr > A.rows() || c0 + nc > A.cols())
            throw std::invalid_argument("slice: bounds out of range for " + shape_str(A));
        Node n;
        n.op = Op::Slice;
        n.in = {a};
        n.val = A.block(r0, c0, nr, nc);
        n.r0 = r0; n.nr = nr; n.c0 = c0; n.nc = nc;
        n.needs = node(a).needs;
        return push(std::move(n));
    }

    int transpose(int a) { return unary(Op::Transpose, a, value(a).transpose()); }

    int scale(int a, double s) {
        Node n;
        n.op = Op::Scale;
        n.in = {a};
        n.val = value(a) * s;
        n.scalar = s;
        n.needs = node(a).needs;
        return push(std::move(n));
    }

    // y = X + C for a fixed constant C (additive attention masks, position
    // encodings). C carries no gradient.
    int add_const(int a, Mat c) {
        const Mat& A = value(a);
        if (A.rows() != c.rows() || A.cols() != c.cols())
            throw std::invalid_argument("add_const: shape mismatch " + shape_str(A) + " + " + shape_str(c));
        Node n;
        n.op = Op::AddConst;
        n.in = {a};
        n.val = A + c;
        n.aux = std::move(c);
        n.needs = node(a).needs;
        return push(std::move(n));
    }

    // Row-wise (x - mean) / sqrt(var + eps), no affine parameters.
    int layer_norm_rows(int a, double eps = 1e-5) {
        const Mat& A = value(a);
        Mat out(A.rows(), A.cols());
        Mat stats(A.rows(), 1);  // 1/sqrt(var+eps) per row
        for (Eigen::Index i = 0; i < A.rows(); ++i) {
            const double mean = A.row(i).mean();
            const double var = (A.row(i).array() - mean).square().mean();
            const double rstd = 1.0 / std::sqrt(var + eps);
            out.row(i) = (A.row(i).array() - mean) * rstd;
            stats(i, 0) = rstd;
        }
        Node n;
        n.op = Op::LayerNorm;
        n.in = {a};
        n.val = std::move(out);
        n.scalar = eps;
        n.aux = std::move(stats);
        n.needs = node(a).needs;
        return push(std::move(n));
    }

    // Mean masked negative log-likelihood over rows of log-probabilities:
    // -(sum_i mask_i * logp[i, target_i]) / sum_i mask_i, as a 1x1 tensor.
    int cross_entropy_logprobs(int logp, std::vector<int> targets, std::vector<unsigned char> mask) {
        const Mat& L = value(logp);
        if (static_cast<Eigen::Index>(targets.size()) != L.rows() || mask.size() != targets.size())
            throw std::invalid_argument("cross_entropy: need one target and mask entry per row of " +
                                        shape_str(L));
        double total = 0.0, count = 0.0;
        for (std::size_t i = 0; i < targets.size(); ++i) {
            if (!mask[i]) continue;
            if (targets[i] < 0 || targets[i] >= L.cols())
                throw std::invalid_argument("cross_entropy: target id out of range");
            total -= L(static_cast<Eigen::Index>(i), targets[i]);
            count += 1.0;
        }
        if (count == 0.0) throw std::invalid_argument("cross_entropy: no unmasked targets");
        Node n;
        n.op = Op::CrossEntropy;
        n.in = {logp};
        n.val = Mat::Constant(1, 1, total / count);
        n.idx = std::move(targets);
        n.mask = std::move(mask);
        n.scalar = count;
        n.needs = node(logp).needs;
        return push(std::move(n));
    }

    // Accumulate gradients for every recorded node, seeding the given node
    // with `upstream` (ones if omitted; the usual case is a 1x1 loss).
    void backward(int id, const Mat* upstream = nullptr) {
        if (nodes_.empty()) throw numeric_error("autodiff: backward() on empty tape");
        for (Node& n : nodes_) n.grad.resize(0, 0);
        Node& top = node_mut(id);
        const Mat& tv = value(id);
        if (upstream) {
            if (upstream->rows() != tv.rows() || upstream->cols() != tv.cols())
                throw std::invalid_argument("backward: upstream shape mismatch");
            top.grad = *upstream;
        } else {
            top.grad = Mat::Ones(tv.rows(), tv.cols());
        }
        for (int i = id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (n.grad.size() == 0 || !n.needs) continue;
            propagate(n);
        }
        // nodes that never received upstream flow expose a zero gradient
        for (Node& n : nodes_) {
            if (n.grad.size() == 0) {
                const Mat& v = n.ext ? *n.ext : n.val;
                n.grad = Mat::Zero(v.rows(), v.cols());
            }
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;

    const Node& node(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
            throw std::invalid_argument("autodiff: bad node id");
        return nodes_[static_cast<std::size_t>(id)];
    }
    Node& node_mut(int id) { return const_cast<Node&>(node(id)); }

    static std::string shape_str(const Mat& m) {
        return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
    }

    static Mat softmax_of(const Mat& A) {
        Mat out(A.rows(), A.cols());
        for (Eigen::Index i = 0; i < A.rows(); ++i) {
            const double mx = A.row(i).maxCoeff();
            Eigen::ArrayXd e = (A.row(i).array() - mx).exp();
            out.row(i) = (e / e.sum()).matrix();
        }
        return out;
    }

    int push(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    int unary(Op op, int a, Mat out) {
        Node n;
        n.op = op;
        n.in = {a};
        n.val = std::move(out);
        n.needs = node(a).needs;
        return push(std::move(n));
    }

    int binary(Op op, int a, int b, Mat out) {
        Node n;
        n.op = op;
        n.in = {a, b};
        n.val = std::move(out);
        n.needs = node(a).needs || node(b).needs;
        return push(std::move(n));
    }

    int concat(Op op, const std::vector<int>& xs) {
        if (xs.empty()) throw std::invalid_argument("concat: no inputs");
        Eigen::Index rows = value(xs[0]).rows(), cols = value(xs[0]).cols();
        Eigen::Index total = op == Op::ConcatRows ? rows : cols;
        for (std::size_t i = 1; i < xs.size(); ++i) {
            const Mat& m = value(xs[i]);
            if (op == Op::ConcatRows) {
                if (m.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
                total += m.rows();
            } else {
                if (m.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
                total += m.cols();
            }
        }
        Mat out = op == Op::ConcatRows ? Mat(total, cols) : Mat(rows, total);
        Eigen::Index at = 0;
        bool needs = false;
        for (int x : xs) {
            const Mat& m = value(x);
            if (op == Op::ConcatRows) {
                out.middleRows(at, m.rows()) = m;
                at += m.rows();
            } else {
                out.middleCols(at, m.cols()) = m;
                at += m.cols();
            }
            needs = needs || node(x).needs;
        }
        Node n;
        n.op = op;
        n.in = xs;
        n.val = std::move(out);
        n.needs = needs;
        return push(std::move(n));
    }

    Mat& grad_buf(int id) {
        Node& n = node_mut(id);
        if (n.grad.size() == 0) {
            const Mat& v = value(id);
            n.grad = Mat::Zero(v.rows(), v.cols());
        }
        return n.grad;
    }

    void propagate(Node& n) {
        const Mat& g = n.grad;
        switch (n.op) {
            case Op::Leaf:
            case Op::Const:
                break;
            case Op::MatMul: {
                const Mat &A = value(n.in[0]), &B = value(n.in[1]);
                if (node(n.in[0]).needs) grad_buf(n.in[0]).noalias() += g * B.transpose();
                if (node(n.in[1]).needs) grad_buf(n.in[1]).noalias() += A.transpose() * g;
                break;
            }
            case Op::Add:
                if (node(n.in[0]).needs) grad_buf(n.in[0]) += g;
                if (node(n.in[1]).needs) grad_buf(n.in[1]) += g;
                break;
            case Op::AddRow:
                if (node(n.in[0]).needs) grad_buf(n.in[0]) += g;
                if (node(n.in[1]).needs) grad_buf(n.in[1]).row(0) += g.colwise().sum();
                break;
            case Op::Mul: {
                if (node(n.in[0]).needs) grad_buf(n.in[0]) += g.cwiseProduct(value(n.in[1]));
                if (node(n.in[1]).needs) grad_buf(n.in[1]) += g.cwiseProduct(value(n.in[0]));
                break;
            }
            case Op::Sigmoid:
                grad_buf(n.in[0]).array() += g.array() * n.val.array() * (1.0 - n.val.array());
                break;
            case Op::Tanh:
                grad_buf(n.in[0]).array() += g.array() * (1.0 - n.val.array().square());
                break;
            case Op::Relu:
                grad_buf(n.in[0]).array() +=
                    g.array() * (value(n.in[0]).array() > 0.0).cast<double>();
                break;
            case Op::Softmax: {
                // dx_row = p * (g_row - <g_row, p>)
                Mat& gi = grad_buf(n.in[0]);
                for (Eigen::Index i = 0; i < g.rows(); ++i) {
                    const double dot = g.row(i).dot(n.val.row(i));
                    gi.row(i).array() += n.val.row(i).array() * (g.row(i).array() - dot);
                }
                break;
            }
            case Op::LogSoftmax: {
                // dx_row = g_row - softmax(x)_row * sum(g_row)
                Mat& gi = grad_buf(n.in[0]);
                for (Eigen::Index i = 0; i < g.rows(); ++i) {
                    const double s = g.row(i).sum();
                    gi.row(i).array() += g.row(i).array() - n.val.row(i).array().exp() * s;
                }
                break;
            }
            case Op::GatherRows: {
                Mat& gi = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < n.idx.size(); ++i)
                    gi.row(n.idx[i]) += g.row(static_cast<Eigen::Index>(i));
                break;
            }
            case Op::ConcatRows: {
                Eigen::Index at = 0;
                for (int x : n.in) {
                    const Eigen::Index r = value(x).rows();
                    if (node(x).needs) grad_buf(x) += g.middleRows(at, r);
                    at += r;
                }
                break;
            }
            case Op::ConcatCols: {
                Eigen::Index at = 0;
                for (int x : n.in) {
                    const Eigen::Index c = value(x).cols();
                    if (node(x).needs) grad_buf(x) += g.middleCols(at, c);
                    at += c;
                }
                break;
            }
            case Op::Slice:
                grad_buf(n.in[0]).block(n.r0, n.c0, n.nr, n.nc) += g;
                break;
            case Op::Transpose:
                grad_buf(n.in[0]) += g.transpose();
                break;
            case Op::Scale:
                grad_buf(n.in[0]) += g * n.scalar;
                break;
            case Op::AddConst:
                grad_buf(n.in[0]) += g;
                break;
            case Op::LayerNorm: {
                // dx = rstd * (g - mean(g) - y * mean(g .* y)) per row
                Mat& gi = grad_buf(n.in[0]);
                for (Eigen::Index i = 0; i < g.rows(); ++i) {
                    const double gm = g.row(i).mean();
                    const double gym = (g.row(i).array() * n.val.row(i).array()).mean();
                    gi.row(i).array() +=
                        n.aux(i, 0) * (g.row(i).array() - gm - n.val.row(i).array() * gym);
                }
                break;
            }
            case Op::CrossEntropy: {
                const double up = g(0, 0) / n.scalar;
                Mat& gi = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < n.idx.size(); ++i)
                    if (n.mask[i]) gi(static_cast<Eigen::Index>(i), n.idx[i]) -= up;
                break;
            }
        }
    }
};

// Compares the analytic gradient of a scalar-valued graph against central
// finite differences, returning the max relative error with denominator
// max(|analytic|, |numeric|, 1e-8). `build` must construct the graph from the
// current contents of `probes` and return the scalar node.
inline double grad_check(const std::function<int(Tape&, const std::vector<const Mat*>&)>& build,
                         std::vector<Mat>& probes, double h = 1e-6) {
    std::vector<const Mat*> refs;
    for (const Mat& p : probes) refs.push_back(&p);

    Tape tape;
    const int out = build(tape, refs);
    if (tape.value(out).size() != 1)
        throw std::invalid_argument("grad_check: graph output must be scalar");
    tape.backward(out);
    std::vector<Mat> analytic;
    for (std::size_t p = 0; p < probes.size(); ++p) {
        // leaves are assumed to be recorded in probe order
        analytic.push_back(tape.grad(static_cast<int>(p)));
    }

    auto eval = [&]() {
        Tape t;
        const int o = build(t, refs);
        return t.value(o)(0, 0);
    };

    double worst = 0.0;
    for (std::size_t p = 0; p < probes.size(); ++p) {
        Mat& m = probes[p];
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            for (Eigen::Index j = 0; j < m.cols(); ++j) {
                const double keep = m(i, j);
                m(i, j) = keep + h;
                const double up = eval();
                m(i, j) = keep - h;
                const double dn = eval();
                m(i, j) = keep;
                const double numeric = (up - dn) / (2.0 * h);
                const double a = analytic[p](i, j);
                const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
                worst = std::max(worst, std::fabs(a - numeric) / denom);
            }
        }
    }
    return worst;
}

}  // namespace lmread
