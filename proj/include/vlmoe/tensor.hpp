#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <utility>
#include <vector>

#include "vlmoe/errors.hpp"
#include "vlmoe/rng.hpp"

namespace vlmoe {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

// Standard normal CDF / PDF. Forward-only helpers; no tape involvement.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865475244); }
inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) * 0.3989422804014326779; }

// Dense row-major f64 array with an optional tape node id. Copies share the
// buffer; values are treated as immutable after creation, except for the
// optimizer's in-place parameter update.
class Tensor {
public:
    Tensor() : data_(std::make_shared<std::vector<double>>()) {}

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<double>>(shape_numel(shape_), 0.0)) {}

    Tensor(Shape shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<double>>(std::move(data))) {
        if (data_->size() != shape_numel(shape_))
            throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                             " does not match shape " + shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        std::fill(t.data().begin(), t.data().end(), v);
        return t;
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor randn(Rng& rng, Shape shape, double stddev) {
        Tensor t(std::move(shape));
        for (double& x : t.data()) x = stddev * rng.normal();
        return t;
    }

    // Normal(0, std), resampled while |z| > 2 std.
    static Tensor trunc_normal(Rng& rng, Shape shape, double stddev) {
        Tensor t(std::move(shape));
        for (double& x : t.data()) {
            double z = rng.normal();
            while (std::abs(z) > 2.0) z = rng.normal();
            x = stddev * z;
        }
        return t;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    size_t size() const { return data_->size(); }

    std::vector<double>& data() { return *data_; }
    const std::vector<double>& data() const { return *data_; }
    double* ptr() { return data_->data(); }
    const double* ptr() const { return data_->data(); }

    double at(int i) const { return (*data_)[static_cast<size_t>(i)]; }
    double at(int i, int j) const {
        return (*data_)[static_cast<size_t>(i) * static_cast<size_t>(shape_[1]) +
                        static_cast<size_t>(j)];
    }
    double item() const {
        if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape_));
        return (*data_)[0];
    }

    bool same_buffer(const Tensor& o) const { return data_ == o.data_; }

    int node = -1;

private:
    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

inline ConstMatMap as_mat(const Tensor& t) {
    if (t.rank() != 2) throw ShapeError("expected rank-2 tensor, got " + shape_str(t.shape()));
    return ConstMatMap(t.ptr(), t.dim(0), t.dim(1));
}

// Reverse-mode tape. Operations record nodes in topological order; backward
// sweeps the list once, newest to oldest, and is a one-shot consumer.
class Tape {
public:
    using BackFn = std::function<void(Tape&, const std::vector<double>&)>;

    int record(size_t out_size, std::vector<int> parents, BackFn back) {
        parents.erase(std::remove_if(parents.begin(), parents.end(), [](int p) { return p < 0; }),
                      parents.end());
        nodes_.push_back(Node{std::move(parents), out_size, std::move(back)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Registers a tensor as a gradient root (parameter or watched input).
    Tensor leaf(const Tensor& t) {
        Tensor out = t;
        out.node = record(t.size(), {}, nullptr);
        return out;
    }

    size_t node_count() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    const std::vector<int>& parents_of(int node) const {
        return nodes_[static_cast<size_t>(node)].parents;
    }

    // Zero-initialized gradient buffer for a node; backward lambdas may
    // accumulate into it directly.
    std::vector<double>& grad_buffer(int node) {
        auto& g = grads_[static_cast<size_t>(node)];
        if (g.empty()) g.assign(nodes_[static_cast<size_t>(node)].out_size, 0.0);
        return g;
    }

    void accumulate(int node, const double* src, size_t n) {
        auto& g = grad_buffer(node);
        for (size_t i = 0; i < n; ++i) g[i] += src[i];
    }

    bool touched(int node) const {
        return node >= 0 && !grads_[static_cast<size_t>(node)].empty();
    }

    const std::vector<double>& grad_of(int node) const { return grads_[static_cast<size_t>(node)]; }

    void run_backward(const Tensor& loss) {
        if (loss.size() != 1) throw ContractError("backward requires a scalar loss");
        if (loss.node < 0) throw ContractError("loss is not recorded on this tape");
        if (consumed_) throw ContractError("tape already consumed by a previous backward");
        consumed_ = true;
        grads_.assign(nodes_.size(), {});
        grad_buffer(loss.node)[0] = 1.0;
        for (int i = loss.node; i >= 0; --i) {
            auto& node = nodes_[static_cast<size_t>(i)];
            if (grads_[static_cast<size_t>(i)].empty() || !node.backward) continue;
            node.backward(*this, grads_[static_cast<size_t>(i)]);
        }
    }

private:
    struct Node {
        std::vector<int> parents;
        size_t out_size;
        BackFn backward;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
    bool consumed_ = false;
};

// Read-only view of the gradients left on a tape by backward(). Parameters
// never reached by the loss report zeros of their own shape.
class Gradients {
public:
    explicit Gradients(const Tape* tape) : tape_(tape) {}

    Tensor at(const Tensor& t) const {
        if (t.node < 0) throw ContractError("tensor has no tape node; gradient undefined");
        Tensor g(t.shape());
        if (tape_->touched(t.node)) {
            const auto& buf = tape_->grad_of(t.node);
            std::copy(buf.begin(), buf.end(), g.data().begin());
        }
        return g;
    }

    bool reached(const Tensor& t) const { return t.node >= 0 && tape_->touched(t.node); }

private:
    const Tape* tape_;
};

inline Gradients backward(Tape& tape, const Tensor& loss) {
    tape.run_backward(loss);
    return Gradients(&tape);
}

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes differ " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

}  // namespace detail

// ---- core algebra ----

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor c({m, n});
    MatMap(c.ptr(), m, n).noalias() = as_mat(a) * as_mat(b);
    if (a.node >= 0 || b.node >= 0) {
        c.node = tape.record(c.size(), {a.node, b.node},
                             [a, b, m, k, n](Tape& t, const std::vector<double>& g) {
                                 ConstMatMap G(g.data(), m, n);
                                 if (a.node >= 0) {
                                     auto& da = t.grad_buffer(a.node);
                                     MatMap(da.data(), m, k).noalias() += G * as_mat(b).transpose();
                                 }
                                 if (b.node >= 0) {
                                     auto& db = t.grad_buffer(b.node);
                                     MatMap(db.data(), k, n).noalias() += as_mat(a).transpose() * G;
                                 }
                             });
    }
    return c;
}

inline Tensor transpose(Tape& tape, const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(a.shape()));
    const int m = a.dim(0), n = a.dim(1);
    Tensor c({n, m});
    MatMap(c.ptr(), n, m).noalias() = as_mat(a).transpose();
    if (a.node >= 0) {
        c.node = tape.record(c.size(), {a.node}, [a, m, n](Tape& t, const std::vector<double>& g) {
            auto& da = t.grad_buffer(a.node);
            MatMap(da.data(), m, n).noalias() += ConstMatMap(g.data(), n, m).transpose();
        });
    }
    return c;
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor c(a.shape());
    const size_t n = c.size();
    for (size_t i = 0; i < n; ++i) c.data()[i] = a.data()[i] + b.data()[i];
    if (a.node >= 0 || b.node >= 0) {
        c.node = tape.record(n, {a.node, b.node},
                             [an = a.node, bn = b.node](Tape& t, const std::vector<double>& g) {
                                 if (an >= 0) t.accumulate(an, g.data(), g.size());
                                 if (bn >= 0) t.accumulate(bn, g.data(), g.size());
                             });
    }
    return c;
}

inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor c(a.shape());
    const size_t n = c.size();
    for (size_t i = 0; i < n; ++i) c.data()[i] = a.data()[i] - b.data()[i];
    if (a.node >= 0 || b.node >= 0) {
        c.node = tape.record(n, {a.node, b.node},
                             [an = a.node, bn = b.node](Tape& t, const std::vector<double>& g) {
                                 if (an >= 0) t.accumulate(an, g.data(), g.size());
                                 if (bn >= 0) {
                                     auto& db = t.grad_buffer(bn);
                                     for (size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
                                 }
                             });
    }
    return c;
}

inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor c(a.shape());
    const size_t n = c.size();
    for (size_t i = 0; i < n; ++i) c.data()[i] = a.data()[i] * b.data()[i];
    if (a.node >= 0 || b.node >= 0) {
        c.node = tape.record(n, {a.node, b.node}, [a, b](Tape& t, const std::vector<double>& g) {
            if (a.node >= 0) {
                auto& da = t.grad_buffer(a.node);
                for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * b.data()[i];
            }
            if (b.node >= 0) {
                auto& db = t.grad_buffer(b.node);
                for (size_t i = 0; i < g.size(); ++i) db[i] += g[i] * a.data()[i];
            }
        });
    }
    return c;
}

inline Tensor div(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "div");
    Tensor c(a.shape());
    const size_t n = c.size();
    for (size_t i = 0; i < n; ++i) c.data()[i] = a.data()[i] / b.data()[i];
    if (a.node >= 0 || b.node >= 0) {
        c.node = tape.record(n, {a.node, b.node}, [a, b](Tape& t, const std::vector<double>& g) {
            if (a.node >= 0) {
                auto& da = t.grad_buffer(a.node);
                for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] / b.data()[i];
            }
            if (b.node >= 0) {
                auto& db = t.grad_buffer(b.node);
                for (size_t i = 0; i < g.size(); ++i)
                    db[i] -= g[i] * a.data()[i] / (b.data()[i] * b.data()[i]);
            }
        });
    }
    return c;
}

inline Tensor scale(Tape& tape, const Tensor& a, double s) {
    Tensor c(a.shape());
    const size_t n = c.size();
    for (size_t i = 0; i < n; ++i) c.data()[i] = a.data()[i] * s;
    if (a.node >= 0) {
        c.node =
            tape.record(n, {a.node}, [an = a.node, s](Tape& t, const std::vector<double>& g) {
                auto& da = t.grad_buffer(an);
                for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * s;
            });
    }
    return c;
}

// mat[n x d] + vec[d] broadcast over rows.
inline Tensor add_rowvec(Tape& tape, const Tensor& mat, const Tensor& vec) {
    if (mat.rank() != 2 || vec.rank() != 1 || mat.dim(1) != vec.dim(0))
        throw ShapeError("add_rowvec: shapes " + shape_str(mat.shape()) + " and " +
                         shape_str(vec.shape()));
    const int n = mat.dim(0), d = mat.dim(1);
    Tensor c({n, d});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) c.data()[i * d + j] = mat.at(i, j) + vec.at(j);
    if (mat.node >= 0 || vec.node >= 0) {
        c.node = tape.record(c.size(), {mat.node, vec.node},
                             [mn = mat.node, vn = vec.node, n, d](Tape& t,
                                                                  const std::vector<double>& g) {
                                 if (mn >= 0) t.accumulate(mn, g.data(), g.size());
                                 if (vn >= 0) {
                                     auto& dv = t.grad_buffer(vn);
                                     for (int i = 0; i < n; ++i)
                                         for (int j = 0; j < d; ++j) dv[j] += g[i * d + j];
                                 }
                             });
    }
    return c;
}

// vec[d] stacked into m identical rows.
inline Tensor tile_rows(Tape& tape, const Tensor& vec, int m) {
    if (vec.rank() != 1) throw ShapeError("tile_rows: expected vector, got " + shape_str(vec.shape()));
    const int d = vec.dim(0);
    Tensor c({m, d});
    for (int i = 0; i < m; ++i)
        std::copy(vec.data().begin(), vec.data().end(), c.data().begin() + i * d);
    if (vec.node >= 0) {
        c.node = tape.record(c.size(), {vec.node},
                             [vn = vec.node, m, d](Tape& t, const std::vector<double>& g) {
                                 auto& dv = t.grad_buffer(vn);
                                 for (int i = 0; i < m; ++i)
                                     for (int j = 0; j < d; ++j) dv[j] += g[i * d + j];
                             });
    }
    return c;
}

// ---- elementwise nonlinearities ----

inline Tensor gelu(Tape& tape, const Tensor& a) {
    Tensor c(a.shape());
    const size_t n = c.size();
    for (size_t i = 0; i < n; ++i) c.data()[i] = a.data()[i] * normal_cdf(a.data()[i]);
    if (a.node >= 0) {
        c.node = tape.record(n, {a.node}, [a](Tape& t, const std::vector<double>& g) {
            auto& da = t.grad_buffer(a.node);
            for (size_t i = 0; i < g.size(); ++i) {
                const double x = a.data()[i];
                da[i] += g[i] * (normal_cdf(x) + x * normal_pdf(x));
            }
        });
    }
    return c;
}

inline Tensor sigmoid(Tape& tape, const Tensor& a) {
    Tensor c(a.shape());
    const size_t n = c.size();
    for (size_t i = 0; i < n; ++i) {
        const double x = a.data()[i];
        c.data()[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    if (a.node >= 0) {
        c.node = tape.record(n, {a.node}, [an = a.node, c](Tape& t, const std::vector<double>& g) {
            auto& da = t.grad_buffer(an);
            for (size_t i = 0; i < g.size(); ++i) {
                const double s = c.data()[i];
                da[i] += g[i] * s * (1.0 - s);
            }
        });
    }
    return c;
}

inline Tensor sqrt_elem(Tape& tape, const Tensor& a) {
    Tensor c(a.shape());
    const size_t n = c.size();
    for (size_t i = 0; i < n; ++i) c.data()[i] = std::sqrt(a.data()[i]);
    if (a.node >= 0) {
        c.node = tape.record(n, {a.node}, [an = a.node, c](Tape& t, const std::vector<double>& g) {
            auto& da = t.grad_buffer(an);
            for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * 0.5 / c.data()[i];
        });
    }
    return c;
}

// Forward-only elementwise standard normal CDF; gradient intentionally does
// not flow (no node recorded).
inline Tensor normal_cdf_elem(const Tensor& a) {
    Tensor c(a.shape());
    for (size_t i = 0; i < a.size(); ++i) c.data()[i] = normal_cdf(a.data()[i]);
    return c;
}

// ---- row-wise softmax family ----

inline void softmax_row_inplace(const double* x, double* out, int e) {
    double mx = x[0];
    for (int j = 1; j < e; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int j = 0; j < e; ++j) {
        out[j] = std::exp(x[j] - mx);
        sum += out[j];
    }
    for (int j = 0; j < e; ++j) out[j] /= sum;
}

// Softmax along the last axis of a rank-2 tensor, max-subtracted.
inline Tensor softmax_rows(Tape& tape, const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("softmax_rows: expected rank 2, got " + shape_str(a.shape()));
    const int n = a.dim(0), e = a.dim(1);
    Tensor c({n, e});
    for (int i = 0; i < n; ++i) softmax_row_inplace(a.ptr() + i * e, c.ptr() + i * e, e);
    if (a.node >= 0) {
        c.node =
            tape.record(c.size(), {a.node}, [an = a.node, c, n, e](Tape& t,
                                                                   const std::vector<double>& g) {
                auto& da = t.grad_buffer(an);
                for (int i = 0; i < n; ++i) {
                    const double* s = c.ptr() + i * e;
                    const double* gr = g.data() + i * e;
                    double dot = 0.0;
                    for (int j = 0; j < e; ++j) dot += gr[j] * s[j];
                    for (int j = 0; j < e; ++j) da[i * e + j] += s[j] * (gr[j] - dot);
                }
            });
    }
    return c;
}

// log(sum(exp(row))) per row, max-subtracted.
inline Tensor logsumexp_rows(Tape& tape, const Tensor& a) {
    if (a.rank() != 2)
        throw ShapeError("logsumexp_rows: expected rank 2, got " + shape_str(a.shape()));
    const int n = a.dim(0), e = a.dim(1);
    Tensor c({n});
    for (int i = 0; i < n; ++i) {
        const double* x = a.ptr() + i * e;
        double mx = x[0];
        for (int j = 1; j < e; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (int j = 0; j < e; ++j) sum += std::exp(x[j] - mx);
        c.data()[static_cast<size_t>(i)] = mx + std::log(sum);
    }
    if (a.node >= 0) {
        c.node = tape.record(c.size(), {a.node},
                             [a, c, n, e](Tape& t, const std::vector<double>& g) {
                                 auto& da = t.grad_buffer(a.node);
                                 for (int i = 0; i < n; ++i) {
                                     const double lse = c.at(i);
                                     for (int j = 0; j < e; ++j)
                                         da[i * e + j] += g[static_cast<size_t>(i)] *
                                                          std::exp(a.at(i, j) - lse);
                                 }
                             });
    }
    return c;
}

// ---- normalization ----

// Per-row zero mean / unit variance over the last axis, then affine.
inline Tensor layernorm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                        double eps = 1e-6) {
    if (x.rank() != 2) throw ShapeError("layernorm: expected rank 2, got " + shape_str(x.shape()));
    const int n = x.dim(0), d = x.dim(1);
    if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 || bias.dim(0) != d)
        throw ShapeError("layernorm: affine params " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match width " + std::to_string(d));
    Tensor out({n, d});
    Tensor xhat({n, d});
    std::vector<double> inv_std(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double* row = x.ptr() + i * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += row[j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(i)] = is;
        for (int j = 0; j < d; ++j) {
            const double h = (row[j] - mean) * is;
            xhat.data()[i * d + j] = h;
            out.data()[i * d + j] = h * gain.at(j) + bias.at(j);
        }
    }
    if (x.node >= 0 || gain.node >= 0 || bias.node >= 0) {
        out.node = tape.record(
            out.size(), {x.node, gain.node, bias.node},
            [xn = x.node, gn = gain.node, bn = bias.node, gain, xhat, inv_std, n,
             d](Tape& t, const std::vector<double>& g) {
                for (int i = 0; i < n; ++i) {
                    const double* gr = g.data() + i * d;
                    const double* h = xhat.ptr() + i * d;
                    if (xn >= 0) {
                        auto& dx = t.grad_buffer(xn);
                        double mean_gy = 0.0, mean_gyh = 0.0;
                        for (int j = 0; j < d; ++j) {
                            const double gy = gr[j] * gain.at(j);
                            mean_gy += gy;
                            mean_gyh += gy * h[j];
                        }
                        mean_gy /= d;
                        mean_gyh /= d;
                        for (int j = 0; j < d; ++j) {
                            const double gy = gr[j] * gain.at(j);
                            dx[i * d + j] +=
                                inv_std[static_cast<size_t>(i)] * (gy - mean_gy - h[j] * mean_gyh);
                        }
                    }
                    if (gn >= 0) {
                        auto& dg = t.grad_buffer(gn);
                        for (int j = 0; j < d; ++j) dg[j] += gr[j] * h[j];
                    }
                    if (bn >= 0) {
                        auto& db = t.grad_buffer(bn);
                        for (int j = 0; j < d; ++j) db[j] += gr[j];
                    }
                }
            });
    }
    return out;
}

// ---- reductions ----

inline Tensor sum(Tape& tape, const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor c = Tensor::scalar(s);
    if (a.node >= 0) {
        c.node = tape.record(1, {a.node},
                             [an = a.node, n = a.size()](Tape& t, const std::vector<double>& g) {
                                 auto& da = t.grad_buffer(an);
                                 for (size_t i = 0; i < n; ++i) da[i] += g[0];
                             });
    }
    return c;
}

inline Tensor mean(Tape& tape, const Tensor& a) {
    if (a.size() == 0) throw ContractError("mean of empty tensor");
    double s = 0.0;
    for (double v : a.data()) s += v;
    Tensor c = Tensor::scalar(s / static_cast<double>(a.size()));
    if (a.node >= 0) {
        c.node = tape.record(1, {a.node},
                             [an = a.node, n = a.size()](Tape& t, const std::vector<double>& g) {
                                 auto& da = t.grad_buffer(an);
                                 const double w = g[0] / static_cast<double>(n);
                                 for (size_t i = 0; i < n; ++i) da[i] += w;
                             });
    }
    return c;
}

// Column sums of a rank-2 tensor: [n x e] -> [e].
inline Tensor sum_axis0(Tape& tape, const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("sum_axis0: expected rank 2, got " + shape_str(a.shape()));
    const int n = a.dim(0), e = a.dim(1);
    Tensor c({e});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < e; ++j) c.data()[static_cast<size_t>(j)] += a.at(i, j);
    if (a.node >= 0) {
        c.node = tape.record(c.size(), {a.node},
                             [an = a.node, n, e](Tape& t, const std::vector<double>& g) {
                                 auto& da = t.grad_buffer(an);
                                 for (int i = 0; i < n; ++i)
                                     for (int j = 0; j < e; ++j) da[i * e + j] += g[static_cast<size_t>(j)];
                             });
    }
    return c;
}

// Squared coefficient of variation of a vector, population std:
// (std(v) / mean(v))^2, denominator optionally guarded as mean^2 + eps.
inline Tensor cv_squared(Tape& tape, const Tensor& v, double eps = 0.0) {
    if (v.rank() != 1) throw ShapeError("cv_squared: expected vector, got " + shape_str(v.shape()));
    const int e = v.dim(0);
    if (e == 0) throw ContractError("cv_squared of empty vector");
    double mu = 0.0;
    for (double x : v.data()) mu += x;
    mu /= e;
    double var = 0.0;
    for (double x : v.data()) var += (x - mu) * (x - mu);
    var /= e;
    const double denom = mu * mu + eps;
    Tensor c = Tensor::scalar(var / denom);
    if (v.node >= 0) {
        c.node = tape.record(
            1, {v.node}, [v, mu, var, denom, e](Tape& t, const std::vector<double>& g) {
                auto& dv = t.grad_buffer(v.node);
                // d/dv_i [var/denom] = (2/e) [(v_i - mu)/denom - var*mu/denom^2]
                const double common = -2.0 / e * var * mu / (denom * denom);
                for (int i = 0; i < e; ++i)
                    dv[static_cast<size_t>(i)] +=
                        g[0] * (2.0 / e * (v.at(i) - mu) / denom + common);
            });
    }
    return c;
}

// ---- gather / scatter ----

// Rows of `table` selected by index; scatter-add on the way back.
inline Tensor embedding_gather(Tape& tape, const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2)
        throw ShapeError("embedding_gather: table must be rank 2, got " + shape_str(table.shape()));
    const int v = table.dim(0), d = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= v)
            throw IndexError("embedding_gather: id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(v) + ")");
    const int n = static_cast<int>(ids.size());
    Tensor c({n, d});
    for (int i = 0; i < n; ++i)
        std::copy(table.ptr() + ids[static_cast<size_t>(i)] * d,
                  table.ptr() + (ids[static_cast<size_t>(i)] + 1) * d, c.ptr() + i * d);
    if (table.node >= 0) {
        c.node = tape.record(c.size(), {table.node},
                             [tn = table.node, ids, n, d](Tape& t, const std::vector<double>& g) {
                                 auto& dt = t.grad_buffer(tn);
                                 for (int i = 0; i < n; ++i)
                                     for (int j = 0; j < d; ++j)
                                         dt[ids[static_cast<size_t>(i)] * d + j] += g[i * d + j];
                             });
    }
    return c;
}

inline Tensor gather_rows(Tape& tape, const Tensor& mat, const std::vector<int>& rows) {
    return embedding_gather(tape, mat, rows);
}

// rows[m x d] scattered into a zero [n x d] at the given row indices,
// accumulating on collision. Backward gathers.
inline Tensor scatter_add_rows(Tape& tape, int n, const Tensor& rows, const std::vector<int>& idx) {
    if (rows.rank() != 2)
        throw ShapeError("scatter_add_rows: rows must be rank 2, got " + shape_str(rows.shape()));
    const int m = rows.dim(0), d = rows.dim(1);
    if (static_cast<int>(idx.size()) != m)
        throw ContractError("scatter_add_rows: " + std::to_string(idx.size()) + " indices for " +
                            std::to_string(m) + " rows");
    for (int i : idx)
        if (i < 0 || i >= n) throw IndexError("scatter_add_rows: row index out of range");
    Tensor c({n, d});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) c.data()[idx[static_cast<size_t>(i)] * d + j] += rows.at(i, j);
    if (rows.node >= 0) {
        c.node = tape.record(c.size(), {rows.node},
                             [rn = rows.node, idx, m, d](Tape& t, const std::vector<double>& g) {
                                 auto& dr = t.grad_buffer(rn);
                                 for (int i = 0; i < m; ++i)
                                     for (int j = 0; j < d; ++j)
                                         dr[i * d + j] += g[idx[static_cast<size_t>(i)] * d + j];
                             });
    }
    return c;
}

// Each row i scaled by coeffs[i].
inline Tensor row_scale(Tape& tape, const Tensor& rows, const Tensor& coeffs) {
    if (rows.rank() != 2 || coeffs.rank() != 1 || coeffs.dim(0) != rows.dim(0))
        throw ShapeError("row_scale: shapes " + shape_str(rows.shape()) + " and " +
                         shape_str(coeffs.shape()));
    const int m = rows.dim(0), d = rows.dim(1);
    Tensor c({m, d});
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) c.data()[i * d + j] = rows.at(i, j) * coeffs.at(i);
    if (rows.node >= 0 || coeffs.node >= 0) {
        c.node = tape.record(c.size(), {rows.node, coeffs.node},
                             [rows, coeffs, m, d](Tape& t, const std::vector<double>& g) {
                                 if (rows.node >= 0) {
                                     auto& dr = t.grad_buffer(rows.node);
                                     for (int i = 0; i < m; ++i)
                                         for (int j = 0; j < d; ++j)
                                             dr[i * d + j] += g[i * d + j] * coeffs.at(i);
                                 }
                                 if (coeffs.node >= 0) {
                                     auto& dc = t.grad_buffer(coeffs.node);
                                     for (int i = 0; i < m; ++i) {
                                         double s = 0.0;
                                         for (int j = 0; j < d; ++j)
                                             s += g[i * d + j] * rows.at(i, j);
                                         dc[static_cast<size_t>(i)] += s;
                                     }
                                 }
                             });
    }
    return c;
}

// mat[(r0,c0), (r1,c1), ...] -> vector of picked elements.
inline Tensor gather_elems(Tape& tape, const Tensor& mat, const std::vector<int>& row_idx,
                           const std::vector<int>& col_idx) {
    if (mat.rank() != 2) throw ShapeError("gather_elems: expected rank 2");
    if (row_idx.size() != col_idx.size())
        throw ContractError("gather_elems: index lists differ in length");
    const int n = mat.dim(0), e = mat.dim(1);
    const int m = static_cast<int>(row_idx.size());
    Tensor c({m});
    for (int i = 0; i < m; ++i) {
        const int r = row_idx[static_cast<size_t>(i)], cc = col_idx[static_cast<size_t>(i)];
        if (r < 0 || r >= n || cc < 0 || cc >= e) throw IndexError("gather_elems: index out of range");
        c.data()[static_cast<size_t>(i)] = mat.at(r, cc);
    }
    if (mat.node >= 0) {
        c.node = tape.record(c.size(), {mat.node},
                             [mn = mat.node, row_idx, col_idx, e, m](Tape& t,
                                                                     const std::vector<double>& g) {
                                 auto& dm = t.grad_buffer(mn);
                                 for (int i = 0; i < m; ++i)
                                     dm[row_idx[static_cast<size_t>(i)] * e +
                                        col_idx[static_cast<size_t>(i)]] += g[static_cast<size_t>(i)];
                             });
    }
    return c;
}

// ---- concatenation / slicing (token/row axis) ----

inline Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    const int d = parts[0].rank() == 2 ? parts[0].dim(1) : -1;
    if (d < 0) throw ShapeError("concat_rows: parts must be rank 2");
    int n = 0;
    bool any_node = false;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != d)
            throw ShapeError("concat_rows: inconsistent widths");
        n += p.dim(0);
        any_node = any_node || p.node >= 0;
    }
    Tensor c({n, d});
    int row = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), c.ptr() + row * d);
        row += p.dim(0);
    }
    if (any_node) {
        std::vector<int> pnodes;
        std::vector<int> offsets;
        std::vector<int> sizes;
        int off = 0;
        for (const auto& p : parts) {
            pnodes.push_back(p.node);
            offsets.push_back(off);
            sizes.push_back(p.dim(0));
            off += p.dim(0);
        }
        c.node = tape.record(c.size(), pnodes,
                             [pnodes, offsets, sizes, d](Tape& t, const std::vector<double>& g) {
                                 for (size_t k = 0; k < pnodes.size(); ++k) {
                                     if (pnodes[k] < 0) continue;
                                     t.accumulate(pnodes[k], g.data() + offsets[k] * d,
                                                  static_cast<size_t>(sizes[k]) * d);
                                 }
                             });
    }
    return c;
}

inline Tensor slice_rows(Tape& tape, const Tensor& a, int begin, int len) {
    if (a.rank() != 2) throw ShapeError("slice_rows: expected rank 2");
    if (begin < 0 || len < 0 || begin + len > a.dim(0))
        throw IndexError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + len) + ") outside " + shape_str(a.shape()));
    const int d = a.dim(1);
    Tensor c({len, d});
    std::copy(a.ptr() + begin * d, a.ptr() + (begin + len) * d, c.ptr());
    if (a.node >= 0) {
        c.node = tape.record(c.size(), {a.node},
                             [an = a.node, begin, len, d](Tape& t, const std::vector<double>& g) {
                                 auto& da = t.grad_buffer(an);
                                 for (int i = 0; i < len * d; ++i) da[begin * d + i] += g[static_cast<size_t>(i)];
                             });
    }
    return c;
}

// Splits along axis 0 into parts of the given row counts.
inline std::vector<Tensor> split_rows(Tape& tape, const Tensor& a, const std::vector<int>& sizes) {
    int total = 0;
    for (int s : sizes) total += s;
    if (a.rank() != 2 || total != a.dim(0))
        throw ShapeError("split_rows: sizes do not cover " + shape_str(a.shape()));
    std::vector<Tensor> parts;
    int row = 0;
    for (int s : sizes) {
        parts.push_back(slice_rows(tape, a, row, s));
        row += s;
    }
    return parts;
}

// ---- losses ----

// Mean negative log-softmax probability of the target over unignored rows.
// Returns constant 0 when every row is ignored.
inline Tensor cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<uint8_t>& ignore) {
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be rank 2");
    const int n = logits.dim(0), v = logits.dim(1);
    if (static_cast<int>(targets.size()) != n || static_cast<int>(ignore.size()) != n)
        throw ContractError("cross_entropy: targets/ignore length mismatch");
    int kept = 0;
    double loss = 0.0;
    std::vector<double> probs(static_cast<size_t>(n) * v);
    for (int i = 0; i < n; ++i) {
        if (ignore[static_cast<size_t>(i)]) continue;
        const int tgt = targets[static_cast<size_t>(i)];
        if (tgt < 0 || tgt >= v)
            throw IndexError("cross_entropy: target " + std::to_string(tgt) +
                             " out of range [0, " + std::to_string(v) + ")");
        softmax_row_inplace(logits.ptr() + i * v, probs.data() + i * v, v);
        loss -= std::log(std::max(probs[static_cast<size_t>(i) * v + tgt], 1e-300));
        ++kept;
    }
    if (kept == 0) return Tensor::scalar(0.0);
    Tensor c = Tensor::scalar(loss / kept);
    if (logits.node >= 0) {
        c.node = tape.record(
            1, {logits.node},
            [ln = logits.node, probs = std::move(probs), targets, ignore, n, v,
             kept](Tape& t, const std::vector<double>& g) {
                auto& dl = t.grad_buffer(ln);
                const double w = g[0] / kept;
                for (int i = 0; i < n; ++i) {
                    if (ignore[static_cast<size_t>(i)]) continue;
                    for (int j = 0; j < v; ++j) dl[i * v + j] += w * probs[static_cast<size_t>(i) * v + j];
                    dl[i * v + targets[static_cast<size_t>(i)]] -= w;
                }
            });
    }
    return c;
}

}  // namespace vlmoe
