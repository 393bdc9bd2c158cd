#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "amflow/rng.hpp"
#include "amflow/tensor.hpp"

namespace amflow {

class Tape;

struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;
};

// Reverse-mode tape. Nodes are appended in evaluation order, which is already
// a topological order; backward walks it once in reverse.
class Tape {
public:
    Var leaf(Tensor value, bool requires_grad = true) {
        require_finite(value, "leaf");
        return push(std::move(value), requires_grad, true, {});
    }
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
    const Shape& shape(Var v) const { return nodes_.at(v.id).value.shape; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    const Tensor& grad(Var v) const {
        const Node& n = nodes_.at(v.id);
        if (!n.requires_grad) throw std::logic_error("grad: variable is not differentiable");
        if (n.grad.size() != n.value.size()) throw std::logic_error("grad: backward has not reached this node");
        return n.grad;
    }

    void backward(Var loss) {
        if (nodes_.at(loss.id).value.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
        for (auto& n : nodes_)
            if (n.requires_grad) n.grad = Tensor(n.value.shape, 0.0);
        Node& root = nodes_[loss.id];
        if (!root.requires_grad) return;
        root.grad.data[0] = 1.0;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.requires_grad && n.back) n.back();
        }
    }

    // ---- elementwise ----
    Var add(Var a, Var b) { return binary(a, b, "add", [](double x, double y) { return x + y; }, 1.0, 1.0); }
    Var sub(Var a, Var b) { return binary(a, b, "sub", [](double x, double y) { return x - y; }, 1.0, -1.0); }

    Var mul(Var a, Var b) {
        same_shape(a, b, "mul");
        const Tensor& x = value(a);
        const Tensor& y = value(b);
        Tensor out(x.shape);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
        Var r = push_op(std::move(out), {a, b});
        set_back(r, [this, a, b, r] {
            const Tensor& g = gref(r);
            if (requires_grad(a)) {
                Tensor& ga = gmut(a);
                const Tensor& y = value(b);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
            }
            if (requires_grad(b)) {
                Tensor& gb = gmut(b);
                const Tensor& x = value(a);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
            }
        });
        return r;
    }

    Var scale(Var a, double c) {
        const Tensor& x = value(a);
        Tensor out(x.shape);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * x[i];
        Var r = push_op(std::move(out), {a});
        set_back(r, [this, a, r, c] {
            const Tensor& g = gref(r);
            Tensor& ga = gmut(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
        });
        return r;
    }

    Var reshape(Var a, Shape s) {
        Tensor out = value(a).reshaped(std::move(s));
        Var r = push_op(std::move(out), {a});
        set_back(r, [this, a, r] {
            const Tensor& g = gref(r);
            Tensor& ga = gmut(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        });
        return r;
    }

    // ---- reductions ----
    Var sum(Var a) {
        const Tensor& x = value(a);
        double s = 0.0;
        for (double v : x.data) s += v;
        Var r = push_op(Tensor(Shape{}, std::vector<double>{s}), {a});
        set_back(r, [this, a, r] {
            double g = gref(r)[0];
            for (double& v : gmut(a).data) v += g;
        });
        return r;
    }

    Var squared_l2(Var a) {
        const Tensor& x = value(a);
        double s = 0.0;
        for (double v : x.data) s += v * v;
        Var r = push_op(Tensor(Shape{}, std::vector<double>{s}), {a});
        set_back(r, [this, a, r] {
            double g = gref(r)[0];
            const Tensor& x = value(a);
            Tensor& ga = gmut(a);
            for (std::size_t i = 0; i < x.size(); ++i) ga[i] += 2.0 * g * x[i];
        });
        return r;
    }

    // ---- linear algebra ----
    // a (m,k) times b (k,n), or b (n,k) when transpose_b.
    Var matmul(Var a, Var b, bool transpose_b = false) {
        const Tensor& x = value(a);
        const Tensor& y = value(b);
        if (x.rank() != 2 || y.rank() != 2) throw std::invalid_argument("matmul: rank-2 operands required");
        const std::size_t m = x.dim(0), k = x.dim(1);
        const std::size_t n = transpose_b ? y.dim(0) : y.dim(1);
        if ((transpose_b ? y.dim(1) : y.dim(0)) != k)
            throw std::invalid_argument("matmul: inner extents differ " + shape_str(x.shape) + " " + shape_str(y.shape));
        Tensor out(Shape{m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t p = 0; p < k; ++p) s += x[i * k + p] * (transpose_b ? y[j * k + p] : y[p * n + j]);
                out[i * n + j] = s;
            }
        Var r = push_op(std::move(out), {a, b});
        set_back(r, [this, a, b, r, m, k, n, transpose_b] {
            const Tensor& g = gref(r);
            const Tensor& x = value(a);
            const Tensor& y = value(b);
            if (requires_grad(a)) {
                Tensor& ga = gmut(a);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * (transpose_b ? y[j * k + p] : y[p * n + j]);
                        ga[i * k + p] += s;
                    }
            }
            if (requires_grad(b)) {
                Tensor& gb = gmut(b);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gij = g[i * n + j];
                        for (std::size_t p = 0; p < k; ++p) {
                            if (transpose_b)
                                gb[j * k + p] += gij * x[i * k + p];
                            else
                                gb[p * n + j] += gij * x[i * k + p];
                        }
                    }
            }
        });
        return r;
    }

    // out[n,d] = sum_l w[n,l] * x[n,l,d]   (weighted sum over the middle axis)
    Var contract_mid(Var w, Var x) {
        const Tensor& W = value(w);
        const Tensor& X = value(x);
        if (W.rank() != 2 || X.rank() != 3 || W.dim(0) != X.dim(0) || W.dim(1) != X.dim(1))
            throw std::invalid_argument("contract_mid: shapes " + shape_str(W.shape) + " " + shape_str(X.shape));
        const std::size_t N = X.dim(0), L = X.dim(1), D = X.dim(2);
        Tensor out(Shape{N, D});
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t l = 0; l < L; ++l) {
                const double wl = W[n * L + l];
                if (wl == 0.0) continue;
                const double* xr = &X.data[(n * L + l) * D];
                double* o = &out.data[n * D];
                for (std::size_t d = 0; d < D; ++d) o[d] += wl * xr[d];
            }
        Var r = push_op(std::move(out), {w, x});
        set_back(r, [this, w, x, r, N, L, D] {
            const Tensor& g = gref(r);
            const Tensor& W = value(w);
            const Tensor& X = value(x);
            if (requires_grad(w)) {
                Tensor& gw = gmut(w);
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t l = 0; l < L; ++l) {
                        double s = 0.0;
                        for (std::size_t d = 0; d < D; ++d) s += g[n * D + d] * X[(n * L + l) * D + d];
                        gw[n * L + l] += s;
                    }
            }
            if (requires_grad(x)) {
                Tensor& gx = gmut(x);
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t l = 0; l < L; ++l) {
                        const double wl = W[n * L + l];
                        for (std::size_t d = 0; d < D; ++d) gx[(n * L + l) * D + d] += wl * g[n * D + d];
                    }
            }
        });
        return r;
    }

    // out[n,m] = sum_l x[n,m,l] * v[n,l]   (batched matrix-vector product)
    Var contract_last(Var x, Var v) {
        const Tensor& X = value(x);
        const Tensor& V = value(v);
        if (X.rank() != 3 || V.rank() != 2 || X.dim(0) != V.dim(0) || X.dim(2) != V.dim(1))
            throw std::invalid_argument("contract_last: shapes " + shape_str(X.shape) + " " + shape_str(V.shape));
        const std::size_t N = X.dim(0), M = X.dim(1), L = X.dim(2);
        Tensor out(Shape{N, M});
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t m = 0; m < M; ++m) {
                const double* xr = &X.data[(n * M + m) * L];
                const double* vr = &V.data[n * L];
                double s = 0.0;
                for (std::size_t l = 0; l < L; ++l) s += xr[l] * vr[l];
                out[n * M + m] = s;
            }
        Var r = push_op(std::move(out), {x, v});
        set_back(r, [this, x, v, r, N, M, L] {
            const Tensor& g = gref(r);
            const Tensor& X = value(x);
            const Tensor& V = value(v);
            if (requires_grad(x)) {
                Tensor& gx = gmut(x);
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t m = 0; m < M; ++m) {
                        const double gm = g[n * M + m];
                        for (std::size_t l = 0; l < L; ++l) gx[(n * M + m) * L + l] += gm * V[n * L + l];
                    }
            }
            if (requires_grad(v)) {
                Tensor& gv = gmut(v);
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t m = 0; m < M; ++m) {
                        const double gm = g[n * M + m];
                        for (std::size_t l = 0; l < L; ++l) gv[n * L + l] += gm * X[(n * M + m) * L + l];
                    }
            }
        });
        return r;
    }

    // ---- indexing ----
    // out.flat[k] = a.flat[index[k]]; backward scatters with accumulation.
    Var gather(Var a, std::vector<std::size_t> index, Shape out_shape) {
        const Tensor& x = value(a);
        if (numel(out_shape) != index.size()) throw std::invalid_argument("gather: index count does not match shape");
        Tensor out(std::move(out_shape));
        for (std::size_t k = 0; k < index.size(); ++k) {
            if (index[k] >= x.size()) throw std::out_of_range("gather: index out of range");
            out[k] = x[index[k]];
        }
        Var r = push_op(std::move(out), {a});
        set_back(r, [this, a, r, idx = std::move(index)] {
            const Tensor& g = gref(r);
            Tensor& ga = gmut(a);
            for (std::size_t k = 0; k < idx.size(); ++k) ga[idx[k]] += g[k];
        });
        return r;
    }

    // ---- softmax ----
    // Softmax over the last axis; entries with mask==0 get probability 0.
    // Each row must keep at least one unmasked entry.
    Var softmax_last(Var a, const std::vector<std::uint8_t>* mask = nullptr) {
        const Tensor& x = value(a);
        require_finite(x, "softmax_last");
        if (x.rank() == 0) throw std::invalid_argument("softmax_last: rank-0 input");
        if (mask && mask->size() != x.size()) throw std::invalid_argument("softmax_last: mask size mismatch");
        const std::size_t L = x.shape.back();
        const std::size_t rows = L ? x.size() / L : 0;
        Tensor out(x.shape);
        for (std::size_t r0 = 0; r0 < rows; ++r0) {
            const std::size_t base = r0 * L;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t l = 0; l < L; ++l)
                if (!mask || (*mask)[base + l]) mx = std::max(mx, x[base + l]);
            if (!std::isfinite(mx)) throw std::invalid_argument("softmax_last: fully masked row");
            double z = 0.0;
            for (std::size_t l = 0; l < L; ++l) {
                const double e = (!mask || (*mask)[base + l]) ? std::exp(x[base + l] - mx) : 0.0;
                out[base + l] = e;
                z += e;
            }
            for (std::size_t l = 0; l < L; ++l) out[base + l] /= z;
        }
        Var r = push_op(std::move(out), {a});
        set_back(r, [this, a, r, L, rows] {
            const Tensor& g = gref(r);
            const Tensor& y = value(r);
            Tensor& ga = gmut(a);
            for (std::size_t r0 = 0; r0 < rows; ++r0) {
                const std::size_t base = r0 * L;
                double s = 0.0;
                for (std::size_t l = 0; l < L; ++l) s += g[base + l] * y[base + l];
                for (std::size_t l = 0; l < L; ++l) ga[base + l] += y[base + l] * (g[base + l] - s);
            }
        });
        return r;
    }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool is_leaf = false;
        std::function<void()> back;
    };
    std::vector<Node> nodes_;

    Var push(Tensor value, bool requires_grad, bool is_leaf, std::function<void()> back) {
        nodes_.push_back(Node{std::move(value), Tensor{}, requires_grad, is_leaf, std::move(back)});
        return Var{this, nodes_.size() - 1};
    }

    Var push_op(Tensor value, std::initializer_list<Var> inputs) {
        require_finite(value, "tape op");
        bool rg = false;
        for (Var v : inputs) {
            if (v.tape != this) throw std::invalid_argument("tape: operand from another tape");
            rg = rg || nodes_.at(v.id).requires_grad;
        }
        return push(std::move(value), rg, false, {});
    }

    void set_back(Var r, std::function<void()> f) {
        if (nodes_[r.id].requires_grad) nodes_[r.id].back = std::move(f);
    }

    const Tensor& gref(Var v) const { return nodes_[v.id].grad; }
    Tensor& gmut(Var v) { return nodes_[v.id].grad; }

    void same_shape(Var a, Var b, const char* what) const {
        if (shape(a) != shape(b))
            throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(shape(a)) + " vs " +
                                        shape_str(shape(b)));
    }

    template <class Fn>
    Var binary(Var a, Var b, const char* what, Fn fn, double da, double db) {
        same_shape(a, b, what);
        const Tensor& x = value(a);
        const Tensor& y = value(b);
        Tensor out(x.shape);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = fn(x[i], y[i]);
        Var r = push_op(std::move(out), {a, b});
        set_back(r, [this, a, b, r, da, db] {
            const Tensor& g = gref(r);
            if (requires_grad(a)) {
                Tensor& ga = gmut(a);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += da * g[i];
            }
            if (requires_grad(b)) {
                Tensor& gb = gmut(b);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += db * g[i];
            }
        });
        return r;
    }
};

// Plain softmax used outside the tape (diagnostics, hard-mode extraction).
inline std::vector<double> softmax(const std::vector<double>& x) {
    for (double v : x)
        if (!std::isfinite(v)) throw std::invalid_argument("softmax: non-finite input");
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : x) mx = std::max(mx, v);
    std::vector<double> out(x.size());
    double z = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) z += (out[i] = std::exp(x[i] - mx));
    for (double& v : out) v /= z;
    return out;
}

inline Tensor softmax_last_axis(const Tensor& t) {
    Tape tape;
    return tape.value(tape.softmax_last(tape.constant(t)));
}

// Function of one leaf returning a scalar loss node on the same tape.
using LossBuilder = std::function<Var(Tape&, Var)>;

struct GradCheckResult {
    double max_error = 0.0;
    bool absolute = false;        // analytic gradient was all zero on the sampled coordinates
    std::size_t coordinates = 0;
};

inline double eval_loss(const LossBuilder& f, const Tensor& x) {
    Tape t;
    Var l = f(t, t.leaf(x, false));
    return t.value(l)[0];
}

inline Tensor eval_gradient(const LossBuilder& f, const Tensor& x, double* loss = nullptr) {
    Tape t;
    Var leaf = t.leaf(x, true);
    Var l = f(t, leaf);
    t.backward(l);
    if (loss) *loss = t.value(l)[0];
    return t.grad(leaf);
}

// Central-difference check on at most max_coords coordinates sampled without
// replacement from a seeded stream.
inline GradCheckResult check_gradient(const LossBuilder& f, const Tensor& x, double step,
                                      std::uint64_t seed = 0, std::size_t max_coords = 64) {
    if (!(step > 0.0)) throw std::invalid_argument("check_gradient: step must be positive");
    const Tensor g = eval_gradient(f, x);

    std::vector<std::size_t> coords(x.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > max_coords) {
        Engine eng = make_engine(seed, "gradcheck");
        for (std::size_t i = 0; i < max_coords; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, coords.size() - 1);
            std::swap(coords[i], coords[pick(eng)]);
        }
        coords.resize(max_coords);
    }

    std::vector<double> analytic, numeric;
    Tensor xp = x;
    for (std::size_t c : coords) {
        const double orig = xp[c];
        xp[c] = orig + step;
        const double lp = eval_loss(f, xp);
        xp[c] = orig - step;
        const double lm = eval_loss(f, xp);
        xp[c] = orig;
        analytic.push_back(g[c]);
        numeric.push_back((lp - lm) / (2.0 * step));
    }

    GradCheckResult res;
    res.coordinates = coords.size();
    res.absolute = std::all_of(analytic.begin(), analytic.end(), [](double v) { return v == 0.0; });
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double diff = std::abs(analytic[i] - numeric[i]);
        const double err = res.absolute ? diff : diff / std::max(std::abs(analytic[i]), 1e-8);
        res.max_error = std::max(res.max_error, err);
    }
    return res;
}

}  // namespace amflow
