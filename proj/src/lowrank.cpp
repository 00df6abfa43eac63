// SPDX-License-Identifier: Apache-2.0
#include "l2smerge/lowrank.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <numeric>

#include <fmt/core.h>

#include "l2smerge/errors.hpp"
#include "l2smerge/names.hpp"
#include "l2smerge/parallel.hpp"

namespace l2smerge {

namespace {

using Column = std::vector<double>;

double dot(const Column& a, const Column& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

std::vector<Column> columns_of(const Matrix& a) {
    std::vector<Column> cols(a.cols(), Column(a.rows()));
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) cols[j][i] = a(i, j);
    return cols;
}

Matrix from_columns(const std::vector<Column>& cols, std::size_t rows) {
    Matrix out(rows, cols.size());
    for (std::size_t j = 0; j < cols.size(); ++j)
        for (std::size_t i = 0; i < rows; ++i) out(i, j) = cols[j][i];
    return out;
}

/// Modified Gram-Schmidt, applied twice. Columns that vanish are dropped.
std::vector<Column> orthonormalize(std::vector<Column> cols) {
    std::vector<Column> out;
    for (auto& c : cols) {
        const double original = std::sqrt(dot(c, c));
        if (original == 0.0) continue;
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& q : out) {
                const double p = dot(q, c);
                for (std::size_t i = 0; i < c.size(); ++i) c[i] -= p * q[i];
            }
        }
        const double norm = std::sqrt(dot(c, c));
        if (norm <= original * 1e-12) continue;
        for (auto& x : c) x /= norm;
        out.push_back(std::move(c));
    }
    return out;
}

/// Deterministic standard normals (SplitMix64 + Box-Muller), independent of the standard library.
class Gaussian {
public:
    explicit Gaussian(std::uint64_t seed) : state_(seed) {}
    double operator()() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * M_PI * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

private:
    double uniform() {
        state_ += 0x9E3779B97F4A7C15ull;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        z ^= z >> 31;
        return (static_cast<double>(z >> 11) + 0.5) * 0x1.0p-53; // (0, 1)
    }
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

SvdFactors truncate(SvdFactors f, std::size_t r) {
    if (r >= f.rank()) return f;
    SvdFactors out;
    out.s.assign(f.s.begin(), f.s.begin() + static_cast<std::ptrdiff_t>(r));
    out.u = Matrix(f.u.rows(), r);
    out.v = Matrix(f.v.rows(), r);
    for (std::size_t i = 0; i < f.u.rows(); ++i)
        for (std::size_t j = 0; j < r; ++j) out.u(i, j) = f.u(i, j);
    for (std::size_t i = 0; i < f.v.rows(); ++i)
        for (std::size_t j = 0; j < r; ++j) out.v(i, j) = f.v(i, j);
    return out;
}

bool is_dense(const Matrix& a, const SvdOptions& opts) { return std::min(a.rows(), a.cols()) <= opts.dense_cap; }

} // namespace

Matrix Matrix::from_tensor(const Tensor& t) {
    if (!t.is_matrix()) throw ValidationError("expected a 2-D tensor");
    Matrix m(t.rows(), t.cols());
    for (std::size_t i = 0; i < t.values.size(); ++i) m.data_[i] = t.values[i];
    return m;
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
        for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
}

double Matrix::frobenius_sq() const {
    double s = 0.0;
    for (double x : data_) s += x * x;
    return s;
}

Tensor Matrix::to_tensor(const Shape& shape, DType source) const {
    std::vector<float> v(data_.size());
    for (std::size_t i = 0; i < data_.size(); ++i) v[i] = static_cast<float>(data_[i]);
    return Tensor(shape, std::move(v), source);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw ValidationError("matmul: inner dimensions differ");
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
        }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw ValidationError("matmul_tn: row counts differ");
    Matrix c(a.cols(), b.cols());
    for (std::size_t k = 0; k < a.rows(); ++k)
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aki * b(k, j);
        }
    return c;
}

Matrix SvdFactors::reconstruct(std::optional<std::size_t> r) const {
    const std::size_t k = std::min(r.value_or(rank()), rank());
    Matrix out(u.rows(), v.rows());
    for (std::size_t c = 0; c < k; ++c)
        for (std::size_t i = 0; i < u.rows(); ++i) {
            const double us = u(i, c) * s[c];
            if (us == 0.0) continue;
            for (std::size_t j = 0; j < v.rows(); ++j) out(i, j) += us * v(j, c);
        }
    return out;
}

SvdFactors svd_jacobi(const Matrix& a) {
    const bool flip = a.rows() < a.cols();
    const Matrix& src = a;
    const std::size_t m = flip ? a.cols() : a.rows();
    const std::size_t n = flip ? a.rows() : a.cols();

    // w[j] is column j of the (possibly transposed) m x n working matrix.
    std::vector<Column> w(n, Column(m));
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) {
            if (flip)
                w[i][j] = src(i, j);
            else
                w[j][i] = src(i, j);
        }
    std::vector<Column> v(n, Column(n, 0.0));
    for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;

    constexpr int max_sweeps = 80;
    constexpr double tol = 1e-15;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double alpha = dot(w[p], w[p]);
                const double beta = dot(w[q], w[q]);
                const double gamma = dot(w[p], w[q]);
                if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double wp = w[p][i], wq = w[q][i];
                    w[p][i] = c * wp - s * wq;
                    w[q][i] = s * wp + c * wq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v[p][i], vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        if (!rotated) break;
    }

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) sigma[j] = std::sqrt(dot(w[j], w[j]));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return sigma[x] > sigma[y]; });

    const double smax = n ? sigma[order[0]] : 0.0;
    const double cutoff = smax * static_cast<double>(std::max(m, n)) * DBL_EPSILON;
    std::vector<std::size_t> keep;
    for (auto j : order) {
        if (sigma[j] > cutoff && sigma[j] > 0.0) keep.push_back(j);
    }

    SvdFactors f;
    Matrix left(m, keep.size()), right(n, keep.size());
    for (std::size_t c = 0; c < keep.size(); ++c) {
        const auto j = keep[c];
        f.s.push_back(sigma[j]);
        for (std::size_t i = 0; i < m; ++i) left(i, c) = w[j][i] / sigma[j];
        for (std::size_t i = 0; i < n; ++i) right(i, c) = v[j][i];
    }
    if (flip) {
        f.u = std::move(right);
        f.v = std::move(left);
    } else {
        f.u = std::move(left);
        f.v = std::move(right);
    }
    return f;
}

SvdFactors svd_randomized(const Matrix& a, std::size_t rank, const SvdOptions& opts) {
    const std::size_t limit = std::min(a.rows(), a.cols());
    const std::size_t l = std::min(rank + opts.oversample, limit);
    Gaussian gauss(opts.seed ^ (a.rows() * 0x100000001b3ull + a.cols()));
    Matrix omega(a.cols(), l);
    for (auto& x : omega.data()) x = gauss();

    auto q = orthonormalize(columns_of(matmul(a, omega)));
    for (std::size_t it = 0; it < opts.power_iters && !q.empty(); ++it) {
        auto z = orthonormalize(columns_of(matmul_tn(a, from_columns(q, a.rows()))));
        if (z.empty()) break;
        q = orthonormalize(columns_of(matmul(a, from_columns(z, a.cols()))));
    }
    if (q.empty()) return SvdFactors{Matrix(a.rows(), 0), {}, Matrix(a.cols(), 0)};

    Matrix qm = from_columns(q, a.rows());
    Matrix b = matmul_tn(qm, a); // l' x n
    SvdFactors small = svd_jacobi(b);
    SvdFactors f;
    f.s = small.s;
    f.u = matmul(qm, small.u);
    f.v = std::move(small.v);
    return truncate(std::move(f), rank);
}

SvdFactors truncated_svd(const Matrix& a, std::size_t rank, const SvdOptions& opts) {
    if (rank == 0) throw ValidationError("truncated_svd: rank must be at least 1");
    if (is_dense(a, opts)) return truncate(svd_jacobi(a), rank);
    return svd_randomized(a, rank, opts);
}

SvdFactors spectral_factors(const Matrix& a, const SvdOptions& opts) {
    if (is_dense(a, opts)) return svd_jacobi(a);
    return svd_randomized(a, opts.randomized_rank, opts);
}

SvtResult svt(const Matrix& a, double tau, const SvdOptions& opts) {
    if (!(tau >= 0.0)) throw ValidationError("svt: tau must be non-negative");
    auto f = spectral_factors(a, opts);
    SvtResult out;
    if (tau == 0.0) {
        out.value = a;
        for (double s : f.s) out.nuclear_norm += s;
        return out;
    }
    std::size_t kept = 0;
    for (auto& s : f.s) {
        s = std::max(s - tau, 0.0);
        if (s > 0.0) ++kept;
        out.nuclear_norm += s;
    }
    out.value = truncate(std::move(f), kept).reconstruct();
    return out;
}

std::size_t rank_for_energy(std::span<const double> singular_values, double fraction) {
    std::vector<double> cum(singular_values.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < singular_values.size(); ++i) {
        acc += singular_values[i] * singular_values[i];
        cum[i] = acc;
    }
    if (acc == 0.0) return 0;
    const double target = fraction * acc;
    for (std::size_t i = 0; i < cum.size(); ++i) {
        if (cum[i] >= target) return i + 1;
    }
    return cum.size();
}

void RankSpec::validate() const {
    if (rank.has_value() == energy.has_value()) throw ValidationError("rank spec needs exactly one of rank or energy");
    if (rank && *rank < 1) throw ValidationError("rank must be at least 1");
    if (energy && !(*energy > 0.0 && *energy <= 1.0)) {
        throw ValidationError(fmt::format("energy fraction {} must lie in (0, 1]", *energy));
    }
}

TaskVector truncate_task_vector(const TaskVector& vector, const RankSpec& spec, const SvdOptions& opts,
                                LowRankTrace* trace) {
    spec.validate();
    std::vector<const std::pair<const std::string, Tensor>*> items;
    for (const auto& kv : vector.deltas) items.push_back(&kv);
    std::vector<Tensor> out(items.size());
    std::vector<std::string> notes(items.size());

    parallel_for(items.size(), [&](std::size_t i) {
        const auto& [name, delta] = *items[i];
        if (!delta.is_matrix()) {
            out[i] = delta;
            notes[i] = "passthrough (not 2-D)";
            return;
        }
        Matrix a = Matrix::from_tensor(delta);
        const bool dense = is_dense(a, opts);
        const std::size_t full = std::min(a.rows(), a.cols());
        std::size_t r = 0;
        SvdFactors f;
        if (spec.rank) {
            r = *spec.rank;
            if (r >= full) {
                out[i] = delta;
                notes[i] = fmt::format("rank {} >= {} (no truncation)", r, full);
                return;
            }
            f = truncated_svd(a, r, opts);
        } else {
            f = spectral_factors(a, opts);
            if (dense) {
                r = rank_for_energy(f.s, *spec.energy);
            } else {
                // Randomized: compare against the exact total energy ||A||_F^2.
                const double total = a.frobenius_sq();
                double acc = 0.0;
                r = f.rank();
                for (std::size_t c = 0; c < f.rank(); ++c) {
                    acc += f.s[c] * f.s[c];
                    if (acc >= *spec.energy * total) {
                        r = c + 1;
                        break;
                    }
                }
            }
            if (dense && r >= f.rank()) {
                out[i] = delta;
                notes[i] = fmt::format("energy {} keeps full rank {}", *spec.energy, f.rank());
                return;
            }
        }
        out[i] = f.reconstruct(r).to_tensor(delta.shape, delta.source_dtype);
        notes[i] = fmt::format("rank {} of {}{}", std::min(r, f.rank()), full, dense ? "" : " (randomized)");
    });

    TaskVector tv;
    tv.model_id = vector.model_id;
    tv.base_fingerprint = vector.base_fingerprint;
    for (std::size_t i = 0; i < items.size(); ++i) {
        tv.deltas.emplace(items[i]->first, std::move(out[i]));
        if (trace) (*trace)[items[i]->first] += fmt::format("{}{}: {}", (*trace)[items[i]->first].empty() ? "" : "; ",
                                                            vector.model_id, notes[i]);
    }
    return tv;
}

TensorMap twin_merge(const TensorMap& base, std::span<const TaskVector> vectors, const RankSpec& spec,
                     const Coefficients& coeffs, const SvdOptions& opts, LowRankTrace* trace) {
    spec.validate();
    std::vector<TaskVector> truncated;
    for (const auto* v : sorted_by_model(vectors)) truncated.push_back(truncate_task_vector(*v, spec, opts, trace));
    return apply_task_vectors(base, truncated, coeffs);
}

void LoreParams::validate() const {
    if (!(tau >= 0.0) || !std::isfinite(tau)) throw ValidationError("lore tau must be finite and >= 0");
    if (!(tol > 0.0)) throw ValidationError("lore tol must be > 0");
    if (max_iters < 1) throw ValidationError("lore max_iters must be >= 1");
    if (!std::isfinite(lambda)) throw ValidationError("lore lambda must be finite");
}

TensorMap lore_merge(std::span<const TensorMap> models, const LoreParams& params, const SvdOptions& opts,
                     LoreTrace* trace) {
    params.validate();
    if (models.size() < 2) throw ValidationError("lore merge needs at least two models");
    for (std::size_t k = 1; k < models.size(); ++k) check_compatible(models[0], models[k]);

    const auto names = models[0].names();
    const std::size_t K = models.size();

    struct State {
        bool matrix = false;
        std::size_t rows = 0, cols = 0;
        std::vector<double> base_hat;
        std::vector<std::vector<double>> delta;
        std::vector<double> tau;
        double objective = 0.0;
    };
    std::vector<State> states(names.size());

    auto residual_sq = [&](const State& st, std::size_t i) {
        double acc = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            const auto& th = models[k].at(names[i]).values;
            for (std::size_t j = 0; j < th.size(); ++j) {
                const double r = static_cast<double>(th[j]) - st.base_hat[j] - st.delta[k][j];
                acc += r * r;
            }
        }
        return acc;
    };

    parallel_for(names.size(), [&](std::size_t i) {
        auto& st = states[i];
        const auto& first = models[0].at(names[i]);
        st.matrix = first.is_matrix();
        st.rows = first.rows();
        st.cols = first.cols();
        const std::size_t n = first.numel();
        st.base_hat.assign(n, 0.0);
        for (std::size_t k = 0; k < K; ++k) {
            const auto& th = models[k].at(names[i]).values;
            for (std::size_t j = 0; j < n; ++j) st.base_hat[j] += th[j];
        }
        for (auto& x : st.base_hat) x /= static_cast<double>(K);
        st.delta.assign(K, std::vector<double>(n, 0.0));
        st.tau.assign(K, params.tau);
        if (st.matrix && params.tau_relative && params.tau > 0.0) {
            for (std::size_t k = 0; k < K; ++k) {
                Matrix x(st.rows, st.cols);
                const auto& th = models[k].at(names[i]).values;
                for (std::size_t j = 0; j < n; ++j) x.data()[j] = th[j] - st.base_hat[j];
                auto f = truncated_svd(x, 1, opts);
                st.tau[k] = params.tau * (f.rank() ? f.s[0] : 0.0);
            }
        }
        st.objective = 0.5 * residual_sq(st, i);
    });

    auto total_objective = [&] {
        double j = 0.0;
        for (const auto& st : states) j += st.objective;
        if (!std::isfinite(j)) throw NumericalError("lore objective is not finite");
        return j;
    };

    LoreTrace local;
    local.objective.push_back(total_objective());

    for (int sweep = 1; sweep <= params.max_iters; ++sweep) {
        parallel_for(names.size(), [&](std::size_t i) {
            auto& st = states[i];
            const std::size_t n = st.base_hat.size();
            // (a) base_hat <- mean_k(theta_k - delta_k)
            std::vector<double> next(n, 0.0);
            for (std::size_t k = 0; k < K; ++k) {
                const auto& th = models[k].at(names[i]).values;
                for (std::size_t j = 0; j < n; ++j) next[j] += static_cast<double>(th[j]) - st.delta[k][j];
            }
            for (auto& x : next) x /= static_cast<double>(K);
            st.base_hat = std::move(next);
            // (b) delta_k <- svt(theta_k - base_hat, tau_k)
            double penalty = 0.0;
            for (std::size_t k = 0; k < K; ++k) {
                const auto& th = models[k].at(names[i]).values;
                if (!st.matrix) {
                    for (std::size_t j = 0; j < n; ++j) st.delta[k][j] = static_cast<double>(th[j]) - st.base_hat[j];
                    continue;
                }
                Matrix x(st.rows, st.cols);
                for (std::size_t j = 0; j < n; ++j) x.data()[j] = static_cast<double>(th[j]) - st.base_hat[j];
                auto r = svt(x, st.tau[k], opts);
                std::copy(r.value.data().begin(), r.value.data().end(), st.delta[k].begin());
                penalty += st.tau[k] * r.nuclear_norm;
            }
            st.objective = 0.5 * residual_sq(st, i) + penalty;
        });

        const double prev = local.objective.back();
        const double cur = total_objective();
        local.objective.push_back(cur);
        local.sweeps = sweep;
        if (cur == 0.0 || prev - cur < params.tol * prev) {
            local.converged = true;
            break;
        }
    }

    std::vector<Tensor> out(names.size());
    parallel_for(names.size(), [&](std::size_t i) {
        const auto& st = states[i];
        const auto& first = models[0].at(names[i]);
        Tensor t = first;
        for (std::size_t j = 0; j < t.values.size(); ++j) {
            double sum = 0.0;
            for (std::size_t k = 0; k < K; ++k) sum += st.delta[k][j];
            const double v = st.base_hat[j] + params.lambda * sum;
            if (!std::isfinite(v)) throw NumericalError(fmt::format("lore produced a non-finite value in '{}'", names[i]));
            t.values[j] = static_cast<float>(v);
        }
        out[i] = std::move(t);
    });

    if (trace) *trace = std::move(local);
    TensorMap merged;
    merged.metadata = models[0].metadata;
    for (std::size_t i = 0; i < names.size(); ++i) merged.insert(names[i], std::move(out[i]));
    return merged;
}

} // namespace l2smerge
