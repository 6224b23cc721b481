#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <set>
#include <utility>
#include <vector>

#include "adpmpc/errors.hpp"
#include "adpmpc/system.hpp"

namespace adpmpc {

using Exponent = std::vector<int>;

/**
 * @brief All monomials of the admitted total degrees in n variables.
 *
 * Monomials are ordered graded-lexicographically: by ascending total degree, then by
 * descending exponent of x1, then x2, and so on. For n = 2 and degree 2 the order is
 * x1^2, x1 x2, x2^2. The minimum degree is 2 so that Phi(0) = 0 and grad Phi(0) = 0.
 */
class MonomialBasis {
public:
    MonomialBasis() = default;

    MonomialBasis(Eigen::Index n, std::vector<int> degrees) : n_(n)
    {
        if (n_ <= 0) throw InvalidArgument("MonomialBasis: n must be positive");
        std::set<int> unique(degrees.begin(), degrees.end());
        if (unique.empty()) throw InvalidArgument("MonomialBasis: at least one degree required");
        if (*unique.begin() < 2) throw InvalidArgument("MonomialBasis: minimum degree must be at least 2");
        degrees_.assign(unique.begin(), unique.end());
        max_degree_ = degrees_.back();
        for (int d : degrees_) {
            Exponent e(static_cast<std::size_t>(n_), 0);
            append_degree(e, 0, d);
        }
    }

    Eigen::Index n() const { return n_; }
    Eigen::Index size() const { return static_cast<Eigen::Index>(exponents_.size()); }
    const std::vector<Exponent>& exponents() const { return exponents_; }
    const std::vector<int>& degrees() const { return degrees_; }

    int total_degree(Eigen::Index i) const
    {
        int d = 0;
        for (int e : exponents_[static_cast<std::size_t>(i)]) d += e;
        return d;
    }

    /// Index of the monomial with the given exponent tuple, if present.
    std::optional<Eigen::Index> index_of(const Exponent& e) const
    {
        auto it = std::find(exponents_.begin(), exponents_.end(), e);
        if (it == exponents_.end()) return std::nullopt;
        return static_cast<Eigen::Index>(it - exponents_.begin());
    }

    Vector eval(const Vector& x) const
    {
        detail::require_dim(x, n_, "MonomialBasis::eval");
        const Matrix pw = powers(x);
        Vector phi(size());
        for (Eigen::Index i = 0; i < size(); ++i) {
            const Exponent& e = exponents_[static_cast<std::size_t>(i)];
            double v = 1.0;
            for (Eigen::Index j = 0; j < n_; ++j) v *= pw(j, e[static_cast<std::size_t>(j)]);
            phi[i] = v;
        }
        return phi;
    }

    /// Jacobian d Phi / dx, size l x n, by the power rule.
    Matrix jacobian(const Vector& x) const
    {
        detail::require_dim(x, n_, "MonomialBasis::jacobian");
        const Matrix pw = powers(x);
        Matrix J = Matrix::Zero(size(), n_);
        for (Eigen::Index i = 0; i < size(); ++i) {
            const Exponent& e = exponents_[static_cast<std::size_t>(i)];
            for (Eigen::Index k = 0; k < n_; ++k) {
                const int ek = e[static_cast<std::size_t>(k)];
                if (ek == 0) continue;
                double v = ek * pw(k, ek - 1);
                for (Eigen::Index j = 0; j < n_; ++j) {
                    if (j != k) v *= pw(j, e[static_cast<std::size_t>(j)]);
                }
                J(i, k) = v;
            }
        }
        return J;
    }

    friend bool operator==(const MonomialBasis& a, const MonomialBasis& b)
    {
        return a.n_ == b.n_ && a.exponents_ == b.exponents_;
    }

private:
    void append_degree(Exponent& e, std::size_t var, int remaining)
    {
        if (var + 1 == static_cast<std::size_t>(n_)) {
            e[var] = remaining;
            exponents_.push_back(e);
            return;
        }
        for (int k = remaining; k >= 0; --k) {
            e[var] = k;
            append_degree(e, var + 1, remaining - k);
        }
        e[var] = 0;
    }

    Matrix powers(const Vector& x) const
    {
        Matrix pw(n_, max_degree_ + 1);
        for (Eigen::Index j = 0; j < n_; ++j) {
            pw(j, 0) = 1.0;
            for (int p = 1; p <= max_degree_; ++p) pw(j, p) = pw(j, p - 1) * x[j];
        }
        return pw;
    }

    Eigen::Index n_ = 0;
    std::vector<int> degrees_;
    int max_degree_ = 0;
    std::vector<Exponent> exponents_;
};

/// V(x) = w' Phi(x).
class ValueApproximant {
public:
    ValueApproximant() = default;

    ValueApproximant(MonomialBasis basis, Vector w) : basis_(std::move(basis)), w_(std::move(w))
    {
        if (w_.size() != basis_.size()) throw InvalidArgument("ValueApproximant: weight count != basis size");
    }

    /// Embeds x'Px into the degree-2 block of the basis; other weights are zero.
    static ValueApproximant from_quadratic(const MonomialBasis& basis, const Matrix& P)
    {
        const Eigen::Index n = basis.n();
        if (P.rows() != n || P.cols() != n) throw InvalidArgument("from_quadratic: P must be n x n");
        Vector w = Vector::Zero(basis.size());
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = i; j < n; ++j) {
                Exponent e(static_cast<std::size_t>(n), 0);
                e[static_cast<std::size_t>(i)] += 1;
                e[static_cast<std::size_t>(j)] += 1;
                auto idx = basis.index_of(e);
                if (!idx) throw InvalidArgument("from_quadratic: basis lacks degree-2 monomials");
                w[*idx] = (i == j) ? P(i, i) : P(i, j) + P(j, i);
            }
        }
        return ValueApproximant(basis, std::move(w));
    }

    const MonomialBasis& basis() const { return basis_; }
    const Vector& weights() const { return w_; }

    double value(const Vector& x) const { return w_.dot(basis_.eval(x)); }
    Vector gradient(const Vector& x) const { return basis_.jacobian(x).transpose() * w_; }

    /// The symmetric matrix P with V(x) = x'Px when only degree-2 weights are nonzero.
    std::optional<Matrix> quadratic_part() const
    {
        const Eigen::Index n = basis_.n();
        Matrix P = Matrix::Zero(n, n);
        for (Eigen::Index i = 0; i < basis_.size(); ++i) {
            if (basis_.total_degree(i) != 2) {
                if (w_[i] != 0.0) return std::nullopt;
                continue;
            }
            const Exponent& e = basis_.exponents()[static_cast<std::size_t>(i)];
            std::vector<Eigen::Index> vars;
            for (Eigen::Index j = 0; j < n; ++j) {
                for (int k = 0; k < e[static_cast<std::size_t>(j)]; ++k) vars.push_back(j);
            }
            if (vars[0] == vars[1]) {
                P(vars[0], vars[0]) = w_[i];
            } else {
                P(vars[0], vars[1]) = 0.5 * w_[i];
                P(vars[1], vars[0]) = 0.5 * w_[i];
            }
        }
        return P;
    }

private:
    MonomialBasis basis_;
    Vector w_;
};

struct FitReport {
    double residual_rms = 0.0;
    double residual_max = 0.0;
    double condition_estimate = 0.0;
    double regularization_used = 0.0;
    /// Fewer rows than unknowns; a ridge floor was applied.
    bool underdetermined = false;
    Eigen::Index rank = 0;
};

struct FitResult {
    Vector w;
    FitReport report;
};

inline constexpr double kRidgeFloor = 1e-10;

/**
 * @brief Minimizes |A w - b|^2 + ridge |w|^2 with a column-pivoting QR.
 *
 * A rank-deficient or underdetermined system with ridge = 0 is refit with ridge 1e-10,
 * recorded in the report.
 */
inline FitResult lstsq_fit(const Matrix& A, const Vector& b, double ridge = 0.0)
{
    if (A.rows() != b.size()) throw InvalidArgument("lstsq_fit: row count mismatch");
    if (ridge < 0.0) throw InvalidArgument("lstsq_fit: ridge must be nonnegative");
    const Eigen::Index p = A.rows();
    const Eigen::Index l = A.cols();
    FitResult out;
    out.report.underdetermined = p < l;
    if (out.report.underdetermined) ridge = std::max(ridge, kRidgeFloor);

    auto solve = [&](double lambda) {
        if (lambda == 0.0) {
            Eigen::ColPivHouseholderQR<Matrix> qr(A);
            return std::make_pair(Vector(qr.solve(b)), qr);
        }
        Matrix Aug(p + l, l);
        Aug.topRows(p) = A;
        Aug.bottomRows(l) = std::sqrt(lambda) * Matrix::Identity(l, l);
        Vector baug = Vector::Zero(p + l);
        baug.head(p) = b;
        Eigen::ColPivHouseholderQR<Matrix> qr(Aug);
        return std::make_pair(Vector(qr.solve(baug)), qr);
    };

    auto [w, qr] = solve(ridge);
    // rank of A itself; the ridge-augmented matrix is always full rank
    out.report.rank = ridge == 0.0 ? qr.rank() : Eigen::ColPivHouseholderQR<Matrix>(A).rank();
    if (ridge == 0.0 && qr.rank() < l) {
        ridge = kRidgeFloor;
        std::tie(w, qr) = solve(ridge);
    }
    out.report.regularization_used = ridge;
    const auto diag = qr.matrixQR().diagonal().cwiseAbs();
    const double dmin = diag.minCoeff();
    out.report.condition_estimate = dmin > 0.0 ? diag.maxCoeff() / dmin : std::numeric_limits<double>::infinity();

    const Vector r = A * w - b;
    out.report.residual_max = p > 0 ? r.cwiseAbs().maxCoeff() : 0.0;
    out.report.residual_rms = p > 0 ? std::sqrt(r.squaredNorm() / static_cast<double>(p)) : 0.0;
    out.w = std::move(w);
    return out;
}

/**
 * @brief Explicit policy u = W' [x; x (x) x], with l_a = n + n^2 features.
 *
 * The Kronecker block keeps both symmetric duplicates x_i x_j and x_j x_i.
 */
class PolicyApproximant {
public:
    PolicyApproximant() = default;

    PolicyApproximant(Eigen::Index n, Matrix W) : n_(n), W_(std::move(W))
    {
        if (W_.rows() != feature_count(n_)) throw InvalidArgument("PolicyApproximant: W must have n + n^2 rows");
    }

    static Eigen::Index feature_count(Eigen::Index n) { return n + n * n; }

    static Vector features(const Vector& x)
    {
        const Eigen::Index n = x.size();
        Vector phi(feature_count(n));
        phi.head(n) = x;
        for (Eigen::Index i = 0; i < n; ++i) phi.segment(n + i * n, n) = x[i] * x;
        return phi;
    }

    Eigen::Index n() const { return n_; }
    Eigen::Index m() const { return W_.cols(); }
    const Matrix& weights() const { return W_; }

    Vector operator()(const Vector& x) const
    {
        detail::require_dim(x, n_, "PolicyApproximant");
        return W_.transpose() * features(x);
    }

private:
    Eigen::Index n_ = 0;
    Matrix W_;
};

struct PolicyFit {
    PolicyApproximant policy;
    FitReport report;  ///< worst report over output columns
};

/// Least-squares fit of the explicit policy to target inputs at the given states.
inline PolicyFit fit_policy(const std::vector<Vector>& states, const std::vector<Vector>& inputs, double ridge = 0.0)
{
    if (states.empty() || states.size() != inputs.size()) throw InvalidArgument("fit_policy: sample mismatch");
    const Eigen::Index n = states.front().size();
    const Eigen::Index m = inputs.front().size();
    const Eigen::Index la = PolicyApproximant::feature_count(n);
    Matrix F(static_cast<Eigen::Index>(states.size()), la);
    Matrix T(static_cast<Eigen::Index>(states.size()), m);
    for (std::size_t s = 0; s < states.size(); ++s) {
        F.row(static_cast<Eigen::Index>(s)) = PolicyApproximant::features(states[s]).transpose();
        T.row(static_cast<Eigen::Index>(s)) = inputs[s].transpose();
    }
    Matrix W(la, m);
    FitReport worst;
    for (Eigen::Index j = 0; j < m; ++j) {
        FitResult fit = lstsq_fit(F, T.col(j), ridge);
        W.col(j) = fit.w;
        if (j == 0 || fit.report.residual_max > worst.residual_max) worst = fit.report;
    }
    return PolicyFit{PolicyApproximant(n, std::move(W)), worst};
}

}  // namespace adpmpc
