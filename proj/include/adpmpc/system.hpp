#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "adpmpc/errors.hpp"

namespace adpmpc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

using Policy = std::function<Vector(const Vector&)>;

namespace detail {

inline bool all_finite(const Eigen::Ref<const Matrix>& m) { return m.allFinite(); }

inline void require_dim(const Vector& v, Eigen::Index expected, const char* what)
{
    if (v.size() != expected) {
        throw InvalidArgument(std::string(what) + ": expected dimension " + std::to_string(expected) +
                              ", got " + std::to_string(v.size()));
    }
}

}  // namespace detail

/**
 * @brief Axis-aligned box {x : lower <= x <= upper} with the origin strictly inside.
 */
class BoxSet {
public:
    BoxSet() = default;

    BoxSet(Vector lower, Vector upper) : lower_(std::move(lower)), upper_(std::move(upper))
    {
        if (lower_.size() != upper_.size() || lower_.size() == 0) {
            throw InvalidArgument("BoxSet: bound dimensions must match and be nonzero");
        }
        for (Eigen::Index j = 0; j < lower_.size(); ++j) {
            if (!(lower_[j] < 0.0 && 0.0 < upper_[j])) {
                throw InvalidArgument("BoxSet: origin must be strictly interior (coordinate " +
                                      std::to_string(j) + ")");
            }
        }
    }

    /// Symmetric box [-half_width, half_width]^dim.
    static BoxSet symmetric(Eigen::Index dim, double half_width)
    {
        return BoxSet(Vector::Constant(dim, -half_width), Vector::Constant(dim, half_width));
    }

    Eigen::Index dim() const { return lower_.size(); }
    const Vector& lower() const { return lower_; }
    const Vector& upper() const { return upper_; }

    bool contains(const Vector& x) const { return excess(x) <= 0.0; }

    /// Largest componentwise distance outside the box (0 when inside).
    double excess(const Vector& x) const
    {
        detail::require_dim(x, dim(), "BoxSet::excess");
        double worst = 0.0;
        for (Eigen::Index j = 0; j < dim(); ++j) {
            worst = std::max({worst, x[j] - upper_[j], lower_[j] - x[j]});
        }
        return worst;
    }

    /// Componentwise signed excess vector (zero inside the box).
    Vector excess_vector(const Vector& x) const
    {
        Vector e = Vector::Zero(dim());
        for (Eigen::Index j = 0; j < dim(); ++j) {
            if (x[j] > upper_[j]) e[j] = x[j] - upper_[j];
            else if (x[j] < lower_[j]) e[j] = x[j] - lower_[j];
        }
        return e;
    }

    Vector clamp(const Vector& x) const { return x.cwiseMax(lower_).cwiseMin(upper_); }

    BoxSet scaled(double s) const { return BoxSet(lower_ * s, upper_ * s); }

    bool subset_of(const BoxSet& other) const
    {
        return dim() == other.dim() && (lower_.array() >= other.lower_.array()).all() &&
               (upper_.array() <= other.upper_.array()).all();
    }

private:
    Vector lower_;
    Vector upper_;
};

/**
 * @brief Quadratic stage cost l(x,u) = x'Qx + u'Ru.
 *
 * l*(x) = min_u l(x,u) = x'Qx, bounded by lambda_min(Q)|x|^2 <= l*(x) <= lambda_max(Q)|x|^2.
 */
class StageCost {
public:
    StageCost() = default;

    StageCost(Matrix Q, Matrix R) : Q_(std::move(Q)), R_(std::move(R))
    {
        check_spd(Q_, "Q");
        check_spd(R_, "R");
        Eigen::SelfAdjointEigenSolver<Matrix> eq(Q_);
        lambda_min_ = eq.eigenvalues().minCoeff();
        lambda_max_ = eq.eigenvalues().maxCoeff();
    }

    Eigen::Index n() const { return Q_.rows(); }
    Eigen::Index m() const { return R_.rows(); }
    const Matrix& Q() const { return Q_; }
    const Matrix& R() const { return R_; }

    double l(const Vector& x, const Vector& u) const { return x.dot(Q_ * x) + u.dot(R_ * u); }
    double lstar(const Vector& x) const { return x.dot(Q_ * x); }

    /// Lower comparison function value lambda_min(Q) s^2.
    double alpha_lower(double s) const { return lambda_min_ * s * s; }
    /// Upper comparison function value lambda_max(Q) s^2.
    double alpha_upper(double s) const { return lambda_max_ * s * s; }

    double lambda_min() const { return lambda_min_; }
    double lambda_max() const { return lambda_max_; }

private:
    static void check_spd(const Matrix& M, const char* name)
    {
        if (M.rows() == 0 || M.rows() != M.cols()) {
            throw InvalidArgument(std::string("StageCost: ") + name + " must be square and nonempty");
        }
        if ((M - M.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, M.cwiseAbs().maxCoeff())) {
            throw InvalidArgument(std::string("StageCost: ") + name + " must be symmetric");
        }
        Eigen::SelfAdjointEigenSolver<Matrix> es(M);
        if (es.eigenvalues().minCoeff() <= 0.0) {
            throw InvalidArgument(std::string("StageCost: ") + name + " must be positive definite");
        }
    }

    Matrix Q_;
    Matrix R_;
    double lambda_min_ = 0.0;
    double lambda_max_ = 0.0;
};

/**
 * @brief Discrete-time control-affine dynamics x+ = f_a(x) + g_a(x) u.
 *
 * The drift must vanish at the origin; this is verified at construction.
 */
class ControlAffineSystem {
public:
    using DriftFn = std::function<Vector(const Vector&)>;
    using InputMatrixFn = std::function<Matrix(const Vector&)>;

    ControlAffineSystem() = default;

    ControlAffineSystem(Eigen::Index n, Eigen::Index m, DriftFn drift, InputMatrixFn input_matrix,
                        std::string name = "system")
        : n_(n), m_(m), drift_(std::move(drift)), input_matrix_(std::move(input_matrix)), name_(std::move(name))
    {
        if (n_ <= 0 || m_ <= 0) throw InvalidArgument("ControlAffineSystem: dimensions must be positive");
        const Vector f0 = drift_(Vector::Zero(n_));
        const Matrix g0 = input_matrix_(Vector::Zero(n_));
        if (f0.size() != n_ || g0.rows() != n_ || g0.cols() != m_) {
            throw InvalidArgument("ControlAffineSystem: evaluator output dimensions do not match (n, m)");
        }
        if (!f0.allFinite() || f0.cwiseAbs().maxCoeff() > 1e-12) {
            throw InvalidArgument("ControlAffineSystem: drift must vanish at the origin");
        }
    }

    Eigen::Index n() const { return n_; }
    Eigen::Index m() const { return m_; }
    const std::string& name() const { return name_; }

    Vector drift(const Vector& x) const { return drift_(x); }
    Matrix input_matrix(const Vector& x) const { return input_matrix_(x); }

private:
    Eigen::Index n_ = 0;
    Eigen::Index m_ = 0;
    DriftFn drift_;
    InputMatrixFn input_matrix_;
    std::string name_;
};

inline Vector step(const ControlAffineSystem& sys, const Vector& x, const Vector& u)
{
    detail::require_dim(x, sys.n(), "step: state");
    detail::require_dim(u, sys.m(), "step: input");
    Vector next = sys.drift(x) + sys.input_matrix(x) * u;
    if (!next.allFinite()) throw DomainError("step: non-finite successor state");
    return next;
}

struct Trajectory {
    std::vector<Vector> states;
    std::vector<Vector> inputs;
    std::vector<double> stage_costs;
    /// First state index outside the state box, if any.
    std::optional<std::size_t> first_state_violation;
    /// First input index outside the input box, if any.
    std::optional<std::size_t> first_input_violation;

    std::size_t steps() const { return inputs.size(); }
    double total_cost() const
    {
        double J = 0.0;
        for (double c : stage_costs) J += c;
        return J;
    }
};

/// Simulates K steps of x+ = f(x, policy(x)); box exits are flagged, not fatal.
inline Trajectory rollout(const ControlAffineSystem& sys, const StageCost& cost, const Policy& policy,
                          const Vector& x0, std::size_t K, const BoxSet& state_box, const BoxSet& input_box)
{
    if (K < 1) throw InvalidArgument("rollout: K must be at least 1");
    detail::require_dim(x0, sys.n(), "rollout: x0");
    Trajectory traj;
    traj.states.reserve(K + 1);
    traj.inputs.reserve(K);
    traj.stage_costs.reserve(K);
    traj.states.push_back(x0);
    if (!state_box.contains(x0)) traj.first_state_violation = 0;
    for (std::size_t k = 0; k < K; ++k) {
        const Vector& x = traj.states.back();
        Vector u = policy(x);
        if (!traj.first_input_violation && !input_box.contains(u)) traj.first_input_violation = k;
        traj.stage_costs.push_back(cost.l(x, u));
        Vector next;
        try {
            next = step(sys, x, u);
        } catch (const DomainError&) {
            throw DomainError("rollout: state blow-up at step " + std::to_string(k + 1));
        }
        traj.inputs.push_back(std::move(u));
        if (!traj.first_state_violation && !state_box.contains(next)) traj.first_state_violation = k + 1;
        traj.states.push_back(std::move(next));
    }
    return traj;
}

struct Linearization {
    Matrix A;
    Matrix B;
};

/// Central-difference Jacobians of f(x,u) with relative step 1e-5 max(1, |.|).
inline Linearization linearize(const ControlAffineSystem& sys, const Vector& xbar, const Vector& ubar)
{
    detail::require_dim(xbar, sys.n(), "linearize: state");
    detail::require_dim(ubar, sys.m(), "linearize: input");
    const Eigen::Index n = sys.n();
    const Eigen::Index m = sys.m();
    Linearization lin{Matrix(n, n), Matrix(n, m)};
    for (Eigen::Index j = 0; j < n; ++j) {
        const double h = 1e-5 * std::max(1.0, std::abs(xbar[j]));
        Vector xp = xbar, xm = xbar;
        xp[j] += h;
        xm[j] -= h;
        lin.A.col(j) = (step(sys, xp, ubar) - step(sys, xm, ubar)) / (xp[j] - xm[j]);
    }
    for (Eigen::Index j = 0; j < m; ++j) {
        const double h = 1e-5 * std::max(1.0, std::abs(ubar[j]));
        Vector up = ubar, um = ubar;
        up[j] += h;
        um[j] -= h;
        lin.B.col(j) = (step(sys, xbar, up) - step(sys, xbar, um)) / (up[j] - um[j]);
    }
    return lin;
}

/// x+ = A x + B u.
inline ControlAffineSystem linear_system(const Matrix& A, const Matrix& B, std::string name = "linear")
{
    if (A.rows() != A.cols() || B.rows() != A.rows()) throw InvalidArgument("linear_system: shape mismatch");
    return ControlAffineSystem(
        A.rows(), B.cols(), [A](const Vector& x) -> Vector { return A * x; },
        [B](const Vector&) -> Matrix { return B; }, std::move(name));
}

/**
 * @brief Planar spacecraft rendezvous in normalized rotating coordinates, Euler-discretized.
 *
 * State (X, Y, X_t, Y_t); r = sqrt((1+X)^2 + Y^2) is singular at (X, Y) = (-1, 0).
 */
inline ControlAffineSystem rendezvous_system(double dt = 0.05)
{
    if (!(dt > 0.0)) throw InvalidArgument("rendezvous_system: time step must be positive");
    auto drift = [dt](const Vector& x) -> Vector {
        const double X = x[0], Y = x[1], Xt = x[2], Yt = x[3];
        const double r = std::sqrt((1.0 + X) * (1.0 + X) + Y * Y);
        if (!(r > 0.0)) throw DomainError("rendezvous: singular radius r = 0");
        const double grav = 1.0 / (r * r * r) - 1.0;
        Vector rate(4);
        rate << Xt, Yt, 2.0 * Yt - (1.0 + X) * grav, -2.0 * Xt - Y * grav;
        return x + dt * rate;
    };
    auto input = [dt](const Vector&) -> Matrix {
        Matrix G = Matrix::Zero(4, 2);
        G(2, 0) = dt;
        G(3, 1) = dt;
        return G;
    };
    return ControlAffineSystem(4, 2, std::move(drift), std::move(input), "rendezvous");
}

inline BoxSet rendezvous_state_box() { return BoxSet::symmetric(4, 0.5); }
inline BoxSet rendezvous_input_box() { return BoxSet::symmetric(2, 2.0); }
inline StageCost rendezvous_cost()
{
    return StageCost(Matrix(Vector::Constant(4, 5.0).asDiagonal()), Matrix::Identity(2, 2));
}

/**
 * @brief Scalar benchmark x+ = a x + k x^3 + b u.
 *
 * Contractive for |a| < 1 near the origin.
 */
inline ControlAffineSystem toy1d_system(double a = 0.8, double cubic = 0.2, double b = 1.0)
{
    return ControlAffineSystem(
        1, 1,
        [a, cubic](const Vector& x) -> Vector {
            Vector y(1);
            y[0] = a * x[0] + cubic * x[0] * x[0] * x[0];
            return y;
        },
        [b](const Vector&) -> Matrix { return Matrix::Constant(1, 1, b); }, "toy1d");
}

}  // namespace adpmpc
