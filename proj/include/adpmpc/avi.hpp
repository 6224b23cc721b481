#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "adpmpc/approximator.hpp"
#include "adpmpc/errors.hpp"
#include "adpmpc/sampling.hpp"
#include "adpmpc/system.hpp"

namespace adpmpc {

// ---------------------------------------------------------------------------
// LQR initialization
// ---------------------------------------------------------------------------

struct LqrInit {
    Matrix K;  ///< u = -K x
    Matrix P;
    double spectral_radius = 0.0;  ///< of A - B K
    std::size_t iterations = 0;
};

inline double spectral_radius(const Matrix& M)
{
    Eigen::EigenSolver<Matrix> es(M, false);
    return es.eigenvalues().cwiseAbs().maxCoeff();
}

inline Matrix dare_residual(const Matrix& A, const Matrix& B, const Matrix& Q, const Matrix& R, const Matrix& P)
{
    const Matrix S = R + B.transpose() * P * B;
    return Q + A.transpose() * P * A - A.transpose() * P * B * S.ldlt().solve(B.transpose() * P * A) - P;
}

/**
 * @brief Discrete algebraic Riccati equation by fixed-point iteration from P = Q.
 *
 * Stops when successive iterates differ by less than 1e-12 max(1, |P|_max) in max norm.
 * Throws NotStabilizable on non-convergence or an unstable closed loop.
 */
inline LqrInit dare_solve(const Matrix& A, const Matrix& B, const Matrix& Q, const Matrix& R,
                          std::size_t max_iter = 100000)
{
    if (A.rows() != A.cols() || B.rows() != A.rows() || Q.rows() != A.rows() || R.rows() != B.cols()) {
        throw InvalidArgument("dare_solve: shape mismatch");
    }
    Matrix P = Q;
    LqrInit out;
    bool converged = false;
    for (std::size_t k = 0; k < max_iter; ++k) {
        const Matrix S = R + B.transpose() * P * B;
        Matrix next = Q + A.transpose() * P * A - A.transpose() * P * B * S.ldlt().solve(B.transpose() * P * A);
        next = 0.5 * (next + next.transpose());
        const double change = (next - P).cwiseAbs().maxCoeff();
        P = std::move(next);
        out.iterations = k + 1;
        if (!P.allFinite()) break;
        if (change < 1e-12 * std::max(1.0, P.cwiseAbs().maxCoeff())) {
            converged = true;
            break;
        }
    }
    if (!converged) throw NotStabilizable("dare_solve: Riccati iteration did not converge");
    const Matrix S = R + B.transpose() * P * B;
    out.K = S.ldlt().solve(B.transpose() * P * A);
    out.P = P;
    out.spectral_radius = spectral_radius(A - B * out.K);
    if (!(out.spectral_radius < 1.0)) throw NotStabilizable("dare_solve: closed loop is not Schur stable");
    return out;
}

/// LQR design on the linearization at the origin.
inline LqrInit lqr_at_origin(const ControlAffineSystem& sys, const StageCost& cost)
{
    const Linearization lin = linearize(sys, Vector::Zero(sys.n()), Vector::Zero(sys.m()));
    return dare_solve(lin.A, lin.B, cost.Q(), cost.R());
}

inline Policy linear_policy(const Matrix& K)
{
    return [K](const Vector& x) -> Vector { return -K * x; };
}

// ---------------------------------------------------------------------------
// Greedy policy
// ---------------------------------------------------------------------------

struct GreedyResult {
    Vector u;
    double objective = 0.0;
    double residual = 0.0;  ///< |2Ru + g' grad V(f(x,u))|
    std::size_t iterations = 0;
    bool used_fallback = false;
};

struct GreedyOptions {
    double theta = 0.5;
    double step_tol = 1e-10;
    std::size_t max_iter = 200;
    double residual_tol = 1e-8;
    std::size_t grid_per_axis = 41;
};

namespace detail {

struct GreedyProblem {
    const ValueApproximant& V;
    const StageCost& cost;
    const Vector& x;
    Vector fa;
    Matrix ga;
    Eigen::LDLT<Matrix> Rfac;

    GreedyProblem(const ValueApproximant& V_, const ControlAffineSystem& sys, const StageCost& cost_,
                  const Vector& x_)
        : V(V_), cost(cost_), x(x_), fa(sys.drift(x_)), ga(sys.input_matrix(x_)), Rfac(cost_.R())
    {
    }

    double objective(const Vector& u) const { return cost.l(x, u) + V.value(fa + ga * u); }
    Vector target(const Vector& u) const { return -0.5 * Rfac.solve(ga.transpose() * V.gradient(fa + ga * u)); }
    double residual(const Vector& u) const
    {
        return (2.0 * cost.R() * u + ga.transpose() * V.gradient(fa + ga * u)).norm();
    }

    /// Damped fixed-point iteration; returns true on step convergence with a finite iterate.
    bool iterate(Vector& u, double theta, double step_tol, std::size_t max_iter, std::size_t& count) const
    {
        for (std::size_t k = 0; k < max_iter; ++k) {
            Vector next = (1.0 - theta) * u + theta * target(u);
            ++count;
            if (!next.allFinite()) return false;
            const double du = (next - u).norm();
            u = std::move(next);
            if (du < step_tol) return true;
        }
        return false;
    }
};

inline void grid_points(const BoxSet& box, std::size_t per_axis, Vector& cur, Eigen::Index axis,
                        const std::function<void(const Vector&)>& visit)
{
    if (axis == box.dim()) {
        visit(cur);
        return;
    }
    for (std::size_t k = 0; k < per_axis; ++k) {
        const double t = per_axis == 1 ? 0.5 : static_cast<double>(k) / static_cast<double>(per_axis - 1);
        cur[axis] = box.lower()[axis] + t * (box.upper()[axis] - box.lower()[axis]);
        grid_points(box, per_axis, cur, axis + 1, visit);
    }
}

}  // namespace detail

/// Visits every point of a regular grid with per_axis points per coordinate (endpoints included).
inline void for_each_grid_point(const BoxSet& box, std::size_t per_axis, const std::function<void(const Vector&)>& visit)
{
    Vector cur(box.dim());
    detail::grid_points(box, per_axis, cur, 0, visit);
}

/**
 * @brief Minimizes l(x,u) + V(f(x,u)) over unconstrained u via its first-order condition.
 *
 * Primary solver is the damped fixed point u <- (1-theta) u + theta (-1/2 R^-1 g' grad V(f_a + g u))
 * from u = 0. On failure, the best point of a grid over `fallback_box` seeds the same map with
 * progressively smaller damping.
 */
inline GreedyResult greedy_policy_solve(const ValueApproximant& V, const ControlAffineSystem& sys,
                                        const StageCost& cost, const Vector& x, const BoxSet& fallback_box,
                                        const GreedyOptions& opt = {})
{
    detail::require_dim(x, sys.n(), "greedy_policy_solve");
    if (!x.allFinite()) throw PolicySolveError("greedy_policy_solve: non-finite state");
    const detail::GreedyProblem prob(V, sys, cost, x);
    GreedyResult out;

    Vector u = Vector::Zero(sys.m());
    if (prob.iterate(u, opt.theta, opt.step_tol, opt.max_iter, out.iterations)) {
        const double res = prob.residual(u);
        if (res < opt.residual_tol) {
            out.u = std::move(u);
            out.residual = res;
            out.objective = prob.objective(out.u);
            return out;
        }
    }

    out.used_fallback = true;
    const std::size_t per_axis = sys.m() <= 2 ? opt.grid_per_axis : (sys.m() == 3 ? 11 : 3);
    Vector best = Vector::Zero(sys.m());
    double best_obj = prob.objective(best);
    for_each_grid_point(fallback_box, per_axis, [&](const Vector& cand) {
        const double obj = prob.objective(cand);
        if (obj < best_obj) {
            best_obj = obj;
            best = cand;
        }
    });
    for (double theta = opt.theta; theta >= opt.theta / 1024.0; theta *= 0.5) {
        Vector v = best;
        if (prob.iterate(v, theta, opt.step_tol, 20 * opt.max_iter, out.iterations)) {
            const double res = prob.residual(v);
            if (res < opt.residual_tol) {
                out.u = std::move(v);
                out.residual = res;
                out.objective = prob.objective(out.u);
                return out;
            }
        }
    }
    std::ostringstream msg;
    msg << "greedy_policy_solve: no stationary input found at x = [" << x.transpose() << "]";
    throw PolicySolveError(msg.str());
}

/// Greedy policy with respect to V as a callable.
inline Policy greedy_policy(ValueApproximant V, ControlAffineSystem sys, StageCost cost, BoxSet fallback_box)
{
    return [V = std::move(V), sys = std::move(sys), cost = std::move(cost),
            box = std::move(fallback_box)](const Vector& x) -> Vector {
        return greedy_policy_solve(V, sys, cost, x, box).u;
    };
}

// ---------------------------------------------------------------------------
// Error margins
// ---------------------------------------------------------------------------

struct MarginReport {
    std::vector<double> eps;  ///< signed error per test sample
    double sup_abs = 0.0;     ///< max |eps| over all test samples
    double c = 0.0;           ///< max |eps|/l* over samples with l* >= delta
    std::size_t excluded = 0; ///< samples with l* < delta
};

/**
 * @brief Sup-norm and stage-cost-relative margin of a residual evaluated on test samples.
 *
 * Throws ConfigError when every sample lies below the exclusion radius.
 */
inline MarginReport residual_margin(std::vector<double> eps, const std::vector<Vector>& samples,
                                    const StageCost& cost, double delta_lstar)
{
    if (eps.size() != samples.size()) throw InvalidArgument("residual_margin: size mismatch");
    MarginReport out;
    std::size_t used = 0;
    for (std::size_t s = 0; s < samples.size(); ++s) {
        const double a = std::abs(eps[s]);
        out.sup_abs = std::max(out.sup_abs, a);
        const double ls = cost.lstar(samples[s]);
        if (ls < delta_lstar) {
            ++out.excluded;
            continue;
        }
        ++used;
        out.c = std::max(out.c, a / ls);
    }
    if (used == 0) throw ConfigError("residual_margin: every test sample lies below the exclusion radius");
    out.eps = std::move(eps);
    return out;
}

/// eps(x) = V_next(x) - l(x,u) - V_prev(f(x,u)) for one sample.
inline double bellman_residual(const ValueApproximant& V_next, const ValueApproximant& V_prev,
                               const ControlAffineSystem& sys, const StageCost& cost, const Vector& x,
                               const Vector& u)
{
    return V_next.value(x) - cost.l(x, u) - V_prev.value(step(sys, x, u));
}

// ---------------------------------------------------------------------------
// Value iteration with approximation errors
// ---------------------------------------------------------------------------

enum class InitMode { fit, lqr_shortcut };

struct AviConfig {
    BoxSet omega;
    std::size_t p = 500;
    std::size_t p_test = 2000;
    std::size_t max_iter = 60;  ///< I
    double w_tol = 1e-3;
    double delta_lstar = 1e-4;
    std::uint64_t seed = 1;
    double ridge = 0.0;
    InitMode init = InitMode::lqr_shortcut;

    void validate(const BoxSet& state_box, Eigen::Index basis_size) const
    {
        if (!omega.subset_of(state_box)) throw ConfigError("AviConfig: training domain must lie inside X");
        if (p < static_cast<std::size_t>(basis_size)) {
            throw ConfigError("AviConfig: p must be at least the basis size");
        }
        if (p_test == 0) throw ConfigError("AviConfig: p_test must be positive");
        if (!(delta_lstar > 0.0)) throw ConfigError("AviConfig: delta_lstar must be positive");
    }
};

struct InitResult {
    Vector w0;
    std::optional<FitReport> fit;
    MarginReport margin;  ///< eps_{-1} on test samples
};

/**
 * @brief Initial cost V0 for the stabilizing policy mu_init.
 *
 * fit: least squares on w'(Phi(x) - Phi(f(x, mu(x)))) = l(x, mu(x)) over training samples.
 * lqr_shortcut: V0(x) = x' P x embedded in the degree-2 block.
 */
inline InitResult init_cost(const MonomialBasis& basis, const ControlAffineSystem& sys, const StageCost& cost,
                            const Policy& mu_init, InitMode mode, const std::optional<Matrix>& P_lqr,
                            const std::vector<Vector>& train, const std::vector<Vector>& test, double ridge,
                            double delta_lstar)
{
    InitResult out;
    if (mode == InitMode::fit) {
        Matrix F(static_cast<Eigen::Index>(train.size()), basis.size());
        Vector t(static_cast<Eigen::Index>(train.size()));
        for (std::size_t s = 0; s < train.size(); ++s) {
            const Vector u = mu_init(train[s]);
            const Vector xn = step(sys, train[s], u);
            F.row(static_cast<Eigen::Index>(s)) = (basis.eval(train[s]) - basis.eval(xn)).transpose();
            t[static_cast<Eigen::Index>(s)] = cost.l(train[s], u);
        }
        FitResult fit = lstsq_fit(F, t, ridge);
        out.w0 = std::move(fit.w);
        out.fit = fit.report;
    } else {
        if (!P_lqr) throw InvalidArgument("init_cost: lqr-shortcut requires the LQR cost matrix");
        out.w0 = ValueApproximant::from_quadratic(basis, *P_lqr).weights();
    }
    const ValueApproximant V0(basis, out.w0);
    std::vector<double> eps(test.size());
    for (std::size_t s = 0; s < test.size(); ++s) {
        eps[s] = bellman_residual(V0, V0, sys, cost, test[s], mu_init(test[s]));
    }
    out.margin = residual_margin(std::move(eps), test, cost, delta_lstar);
    return out;
}

/// Fits w(i+1) to targets l(x, mu_i(x)) + V_i(f(x, mu_i(x))) at the training samples.
inline FitResult cost_update(const ValueApproximant& V_i, const ControlAffineSystem& sys, const StageCost& cost,
                             const std::vector<Vector>& train, const std::vector<Vector>& inputs, double ridge)
{
    const MonomialBasis& basis = V_i.basis();
    Matrix F(static_cast<Eigen::Index>(train.size()), basis.size());
    Vector t(static_cast<Eigen::Index>(train.size()));
    for (std::size_t s = 0; s < train.size(); ++s) {
        F.row(static_cast<Eigen::Index>(s)) = basis.eval(train[s]).transpose();
        t[static_cast<Eigen::Index>(s)] = cost.l(train[s], inputs[s]) + V_i.value(step(sys, train[s], inputs[s]));
    }
    return lstsq_fit(F, t, ridge);
}

/**
 * @brief gamma_0 with V0 <= gamma_0 l* on the training domain.
 *
 * Quadratic V0 = x'Px uses the generalized eigenvalue bound lambda_max(P, Q) / (1 - c_{-1});
 * otherwise the sampled maximum of V0/((1 - c_{-1}) l*) over samples with l* >= delta.
 */
inline double gamma0_estimate(const ValueApproximant& V0, const StageCost& cost, double c_init,
                              const std::vector<Vector>& test, double delta_lstar)
{
    if (!(c_init < 1.0)) throw MarginError("gamma0_estimate: initial margin c_{-1} must be below 1");
    if (auto P = V0.quadratic_part()) {
        Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> ges(*P, cost.Q());
        return ges.eigenvalues().maxCoeff() / (1.0 - c_init);
    }
    double worst = -std::numeric_limits<double>::infinity();
    for (const Vector& x : test) {
        const double ls = cost.lstar(x);
        if (ls < delta_lstar) continue;
        worst = std::max(worst, V0.value(x) / ((1.0 - c_init) * ls));
    }
    if (!std::isfinite(worst)) throw ConfigError("gamma0_estimate: no test sample above the exclusion radius");
    return worst;
}

/// Upper limit 1 + 2 g - sqrt(4 g^2 + 4 g) on c for the iterated policy to be stabilizing.
inline double stability_margin_bound(double gamma0)
{
    return 1.0 + 2.0 * gamma0 - std::sqrt(4.0 * gamma0 * gamma0 + 4.0 * gamma0);
}

inline bool stability_margin_check(double c, double gamma0)
{
    return c >= 0.0 && c < stability_margin_bound(gamma0);
}

struct AviRun {
    MonomialBasis basis;
    std::vector<Vector> weights;            ///< w(0), w(1), ...
    std::vector<double> c_per_iter;         ///< c_{-1}, c_0, ...
    std::vector<double> sup_eps_per_iter;   ///< matching sup |eps_i|
    std::vector<std::vector<double>> eps;   ///< eps_i on test samples, same indexing as c_per_iter
    std::vector<std::optional<FitReport>> fits;  ///< fit of w(i), i = 0.. (w(0) only in fit mode)
    std::vector<Vector> train;
    std::vector<Vector> test;
    std::size_t excluded_test = 0;
    double c = 0.0;
    std::optional<double> gamma0;  ///< absent when c_{-1} >= 1
    std::optional<std::size_t> converged_at;
    bool margin_flag = false;  ///< some c_i >= 1

    /// Iterate count I, so the final approximant is V_{I+1}.
    std::size_t last_iter() const { return weights.size() - 2; }
    ValueApproximant value(std::size_t i) const { return ValueApproximant(basis, weights.at(i)); }
    ValueApproximant final_value() const { return value(weights.size() - 1); }
    /// V_I, whose greedy policy is the stored controller.
    ValueApproximant policy_value() const { return value(weights.size() - 2); }
};

/**
 * @brief Stabilizing value iteration with approximation errors.
 *
 * Runs the initial cost step, then greedy solve + cost update + test-sample margin for
 * i = 0..I, stopping early once max_j |w_j(i+1) - w_j(i)| / max(1, |w_j(i)|) < w_tol.
 */
inline AviRun run_avi(const AviConfig& cfg, const MonomialBasis& basis, const ControlAffineSystem& sys,
                      const StageCost& cost, const Policy& mu_init, const std::optional<Matrix>& P_lqr,
                      const BoxSet& state_box, const BoxSet& input_box)
{
    cfg.validate(state_box, basis.size());
    if (basis.n() != sys.n()) throw InvalidArgument("run_avi: basis dimension does not match the system");
    AviRun run;
    run.basis = basis;
    std::mt19937_64 rng(cfg.seed);
    run.train = sample_box(cfg.omega, cfg.p, rng);
    run.test = sample_box(cfg.omega, cfg.p_test, rng);

    InitResult init = init_cost(basis, sys, cost, mu_init, cfg.init, P_lqr, run.train, run.test, cfg.ridge,
                                cfg.delta_lstar);
    run.weights.push_back(init.w0);
    run.fits.push_back(init.fit);
    run.c_per_iter.push_back(init.margin.c);
    run.sup_eps_per_iter.push_back(init.margin.sup_abs);
    run.excluded_test = init.margin.excluded;
    run.eps.push_back(std::move(init.margin.eps));
    if (init.margin.c < 1.0) {
        run.gamma0 = gamma0_estimate(ValueApproximant(basis, run.weights[0]), cost, init.margin.c, run.test,
                                     cfg.delta_lstar);
    }

    for (std::size_t i = 0; i <= cfg.max_iter; ++i) {
        const ValueApproximant Vi(basis, run.weights.back());
        std::vector<Vector> u_train;
        u_train.reserve(run.train.size());
        for (const Vector& x : run.train) u_train.push_back(greedy_policy_solve(Vi, sys, cost, x, input_box).u);
        FitResult fit = cost_update(Vi, sys, cost, run.train, u_train, cfg.ridge);
        const ValueApproximant Vnext(basis, fit.w);

        std::vector<double> eps(run.test.size());
        for (std::size_t s = 0; s < run.test.size(); ++s) {
            const Vector u = greedy_policy_solve(Vi, sys, cost, run.test[s], input_box).u;
            eps[s] = bellman_residual(Vnext, Vi, sys, cost, run.test[s], u);
        }
        MarginReport margin = residual_margin(std::move(eps), run.test, cost, cfg.delta_lstar);

        double change = 0.0;
        for (Eigen::Index j = 0; j < fit.w.size(); ++j) {
            const double wj = run.weights.back()[j];
            change = std::max(change, std::abs(fit.w[j] - wj) / std::max(1.0, std::abs(wj)));
        }
        run.weights.push_back(std::move(fit.w));
        run.fits.push_back(fit.report);
        run.c_per_iter.push_back(margin.c);
        run.sup_eps_per_iter.push_back(margin.sup_abs);
        run.eps.push_back(std::move(margin.eps));
        if (change < cfg.w_tol) {
            run.converged_at = i;
            break;
        }
    }
    run.c = 0.0;
    for (double ci : run.c_per_iter) run.c = std::max(run.c, ci);
    run.margin_flag = !(run.c < 1.0);
    return run;
}

// ---------------------------------------------------------------------------
// A posteriori checks
// ---------------------------------------------------------------------------

struct InputConstraintReport {
    bool pass = true;
    double worst_excess = 0.0;
    std::size_t violations = 0;
};

inline InputConstraintReport input_constraint_check(const Policy& policy, const BoxSet& input_box,
                                                    const std::vector<Vector>& samples)
{
    InputConstraintReport out;
    for (const Vector& x : samples) {
        const double e = input_box.excess(policy(x));
        if (e > 0.0) {
            ++out.violations;
            out.worst_excess = std::max(out.worst_excess, e);
        }
    }
    out.pass = out.violations == 0;
    return out;
}

struct BoundViolation {
    std::size_t iter;
    std::size_t sample;
    double value;
    double lower;
    double upper;
};

struct Theorem1Report {
    std::size_t checks = 0;
    std::vector<BoundViolation> violations;
    double min_ratio = std::numeric_limits<double>::infinity();   ///< min V_i / l*
    double max_ratio = -std::numeric_limits<double>::infinity();  ///< max V_i / l*
};

/**
 * @brief Checks (1 - c) l*(x) <= V_i(x) <= 2 gamma_0 l*(x) for every stored iterate and sample.
 *
 * Tolerance 1e-9 + 1e-6 l*(x). Ratios skip samples with l* = 0.
 */
inline Theorem1Report theorem1_bounds_check(const AviRun& run, const StageCost& cost,
                                            const std::vector<Vector>& samples)
{
    Theorem1Report out;
    const double gamma0 = run.gamma0.value_or(std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < run.weights.size(); ++i) {
        const ValueApproximant Vi = run.value(i);
        for (std::size_t s = 0; s < samples.size(); ++s) {
            const double ls = cost.lstar(samples[s]);
            const double v = Vi.value(samples[s]);
            const double lo = (1.0 - run.c) * ls;
            const double hi = 2.0 * gamma0 * ls;
            const double tol = 1e-9 + 1e-6 * ls;
            ++out.checks;
            if (v < lo - tol || v > hi + tol) out.violations.push_back({i, s, v, lo, hi});
            if (ls > 0.0) {
                out.min_ratio = std::min(out.min_ratio, v / ls);
                out.max_ratio = std::max(out.max_ratio, v / ls);
            }
        }
    }
    return out;
}

}  // namespace adpmpc
