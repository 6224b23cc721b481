#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "adpmpc/approximator.hpp"
#include "adpmpc/errors.hpp"
#include "adpmpc/system.hpp"

namespace adpmpc {

/**
 * @brief Finite-horizon problem min sum_{k<N} l(x_k, u_k) + V_f(x_N), x in X, u in U.
 */
class OcpProblem {
public:
    OcpProblem(ControlAffineSystem sys, StageCost cost, ValueApproximant terminal, std::size_t N, BoxSet X, BoxSet U)
        : sys_(std::move(sys)),
          cost_(std::move(cost)),
          terminal_(std::move(terminal)),
          N_(N),
          X_(std::move(X)),
          U_(std::move(U))
    {
        if (N_ < 1) throw InvalidArgument("OcpProblem: horizon must be at least 1");
        if (X_.dim() != sys_.n() || U_.dim() != sys_.m() || terminal_.basis().n() != sys_.n() ||
            cost_.n() != sys_.n() || cost_.m() != sys_.m()) {
            throw InvalidArgument("OcpProblem: dimension mismatch");
        }
        if (!terminal_positive_on_probe_grid()) {
            throw InvalidArgument("OcpProblem: terminal cost is not positive on the probe grid");
        }
    }

    const ControlAffineSystem& sys() const { return sys_; }
    const StageCost& cost() const { return cost_; }
    const ValueApproximant& terminal() const { return terminal_; }
    std::size_t N() const { return N_; }
    const BoxSet& X() const { return X_; }
    const BoxSet& U() const { return U_; }

    /// Same problem with another horizon.
    OcpProblem with_horizon(std::size_t N) const { return OcpProblem(sys_, cost_, terminal_, N, X_, U_); }

    /// V_f > 0 at the nonzero points of {-h, 0, h}^n, h a quarter of the state box half-width.
    bool terminal_positive_on_probe_grid() const
    {
        const Eigen::Index n = sys_.n();
        Vector h(n);
        for (Eigen::Index j = 0; j < n; ++j) h[j] = 0.25 * std::min(-X_.lower()[j], X_.upper()[j]);
        if (n > 8) {
            for (Eigen::Index j = 0; j < n; ++j) {
                for (double s : {-1.0, 1.0}) {
                    Vector x = Vector::Zero(n);
                    x[j] = s * h[j];
                    if (!(terminal_.value(x) > 0.0)) return false;
                }
            }
            return true;
        }
        std::vector<int> digit(static_cast<std::size_t>(n), 0);
        long total = 1;
        for (Eigen::Index j = 0; j < n; ++j) total *= 3;
        for (long code = 1; code < total; ++code) {
            long rem = code;
            Vector x(n);
            for (Eigen::Index j = 0; j < n; ++j) {
                x[j] = static_cast<double>(rem % 3 - 1) * h[j];
                rem /= 3;
            }
            if (x.isZero(0.0)) continue;
            if (!(terminal_.value(x) > 0.0)) return false;
        }
        return true;
    }

private:
    ControlAffineSystem sys_;
    StageCost cost_;
    ValueApproximant terminal_;
    std::size_t N_;
    BoxSet X_;
    BoxSet U_;
};

struct OcpOptions {
    std::size_t max_iter = 2000;
    double pg_tol = 1e-8;
    double armijo = 1e-4;
    double penalty_init = 1e2;
    double penalty_max = 1e6;
    double penalty_growth = 10.0;
    double violation_tol = 1e-6;
    double soft_infeasible_tol = 1e-4;
    /// Line-search trials whose state violation exceeds this fraction of the smallest X half-width
    /// (and the current violation) are rejected.
    double gross_violation_fraction = 0.1;
};

struct OcpSolution {
    Matrix u_seq;                 ///< N x m
    std::vector<Vector> x_traj;   ///< N + 1 states
    double value = 0.0;           ///< sum of stage costs + V_f(x_N), without penalty
    Vector first_input;
    double kkt_residual = 0.0;    ///< projected-gradient norm at return
    double state_violation = 0.0; ///< max state-box excess over x_1..x_N
    std::size_t iterations = 0;
    bool soft_infeasible = false;
    double penalty = 0.0;
    std::vector<double> objective_trace;  ///< penalized objective per accepted iterate
    std::vector<double> penalty_trace;    ///< penalty weight matching each trace entry
};

/// Forward simulation, unpenalized value, and state violation of an input sequence.
struct SequenceEvaluation {
    std::vector<Vector> states;
    double value = 0.0;
    double violation = 0.0;
    double penalty_term = 0.0;  ///< sum over x_1..x_N of |excess|^2
};

inline SequenceEvaluation evaluate_sequence(const OcpProblem& prob, const Vector& x0, const Matrix& u_seq)
{
    if (u_seq.rows() != static_cast<Eigen::Index>(prob.N()) || u_seq.cols() != prob.sys().m()) {
        throw InvalidArgument("evaluate_sequence: input sequence must be N x m");
    }
    SequenceEvaluation ev;
    ev.states.reserve(prob.N() + 1);
    ev.states.push_back(x0);
    for (std::size_t k = 0; k < prob.N(); ++k) {
        const Vector u = u_seq.row(static_cast<Eigen::Index>(k)).transpose();
        ev.value += prob.cost().l(ev.states.back(), u);
        ev.states.push_back(step(prob.sys(), ev.states.back(), u));
        const Vector e = prob.X().excess_vector(ev.states.back());
        ev.penalty_term += e.squaredNorm();
        ev.violation = std::max(ev.violation, e.cwiseAbs().maxCoeff());
    }
    ev.value += prob.terminal().value(ev.states.back());
    return ev;
}

namespace detail {

/// Gradient of value + penalty * penalty_term w.r.t. the input sequence by backward adjoint recursion.
inline Matrix sequence_gradient(const OcpProblem& prob, const SequenceEvaluation& ev, const Matrix& u_seq,
                                double penalty)
{
    const std::size_t N = prob.N();
    Matrix grad(u_seq.rows(), u_seq.cols());
    Vector lambda = prob.terminal().gradient(ev.states[N]) + 2.0 * penalty * prob.X().excess_vector(ev.states[N]);
    for (std::size_t kk = N; kk-- > 0;) {
        const auto k = static_cast<Eigen::Index>(kk);
        const Vector& x = ev.states[kk];
        const Vector u = u_seq.row(k).transpose();
        const Linearization lin = linearize(prob.sys(), x, u);
        grad.row(k) = (2.0 * prob.cost().R() * u + lin.B.transpose() * lambda).transpose();
        Vector next = 2.0 * prob.cost().Q() * x + lin.A.transpose() * lambda;
        if (kk > 0) next += 2.0 * penalty * prob.X().excess_vector(x);
        lambda = std::move(next);
    }
    return grad;
}

inline Matrix project(const BoxSet& U, const Matrix& u_seq)
{
    Matrix out = u_seq;
    for (Eigen::Index k = 0; k < out.rows(); ++k) {
        out.row(k) = out.row(k).cwiseMax(U.lower().transpose()).cwiseMin(U.upper().transpose());
    }
    return out;
}

}  // namespace detail

/**
 * @brief Single-shooting projected gradient with Armijo backtracking.
 *
 * Inputs are clamped to U after each step. The state box enters as a quadratic penalty whose
 * weight grows tenfold (up to 1e6) while the state violation exceeds 1e-6. Terminates when the
 * projected-gradient norm falls below 1e-8 or after 2000 iterations in total.
 */
inline OcpSolution solve_ocp(const OcpProblem& prob, const Vector& x0, const std::optional<Matrix>& warm_start = std::nullopt,
                             const OcpOptions& opt = {})
{
    detail::require_dim(x0, prob.sys().n(), "solve_ocp: x0");
    if (!prob.X().contains(x0)) throw InfeasibleStart("solve_ocp: initial state outside the state box");
    const auto N = static_cast<Eigen::Index>(prob.N());
    const Eigen::Index m = prob.sys().m();

    Matrix u = warm_start ? *warm_start : Matrix::Zero(N, m);
    if (u.rows() != N || u.cols() != m) throw InvalidArgument("solve_ocp: warm start must be N x m");
    u = detail::project(prob.U(), u);

    OcpSolution sol;
    double penalty = opt.penalty_init;
    auto objective = [&](const SequenceEvaluation& e) { return e.value + penalty * e.penalty_term; };
    SequenceEvaluation ev;
    {
        // A warm start that leaves X is replaced by u = 0 when the latter violates less.
        std::optional<SequenceEvaluation> start;
        try {
            start = evaluate_sequence(prob, x0, u);
        } catch (const DomainError&) {
        }
        if (warm_start && (!start || start->violation > 0.0)) {
            const Matrix zero = Matrix::Zero(N, m);
            try {
                SequenceEvaluation ez = evaluate_sequence(prob, x0, zero);
                if (!start || ez.violation < start->violation) {
                    start = std::move(ez);
                    u = zero;
                }
            } catch (const DomainError&) {
            }
        }
        if (!start) throw DomainError("solve_ocp: initial input sequence gives a non-finite trajectory");
        ev = std::move(*start);
    }

    double gross_violation = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < prob.X().dim(); ++j) {
        gross_violation = std::min(gross_violation, opt.gross_violation_fraction *
                                                        std::min(-prob.X().lower()[j], prob.X().upper()[j]));
    }

    std::size_t iter = 0;
    double pg_norm = std::numeric_limits<double>::infinity();
    double t = 1.0;
    while (true) {
        double J = objective(ev);
        sol.objective_trace.push_back(J);
        sol.penalty_trace.push_back(penalty);
        Matrix g = detail::sequence_gradient(prob, ev, u, penalty);
        Matrix u_prev, g_prev;
        while (iter < opt.max_iter) {
            pg_norm = (detail::project(prob.U(), u - g) - u).norm();
            if (pg_norm < opt.pg_tol) break;
            if (u_prev.size() > 0) {
                const Matrix s = u - u_prev;
                const Matrix y = g - g_prev;
                const double sy = (s.array() * y.array()).sum();
                if (sy > 0.0) t = std::clamp(s.squaredNorm() / sy, 1e-10, 1e10);
            }
            bool accepted = false;
            Matrix u_new;
            SequenceEvaluation ev_new;
            for (int bt = 0; bt < 60; ++bt) {
                u_new = detail::project(prob.U(), u - t * g);
                const Matrix d = u_new - u;
                const double decrease = (g.array() * d.array()).sum();
                try {
                    ev_new = evaluate_sequence(prob, x0, u_new);
                } catch (const DomainError&) {
                    t *= 0.5;
                    continue;
                }
                // Trial points far outside X are rejected outright: the penalty is only quadratic and
                // cannot bound a terminal cost of higher degree.
                if (ev_new.violation > std::max(ev.violation, gross_violation)) {
                    t *= 0.5;
                    continue;
                }
                if (objective(ev_new) <= J + opt.armijo * decrease) {
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            ++iter;
            if (!accepted) break;
            u_prev = std::move(u);
            g_prev = std::move(g);
            u = std::move(u_new);
            ev = std::move(ev_new);
            J = objective(ev);
            sol.objective_trace.push_back(J);
            sol.penalty_trace.push_back(penalty);
            g = detail::sequence_gradient(prob, ev, u, penalty);
        }
        pg_norm = (detail::project(prob.U(), u - g) - u).norm();
        if (ev.violation > opt.violation_tol && penalty < opt.penalty_max && iter < opt.max_iter) {
            penalty = std::min(opt.penalty_max, penalty * opt.penalty_growth);
            continue;
        }
        break;
    }

    sol.u_seq = std::move(u);
    sol.x_traj = std::move(ev.states);
    sol.value = ev.value;
    sol.first_input = sol.u_seq.row(0).transpose();
    sol.kkt_residual = pg_norm;
    sol.state_violation = ev.violation;
    sol.iterations = iter;
    sol.penalty = penalty;
    sol.soft_infeasible = ev.violation > opt.soft_infeasible_tol;
    return sol;
}

/// Input sequence of a policy rollout over the horizon, inputs clamped to U.
inline Matrix policy_sequence(const OcpProblem& prob, const Vector& x0, const Policy& policy)
{
    Matrix u(static_cast<Eigen::Index>(prob.N()), prob.sys().m());
    Vector x = x0;
    for (std::size_t k = 0; k < prob.N(); ++k) {
        const Vector uk = prob.U().clamp(policy(x));
        u.row(static_cast<Eigen::Index>(k)) = uk.transpose();
        x = step(prob.sys(), x, uk);
    }
    return u;
}

/// Shift-and-repeat warm start for the next receding-horizon step.
inline Matrix shift_warm_start(const Matrix& u_seq)
{
    Matrix w(u_seq.rows(), u_seq.cols());
    if (u_seq.rows() > 1) w.topRows(u_seq.rows() - 1) = u_seq.bottomRows(u_seq.rows() - 1);
    w.row(u_seq.rows() - 1) = u_seq.row(u_seq.rows() - 1);
    return w;
}

struct ClosedLoopResult {
    Trajectory trajectory;
    double J = 0.0;
    std::vector<double> V_N;    ///< optimal value at each visited state, length steps + 1
    std::vector<double> alpha;  ///< (V_N[k] - V_N[k+1]) / l_k, NaN where l_k <= delta
    std::vector<double> terminal_lstar;       ///< l*(x_traj[N]) of each solve that produced an input
    std::vector<bool> terminal_in_Xf;         ///< terminal_lstar <= X_f level, when a level was given
    std::vector<std::size_t> solver_iterations;
    std::size_t soft_infeasible_steps = 0;
};

struct RecedingHorizonOptions {
    double stop_tol = 1e-6;
    double delta_lstar = 1e-4;
    std::optional<double> xf_level;  ///< eps of X_f = {l* <= eps}
    /// Warm-start policy for the first solve; without one the first solve starts from u = 0.
    std::optional<Policy> initial_policy;
    OcpOptions ocp;
};

/**
 * @brief Closed loop under the first input of each solved problem.
 *
 * Stops after `steps` inputs or once |x| < stop_tol; the final state is also solved so that
 * every applied input has a decrease ratio.
 */
inline ClosedLoopResult receding_horizon(const OcpProblem& prob, const Vector& x0, std::size_t steps,
                                         const RecedingHorizonOptions& opt = {})
{
    if (!prob.X().contains(x0)) throw InfeasibleStart("receding_horizon: initial state outside the state box");
    ClosedLoopResult res;
    Trajectory& traj = res.trajectory;
    traj.states.push_back(x0);
    std::optional<Matrix> warm;
    if (opt.initial_policy) {
        try {
            warm = policy_sequence(prob, x0, *opt.initial_policy);
        } catch (const DomainError&) {
            warm.reset();
        }
    }
    Vector x = x0;
    auto solve_at = [&](const Vector& state, std::size_t k) {
        try {
            return solve_ocp(prob, state, warm, opt.ocp);
        } catch (const Error& e) {
            throw Error("receding_horizon: step " + std::to_string(k) + ": " + e.what());
        }
    };
    for (std::size_t k = 0; k < steps && x.norm() >= opt.stop_tol; ++k) {
        const OcpSolution sol = solve_at(x, k);
        res.V_N.push_back(sol.value);
        res.solver_iterations.push_back(sol.iterations);
        if (sol.soft_infeasible) ++res.soft_infeasible_steps;
        const double term = prob.cost().lstar(sol.x_traj.back());
        res.terminal_lstar.push_back(term);
        if (opt.xf_level) res.terminal_in_Xf.push_back(term <= *opt.xf_level);
        if (!traj.first_input_violation && !prob.U().contains(sol.first_input)) {
            traj.first_input_violation = k;
        }
        traj.stage_costs.push_back(prob.cost().l(x, sol.first_input));
        traj.inputs.push_back(sol.first_input);
        x = step(prob.sys(), x, sol.first_input);
        if (!traj.first_state_violation && !prob.X().contains(x)) traj.first_state_violation = k + 1;
        traj.states.push_back(x);
        warm = shift_warm_start(sol.u_seq);
        if (!prob.X().contains(x)) break;
    }
    if (prob.X().contains(x)) {
        res.V_N.push_back(solve_at(x, traj.steps()).value);
    } else {
        res.V_N.push_back(std::numeric_limits<double>::quiet_NaN());
    }
    res.J = traj.total_cost();
    res.alpha.resize(traj.steps(), std::numeric_limits<double>::quiet_NaN());
    for (std::size_t k = 0; k < traj.steps(); ++k) {
        if (traj.stage_costs[k] > opt.delta_lstar) res.alpha[k] = (res.V_N[k] - res.V_N[k + 1]) / traj.stage_costs[k];
    }
    return res;
}

struct RdpReport {
    bool pass = true;
    double min_alpha = std::numeric_limits<double>::infinity();
    std::size_t checked = 0;
    std::vector<std::size_t> violating_steps;
};

/// Checks alpha_k >= alpha_required - 1e-6 wherever the stage cost exceeds delta_lstar.
inline RdpReport rdp_check(const ClosedLoopResult& res, double alpha_required, double delta_lstar = 1e-4)
{
    RdpReport rep;
    for (std::size_t k = 0; k < res.alpha.size(); ++k) {
        if (!(res.trajectory.stage_costs[k] > delta_lstar)) continue;
        const double a = res.alpha[k];
        ++rep.checked;
        rep.min_alpha = std::min(rep.min_alpha, a);
        if (!(a >= alpha_required - 1e-6)) rep.violating_steps.push_back(k);
    }
    rep.pass = rep.violating_steps.empty();
    return rep;
}

struct DpConsistencyReport {
    double V_N = 0.0;
    double stage = 0.0;
    double V_N_minus_1 = 0.0;  ///< at f(x, kappa_N(x))
    double gap = 0.0;
    double tol = 0.0;
    bool pass = true;
};

/// |V_N(x) - l(x, kappa_N(x)) - V_{N-1}(f(x, kappa_N(x)))| <= tol, default 1e-4 (1 + V_N(x)).
inline DpConsistencyReport dp_consistency_check(const OcpProblem& prob, const Vector& x,
                                                std::optional<double> tol = std::nullopt, const OcpOptions& opt = {})
{
    DpConsistencyReport rep;
    const OcpSolution sol = solve_ocp(prob, x, std::nullopt, opt);
    rep.V_N = sol.value;
    rep.stage = prob.cost().l(x, sol.first_input);
    const Vector next = sol.x_traj[1];
    if (prob.N() == 1) {
        rep.V_N_minus_1 = prob.terminal().value(next);
    } else {
        const OcpProblem shorter = prob.with_horizon(prob.N() - 1);
        const Matrix warm = sol.u_seq.bottomRows(sol.u_seq.rows() - 1);
        rep.V_N_minus_1 = solve_ocp(shorter, next, warm, opt).value;
    }
    rep.gap = std::abs(rep.V_N - rep.stage - rep.V_N_minus_1);
    rep.tol = tol.value_or(1e-4 * (1.0 + rep.V_N));
    rep.pass = rep.gap <= rep.tol;
    return rep;
}

struct TerminalMembership {
    bool inside = false;
    double ratio = 0.0;  ///< l*(x_N) / eps
};

inline TerminalMembership terminal_membership(const OcpProblem& prob, const OcpSolution& sol, double xf_level)
{
    TerminalMembership tm;
    const double ls = prob.cost().lstar(sol.x_traj.back());
    tm.ratio = ls / xf_level;
    tm.inside = ls <= xf_level;
    return tm;
}

/// Value of the policy rollout (inputs clamped to U) as a feasible candidate upper bound on V_N(x0).
inline SequenceEvaluation candidate_value(const OcpProblem& prob, const Vector& x0, const Policy& policy)
{
    return evaluate_sequence(prob, x0, policy_sequence(prob, x0, policy));
}

}  // namespace adpmpc
