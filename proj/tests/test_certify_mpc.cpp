// Unit tests for the horizon certificates and the receding-horizon controller.
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "adpmpc/adpmpc.hpp"

using namespace adpmpc;

namespace {

Vector vec(std::initializer_list<double> v)
{
    Vector x(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double d : v) x[i++] = d;
    return x;
}

// Hand transcription of the strict horizon bound, independent of horizon_N1.
double N1_reference(double c, double beta, double gV, double g0, double eps)
{
    const double Np = std::ceil(std::max(0.0, (beta - gV * eps) / eps));
    const double rate = std::log(gV / (gV - 1));
    const double t2 = std::log(std::min(gV, beta / eps) / (1 - c));
    const double pen = (c * (1 - c) + 4 * c * g0) / ((1 - c) * (1 - c)) * gV;
    const double t3 = pen > 0 ? std::log(pen) : -INFINITY;
    return Np + std::max({0.0, t2, t3}) / rate;
}

// Backward Riccati recursion for the unconstrained finite-horizon LQ value x' P_N x.
Matrix riccati_recursion(const Matrix& A, const Matrix& B, const Matrix& Q, const Matrix& R, Matrix P, int N)
{
    for (int k = 0; k < N; ++k) {
        const Matrix S = R + B.transpose() * P * B;
        P = Q + A.transpose() * P * A - A.transpose() * P * B * S.ldlt().solve(B.transpose() * P * A);
    }
    return P;
}

ControllabilityFit fit_input(double C, double sigma)
{
    ControllabilityFit f;
    f.C = C;
    f.sigma = sigma;
    f.M = 10;
    return f;
}

}  // namespace

// ---------------------------------------------------------------------------
// certificates
// ---------------------------------------------------------------------------

TEST(Horizon, HandComputedCase)
{
    // gamma_V = 4, gamma_0 = 1, c = 0.1, beta/eps = 10.
    const auto h = horizon_N1(0.1, 10.0, 4.0, 1.0, 1.0);
    EXPECT_EQ(h.N_prime, 6.0);
    EXPECT_NEAR(h.N1 - h.N_prime, 5.185, 1e-3);
    EXPECT_NEAR(h.N1, N1_reference(0.1, 10.0, 4.0, 1.0, 1.0), 1e-12);
}

TEST(Horizon, MatchesReferenceOverParameterGrid)
{
    for (double c : {0.0, 0.01, 0.2, 0.6, 0.95})
        for (double gV : {1.5, 4.0, 300.0})
            for (double ratio : {0.5, 2.0, 50.0}) {
                const double eps = 0.3;
                const auto h = horizon_N1(c, ratio * eps, gV, 2.0, eps);
                EXPECT_NEAR(h.N1, N1_reference(c, ratio * eps, gV, 2.0, eps), 1e-12 * std::max(1.0, h.N1));
            }
}

TEST(Horizon, ZeroErrorIdentities)
{
    const auto h = horizon_N1(0.0, 10.0, 4.0, 1.0, 1.0);
    EXPECT_EQ(h.term_decay, -std::numeric_limits<double>::infinity());
    EXPECT_NEAR(h.N1, h.N_prime_bar, 1e-12);
    EXPECT_EQ(error_penalty(0.0, 7.0), 0.0);
    for (double N : {6.0, 7.0, 30.0}) EXPECT_EQ(alpha1(N, 0.0, 4.0, 1.0, h.N_prime), 1.0);
}

TEST(Horizon, N1MonotoneInErrorMargin)
{
    double prev = -1.0;
    for (int i = 0; i < 20; ++i) {
        const double c = 0.04 * i + 0.001;
        const double N1 = horizon_N1(c, 2.0, 6.0, 1.5, 0.5).N1;
        EXPECT_GE(N1, prev - 1e-12);
        prev = N1;
    }
}

TEST(Horizon, Alpha1SignChangeBracketsN1)
{
    const double c = 0.3, g0 = 2.0, gV = 10.0, eps = 1.0, beta = 1.0;
    const auto h = horizon_N1(c, beta, gV, g0, eps);
    ASSERT_GT(h.term_decay, h.term_terminal);
    const double below = std::floor(h.N1);
    EXPECT_LE(alpha1(below, c, gV, g0, h.N_prime), 1e-12);
    EXPECT_GT(alpha1(below + 1, c, gV, g0, h.N_prime), 0.0);
    EXPECT_NEAR(alpha1(h.N1, c, gV, g0, h.N_prime), 0.0, 1e-12);
}

TEST(Horizon, Alpha2AtNdprime)
{
    const double g0 = 3.0;
    const auto h2 = horizon_N2(20.0, 5.0, g0, 1.0, 0.0);
    EXPECT_EQ(h2.N_dprime, 15.0);
    EXPECT_NEAR(alpha2(h2.N_dprime, g0, 5.0, h2.N_dprime), 1 + 2 * g0, 1e-12);
    EXPECT_GT(alpha2(h2.N_dprime, g0, 5.0, h2.N_dprime), alpha2(h2.N_dprime + 10, g0, 5.0, h2.N_dprime));
    EXPECT_NEAR(h2.N_dprime_bar, 15.0 + std::log(5.0) / std::log(5.0 / 4.0), 1e-12);
}

TEST(Horizon, LiteralAndBetaVariantsDiffer)
{
    const auto b = horizon_N2(20.0, 5.0, 1.0, 1.0, 0.0, N2Variant::beta);
    const auto l = horizon_N2(20.0, 5.0, 1.0, 1.0, 0.0, N2Variant::literal_c, 0.2);
    EXPECT_EQ(b.N_dprime, 15.0);
    EXPECT_EQ(l.N_dprime, 0.0);
}

TEST(Horizon, DomainChecks)
{
    EXPECT_THROW(horizon_N1(1.0, 1, 4, 1, 1), InvalidArgument);
    EXPECT_THROW(horizon_N1(0.1, 1, 1.0, 1, 1), DomainError);
    EXPECT_THROW(alpha1(2.0, 0.1, 4, 1, 3.0), InvalidArgument);
    EXPECT_THROW(gamma_V(0.5, 0.5, 1), InvalidArgument);
    EXPECT_NEAR(gamma_V(2.0, 0.5, 1.5), 2.0 * (2.0 + 3.0), 1e-15);
    EXPECT_NEAR(gamma_inf(2.0, 0.75), 8.0, 1e-15);
}

TEST(TerminalSet, LevelSetTouchesOmega)
{
    Matrix Q(2, 2);
    Q << 2, 0.6, 0.6, 1;
    const StageCost cost(Q, Matrix::Identity(1, 1));
    const BoxSet omega(vec({-0.3, -0.5}), vec({0.4, 0.2}));
    const double g0 = 2.5;
    const double d = terminal_set_d(cost, g0, omega);
    const double r = d / (2 * g0);
    const Matrix Qi = Q.inverse();
    // The maximizer of |x_j| on {x'Qx <= r} is sqrt(r / Qi_jj) Qi e_j.
    double worst_ratio = 0.0;
    for (Eigen::Index j = 0; j < 2; ++j) {
        const Vector xs = std::sqrt(r / Qi(j, j)) * Qi.col(j);
        EXPECT_NEAR(cost.lstar(xs), r, 1e-12);
        const double lim = std::min(-omega.lower()[j], omega.upper()[j]);
        worst_ratio = std::max(worst_ratio, std::abs(xs[j]) / lim);
    }
    EXPECT_NEAR(worst_ratio, 1.0, 1e-12);
}

TEST(Controllability, RecoversExactGeometricEnvelope)
{
    std::vector<double> env;
    for (int k = 0; k <= 30; ++k) env.push_back(std::pow(0.5, k));
    const HorizonContext ctx{0.1, 1.0, 1.0, 1.0};
    const auto fit = controllability_from_envelope(env, make_grid(0.01, 0.999, 0.001), ctx);
    EXPECT_NEAR(fit.C, 1.0, 1e-9);
    EXPECT_NEAR(fit.sigma, 0.5, 0.001 + 1e-12);
    for (std::size_t k = 0; k < env.size(); ++k) EXPECT_GE(fit.C * std::pow(fit.sigma, double(k)), env[k]);
}

TEST(Controllability, EnvelopeAlwaysCovered)
{
    std::mt19937_64 rng(17);
    std::uniform_real_distribution<double> d(0.2, 1.2);
    std::vector<double> env{1.0};
    for (int k = 1; k <= 40; ++k) env.push_back(env.back() * 0.9 * d(rng));
    const auto fit = controllability_from_envelope(env, default_sigma_grid(), HorizonContext{0.2, 3.0, 5.0, 10.0});
    for (std::size_t k = 0; k < env.size(); ++k) EXPECT_GE(fit.C * std::pow(fit.sigma, double(k)), env[k]);
    EXPECT_GE(fit.C, 1.0);
}

TEST(Bundle, RefusesMarginAtOrAboveOne)
{
    const StageCost cost(Matrix::Identity(1, 1), Matrix::Identity(1, 1));
    EXPECT_THROW(build_bundle(1.0, 2.0, fit_input(2, 0.5), cost, BoxSet::symmetric(1, 1), 1.0), CertificationError);
}

TEST(Bundle, ZeroMarginGivesUnitAlpha1)
{
    const StageCost cost(Matrix::Identity(1, 1), Matrix::Identity(1, 1));
    const auto b = build_bundle(0.0, 2.0, fit_input(2, 0.5), cost, BoxSet::symmetric(1, 1), 3.0, 8.0);
    ASSERT_TRUE(b.alpha1_user.has_value());
    EXPECT_EQ(*b.alpha1_user, 1.0);
    EXPECT_NEAR(b.d, 4.0, 1e-15);
    EXPECT_NEAR(b.eps, 4.0 / (2 * 2.0 * 2.0), 1e-15);
    EXPECT_NEAR(b.gamma_V, 2 * (2 + 4), 1e-14);
    EXPECT_EQ(b.N_min, std::max(std::floor(b.n1.N1) + 1, std::ceil(b.n2.N2)));
    EXPECT_NEAR(performance_bound(b, 2.0, 8.0), 2.0, 1e-15);
}

TEST(Bundle, PerformanceBoundRejectsNonPositiveAlpha)
{
    const StageCost cost(Matrix::Identity(1, 1), Matrix::Identity(1, 1));
    const auto b = build_bundle(0.5, 5.0, fit_input(3, 0.9), cost, BoxSet::symmetric(1, 1), 1.0);
    EXPECT_LE(b.alpha1_at(b.n1.N_prime), 0.0);
    EXPECT_THROW(performance_bound(b, 1.0, b.n1.N_prime), BoundInvalid);
}

// ---------------------------------------------------------------------------
// mpc
// ---------------------------------------------------------------------------

namespace {

struct LqFixture {
    Matrix A, B;
    StageCost cost;
    ControlAffineSystem sys;
    Matrix Pf;
    LqFixture()
    {
        A.resize(3, 3);
        B.resize(3, 2);
        A << 1.0, 0.1, 0.0, 0.0, 1.0, 0.1, 0.05, 0.0, 0.98;
        B << 0.0, 0.0, 0.1, 0.0, 0.0, 0.1;
        cost = StageCost(Matrix(vec({1.0, 2.0, 0.5}).asDiagonal()), Matrix::Identity(2, 2) * 0.3);
        sys = linear_system(A, B);
        Pf = Matrix::Identity(3, 3) * 4.0;
    }
    OcpProblem problem(std::size_t N, double xbox = 100.0, double ubox = 100.0) const
    {
        return OcpProblem(sys, cost, ValueApproximant::from_quadratic(MonomialBasis(3, {2}), Pf), N,
                          BoxSet::symmetric(3, xbox), BoxSet::symmetric(2, ubox));
    }
};

}  // namespace

TEST(Ocp, MatchesRiccatiRecursion)
{
    const LqFixture f;
    for (int N : {1, 3, 8}) {
        const auto prob = f.problem(static_cast<std::size_t>(N));
        const Vector x0 = vec({0.5, -0.4, 0.3});
        const auto sol = solve_ocp(prob, x0);
        const Matrix PN = riccati_recursion(f.A, f.B, f.cost.Q(), f.cost.R(), f.Pf, N);
        const double ref = x0.dot(PN * x0);
        EXPECT_NEAR(sol.value, ref, 1e-6 * ref) << "N = " << N;
        EXPECT_LT(sol.kkt_residual, 1e-6);
    }
}

TEST(Ocp, AdjointGradientMatchesFiniteDifferences)
{
    const auto sys = rendezvous_system();
    const auto cost = rendezvous_cost();
    const auto lqr = lqr_at_origin(sys, cost);
    const MonomialBasis b(4, {2, 3});
    Vector w = ValueApproximant::from_quadratic(b, lqr.P).weights();
    w.tail(20).setConstant(0.3);
    const OcpProblem prob(sys, cost, ValueApproximant(b, w), 6, BoxSet::symmetric(4, 0.5), BoxSet::symmetric(2, 2));
    const Vector x0 = vec({0.3, -0.2, 0.1, 0.05});
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> d(-2, 2);
    Matrix u(6, 2);
    for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = d(rng);
    const double penalty = 50.0;
    const auto ev = evaluate_sequence(prob, x0, u);
    const Matrix g = detail::sequence_gradient(prob, ev, u, penalty);
    for (Eigen::Index i = 0; i < u.size(); ++i) {
        const double h = 1e-6;
        Matrix up = u, um = u;
        up.data()[i] += h;
        um.data()[i] -= h;
        const auto ep = evaluate_sequence(prob, x0, up);
        const auto em = evaluate_sequence(prob, x0, um);
        const double fd = ((ep.value + penalty * ep.penalty_term) - (em.value + penalty * em.penalty_term)) / (2 * h);
        EXPECT_NEAR(g.data()[i], fd, 1e-5 * std::max(1.0, std::abs(fd)));
    }
}

TEST(Ocp, RespectsInputBoxAndStatePenalty)
{
    const LqFixture f;
    const auto prob = f.problem(10, 0.6, 0.5);
    const auto sol = solve_ocp(prob, vec({0.1, 0.0, 0.5}));
    EXPECT_LE(sol.u_seq.cwiseAbs().maxCoeff(), 0.5);
    EXPECT_LT(sol.state_violation, 1e-4);
    EXPECT_FALSE(sol.soft_infeasible);
    EXPECT_EQ(sol.x_traj.size(), 11u);
}

TEST(Ocp, FlagsSoftInfeasibility)
{
    // x1 grows by 0.1 x2 per step and x2 cannot be driven down fast enough with |u| <= 0.5.
    const LqFixture f;
    const auto sol = solve_ocp(f.problem(10, 0.6, 0.5), vec({0.5, 0.5, 0.5}));
    EXPECT_GT(sol.state_violation, 1e-4);
    EXPECT_TRUE(sol.soft_infeasible);
    EXPECT_EQ(sol.penalty, 1e6);
    EXPECT_LE(sol.u_seq.cwiseAbs().maxCoeff(), 0.5);
}

TEST(Ocp, RejectsInvalidProblems)
{
    const LqFixture f;
    EXPECT_THROW(solve_ocp(f.problem(5, 1.0), vec({2.0, 0.0, 0.0})), InfeasibleStart);
    Vector w = Vector::Zero(6);
    w[0] = -1.0;
    EXPECT_THROW(OcpProblem(f.sys, f.cost, ValueApproximant(MonomialBasis(3, {2}), w), 5, BoxSet::symmetric(3, 1),
                            BoxSet::symmetric(2, 1)),
                 InvalidArgument);
    EXPECT_THROW(f.problem(0), InvalidArgument);
}

TEST(Ocp, DeterministicReplay)
{
    const LqFixture f;
    const auto prob = f.problem(6, 0.7, 0.4);
    const auto a = solve_ocp(prob, vec({0.4, -0.3, 0.6}));
    const auto b = solve_ocp(prob, vec({0.4, -0.3, 0.6}));
    EXPECT_EQ(a.value, b.value);
    EXPECT_EQ(a.iterations, b.iterations);
    EXPECT_TRUE((a.u_seq.array() == b.u_seq.array()).all());
}

TEST(RecedingHorizon, OriginStopsImmediately)
{
    const LqFixture f;
    const auto res = receding_horizon(f.problem(5), Vector::Zero(3), 100);
    EXPECT_EQ(res.trajectory.steps(), 0u);
    EXPECT_EQ(res.J, 0.0);
    ASSERT_EQ(res.V_N.size(), 1u);
    EXPECT_NEAR(res.V_N[0], 0.0, 1e-15);
}

TEST(RecedingHorizon, LinearClosedLoopDecreases)
{
    const LqFixture f;
    const auto res = receding_horizon(f.problem(8, 1.0, 1.0), vec({0.5, -0.4, 0.3}), 400);
    EXPECT_LT(res.trajectory.states.back().norm(), 1e-5);
    EXPECT_EQ(res.V_N.size(), res.trajectory.steps() + 1);
    const auto rdp = rdp_check(res, 0.0);
    EXPECT_TRUE(rdp.pass);
    EXPECT_GT(rdp.checked, 0u);
    // Replayed trajectory matches the recorded inputs exactly.
    Vector x = res.trajectory.states.front();
    for (std::size_t k = 0; k < res.trajectory.steps(); ++k) {
        x = step(f.sys, x, res.trajectory.inputs[k]);
        EXPECT_TRUE((x.array() == res.trajectory.states[k + 1].array()).all());
    }
}

TEST(RecedingHorizon, DpConsistency)
{
    const LqFixture f;
    const auto rep = dp_consistency_check(f.problem(6), vec({0.3, 0.2, -0.5}));
    EXPECT_TRUE(rep.pass) << rep.gap;
}

TEST(RecedingHorizon, RdpCheckFlagsSteps)
{
    ClosedLoopResult r;
    r.trajectory.stage_costs = {1.0, 1.0, 1e-6, 1.0};
    r.alpha = {0.9, 0.2, std::numeric_limits<double>::quiet_NaN(), 0.6};
    const auto rep = rdp_check(r, 0.5);
    EXPECT_FALSE(rep.pass);
    EXPECT_EQ(rep.violating_steps, std::vector<std::size_t>{1});
    EXPECT_EQ(rep.checked, 3u);
    EXPECT_DOUBLE_EQ(rep.min_alpha, 0.2);
}

TEST(RecedingHorizon, TerminalMembershipRatio)
{
    const LqFixture f;
    const auto prob = f.problem(2, 1.0, 0.05);
    const auto sol = solve_ocp(prob, vec({0.9, 0.9, 0.9}));
    const auto tm = terminal_membership(prob, sol, 1e-3);
    EXPECT_FALSE(tm.inside);
    EXPECT_GT(tm.ratio, 1.0);
    EXPECT_NEAR(tm.ratio, f.cost.lstar(sol.x_traj.back()) / 1e-3, 1e-9);
}
