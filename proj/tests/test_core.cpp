// Unit tests for dynamics, approximators and value iteration.
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

// Straight transcription of the rendezvous model, kept independent of the library.
Vector rendezvous_reference(const Vector& x, const Vector& u, double dt)
{
    const double X = x[0], Y = x[1], Xt = x[2], Yt = x[3];
    const double r = std::sqrt((1 + X) * (1 + X) + Y * Y);
    const double k = 1 / (r * r * r) - 1;
    Vector y(4);
    y[0] = X + dt * Xt;
    y[1] = Y + dt * Yt;
    y[2] = Xt + dt * (2 * Yt - (1 + X) * k + u[0]);
    y[3] = Yt + dt * (-2 * Xt - Y * k + u[1]);
    return y;
}

// Solves P = Q + A_cl' P A_cl by vectorization: (I - A_cl' (x) A_cl') vec(P) = vec(Q).
Matrix lyapunov_kron(const Matrix& Acl, const Matrix& Qcl)
{
    const Eigen::Index n = Acl.rows();
    Matrix K(n * n, n * n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) K.block(i * n, j * n, n, n) = Acl(j, i) * Acl.transpose();
    const Matrix I = Matrix::Identity(n * n, n * n);
    const Vector q = Eigen::Map<const Vector>(Qcl.data(), n * n);
    const Vector p = (I - K).fullPivLu().solve(q);
    return Eigen::Map<const Matrix>(p.data(), n, n);
}

std::uint64_t binom(int n, int k)
{
    std::uint64_t r = 1;
    for (int i = 1; i <= k; ++i) r = r * static_cast<std::uint64_t>(n - k + i) / static_cast<std::uint64_t>(i);
    return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// system
// ---------------------------------------------------------------------------

TEST(BoxSet, RejectsOriginOnBoundary)
{
    EXPECT_THROW(BoxSet(vec({0.0, -1.0}), vec({1.0, 1.0})), InvalidArgument);
    EXPECT_THROW(BoxSet(vec({-1.0}), vec({1.0, 1.0})), InvalidArgument);
    EXPECT_NO_THROW(BoxSet(vec({-1e-9}), vec({1e-9})));
}

TEST(BoxSet, ContainsClampExcess)
{
    const BoxSet b(vec({-1.0, -2.0}), vec({0.5, 3.0}));
    EXPECT_TRUE(b.contains(vec({0.5, -2.0})));
    EXPECT_FALSE(b.contains(vec({0.6, 0.0})));
    EXPECT_DOUBLE_EQ(b.excess(vec({0.75, -2.5})), 0.5);
    EXPECT_TRUE(b.clamp(vec({2.0, -9.0})).isApprox(vec({0.5, -2.0})));
    EXPECT_TRUE(b.excess_vector(vec({1.0, -2.5})).isApprox(vec({0.5, -0.5})));
    EXPECT_TRUE(BoxSet::symmetric(2, 0.4).subset_of(BoxSet::symmetric(2, 0.5)));
    EXPECT_FALSE(BoxSet::symmetric(2, 0.6).subset_of(BoxSet::symmetric(2, 0.5)));
}

TEST(StageCost, ValidatesWeights)
{
    Matrix Q(2, 2);
    Q << 1, 2, 2, 1;  // indefinite
    EXPECT_THROW(StageCost(Q, Matrix::Identity(1, 1)), InvalidArgument);
    Matrix A(2, 2);
    A << 2, 0.5, 0.4, 2;
    EXPECT_THROW(StageCost(A, Matrix::Identity(1, 1)), InvalidArgument);
    const StageCost c(Matrix(vec({2.0, 3.0}).asDiagonal()), Matrix::Identity(1, 1) * 4.0);
    EXPECT_DOUBLE_EQ(c.l(vec({1.0, -1.0}), vec({0.5})), 2 + 3 + 1);
    EXPECT_DOUBLE_EQ(c.lstar(vec({1.0, 1.0})), 5.0);
    EXPECT_DOUBLE_EQ(c.alpha_lower(2.0), 8.0);
    EXPECT_DOUBLE_EQ(c.alpha_upper(2.0), 12.0);
}

TEST(System, DriftMustVanishAtOrigin)
{
    auto f = [](const Vector& x) -> Vector { return x + Vector::Ones(1); };
    auto g = [](const Vector&) -> Matrix { return Matrix::Ones(1, 1); };
    EXPECT_THROW(ControlAffineSystem(1, 1, f, g), InvalidArgument);
}

TEST(System, RendezvousMatchesReferenceModel)
{
    const auto sys = rendezvous_system(0.05);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> d(-0.5, 0.5), du(-2, 2);
    for (int s = 0; s < 200; ++s) {
        const Vector x = vec({d(rng), d(rng), d(rng), d(rng)});
        const Vector u = vec({du(rng), du(rng)});
        const Vector ref = rendezvous_reference(x, u, 0.05);
        EXPECT_LT((step(sys, x, u) - ref).cwiseAbs().maxCoeff(), 1e-15);
    }
    EXPECT_TRUE(step(sys, Vector::Zero(4), Vector::Zero(2)).isZero(0.0));
}

TEST(System, RendezvousSingularRadius)
{
    const auto sys = rendezvous_system();
    EXPECT_THROW(step(sys, vec({-1.0, 0.0, 0.0, 0.0}), Vector::Zero(2)), DomainError);
}

TEST(System, LinearizationMatchesAnalyticJacobians)
{
    Matrix A(2, 2), B(2, 1);
    A << 1.1, 0.3, -0.2, 0.9;
    B << 0.0, 1.0;
    const auto lin = linearize(linear_system(A, B), vec({0.3, -0.1}), vec({0.2}));
    EXPECT_LT((lin.A - A).norm(), 1e-9);
    EXPECT_LT((lin.B - B).norm(), 1e-9);

    const auto toy = toy1d_system(0.8, 0.2, 1.5);
    const double x = 0.7;
    const auto lt = linearize(toy, vec({x}), vec({0.1}));
    EXPECT_NEAR(lt.A(0, 0), 0.8 + 3 * 0.2 * x * x, 1e-8);
    EXPECT_NEAR(lt.B(0, 0), 1.5, 1e-9);
}

TEST(System, RolloutReportsViolationsWithoutThrowing)
{
    const auto toy = toy1d_system(1.5, 0.0, 1.0);
    const StageCost cost(Matrix::Identity(1, 1), Matrix::Identity(1, 1));
    const Policy zero = [](const Vector&) { return Vector(Vector::Zero(1)); };
    const auto tr = rollout(toy, cost, zero, vec({0.5}), 5, BoxSet::symmetric(1, 1.0), BoxSet::symmetric(1, 1.0));
    ASSERT_EQ(tr.steps(), 5u);
    ASSERT_TRUE(tr.first_state_violation.has_value());
    EXPECT_EQ(*tr.first_state_violation, 2u);  // 0.75, 1.125
    EXPECT_FALSE(tr.first_input_violation.has_value());
    EXPECT_DOUBLE_EQ(tr.stage_costs[0], 0.25);
}

// ---------------------------------------------------------------------------
// approximator
// ---------------------------------------------------------------------------

TEST(MonomialBasis, SizeMatchesBinomialCount)
{
    for (int n = 1; n <= 5; ++n) {
        const MonomialBasis b(n, {2, 3});
        EXPECT_EQ(static_cast<std::uint64_t>(b.size()), binom(n + 1, 2) + binom(n + 2, 3));
    }
    EXPECT_EQ(MonomialBasis(4, {2, 3}).size(), 30);
    EXPECT_THROW(MonomialBasis(2, {1, 2}), InvalidArgument);
}

TEST(MonomialBasis, GradedLexOrder)
{
    const MonomialBasis b(2, {3, 2});
    const std::vector<Exponent> expect{{2, 0}, {1, 1}, {0, 2}, {3, 0}, {2, 1}, {1, 2}, {0, 3}};
    EXPECT_EQ(b.exponents(), expect);
    EXPECT_EQ(b.index_of({1, 2}).value(), 5);
    EXPECT_FALSE(b.index_of({1, 0}).has_value());
}

TEST(MonomialBasis, EvalAndFiniteDifferenceJacobian)
{
    const MonomialBasis b(3, {2, 3, 4});
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> d(-1, 1);
    for (int t = 0; t < 20; ++t) {
        const Vector x = vec({d(rng), d(rng), d(rng)});
        const Vector phi = b.eval(x);
        for (Eigen::Index i = 0; i < b.size(); ++i) {
            const auto& e = b.exponents()[static_cast<std::size_t>(i)];
            EXPECT_NEAR(phi[i], std::pow(x[0], e[0]) * std::pow(x[1], e[1]) * std::pow(x[2], e[2]), 1e-14);
        }
        const Matrix J = b.jacobian(x);
        for (Eigen::Index k = 0; k < 3; ++k) {
            const double h = 1e-6;
            Vector xp = x, xm = x;
            xp[k] += h;
            xm[k] -= h;
            const Vector fd = (b.eval(xp) - b.eval(xm)) / (2 * h);
            EXPECT_LT((J.col(k) - fd).cwiseAbs().maxCoeff(), 1e-8);
        }
    }
}

TEST(ValueApproximant, QuadraticRoundTrip)
{
    Matrix P(3, 3);
    P << 4, 1, -0.5, 1, 3, 0.2, -0.5, 0.2, 2;
    const MonomialBasis b(3, {2, 3});
    const auto V = ValueApproximant::from_quadratic(b, P);
    const Vector x = vec({0.3, -0.7, 0.1});
    EXPECT_NEAR(V.value(x), x.dot(P * x), 1e-14);
    EXPECT_LT((V.gradient(x) - 2 * P * x).norm(), 1e-13);
    ASSERT_TRUE(V.quadratic_part().has_value());
    EXPECT_LT((*V.quadratic_part() - P).norm(), 1e-14);
    Vector w = V.weights();
    w[b.size() - 1] = 0.1;
    EXPECT_FALSE(ValueApproximant(b, w).quadratic_part().has_value());
}

TEST(LeastSquares, MatchesNormalEquations)
{
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g;
    Matrix A(60, 7);
    Vector y(60);
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
        for (Eigen::Index j = 0; j < A.cols(); ++j) A(i, j) = g(rng);
        y[i] = g(rng);
    }
    const Vector ref = (A.transpose() * A).ldlt().solve(A.transpose() * y);
    const auto fit = lstsq_fit(A, y);
    EXPECT_LT((fit.w - ref).norm() / ref.norm(), 1e-10);
    EXPECT_FALSE(fit.report.underdetermined);
    EXPECT_EQ(fit.report.regularization_used, 0.0);

    const double lam = 0.3;
    const Vector ridge_ref =
        (A.transpose() * A + lam * Matrix::Identity(7, 7)).ldlt().solve(A.transpose() * y);
    EXPECT_LT((lstsq_fit(A, y, lam).w - ridge_ref).norm() / ridge_ref.norm(), 1e-10);
}

TEST(LeastSquares, RankDeficientUsesRidgeFloor)
{
    Matrix A(10, 3);
    A.col(0) = Vector::LinSpaced(10, 0, 1);
    A.col(1) = 2 * A.col(0);
    A.col(2) = Vector::Ones(10);
    const Vector y = A.col(0) + Vector::Ones(10);
    const auto fit = lstsq_fit(A, y);
    EXPECT_FALSE(fit.report.underdetermined);  // more rows than columns, but rank 2
    EXPECT_EQ(fit.report.rank, 2);
    EXPECT_EQ(fit.report.regularization_used, kRidgeFloor);
    EXPECT_LT((A * fit.w - y).norm(), 1e-6);
}

TEST(PolicyApproximant, RecoversLinearPolicy)
{
    Matrix K(2, 3);
    K << 1, -2, 0.5, 0.3, 0.1, -1;
    std::vector<Vector> xs, us;
    for (const Vector& x : sample_box(BoxSet::symmetric(3, 1.0), 40, 9)) {
        xs.push_back(x);
        us.push_back(-K * x);
    }
    const auto pf = fit_policy(xs, us);
    EXPECT_LT(pf.report.residual_max, 1e-10);
    const Vector x = vec({0.2, 0.4, -0.6});
    EXPECT_LT((pf.policy(x) + K * x).norm(), 1e-10);
}

// ---------------------------------------------------------------------------
// value iteration
// ---------------------------------------------------------------------------

TEST(Dare, SolutionSatisfiesClosedLoopLyapunov)
{
    Matrix A(3, 3), B(3, 1);
    A << 1.2, 0.5, 0, 0, 0.9, 0.3, 0.1, 0, 1.05;
    B << 0, 0, 1;
    const Matrix Q = Matrix::Identity(3, 3);
    const Matrix R = Matrix::Identity(1, 1) * 0.5;
    const auto s = dare_solve(A, B, Q, R);
    EXPECT_LT(s.spectral_radius, 1.0);
    const Matrix Acl = A - B * s.K;
    const Matrix P_lyap = lyapunov_kron(Acl, Q + s.K.transpose() * R * s.K);
    EXPECT_LT((P_lyap - s.P).norm() / s.P.norm(), 1e-9);
    const Matrix K_ref = (R + B.transpose() * s.P * B).ldlt().solve(B.transpose() * s.P * A);
    EXPECT_LT((K_ref - s.K).norm(), 1e-9);
}

TEST(Dare, UncontrollableUnstableModeThrows)
{
    Matrix A(2, 2), B(2, 1);
    A << 1.5, 0, 0, 0.5;
    B << 0, 1;
    EXPECT_THROW(dare_solve(A, B, Matrix::Identity(2, 2), Matrix::Identity(1, 1)), NotStabilizable);
}

TEST(Greedy, QuadraticValueGivesClosedForm)
{
    Matrix A(2, 2), B(2, 1), P(2, 2);
    A << 1, 0.1, 0, 1;
    B << 0, 0.1;
    P << 3, 0.5, 0.5, 2;
    const auto sys = linear_system(A, B);
    const StageCost cost(Matrix::Identity(2, 2), Matrix::Identity(1, 1));
    const auto V = ValueApproximant::from_quadratic(MonomialBasis(2, {2}), P);
    const Vector x = vec({0.4, -0.3});
    const auto res = greedy_policy_solve(V, sys, cost, x, BoxSet::symmetric(1, 5));
    const Vector u_ref = -(cost.R() + B.transpose() * P * B).ldlt().solve(B.transpose() * P * A * x);
    EXPECT_LT((res.u - u_ref).norm(), 1e-9);
    EXPECT_FALSE(res.used_fallback);
}

TEST(Greedy, NotWorseThanGridOnRendezvous)
{
    const auto sys = rendezvous_system();
    const auto cost = rendezvous_cost();
    const auto lqr = lqr_at_origin(sys, cost);
    const MonomialBasis b(4, {2, 3});
    Vector w = ValueApproximant::from_quadratic(b, lqr.P).weights();
    w.tail(20).setConstant(0.5);
    const ValueApproximant V(b, w);
    const BoxSet U = BoxSet::symmetric(2, 2.0);
    for (const Vector& x : sample_box(BoxSet::symmetric(4, 0.2), 10, 21)) {
        const auto res = greedy_policy_solve(V, sys, cost, x, U);
        double best = std::numeric_limits<double>::infinity();
        for_each_grid_point(BoxSet::symmetric(2, 10.0), 81,
                            [&](const Vector& u) { best = std::min(best, cost.l(x, u) + V.value(step(sys, x, u))); });
        EXPECT_LE(res.objective, best + 1e-9);
    }
}

TEST(Margin, ExclusionAndRatio)
{
    const StageCost cost(Matrix::Identity(1, 1), Matrix::Identity(1, 1));
    const std::vector<Vector> xs{vec({0.001}), vec({0.5}), vec({1.0})};
    const auto m = residual_margin({0.5, -0.05, 0.3}, xs, cost, 1e-4);
    EXPECT_EQ(m.excluded, 1u);
    EXPECT_DOUBLE_EQ(m.sup_abs, 0.5);
    EXPECT_DOUBLE_EQ(m.c, 0.3);
    EXPECT_THROW(residual_margin({0.1}, {vec({0.001})}, cost, 1e-4), ConfigError);
}

TEST(Margin, StabilityMarginBound)
{
    EXPECT_NEAR(stability_margin_bound(1.0), 3.0 - std::sqrt(8.0), 1e-15);
    // The bound decreases in gamma_0 towards zero.
    EXPECT_GT(stability_margin_bound(1.0), stability_margin_bound(10.0));
    EXPECT_TRUE(stability_margin_check(0.1, 1.0));
    EXPECT_FALSE(stability_margin_check(0.2, 1.0));
}

TEST(Margin, Gamma0ForQuadraticInitialCost)
{
    const StageCost cost(Matrix(vec({1.0, 4.0}).asDiagonal()), Matrix::Identity(1, 1));
    Matrix P(2, 2);
    P << 3, 0, 0, 4;  // P Q^-1 eigenvalues 3 and 1
    const auto V0 = ValueApproximant::from_quadratic(MonomialBasis(2, {2}), P);
    EXPECT_NEAR(gamma0_estimate(V0, cost, 0.25, {}, 1e-4), 3.0 / 0.75, 1e-12);
}

TEST(AviConfig, Validation)
{
    AviConfig cfg;
    cfg.omega = BoxSet::symmetric(2, 0.6);
    EXPECT_THROW(cfg.validate(BoxSet::symmetric(2, 0.5), 3), ConfigError);
    cfg.omega = BoxSet::symmetric(2, 0.2);
    cfg.p = 2;
    EXPECT_THROW(cfg.validate(BoxSet::symmetric(2, 0.5), 3), ConfigError);
}

TEST(Avi, LinearQuadraticConvergesToDare)
{
    Matrix A(2, 2), B(2, 1);
    A << 1, 0.2, -0.1, 1.05;
    B << 0, 0.2;
    const auto sys = linear_system(A, B);
    const StageCost cost(Matrix::Identity(2, 2), Matrix::Identity(1, 1));
    const auto opt = dare_solve(A, B, cost.Q(), cost.R());
    const auto init = dare_solve(A, B, cost.Q(), 5.0 * cost.R());  // suboptimal, stabilizing
    AviConfig cfg;
    cfg.omega = BoxSet::symmetric(2, 0.5);
    cfg.p = 50;
    cfg.p_test = 100;
    cfg.max_iter = 500;
    cfg.w_tol = 1e-12;
    cfg.init = InitMode::fit;
    const MonomialBasis b(2, {2});
    const auto run = run_avi(cfg, b, sys, cost, linear_policy(init.K), init.P, BoxSet::symmetric(2, 1.0),
                             BoxSet::symmetric(1, 100.0));
    EXPECT_LT(run.c, 1e-6);
    ASSERT_TRUE(run.gamma0.has_value());
    const Matrix P = *run.final_value().quadratic_part();
    EXPECT_LT((P - opt.P).cwiseAbs().maxCoeff() / opt.P.cwiseAbs().maxCoeff(), 1e-6);
    const auto t1 = theorem1_bounds_check(run, cost, run.test);
    EXPECT_TRUE(t1.violations.empty());
    EXPECT_EQ(t1.checks, run.weights.size() * run.test.size());
}

TEST(Avi, InputConstraintCheckCountsViolations)
{
    const Policy big = [](const Vector& x) { return Vector(10.0 * x); };
    const auto rep = input_constraint_check(big, BoxSet::symmetric(1, 1.0), {vec({0.05}), vec({0.2}), vec({-0.3})});
    EXPECT_FALSE(rep.pass);
    EXPECT_EQ(rep.violations, 2u);
    EXPECT_NEAR(rep.worst_excess, 2.0, 1e-12);
}
