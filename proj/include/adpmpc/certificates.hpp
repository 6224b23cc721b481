#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "adpmpc/avi.hpp"
#include "adpmpc/errors.hpp"
#include "adpmpc/system.hpp"

namespace adpmpc {

// ---------------------------------------------------------------------------
// Scalar certificates
// ---------------------------------------------------------------------------

/// gamma_V = C (1/(1 - sigma) + 2 gamma_0), the local bound V_N <= gamma_V l* on X_f.
inline double gamma_V(double C, double sigma, double gamma0)
{
    if (!(C >= 1.0) || !(sigma > 0.0 && sigma < 1.0) || !(gamma0 >= 0.0)) {
        throw InvalidArgument("gamma_V: requires C >= 1, sigma in (0,1), gamma_0 >= 0");
    }
    return C * (1.0 / (1.0 - sigma) + 2.0 * gamma0);
}

/// gamma = C / (1 - sigma), the bound V_inf <= gamma l* on X_f.
inline double gamma_inf(double C, double sigma)
{
    if (!(C >= 1.0) || !(sigma > 0.0 && sigma < 1.0)) {
        throw InvalidArgument("gamma_inf: requires C >= 1, sigma in (0,1)");
    }
    return C / (1.0 - sigma);
}

/**
 * @brief Largest d with {x'Qx <= d/(2 gamma_0)} inside the box omega.
 *
 * max |x_j| over {x'Qx <= r} is sqrt(r (Q^-1)_jj).
 */
inline double terminal_set_d(const StageCost& cost, double gamma0, const BoxSet& omega)
{
    if (omega.dim() != cost.n()) throw InvalidArgument("terminal_set_d: dimension mismatch");
    const Matrix Qinv = cost.Q().inverse();
    double r = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < omega.dim(); ++j) {
        const double half = std::min(omega.lower()[j] * omega.lower()[j], omega.upper()[j] * omega.upper()[j]);
        r = std::min(r, half / Qinv(j, j));
    }
    return 2.0 * gamma0 * r;
}

/// Smallest integer >= max(0, x), returned as a double.
inline double ceil_nonneg(double x) { return std::ceil(std::max(0.0, x)); }

struct HorizonN1 {
    double N_prime = 0.0;        ///< N', integral
    double gamma_c_lower = 0.0;  ///< min(gamma_V, beta/eps)
    double gamma_c_upper = 0.0;  ///< max(gamma_V, beta/eps)
    double rho_gamma = 0.0;      ///< (gamma_V - 1)/gamma_V
    double log_rate = 0.0;       ///< ln(gamma_V) - ln(gamma_V - 1)
    double term_terminal = 0.0;  ///< ln(gamma_c_lower) - ln(1 - c)
    double term_decay = -std::numeric_limits<double>::infinity();  ///< penalty term, -inf when its argument <= 0
    double N_prime_bar = 0.0;    ///< horizon for terminal-set entry
    double N1 = 0.0;             ///< stability for integer N > N1
};

/// Penalty factor (c(1-c) + 4 c gamma_0) / (1-c)^2 shared by N1 and alpha_1.
inline double error_penalty(double c, double gamma0)
{
    return (c * (1.0 - c) + 4.0 * c * gamma0) / ((1.0 - c) * (1.0 - c));
}

inline HorizonN1 horizon_N1(double c, double beta, double gammaV, double gamma0, double eps)
{
    if (!(gammaV > 1.0)) throw DomainError("horizon_N1: gamma_V must exceed 1");
    if (!(c >= 0.0 && c < 1.0)) throw InvalidArgument("horizon_N1: c must lie in [0,1)");
    if (!(beta > 0.0) || !(eps > 0.0)) throw InvalidArgument("horizon_N1: beta and eps must be positive");
    HorizonN1 h;
    h.N_prime = ceil_nonneg((beta - gammaV * eps) / eps);
    h.gamma_c_lower = std::min(gammaV, beta / eps);
    h.gamma_c_upper = std::max(gammaV, beta / eps);
    h.rho_gamma = (gammaV - 1.0) / gammaV;
    h.log_rate = std::log(gammaV) - std::log(gammaV - 1.0);
    h.term_terminal = std::log(h.gamma_c_lower) - std::log(1.0 - c);
    const double arg = error_penalty(c, gamma0) * gammaV;
    if (arg > 0.0) h.term_decay = std::log(arg);
    h.N_prime_bar = h.N_prime + std::max(0.0, h.term_terminal) / h.log_rate;
    h.N1 = h.N_prime + std::max({0.0, h.term_terminal, h.term_decay}) / h.log_rate;
    return h;
}

/// alpha_1(N, c) = 1 - rho^(N - N') (c(1-c) + 4 c gamma_0)/(1-c)^2 gamma_V.
inline double alpha1(double N, double c, double gammaV, double gamma0, double N_prime)
{
    if (N < N_prime) throw InvalidArgument("alpha1: requires N >= N'");
    const double rho = (gammaV - 1.0) / gammaV;
    return 1.0 - std::pow(rho, N - N_prime) * error_penalty(c, gamma0) * gammaV;
}

enum class N2Variant {
    beta,       ///< N''_real = max(0, (beta - gamma eps)/eps)
    literal_c,  ///< N''_real = max(0, (c - gamma eps)/eps), as printed
};

struct HorizonN2 {
    double N_dprime = 0.0;      ///< N'', integral
    double gamma_lower = 0.0;   ///< min(gamma, beta/eps)
    double N_dprime_bar = 0.0;  ///< N'' + max(ln gamma_lower, 0)/(ln gamma - ln(gamma - 1))
    double N2 = 0.0;            ///< max(N'_bar, N''_bar)
};

inline HorizonN2 horizon_N2(double beta, double gamma, double gamma0, double eps, double N_prime_bar,
                            N2Variant variant = N2Variant::beta, double c = 0.0)
{
    (void)gamma0;
    if (!(gamma > 1.0)) throw DomainError("horizon_N2: gamma must exceed 1");
    if (!(beta > 0.0) || !(eps > 0.0)) throw InvalidArgument("horizon_N2: beta and eps must be positive");
    HorizonN2 h;
    const double numer = variant == N2Variant::beta ? beta : c;
    h.N_dprime = ceil_nonneg((numer - gamma * eps) / eps);
    h.gamma_lower = std::min(gamma, beta / eps);
    h.N_dprime_bar = h.N_dprime + std::max(std::log(h.gamma_lower), 0.0) / (std::log(gamma) - std::log(gamma - 1.0));
    h.N2 = std::max(N_prime_bar, h.N_dprime_bar);
    return h;
}

/// alpha_2(N) = 1 + 2 gamma_0 ((gamma - 1)/gamma)^(N - N'').
inline double alpha2(double N, double gamma0, double gamma, double N_dprime)
{
    if (N < N_dprime) throw InvalidArgument("alpha2: requires N >= N''");
    return 1.0 + 2.0 * gamma0 * std::pow((gamma - 1.0) / gamma, N - N_dprime);
}

// ---------------------------------------------------------------------------
// Controllability constants of the initializing policy
// ---------------------------------------------------------------------------

/// Scalars needed to rank (C, sigma) candidates by the resulting N1.
struct HorizonContext {
    double c = 0.0;
    double gamma0 = 1.0;
    double beta = 1.0;
    double d = 1.0;
};

struct SigmaCandidate {
    double sigma;
    double C;
    double N1;
};

struct ControllabilityFit {
    double C = 1.0;
    double sigma = 0.5;
    std::size_t M = 0;
    std::vector<double> envelope;  ///< max over retained samples of r_k, k = 0..M
    std::size_t retained = 0;
    std::size_t excluded_violation = 0;  ///< rollouts leaving X or U
    std::size_t excluded_small = 0;      ///< l*(x0) below the exclusion radius
    std::vector<SigmaCandidate> candidates;
};

/// Grid lo, lo + step, ..., up to hi inclusive (within half a step).
inline std::vector<double> make_grid(double lo, double hi, double step)
{
    std::vector<double> g;
    const auto count = static_cast<long>(std::floor((hi - lo) / step + 0.5));
    for (long k = 0; k <= count; ++k) g.push_back(lo + static_cast<double>(k) * step);
    return g;
}

inline std::vector<double> default_sigma_grid() { return make_grid(0.80, 0.999, 0.001); }

/**
 * @brief Chooses (C, sigma) from per-step ratio envelope r_k = max_s l(x_s(k), mu(x_s(k))) / l*(x_s(0)).
 *
 * For each sigma, C(sigma) = max(1, max_k r_k / sigma^k), nudged up until C sigma^k >= r_k holds in
 * floating point. The pair minimizing N1 wins; ties go to the smaller C.
 */
inline ControllabilityFit controllability_from_envelope(std::vector<double> envelope, const std::vector<double>& sigma_grid,
                                                        const HorizonContext& ctx)
{
    if (envelope.empty()) throw EstimationError("controllability: empty ratio envelope");
    ControllabilityFit fit;
    fit.M = envelope.size() - 1;
    double best_N1 = std::numeric_limits<double>::infinity();
    bool have = false;
    for (double sigma : sigma_grid) {
        if (!(sigma > 0.0 && sigma < 1.0)) continue;
        double C = 1.0;
        for (std::size_t k = 0; k < envelope.size(); ++k) {
            C = std::max(C, envelope[k] / std::pow(sigma, static_cast<double>(k)));
        }
        for (std::size_t k = 0; k < envelope.size(); ++k) {
            while (C * std::pow(sigma, static_cast<double>(k)) < envelope[k]) {
                C = std::nextafter(C, std::numeric_limits<double>::infinity());
            }
        }
        if (!std::isfinite(C)) continue;
        const double gv = gamma_V(C, sigma, ctx.gamma0);
        const double eps = ctx.d / (2.0 * ctx.gamma0 * C);
        const double N1 = horizon_N1(ctx.c, ctx.beta, gv, ctx.gamma0, eps).N1;
        fit.candidates.push_back({sigma, C, N1});
        if (!have || N1 < best_N1 || (N1 == best_N1 && C < fit.C)) {
            have = true;
            best_N1 = N1;
            fit.C = C;
            fit.sigma = sigma;
        }
    }
    if (!have) throw EstimationError("controllability: no admissible sigma in the grid");
    fit.envelope = std::move(envelope);
    return fit;
}

struct ControllabilityOptions {
    std::optional<std::size_t> M;  ///< rollout length; default from the decay of sampled stage costs
    std::size_t max_M = 500;
    double delta_lstar = 1e-4;
    std::vector<double> sigma_grid = default_sigma_grid();
};

/**
 * @brief Estimates (C, sigma) with l(x(k), mu(x(k))) <= C sigma^k l*(x(0)) along closed-loop rollouts.
 *
 * Rollouts leaving X or producing inputs outside U within k <= M are excluded and counted.
 * Without an explicit M, M is the first k at which every retained rollout's stage cost is below
 * delta_lstar, capped at max_M.
 */
inline ControllabilityFit estimate_controllability(const ControlAffineSystem& sys, const StageCost& cost,
                                                   const Policy& mu, const std::vector<Vector>& samples,
                                                   const BoxSet& state_box, const BoxSet& input_box,
                                                   const HorizonContext& ctx, const ControllabilityOptions& opt = {})
{
    const std::size_t K = opt.M ? std::max<std::size_t>(*opt.M, 2) : opt.max_M;
    std::vector<std::vector<double>> costs;  // l(x(k), mu(x(k))), k = 0..K
    std::vector<double> l0s;
    ControllabilityFit fit;
    for (const Vector& x0 : samples) {
        const double l0 = cost.lstar(x0);
        if (l0 < opt.delta_lstar) {
            ++fit.excluded_small;
            continue;
        }
        const Trajectory traj = rollout(sys, cost, mu, x0, K, state_box, input_box);
        const Vector uK = mu(traj.states[K]);
        if (traj.first_state_violation || traj.first_input_violation || !input_box.contains(uK)) {
            ++fit.excluded_violation;
            continue;
        }
        std::vector<double> lk(traj.stage_costs);
        lk.push_back(cost.l(traj.states[K], uK));
        costs.push_back(std::move(lk));
        l0s.push_back(l0);
    }
    if (costs.empty()) throw EstimationError("estimate_controllability: every sample rollout was excluded");

    std::size_t M = K;
    if (!opt.M) {
        for (std::size_t k = 2; k <= K; ++k) {
            double worst = 0.0;
            for (const auto& lk : costs) worst = std::max(worst, lk[k]);
            if (worst < opt.delta_lstar) {
                M = k;
                break;
            }
        }
    }
    std::vector<double> envelope(M + 1, 0.0);
    for (std::size_t s = 0; s < costs.size(); ++s) {
        for (std::size_t k = 0; k <= M; ++k) envelope[k] = std::max(envelope[k], costs[s][k] / l0s[s]);
    }
    ControllabilityFit best = controllability_from_envelope(std::move(envelope), opt.sigma_grid, ctx);
    best.retained = costs.size();
    best.excluded_small = fit.excluded_small;
    best.excluded_violation = fit.excluded_violation;
    return best;
}

// ---------------------------------------------------------------------------
// Certificate bundle
// ---------------------------------------------------------------------------

struct CertificateBundle {
    double C = 1.0;
    double sigma = 0.5;
    std::size_t M = 0;
    double gamma0 = 1.0;
    double c = 0.0;
    double d = 1.0;
    double eps = 1.0;  ///< d / (2 gamma_0 C), the X_f level of l*
    double gamma_V = 2.0;
    double gamma = 2.0;
    double beta = 1.0;
    HorizonN1 n1;
    HorizonN2 n2;          ///< with (beta - gamma eps)/eps
    HorizonN2 n2_literal;  ///< with (c - gamma eps)/eps
    double N_min = 0.0;    ///< max(smallest integer > N1, ceil(N2))
    double eq13_bound = 0.0;
    bool eq13_pass = false;

    std::optional<double> N_user;
    std::optional<double> alpha1_user;
    std::optional<double> alpha2_user;
    bool N_user_certified = false;

    double alpha1_at(double N) const { return adpmpc::alpha1(N, c, gamma_V, gamma0, n1.N_prime); }
    double alpha2_at(double N) const { return adpmpc::alpha2(N, gamma0, gamma, n2.N_dprime); }
};

/// Minimal certified horizon from N1 (strict) and N2.
inline double minimal_horizon(double N1, double N2) { return std::max(std::floor(N1) + 1.0, std::ceil(N2)); }

/**
 * @brief Assembles every certificate scalar from the margin c, gamma_0, (C, sigma), Omega and beta.
 *
 * Throws CertificationError when c >= 1.
 */
inline CertificateBundle build_bundle(double c, double gamma0, const ControllabilityFit& ctrl, const StageCost& cost,
                                      const BoxSet& omega, double beta, std::optional<double> N_user = std::nullopt)
{
    if (!(c < 1.0)) throw CertificationError("build_bundle: error margin c >= 1; adjust the training domain or basis");
    if (!(gamma0 > 0.0)) throw CertificationError("build_bundle: gamma_0 must be positive");
    CertificateBundle b;
    b.C = ctrl.C;
    b.sigma = ctrl.sigma;
    b.M = ctrl.M;
    b.gamma0 = gamma0;
    b.c = c;
    b.beta = beta;
    b.d = terminal_set_d(cost, gamma0, omega);
    b.eps = b.d / (2.0 * gamma0 * b.C);
    b.gamma_V = gamma_V(b.C, b.sigma, gamma0);
    b.gamma = gamma_inf(b.C, b.sigma);
    b.n1 = horizon_N1(c, beta, b.gamma_V, gamma0, b.eps);
    b.n2 = horizon_N2(beta, b.gamma, gamma0, b.eps, b.n1.N_prime_bar, N2Variant::beta);
    b.n2_literal = horizon_N2(beta, b.gamma, gamma0, b.eps, b.n1.N_prime_bar, N2Variant::literal_c, c);
    b.N_min = minimal_horizon(b.n1.N1, b.n2.N2);
    b.eq13_bound = stability_margin_bound(gamma0);
    b.eq13_pass = stability_margin_check(c, gamma0);
    if (N_user) {
        b.N_user = *N_user;
        if (*N_user >= b.n1.N_prime) b.alpha1_user = b.alpha1_at(*N_user);
        if (*N_user >= b.n2.N_dprime) b.alpha2_user = b.alpha2_at(*N_user);
        b.N_user_certified = *N_user >= b.N_min;
    }
    return b;
}

/// Upper bound V_N(x0) / alpha_1(N, c) on the infinite-horizon closed-loop cost.
inline double performance_bound(const CertificateBundle& b, double V_N_x0, double N)
{
    if (N < b.n1.N_prime) throw BoundInvalid("performance_bound: horizon below N'");
    const double a1 = b.alpha1_at(N);
    if (!(a1 > 0.0)) throw BoundInvalid("performance_bound: alpha_1 <= 0 for this horizon");
    return V_N_x0 / a1;
}

}  // namespace adpmpc
