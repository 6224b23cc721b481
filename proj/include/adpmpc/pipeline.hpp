#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "adpmpc/approximator.hpp"
#include "adpmpc/avi.hpp"
#include "adpmpc/certificates.hpp"
#include "adpmpc/errors.hpp"
#include "adpmpc/io.hpp"
#include "adpmpc/mpc.hpp"
#include "adpmpc/sampling.hpp"
#include "adpmpc/system.hpp"

namespace adpmpc::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kError = 1, kGateFailure = 2 };

inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kTrain = "train.json";
inline constexpr const char* kWeights = "weights.csv";
inline constexpr const char* kErrors = "errors.csv";
inline constexpr const char* kTheorem1 = "theorem1.csv";
inline constexpr const char* kCertificates = "certificates.json";
inline constexpr const char* kClosedLoop = "closedloop.json";

struct PipelineConfig {
    json raw;
    std::string hash;

    std::string system_name;
    json system_params;
    ControlAffineSystem sys;
    BoxSet X;
    BoxSet U;
    StageCost cost;
    std::vector<int> degrees;
    AviConfig avi;
    double init_r_scale = 1.0;  ///< LQR for the initial policy is designed with R * init_r_scale

    std::optional<double> beta;
    double beta_scale = 1.0;
    std::vector<double> sigma_grid = default_sigma_grid();
    std::optional<std::size_t> M;
    std::size_t max_M = 500;
    std::optional<double> c_override;

    std::optional<std::size_t> horizon;
    bool horizon_auto = false;
    std::size_t steps = 400;
    double stop_tol = 1e-6;
    std::vector<Vector> x0s;
    std::vector<std::string> terminals{"avi", "lqr"};

    std::string output_dir = "out";
};

namespace detail {

inline void reject_unknown(const json& obj, const std::string& where, std::initializer_list<const char*> allowed)
{
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || it.key() == a;
        if (!ok) throw ConfigError("config: unknown field \"" + where + it.key() + "\"");
    }
}

inline const json& require_object(const json& j, const std::string& field)
{
    if (!j.is_object()) throw ConfigError("config: \"" + field + "\" must be an object");
    return j;
}

inline double get_number(const json& obj, const char* key, const std::string& field, double fallback)
{
    if (!obj.contains(key)) return fallback;
    if (!obj[key].is_number()) throw ConfigError("config: \"" + field + "\" must be a number");
    return obj[key].get<double>();
}

inline std::size_t get_count(const json& obj, const char* key, const std::string& field, std::size_t fallback)
{
    if (!obj.contains(key)) return fallback;
    const json& v = obj[key];
    if (!v.is_number_integer() || v.get<long long>() < 0) {
        throw ConfigError("config: \"" + field + "\" must be a non-negative integer");
    }
    return static_cast<std::size_t>(v.get<long long>());
}

inline BoxSet parse_box(const json& j, const std::string& field, Eigen::Index dim)
{
    require_object(j, field);
    reject_unknown(j, field + ".", {"lower", "upper", "half_width"});
    try {
        if (j.contains("half_width")) {
            if (j.contains("lower") || j.contains("upper")) {
                throw ConfigError("config: \"" + field + "\" takes either half_width or lower/upper");
            }
            const json& h = j["half_width"];
            if (h.is_number()) return BoxSet::symmetric(dim, h.get<double>());
            const Vector hv = io::vector_from_json(h, field + ".half_width");
            return BoxSet(-hv, hv);
        }
        if (!j.contains("lower") || !j.contains("upper")) {
            throw ConfigError("config: \"" + field + "\" needs lower and upper");
        }
        BoxSet box(io::vector_from_json(j["lower"], field + ".lower"), io::vector_from_json(j["upper"], field + ".upper"));
        if (box.dim() != dim) throw ConfigError("config: \"" + field + "\" has the wrong dimension");
        return box;
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError("config: \"" + field + "\": " + e.what());
    }
}

inline Matrix parse_weight(const json& parent, const char* key, const std::string& diag_key, Eigen::Index dim,
                           const std::optional<Matrix>& fallback)
{
    if (parent.contains(key) && parent.contains(diag_key)) {
        throw ConfigError(std::string("config: give either \"") + key + "\" or \"" + diag_key + "\"");
    }
    Matrix M;
    if (parent.contains(key)) {
        M = io::matrix_from_json(parent[key], key);
    } else if (parent.contains(diag_key)) {
        M = io::vector_from_json(parent[diag_key], diag_key).asDiagonal();
    } else if (fallback) {
        M = *fallback;
    } else {
        throw ConfigError(std::string("config: \"") + key + "\" required");
    }
    if (M.rows() != dim || M.cols() != dim) throw ConfigError(std::string("config: \"") + key + "\" has the wrong size");
    return M;
}

}  // namespace detail

/**
 * @brief Parses and validates a pipeline configuration.
 *
 * Errors name the offending field, e.g. a missing training domain reports "Ω required".
 */
inline PipelineConfig parse_config(const json& raw)
{
    using namespace detail;
    if (!raw.is_object()) throw ConfigError("config: top level must be an object");
    reject_unknown(raw, "", {"system", "state_box", "input_box", "omega", "Q", "Q_diag", "R", "R_diag",
                             "basis_degrees", "avi", "init_policy", "certify", "horizon", "simulate", "output_dir"});
    PipelineConfig cfg;
    cfg.raw = raw;
    cfg.hash = io::fnv1a_hex(raw.dump());

    if (!raw.contains("system")) throw ConfigError("config: \"system\" required");
    const json& sj = require_object(raw["system"], "system");
    if (!sj.contains("name") || !sj["name"].is_string()) throw ConfigError("config: \"system.name\" required");
    cfg.system_name = sj["name"].get<std::string>();
    cfg.system_params = sj;

    std::optional<BoxSet> X_default;
    std::optional<BoxSet> U_default;
    std::optional<Matrix> Q_default;
    std::optional<Matrix> R_default;
    try {
        if (cfg.system_name == "rendezvous") {
            reject_unknown(sj, "system.", {"name", "dt"});
            cfg.sys = rendezvous_system(get_number(sj, "dt", "system.dt", 0.05));
            X_default = rendezvous_state_box();
            U_default = rendezvous_input_box();
            Q_default = rendezvous_cost().Q();
            R_default = rendezvous_cost().R();
        } else if (cfg.system_name == "linear") {
            reject_unknown(sj, "system.", {"name", "A", "B"});
            if (!sj.contains("A")) throw ConfigError("config: \"system.A\" required");
            if (!sj.contains("B")) throw ConfigError("config: \"system.B\" required");
            cfg.sys = linear_system(io::matrix_from_json(sj["A"], "system.A"), io::matrix_from_json(sj["B"], "system.B"));
        } else if (cfg.system_name == "toy1d") {
            reject_unknown(sj, "system.", {"name", "a", "cubic", "b"});
            cfg.sys = toy1d_system(get_number(sj, "a", "system.a", 0.8), get_number(sj, "cubic", "system.cubic", 0.2),
                                   get_number(sj, "b", "system.b", 1.0));
        } else {
            throw ConfigError("config: \"system.name\": unknown system \"" + cfg.system_name + "\"");
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(std::string("config: \"system\": ") + e.what());
    }
    const Eigen::Index n = cfg.sys.n();
    const Eigen::Index m = cfg.sys.m();

    if (raw.contains("state_box")) cfg.X = parse_box(raw["state_box"], "state_box", n);
    else if (X_default) cfg.X = *X_default;
    else throw ConfigError("config: \"state_box\" required");
    if (raw.contains("input_box")) cfg.U = parse_box(raw["input_box"], "input_box", m);
    else if (U_default) cfg.U = *U_default;
    else throw ConfigError("config: \"input_box\" required");
    if (!raw.contains("omega")) throw ConfigError("config: training domain \"omega\" missing (Ω required)");
    cfg.avi.omega = parse_box(raw["omega"], "omega", n);
    if (!cfg.avi.omega.subset_of(cfg.X)) throw ConfigError("config: \"omega\" (Ω) must lie inside state_box");

    try {
        cfg.cost = StageCost(parse_weight(raw, "Q", "Q_diag", n, Q_default), parse_weight(raw, "R", "R_diag", m, R_default));
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        throw ConfigError(std::string("config: stage cost: ") + e.what());
    }

    if (!raw.contains("basis_degrees")) throw ConfigError("config: \"basis_degrees\" required");
    if (!raw["basis_degrees"].is_array() || raw["basis_degrees"].empty()) {
        throw ConfigError("config: \"basis_degrees\" must be a non-empty array of integers");
    }
    for (const json& d : raw["basis_degrees"]) {
        if (!d.is_number_integer() || d.get<int>() < 2) {
            throw ConfigError("config: \"basis_degrees\" entries must be integers >= 2");
        }
        cfg.degrees.push_back(d.get<int>());
    }

    if (raw.contains("avi")) {
        const json& a = require_object(raw["avi"], "avi");
        reject_unknown(a, "avi.", {"p", "p_test", "max_iter", "w_tol", "delta_lstar", "seed", "ridge", "init"});
        cfg.avi.p = get_count(a, "p", "avi.p", cfg.avi.p);
        cfg.avi.p_test = get_count(a, "p_test", "avi.p_test", cfg.avi.p_test);
        cfg.avi.max_iter = get_count(a, "max_iter", "avi.max_iter", cfg.avi.max_iter);
        cfg.avi.w_tol = get_number(a, "w_tol", "avi.w_tol", cfg.avi.w_tol);
        cfg.avi.delta_lstar = get_number(a, "delta_lstar", "avi.delta_lstar", cfg.avi.delta_lstar);
        cfg.avi.seed = get_count(a, "seed", "avi.seed", cfg.avi.seed);
        cfg.avi.ridge = get_number(a, "ridge", "avi.ridge", cfg.avi.ridge);
        if (cfg.avi.ridge < 0.0) throw ConfigError("config: \"avi.ridge\" must be non-negative");
        if (a.contains("init")) {
            const std::string mode = a["init"].is_string() ? a["init"].get<std::string>() : "";
            if (mode == "fit") cfg.avi.init = InitMode::fit;
            else if (mode == "lqr") cfg.avi.init = InitMode::lqr_shortcut;
            else throw ConfigError("config: \"avi.init\" must be \"fit\" or \"lqr\"");
        }
    }
    try {
        cfg.avi.validate(cfg.X, MonomialBasis(n, cfg.degrees).size());
    } catch (const Error& e) {
        throw ConfigError(std::string("config: \"avi\": ") + e.what());
    }

    if (raw.contains("init_policy")) {
        const json& ip = require_object(raw["init_policy"], "init_policy");
        reject_unknown(ip, "init_policy.", {"r_scale"});
        cfg.init_r_scale = get_number(ip, "r_scale", "init_policy.r_scale", 1.0);
        if (!(cfg.init_r_scale > 0.0)) throw ConfigError("config: \"init_policy.r_scale\" must be positive");
    }

    if (raw.contains("certify")) {
        const json& c = require_object(raw["certify"], "certify");
        reject_unknown(c, "certify.", {"beta", "beta_scale", "sigma_grid", "M", "max_M", "c_override"});
        if (c.contains("beta") && c.contains("beta_scale")) {
            throw ConfigError("config: give either \"certify.beta\" or \"certify.beta_scale\"");
        }
        if (c.contains("beta")) {
            cfg.beta = get_number(c, "beta", "certify.beta", 1.0);
            if (!(*cfg.beta > 0.0)) throw ConfigError("config: \"certify.beta\" must be positive");
        }
        cfg.beta_scale = get_number(c, "beta_scale", "certify.beta_scale", 1.0);
        if (!(cfg.beta_scale > 0.0)) throw ConfigError("config: \"certify.beta_scale\" must be positive");
        if (c.contains("sigma_grid")) {
            const json& g = require_object(c["sigma_grid"], "certify.sigma_grid");
            reject_unknown(g, "certify.sigma_grid.", {"lo", "hi", "step"});
            const double lo = get_number(g, "lo", "certify.sigma_grid.lo", 0.8);
            const double hi = get_number(g, "hi", "certify.sigma_grid.hi", 0.999);
            const double st = get_number(g, "step", "certify.sigma_grid.step", 0.001);
            if (!(lo > 0.0 && hi < 1.0 && lo <= hi && st > 0.0)) {
                throw ConfigError("config: \"certify.sigma_grid\" needs 0 < lo <= hi < 1 and step > 0");
            }
            cfg.sigma_grid = make_grid(lo, hi, st);
        }
        if (c.contains("M")) cfg.M = get_count(c, "M", "certify.M", 0);
        cfg.max_M = get_count(c, "max_M", "certify.max_M", cfg.max_M);
        if (c.contains("c_override")) {
            cfg.c_override = get_number(c, "c_override", "certify.c_override", 0.0);
            if (!(*cfg.c_override >= 0.0)) throw ConfigError("config: \"certify.c_override\" must be non-negative");
        }
    }

    if (raw.contains("horizon")) {
        const json& h = raw["horizon"];
        if (h.is_string() && h.get<std::string>() == "auto") cfg.horizon_auto = true;
        else if (h.is_number_integer() && h.get<long long>() >= 1) cfg.horizon = static_cast<std::size_t>(h.get<long long>());
        else throw ConfigError("config: \"horizon\" must be a positive integer or \"auto\"");
    }

    if (raw.contains("simulate")) {
        const json& s = require_object(raw["simulate"], "simulate");
        reject_unknown(s, "simulate.", {"x0", "steps", "stop_tol", "terminals"});
        cfg.steps = get_count(s, "steps", "simulate.steps", cfg.steps);
        cfg.stop_tol = get_number(s, "stop_tol", "simulate.stop_tol", cfg.stop_tol);
        if (s.contains("x0")) {
            if (!s["x0"].is_array()) throw ConfigError("config: \"simulate.x0\" must be an array of states");
            for (const json& x : s["x0"]) {
                Vector v = io::vector_from_json(x, "simulate.x0");
                if (v.size() != n) throw ConfigError("config: \"simulate.x0\" entries must have the state dimension");
                cfg.x0s.push_back(std::move(v));
            }
        }
        if (s.contains("terminals")) {
            cfg.terminals.clear();
            if (!s["terminals"].is_array()) throw ConfigError("config: \"simulate.terminals\" must be an array");
            for (const json& t : s["terminals"]) {
                const std::string name = t.is_string() ? t.get<std::string>() : "";
                if (name != "avi" && name != "lqr") {
                    throw ConfigError("config: \"simulate.terminals\" entries must be \"avi\" or \"lqr\"");
                }
                cfg.terminals.push_back(name);
            }
        }
    }

    if (raw.contains("output_dir")) {
        if (!raw["output_dir"].is_string()) throw ConfigError("config: \"output_dir\" must be a string");
        cfg.output_dir = raw["output_dir"].get<std::string>();
    }
    return cfg;
}

inline PipelineConfig load_config(const std::string& path) { return parse_config(io::read_json(path)); }

/// Training and test samples exactly as drawn by run_avi for this configuration.
inline std::pair<std::vector<Vector>, std::vector<Vector>> training_samples(const PipelineConfig& cfg)
{
    std::mt19937_64 rng(cfg.avi.seed);
    std::vector<Vector> train = sample_box(cfg.avi.omega, cfg.avi.p, rng);
    std::vector<Vector> test = sample_box(cfg.avi.omega, cfg.avi.p_test, rng);
    return {std::move(train), std::move(test)};
}

/// LQR at the origin for the initial policy (R scaled by init_r_scale).
inline LqrInit initial_lqr(const PipelineConfig& cfg)
{
    const Linearization lin = linearize(cfg.sys, Vector::Zero(cfg.sys.n()), Vector::Zero(cfg.sys.m()));
    return dare_solve(lin.A, lin.B, cfg.cost.Q(), cfg.init_r_scale * cfg.cost.R());
}

/// LQR of the actual stage cost, used for the quadratic terminal-cost comparison.
inline LqrInit cost_lqr(const PipelineConfig& cfg) { return lqr_at_origin(cfg.sys, cfg.cost); }

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

inline json not_evaluated() { return json{{"evaluated", false}}; }

inline json load_manifest(const fs::path& dir, const PipelineConfig& cfg)
{
    const fs::path p = dir / kManifest;
    json man;
    if (fs::exists(p)) {
        man = io::read_json(p.string());
        if (!man.is_object() || man.value("config_hash", std::string()) != cfg.hash) man = json::object();
    }
    if (man.empty()) {
        man["config_hash"] = cfg.hash;
        man["artifacts"] = json::array();
        man["gates"] = {{"c_below_one", not_evaluated()},
                        {"policy_in_input_box", not_evaluated()},
                        {"stability_margin", not_evaluated()},
                        {"horizon_certified", not_evaluated()}};
    }
    man["system"] = cfg.system_name;
    json x0s = json::array();
    for (const Vector& x : cfg.x0s) x0s.push_back(io::to_json(x));
    man["x0"] = x0s;
    return man;
}

inline void add_artifact(json& man, const std::string& name)
{
    std::set<std::string> names;
    for (const json& a : man["artifacts"]) names.insert(a.get<std::string>());
    names.insert(name);
    names.insert(kManifest);
    man["artifacts"] = json(std::vector<std::string>(names.begin(), names.end()));
}

inline void write_artifact(const fs::path& dir, json& man, const std::string& name, const std::string& text)
{
    io::write_text((dir / name).string(), text);
    add_artifact(man, name);
}

inline void save_manifest(const fs::path& dir, json& man)
{
    add_artifact(man, kManifest);
    io::write_text((dir / kManifest).string(), io::dump17(man));
}

inline fs::path prepare_dir(const std::string& out)
{
    fs::path dir(out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw Error("cannot create output directory " + out + ": " + ec.message());
    return dir;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Runs the LQR-initialized value iteration and writes weights.csv, errors.csv, theorem1.csv, train.json.
inline int cmd_train(const PipelineConfig& cfg, const std::string& out_dir, std::ostream& log = std::cout)
{
    const fs::path dir = prepare_dir(out_dir);
    json man = load_manifest(dir, cfg);

    const LqrInit lqr = initial_lqr(cfg);
    const MonomialBasis basis(cfg.sys.n(), cfg.degrees);
    const AviRun run = run_avi(cfg.avi, basis, cfg.sys, cfg.cost, linear_policy(lqr.K), lqr.P, cfg.X, cfg.U);

    write_artifact(dir, man, kWeights, io::weights_csv(run));
    write_artifact(dir, man, kErrors, io::errors_csv(run));
    const Theorem1Report t1 = theorem1_bounds_check(run, cfg.cost, run.test);
    write_artifact(dir, man, kTheorem1, io::theorem1_csv(t1));

    json tr;
    tr["config_hash"] = cfg.hash;
    tr["basis_degrees"] = cfg.degrees;
    tr["basis_size"] = basis.size();
    tr["c"] = run.c;
    tr["c_per_iter"] = run.c_per_iter;
    tr["sup_eps_per_iter"] = run.sup_eps_per_iter;
    tr["excluded_test_samples"] = run.excluded_test;
    tr["iterations"] = run.last_iter();
    tr["converged_at"] = run.converged_at ? json(*run.converged_at) : json(nullptr);
    tr["margin_flag"] = run.margin_flag;
    tr["gamma0"] = run.gamma0 ? json(*run.gamma0) : json(nullptr);
    tr["weights_final"] = io::to_json(run.final_value().weights());
    tr["weights_policy"] = io::to_json(run.policy_value().weights());
    tr["lqr"] = {{"K", io::to_json(lqr.K)},
                 {"P", io::to_json(lqr.P)},
                 {"spectral_radius", lqr.spectral_radius},
                 {"r_scale", cfg.init_r_scale}};
    tr["theorem1"] = {{"checks", t1.checks},
                      {"violations", t1.violations.size()},
                      {"min_ratio", t1.min_ratio},
                      {"max_ratio", t1.max_ratio}};

    json& gates = man["gates"];
    const bool c_ok = run.c < 1.0;
    gates["c_below_one"] = {{"evaluated", true}, {"pass", c_ok}, {"c", run.c}};
    bool input_ok = false;
    if (c_ok) {
        // Explicit policy fitted to the greedy inputs of V_I on the training states.
        const ValueApproximant VI = run.policy_value();
        std::vector<Vector> u_train;
        u_train.reserve(run.train.size());
        for (const Vector& x : run.train) u_train.push_back(greedy_policy_solve(VI, cfg.sys, cfg.cost, x, cfg.U).u);
        const PolicyFit pf = fit_policy(run.train, u_train, cfg.avi.ridge);
        const Policy exact = greedy_policy(VI, cfg.sys, cfg.cost, cfg.U);
        double max_dev = 0.0;
        for (const Vector& x : run.test) max_dev = std::max(max_dev, (pf.policy(x) - exact(x)).cwiseAbs().maxCoeff());
        const Policy fitted = [p = pf.policy](const Vector& x) { return p(x); };
        const InputConstraintReport ic = input_constraint_check(fitted, cfg.U, run.test);
        const InputConstraintReport ic_exact = input_constraint_check(exact, cfg.U, run.test);
        input_ok = ic.pass;
        tr["policy_fit"] = {{"residual_max", pf.report.residual_max},
                            {"residual_rms", pf.report.residual_rms},
                            {"max_deviation_test", max_dev},
                            {"weights", io::to_json(pf.policy.weights())}};
        gates["policy_in_input_box"] = {{"evaluated", true},
                                        {"pass", ic.pass},
                                        {"violations", ic.violations},
                                        {"worst_excess", ic.worst_excess},
                                        {"exact_policy_pass", ic_exact.pass}};
        const double bound = stability_margin_bound(*run.gamma0);
        gates["stability_margin"] = {{"evaluated", true},
                                     {"pass", stability_margin_check(run.c, *run.gamma0)},
                                     {"bound", bound},
                                     {"warning_only", true}};
    } else {
        gates["policy_in_input_box"] = not_evaluated();
        gates["stability_margin"] = not_evaluated();
    }
    gates["horizon_certified"] = not_evaluated();
    write_artifact(dir, man, kTrain, io::dump17(tr));
    // Certification and simulation artifacts from an earlier training run are stale now.
    for (const char* stale : {kCertificates, kClosedLoop}) {
        std::error_code ec;
        fs::remove(dir / stale, ec);
    }
    json kept = json::array();
    for (const json& a : man["artifacts"]) {
        const std::string s = a.get<std::string>();
        if (s != kCertificates && s != kClosedLoop && s.rfind("trajectory_", 0) != 0) kept.push_back(s);
    }
    man["artifacts"] = kept;
    save_manifest(dir, man);

    log << "train: " << basis.size() << " basis functions, " << run.last_iter() + 1 << " iterations"
        << (run.converged_at ? " (converged)" : " (iteration cap)") << ", c = " << io::fmt17(run.c) << "\n";
    if (!c_ok) {
        log << "train: error margin c >= 1 on the test samples; shrink Ω or enrich the basis and retrain\n";
        return kGateFailure;
    }
    log << "train: gamma0 = " << io::fmt17(*run.gamma0) << "\n";
    if (!input_ok) log << "train: fitted policy leaves the input box on test samples\n";
    return input_ok ? kOk : kGateFailure;
}

// ---------------------------------------------------------------------------
// certify
// ---------------------------------------------------------------------------

struct TrainArtifacts {
    json raw;
    MonomialBasis basis;
    double c = 0.0;
    std::optional<double> gamma0;
    ValueApproximant V_final;
};

inline TrainArtifacts load_train(const fs::path& dir, const PipelineConfig& cfg)
{
    const fs::path p = dir / kTrain;
    if (!fs::exists(p)) throw Error("missing training artifact " + p.string() + "; run train first");
    TrainArtifacts t;
    t.raw = io::read_json(p.string());
    if (t.raw.value("config_hash", std::string()) != cfg.hash) {
        throw Error(p.string() + " was produced by a different configuration; rerun train");
    }
    t.basis = MonomialBasis(cfg.sys.n(), cfg.degrees);
    t.c = t.raw.at("c").get<double>();
    if (!t.raw.at("gamma0").is_null()) t.gamma0 = t.raw.at("gamma0").get<double>();
    t.V_final = ValueApproximant(t.basis, io::vector_from_json(t.raw.at("weights_final"), "weights_final"));
    return t;
}

inline json bundle_json(const CertificateBundle& b, const ControllabilityFit& fit)
{
    auto n2_json = [](const HorizonN2& h) {
        return json{{"N_dprime", h.N_dprime}, {"gamma_lower", h.gamma_lower}, {"N_dprime_bar", h.N_dprime_bar},
                    {"N2", h.N2}};
    };
    json j;
    j["C"] = b.C;
    j["sigma"] = b.sigma;
    j["M"] = b.M;
    j["gamma0"] = b.gamma0;
    j["c"] = b.c;
    j["d"] = b.d;
    j["eps"] = b.eps;
    j["gamma_V"] = b.gamma_V;
    j["gamma"] = b.gamma;
    j["beta"] = b.beta;
    j["N1"] = {{"N_prime", b.n1.N_prime},
               {"gamma_c_lower", b.n1.gamma_c_lower},
               {"gamma_c_upper", b.n1.gamma_c_upper},
               {"rho_gamma", b.n1.rho_gamma},
               {"log_rate", b.n1.log_rate},
               {"term_terminal", b.n1.term_terminal},
               {"term_decay", b.n1.term_decay},
               {"N_prime_bar", b.n1.N_prime_bar},
               {"N1", b.n1.N1}};
    j["N2_beta"] = n2_json(b.n2);
    j["N2_literal_c"] = n2_json(b.n2_literal);
    j["N_min"] = b.N_min;
    j["stability_margin_bound"] = b.eq13_bound;
    j["stability_margin_pass"] = b.eq13_pass;
    j["N_user"] = b.N_user ? json(*b.N_user) : json(nullptr);
    j["alpha1_user"] = b.alpha1_user ? json(*b.alpha1_user) : json(nullptr);
    j["alpha2_user"] = b.alpha2_user ? json(*b.alpha2_user) : json(nullptr);
    j["N_user_certified"] = b.N_user_certified;
    j["controllability"] = {{"retained", fit.retained},
                            {"excluded_violation", fit.excluded_violation},
                            {"excluded_small", fit.excluded_small},
                            {"envelope", fit.envelope}};
    // alpha_1 and alpha_2 over a range of horizons; null below N' (resp. N'').
    json table = json::array();
    std::set<double> Ns;
    for (int k = 1; k <= 20; ++k) Ns.insert(static_cast<double>(k));
    Ns.insert(b.n1.N_prime);
    Ns.insert(b.N_min);
    if (b.N_user) Ns.insert(*b.N_user);
    for (double N : Ns) {
        if (N < 1.0) continue;
        json row{{"N", N}};
        row["alpha1"] = N >= b.n1.N_prime ? json(b.alpha1_at(N)) : json(nullptr);
        row["alpha2"] = N >= b.n2.N_dprime ? json(b.alpha2_at(N)) : json(nullptr);
        table.push_back(row);
    }
    j["alpha_table"] = table;
    return j;
}

inline CertificateBundle bundle_from_json(const json& j)
{
    CertificateBundle b;
    b.C = j.at("C").get<double>();
    b.sigma = j.at("sigma").get<double>();
    b.M = j.at("M").get<std::size_t>();
    b.gamma0 = j.at("gamma0").get<double>();
    b.c = j.at("c").get<double>();
    b.d = j.at("d").get<double>();
    b.eps = j.at("eps").get<double>();
    b.gamma_V = j.at("gamma_V").get<double>();
    b.gamma = j.at("gamma").get<double>();
    b.beta = j.at("beta").get<double>();
    b.n1 = horizon_N1(b.c, b.beta, b.gamma_V, b.gamma0, b.eps);
    b.n2 = horizon_N2(b.beta, b.gamma, b.gamma0, b.eps, b.n1.N_prime_bar, N2Variant::beta);
    b.n2_literal = horizon_N2(b.beta, b.gamma, b.gamma0, b.eps, b.n1.N_prime_bar, N2Variant::literal_c, b.c);
    b.N_min = j.at("N_min").get<double>();
    b.eq13_bound = j.at("stability_margin_bound").get<double>();
    b.eq13_pass = j.at("stability_margin_pass").get<bool>();
    return b;
}

/// Estimates (C, sigma) for the initial policy, builds the certificate bundle, writes certificates.json.
inline int cmd_certify(const PipelineConfig& cfg, const std::string& out_dir, std::ostream& log = std::cout)
{
    const fs::path dir = prepare_dir(out_dir);
    json man = load_manifest(dir, cfg);
    const TrainArtifacts tr = load_train(dir, cfg);
    const double c = cfg.c_override.value_or(tr.c);
    if (!(c < 1.0) || !tr.gamma0) {
        log << "certify: refused, error margin c = " << io::fmt17(c) << " is not below 1\n";
        man["gates"]["horizon_certified"] = not_evaluated();
        save_manifest(dir, man);
        return kGateFailure;
    }
    const double gamma0 = *tr.gamma0;
    const auto samples = training_samples(cfg);
    const LqrInit lqr = initial_lqr(cfg);
    const Policy mu = linear_policy(lqr.K);
    const double d = terminal_set_d(cfg.cost, gamma0, cfg.avi.omega);

    ControllabilityOptions co;
    co.M = cfg.M;
    co.max_M = cfg.max_M;
    co.delta_lstar = cfg.avi.delta_lstar;
    co.sigma_grid = cfg.sigma_grid;

    HorizonContext ctx{c, gamma0, cfg.beta.value_or(1.0), d};
    ControllabilityFit fit = estimate_controllability(cfg.sys, cfg.cost, mu, samples.second, cfg.X, cfg.U, ctx, co);
    double beta = ctx.beta;
    if (!cfg.beta) {
        // beta relative to the X_f level scaled by gamma_V; (C, sigma) is re-ranked once under it.
        beta = cfg.beta_scale * gamma_V(fit.C, fit.sigma, gamma0) * d / (2.0 * gamma0 * fit.C);
        ctx.beta = beta;
        ControllabilityFit ranked = controllability_from_envelope(fit.envelope, co.sigma_grid, ctx);
        ranked.retained = fit.retained;
        ranked.excluded_violation = fit.excluded_violation;
        ranked.excluded_small = fit.excluded_small;
        fit = std::move(ranked);
    }

    std::optional<double> N_user;
    if (cfg.horizon) N_user = static_cast<double>(*cfg.horizon);
    const CertificateBundle b0 = build_bundle(c, gamma0, fit, cfg.cost, cfg.avi.omega, beta);
    if (cfg.horizon_auto) N_user = b0.N_min;
    const CertificateBundle b = build_bundle(c, gamma0, fit, cfg.cost, cfg.avi.omega, beta, N_user);

    json j = bundle_json(b, fit);
    j["config_hash"] = cfg.hash;
    j["c_trained"] = tr.c;
    j["c_override"] = cfg.c_override ? json(*cfg.c_override) : json(nullptr);
    j["beta_mode"] = cfg.beta ? "absolute" : "scaled";
    j["beta_scale"] = cfg.beta ? json(nullptr) : json(cfg.beta_scale);
    write_artifact(dir, man, kCertificates, io::dump17(j));

    int code = kOk;
    if (b.N_user) {
        man["gates"]["horizon_certified"] = {
            {"evaluated", true}, {"pass", b.N_user_certified}, {"N", *b.N_user}, {"N_min", b.N_min}};
        if (!b.N_user_certified) code = kGateFailure;
    } else {
        man["gates"]["horizon_certified"] = not_evaluated();
    }
    save_manifest(dir, man);

    log << "certify: C = " << io::fmt17(b.C) << ", sigma = " << io::fmt17(b.sigma) << ", N1 = " << io::fmt17(b.n1.N1)
        << ", N2 = " << io::fmt17(b.n2.N2) << ", N_min = " << io::fmt17(b.N_min) << "\n";
    if (!b.eq13_pass) log << "certify: warning, stability margin of the standalone controller not met\n";
    if (b.N_user && !b.N_user_certified) {
        log << "certify: horizon N = " << io::fmt17(*b.N_user) << " is below N_min\n";
    }
    return code;
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

inline std::optional<CertificateBundle> load_bundle(const fs::path& dir, const PipelineConfig& cfg)
{
    const fs::path p = dir / kCertificates;
    if (!fs::exists(p)) return std::nullopt;
    const json j = io::read_json(p.string());
    if (j.value("config_hash", std::string()) != cfg.hash) return std::nullopt;
    return bundle_from_json(j);
}

/// Closed-loop runs for every x0 and terminal cost; writes trajectory_<terminal>_<i>.csv and closedloop.json.
inline int cmd_simulate(const PipelineConfig& cfg, const std::string& out_dir, std::ostream& log = std::cout,
                        std::ostream& err = std::cerr)
{
    const fs::path dir = prepare_dir(out_dir);
    json man = load_manifest(dir, cfg);
    const TrainArtifacts tr = load_train(dir, cfg);
    const std::optional<CertificateBundle> bundle = load_bundle(dir, cfg);

    std::size_t N = 0;
    if (cfg.horizon) {
        N = *cfg.horizon;
    } else if (cfg.horizon_auto) {
        if (!bundle) throw Error("simulate: horizon \"auto\" needs certificates.json; run certify first");
        N = static_cast<std::size_t>(bundle->N_min);
    } else {
        throw ConfigError("config: \"horizon\" required for simulate");
    }
    if (cfg.x0s.empty()) throw ConfigError("config: \"simulate.x0\" required (or pass --x0)");

    const LqrInit lqr_cost = cost_lqr(cfg);
    const Policy lqr_policy = linear_policy(lqr_cost.K);
    const MonomialBasis quad(cfg.sys.n(), {2});

    json runs = json::array();
    json skipped = json::array();
    for (const std::string& terminal : cfg.terminals) {
        const ValueApproximant Vf =
            terminal == "avi" ? tr.V_final : ValueApproximant::from_quadratic(quad, lqr_cost.P);
        const OcpProblem prob(cfg.sys, cfg.cost, Vf, N, cfg.X, cfg.U);
        for (std::size_t i = 0; i < cfg.x0s.size(); ++i) {
            const Vector& x0 = cfg.x0s[i];
            const std::string tag = terminal + "_" + std::to_string(i);
            if (!cfg.X.contains(x0)) {
                err << "simulate: x0 #" << i << " lies outside the state box; skipped\n";
                skipped.push_back({{"tag", tag}, {"x0", io::to_json(x0)}, {"reason", "outside state box"}});
                continue;
            }
            // Feasible candidates bound V_N(x0) from above before optimizing.
            std::optional<double> candidate;
            for (const Policy& pol : {lqr_policy, Policy([m = cfg.sys.m()](const Vector&) { return Vector(Vector::Zero(m)); })}) {
                try {
                    const SequenceEvaluation ev = candidate_value(prob, x0, pol);
                    if (ev.violation == 0.0 && (!candidate || ev.value < *candidate)) candidate = ev.value;
                } catch (const DomainError&) {
                }
            }

            RecedingHorizonOptions ro;
            ro.stop_tol = cfg.stop_tol;
            ro.delta_lstar = cfg.avi.delta_lstar;
            ro.initial_policy = lqr_policy;
            if (bundle && terminal == "avi") ro.xf_level = bundle->eps;
            ClosedLoopResult res;
            try {
                res = receding_horizon(prob, x0, cfg.steps, ro);
            } catch (const Error& e) {
                err << "simulate: " << tag << ": " << e.what() << "; skipped\n";
                skipped.push_back({{"tag", tag}, {"x0", io::to_json(x0)}, {"reason", e.what()}});
                continue;
            }
            const std::string file = "trajectory_" + tag + ".csv";
            write_artifact(dir, man, file, io::trajectory_csv(res.trajectory, {"V_N", "alpha"}, {res.V_N, res.alpha}));

            json r;
            r["tag"] = tag;
            r["file"] = file;
            r["terminal"] = terminal;
            r["x0"] = io::to_json(x0);
            r["N"] = N;
            r["steps"] = res.trajectory.steps();
            r["J"] = res.J;
            r["V_N_x0"] = res.V_N.front();
            r["candidate_value"] = candidate ? json(*candidate) : json(nullptr);
            r["final_state_norm"] = res.trajectory.states.back().norm();
            r["soft_infeasible_steps"] = res.soft_infeasible_steps;
            r["first_state_violation"] =
                res.trajectory.first_state_violation ? json(*res.trajectory.first_state_violation) : json(nullptr);
            const RdpReport rdp0 = rdp_check(res, 0.0, cfg.avi.delta_lstar);
            r["min_alpha"] = rdp0.checked ? json(rdp0.min_alpha) : json(nullptr);
            r["alpha_positive"] = !rdp0.checked || rdp0.min_alpha > 0.0;
            if (bundle) {
                r["beta"] = bundle->beta;
                r["V_N_below_beta"] = res.V_N.front() <= bundle->beta;
                r["candidate_below_beta"] = candidate ? json(*candidate <= bundle->beta) : json(nullptr);
                const double Nd = static_cast<double>(N);
                r["N_certified"] = Nd >= bundle->N_min;
                if (Nd >= bundle->n1.N_prime) {
                    const double a1 = bundle->alpha1_at(Nd);
                    r["alpha1"] = a1;
                    const RdpReport rdp = rdp_check(res, a1, cfg.avi.delta_lstar);
                    r["rdp_pass"] = rdp.pass;
                    r["performance_bound"] = a1 > 0.0 ? json(res.V_N.front() / a1) : json(nullptr);
                    r["J_within_bound"] = a1 > 0.0 ? json(res.J <= res.V_N.front() / a1) : json(nullptr);
                }
                if (terminal == "avi") {
                    bool all_in = true;
                    for (bool t : res.terminal_in_Xf) all_in = all_in && t;
                    r["terminal_in_Xf"] = all_in;
                }
            }
            runs.push_back(r);
            log << "simulate: " << tag << ": " << res.trajectory.steps() << " steps, J = " << io::fmt17(res.J)
                << ", |x_end| = " << io::fmt17(res.trajectory.states.back().norm()) << "\n";
        }
    }
    json cl{{"config_hash", cfg.hash}, {"runs", runs}, {"skipped", skipped}};
    write_artifact(dir, man, kClosedLoop, io::dump17(cl));
    save_manifest(dir, man);
    return kOk;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

/// Human-readable summary of an output directory. Missing artifacts are named and yield kError.
inline int cmd_report(const std::string& out_dir, std::ostream& out = std::cout)
{
    const fs::path dir(out_dir);
    std::vector<std::string> expected{kManifest, kTrain, kWeights, kErrors, kTheorem1, kCertificates, kClosedLoop};
    std::vector<std::string> present;
    std::vector<std::string> missing;
    auto classify = [&](const std::string& name) {
        (fs::exists(dir / name) ? present : missing).push_back(name);
    };
    for (const auto& name : expected) classify(name);
    if (present.empty()) {
        out << "no artifacts in " << out_dir << "\n";
        return kError;
    }
    std::optional<json> cl;
    if (fs::exists(dir / kClosedLoop)) {
        cl = io::read_json((dir / kClosedLoop).string());
        for (const json& r : cl->at("runs")) classify(r.at("file").get<std::string>());
    }
    std::sort(missing.begin(), missing.end());

    auto num = [](const json& j, const char* key) -> std::string {
        if (!j.contains(key) || j[key].is_null()) return "n/a";
        if (j[key].is_boolean()) return j[key].get<bool>() ? "yes" : "no";
        return io::fmt17(j[key].get<double>());
    };
    auto row = [&](const std::string& name, const std::string& value) {
        out << "  " << name << std::string(name.size() < 28 ? 28 - name.size() : 1, ' ') << value << "\n";
    };

    out << "summary of " << out_dir << "\n";
    if (fs::exists(dir / kTrain)) {
        const json tr = io::read_json((dir / kTrain).string());
        row("c", num(tr, "c"));
        row("gamma0", num(tr, "gamma0"));
        row("final iteration index", num(tr, "iterations"));
    }
    bool certified_N = false;
    if (fs::exists(dir / kCertificates)) {
        const json b = io::read_json((dir / kCertificates).string());
        row("(C, sigma)", "(" + num(b, "C") + ", " + num(b, "sigma") + ")");
        row("d", num(b, "d"));
        row("gamma_V", num(b, "gamma_V"));
        row("beta", num(b, "beta"));
        row("N1", num(b.at("N1"), "N1"));
        row("N2", num(b.at("N2_beta"), "N2"));
        row("N2 (literal c variant)", num(b.at("N2_literal_c"), "N2"));
        row("N_min", num(b, "N_min"));
        row("chosen N", num(b, "N_user"));
        certified_N = b.value("N_user_certified", false);
    }
    if (cl) {
        for (const json& r : cl->at("runs")) {
            out << "  run " << r.at("tag").get<std::string>() << "\n";
            row("    N", num(r, "N"));
            row("    min empirical alpha", num(r, "min_alpha"));
            row("    J", num(r, "J"));
            row("    V_N(x0)", num(r, "V_N_x0"));
            row("    bound V_N(x0)/alpha1", num(r, "performance_bound"));
        }
        for (const json& s : cl->at("skipped")) {
            out << "  skipped " << s.at("tag").get<std::string>() << ": " << s.at("reason").get<std::string>() << "\n";
        }
    }

    bool gates_ok = true;
    bool margin_ok = false;
    if (fs::exists(dir / kManifest)) {
        const json man = io::read_json((dir / kManifest).string());
        out << "gates\n";
        for (auto it = man.at("gates").begin(); it != man.at("gates").end(); ++it) {
            const json& g = it.value();
            std::string state = "not evaluated";
            if (g.value("evaluated", false)) {
                const bool pass = g.value("pass", false);
                state = pass ? "pass" : (g.value("warning_only", false) ? "fail (warning)" : "fail");
                if (!pass && !g.value("warning_only", false)) gates_ok = false;
                if (it.key() == "stability_margin") margin_ok = pass;
            }
            row(it.key(), state);
        }
    }
    if (certified_N) out << "guarantee: MPC with the trained terminal cost, horizon at or above N_min\n";
    else if (margin_ok) out << "guarantee: stability margin of the standalone greedy controller only\n";
    else out << "guarantee: none certified\n";

    if (!missing.empty()) {
        out << "missing artifacts:";
        for (const auto& m : missing) out << " " << m;
        out << "\n";
        return kError;
    }
    return gates_ok ? kOk : kGateFailure;
}

}  // namespace adpmpc::pipeline
