#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "adpmpc/avi.hpp"
#include "adpmpc/errors.hpp"
#include "adpmpc/system.hpp"

namespace adpmpc::io {

using json = nlohmann::json;

/// %.17g; non-finite values become "nan", "inf" or "-inf".
inline std::string fmt17(double v)
{
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace detail {

inline void dump(const json& j, std::ostream& os, int indent, int level)
{
    const std::string pad(static_cast<std::size_t>(indent * (level + 1)), ' ');
    const std::string pad_close(static_cast<std::size_t>(indent * level), ' ');
    switch (j.type()) {
    case json::value_t::object: {
        if (j.empty()) {
            os << "{}";
            return;
        }
        os << "{\n";
        bool first = true;
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (!first) os << ",\n";
            first = false;
            os << pad << json(it.key()).dump() << ": ";
            dump(it.value(), os, indent, level + 1);
        }
        os << "\n" << pad_close << "}";
        return;
    }
    case json::value_t::array: {
        if (j.empty()) {
            os << "[]";
            return;
        }
        os << "[";
        bool first = true;
        for (const auto& v : j) {
            if (!first) os << ", ";
            first = false;
            dump(v, os, indent, level + 1);
        }
        os << "]";
        return;
    }
    case json::value_t::number_float: {
        const double v = j.get<double>();
        if (std::isfinite(v)) os << fmt17(v);
        else os << "null";
        return;
    }
    default:
        os << j.dump();
    }
}

}  // namespace detail

/// Serializes JSON with every floating-point number at 17 significant digits.
inline std::string dump17(const json& j)
{
    std::ostringstream os;
    detail::dump(j, os, 2, 0);
    os << "\n";
    return os.str();
}

inline void write_text(const std::string& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open " + path + " for writing");
    out << text;
    if (!out) throw Error("failed writing " + path);
}

inline std::string read_text(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline json read_json(const std::string& path)
{
    try {
        return json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

inline json to_json(const Vector& v)
{
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline json to_json(const Matrix& M)
{
    json a = json::array();
    for (Eigen::Index i = 0; i < M.rows(); ++i) a.push_back(to_json(Vector(M.row(i).transpose())));
    return a;
}

inline Vector vector_from_json(const json& j, const std::string& field)
{
    if (!j.is_array()) throw ConfigError(field + ": expected an array of numbers");
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_number()) throw ConfigError(field + ": expected numbers");
        v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
    }
    return v;
}

inline Matrix matrix_from_json(const json& j, const std::string& field)
{
    if (!j.is_array() || j.empty() || !j[0].is_array()) throw ConfigError(field + ": expected an array of rows");
    const std::size_t cols = j[0].size();
    Matrix M(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < j.size(); ++i) {
        if (!j[i].is_array() || j[i].size() != cols) throw ConfigError(field + ": ragged matrix");
        M.row(static_cast<Eigen::Index>(i)) = vector_from_json(j[i], field).transpose();
    }
    return M;
}

/// CSV `k,x1..xn,u1..um,l[,extra...]`; the final row has empty input and cost fields.
inline std::string trajectory_csv(const Trajectory& traj, const std::vector<std::string>& extra_names = {},
                                  const std::vector<std::vector<double>>& extra_columns = {})
{
    if (traj.states.empty()) throw InvalidArgument("trajectory_csv: empty trajectory");
    const Eigen::Index n = traj.states.front().size();
    const Eigen::Index m = traj.inputs.empty() ? 0 : traj.inputs.front().size();
    std::ostringstream os;
    os << "k";
    for (Eigen::Index j = 0; j < n; ++j) os << ",x" << j + 1;
    for (Eigen::Index j = 0; j < m; ++j) os << ",u" << j + 1;
    os << ",l";
    for (const auto& name : extra_names) os << "," << name;
    os << "\n";
    for (std::size_t k = 0; k < traj.states.size(); ++k) {
        os << k;
        for (Eigen::Index j = 0; j < n; ++j) os << "," << fmt17(traj.states[k][j]);
        const bool has_input = k < traj.inputs.size();
        for (Eigen::Index j = 0; j < m; ++j) os << "," << (has_input ? fmt17(traj.inputs[k][j]) : "");
        os << "," << (has_input ? fmt17(traj.stage_costs[k]) : "");
        for (const auto& col : extra_columns) {
            os << ",";
            if (k < col.size() && !std::isnan(col[k])) os << fmt17(col[k]);
        }
        os << "\n";
    }
    return os.str();
}

/// CSV `iter,w1..wl`, one row per stored weight vector.
inline std::string weights_csv(const AviRun& run)
{
    std::ostringstream os;
    os << "iter";
    for (Eigen::Index j = 0; j < run.basis.size(); ++j) os << ",w" << j + 1;
    os << "\n";
    for (std::size_t i = 0; i < run.weights.size(); ++i) {
        os << i;
        for (Eigen::Index j = 0; j < run.weights[i].size(); ++j) os << "," << fmt17(run.weights[i][j]);
        os << "\n";
    }
    return os.str();
}

/// CSV `iter,sup_eps,c_i` with iter = -1 for the initial cost.
inline std::string errors_csv(const AviRun& run)
{
    std::ostringstream os;
    os << "iter,sup_eps,c_i\n";
    for (std::size_t i = 0; i < run.c_per_iter.size(); ++i) {
        os << static_cast<long>(i) - 1 << "," << fmt17(run.sup_eps_per_iter[i]) << "," << fmt17(run.c_per_iter[i])
           << "\n";
    }
    return os.str();
}

inline std::string theorem1_csv(const Theorem1Report& rep)
{
    std::ostringstream os;
    os << "iter,sample,value,lower,upper\n";
    for (const auto& v : rep.violations) {
        os << v.iter << "," << v.sample << "," << fmt17(v.value) << "," << fmt17(v.lower) << "," << fmt17(v.upper)
           << "\n";
    }
    return os.str();
}

/// 64-bit FNV-1a, hex encoded.
inline std::string fnv1a_hex(const std::string& data)
{
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : data) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace adpmpc::io
