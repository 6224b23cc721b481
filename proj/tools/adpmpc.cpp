// Command-line driver: train, certify, simulate, report.
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "adpmpc/pipeline.hpp"

namespace {

adpmpc::Vector parse_state(const std::string& text)
{
    std::vector<double> vals;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        std::size_t used = 0;
        const double v = std::stod(item, &used);
        if (used != item.size()) throw adpmpc::ConfigError("--x0: cannot parse \"" + item + "\"");
        vals.push_back(v);
    }
    adpmpc::Vector x(static_cast<Eigen::Index>(vals.size()));
    for (std::size_t i = 0; i < vals.size(); ++i) x[static_cast<Eigen::Index>(i)] = vals[i];
    return x;
}

}  // namespace

int main(int argc, char** argv)
{
    namespace pl = adpmpc::pipeline;
    CLI::App app{"Terminal-cost training, certification and receding-horizon simulation"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::string out_dir;
    std::vector<std::string> x0_args;
    std::string terminal;

    auto* train = app.add_subcommand("train", "run value iteration and write the weight/error histories");
    auto* certify = app.add_subcommand("certify", "estimate (C, sigma) and the horizon certificates");
    auto* simulate = app.add_subcommand("simulate", "closed-loop runs from the configured initial states");
    auto* report = app.add_subcommand("report", "summarize an output directory");
    for (auto* sub : {train, certify, simulate}) {
        sub->add_option("--config", config_path, "pipeline configuration (JSON)")->required();
        sub->add_option("--out", out_dir, "output directory (default: output_dir of the config)");
    }
    simulate->add_option("--x0", x0_args, "initial state, comma separated; repeatable");
    simulate->add_option("--terminal", terminal, "terminal cost")->check(CLI::IsMember({"avi", "lqr"}));
    report->add_option("--config", config_path, "pipeline configuration (JSON)");
    report->add_option("--out", out_dir, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (report->parsed()) {
            if (out_dir.empty()) {
                if (config_path.empty()) throw adpmpc::ConfigError("report needs --out or --config");
                out_dir = pl::load_config(config_path).output_dir;
            }
            return pl::cmd_report(out_dir);
        }
        pl::PipelineConfig cfg = pl::load_config(config_path);
        if (out_dir.empty()) out_dir = cfg.output_dir;
        if (train->parsed()) return pl::cmd_train(cfg, out_dir);
        if (certify->parsed()) return pl::cmd_certify(cfg, out_dir);
        if (!x0_args.empty()) {
            cfg.x0s.clear();
            for (const auto& s : x0_args) {
                adpmpc::Vector x = parse_state(s);
                if (x.size() != cfg.sys.n()) throw adpmpc::ConfigError("--x0: expected " + std::to_string(cfg.sys.n()) + " components");
                cfg.x0s.push_back(std::move(x));
            }
        }
        if (!terminal.empty()) cfg.terminals = {terminal};
        return pl::cmd_simulate(cfg, out_dir);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return pl::kError;
    }
}
