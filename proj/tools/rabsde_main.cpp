#include "rabsde/app.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
    CLI::App cli{"Discrete-time lab for reflected anticipated BSDEs with a default jump"};
    cli.require_subcommand(1, 1);
    rabsde::app::RunFlags flags;
    std::uint64_t seed = 0;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--scenario", flags.scenario, "scenario JSON file");
        sub->add_option("--out", flags.out, "output path (stdout when omitted)");
        sub->add_option("--format", flags.format, "report format")->check(CLI::IsMember({"json", "csv"}));
        sub->add_option("--tol", flags.tol, "Picard tolerance");
        sub->add_option("--seed", seed, "generator seed");
        sub->add_option("--oracle", flags.oracle, "cross-check oracle")->check(CLI::IsMember({"crr", "none"}));
        sub->add_flag("--timing", flags.timing, "include wall-clock timing in the report");
    };
    add_common(cli.add_subcommand("solve", "backward induction with validation checks"));
    add_common(cli.add_subcommand("picard", "Picard iteration, cross-checked against backward induction"));
    add_common(cli.add_subcommand("stopping", "optimal stopping: brute force, tau rules, running max of K"));
    auto* cmp = cli.add_subcommand("compare", "comparison of two scenarios");
    add_common(cmp);
    cmp->add_option("--scenario2", flags.scenario2, "second scenario JSON file");
    cmp->add_option("--iterates", flags.max_iterates, "length of the iterate sequence");
    auto* suite = cli.add_subcommand("suite", "randomized comparison suite");
    add_common(suite);
    suite->add_option("--cases", flags.cases, "number of generated cases");
    suite->add_option("--iterates", flags.max_iterates, "length of each iterate sequence");

    try {
        cli.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = cli.exit(e);
        return code == 0 ? 0 : rabsde::app::kValidation;
    }
    auto* chosen = cli.get_subcommands().front();
    flags.command = chosen->get_name();
    if (chosen->count("--seed")) flags.seed = seed;
    return rabsde::app::run_and_emit(flags, std::cout, std::cerr);
}
