#pragma once

#include "rabsde/driver.hpp"
#include "rabsde/error.hpp"
#include "rabsde/solver.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace rabsde {

/// Parameters for the American put cross-check (payoff max(strike - spot e^{sigma w}, 0)).
struct CrrSpec {
    double spot = 1.0;
    double strike = 1.0;
    double rate = 0.0;
    double sigma = 1.0;
};

/// Everything a scenario document carries besides the problem itself.
struct ScenarioFile {
    Scenario scenario;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> outputs;
    std::optional<CrrSpec> crr;
};

inline constexpr const char* kKnownOutputs[] = {"solution", "validation", "stopping", "running_max", "csv"};

namespace detail {

class SchemaReader {
public:
    explicit SchemaReader(const nlohmann::json& doc) : doc_(doc) {}

    std::vector<SchemaError::Issue> issues;

    void fail(const std::string& ptr, const std::string& msg) { issues.push_back({ptr, msg}); }

    const nlohmann::json* get(const char* key, bool required) {
        auto it = doc_.find(key);
        if (it == doc_.end()) {
            if (required) fail(std::string("/") + key, "required key is missing");
            return nullptr;
        }
        return &*it;
    }

    std::optional<double> number(const char* key, bool required) {
        const auto* v = get(key, required);
        if (!v) return std::nullopt;
        if (!v->is_number()) {
            fail(std::string("/") + key, "must be a number");
            return std::nullopt;
        }
        return v->get<double>();
    }

    std::optional<long long> integer(const char* key, bool required) {
        const auto* v = get(key, required);
        if (!v) return std::nullopt;
        if (v->is_number_integer()) return v->get<long long>();
        if (v->is_number_float()) {
            double x = v->get<double>();
            if (std::isfinite(x) && x == std::floor(x) && std::abs(x) < 1e15) return static_cast<long long>(x);
            fail(std::string("/") + key, "must be an integer, got " + detail::format_double(x));
            return std::nullopt;
        }
        fail(std::string("/") + key, "must be an integer");
        return std::nullopt;
    }

    std::optional<std::string> string(const char* key, bool required) {
        const auto* v = get(key, required);
        if (!v) return std::nullopt;
        if (!v->is_string()) {
            fail(std::string("/") + key, "must be a string");
            return std::nullopt;
        }
        return v->get<std::string>();
    }

    std::optional<DriverExpr> expression(const char* key, bool required) {
        auto text = string(key, required);
        if (!text) return std::nullopt;
        try {
            return DriverExpr::parse(*text);
        } catch (const ParseError& e) {
            fail(std::string("/") + key, e.what());
            return std::nullopt;
        }
    }

private:
    const nlohmann::json& doc_;
};

}  // namespace detail

/// Validates a parsed scenario document. All problems are collected and thrown
/// together as a SchemaError.
inline ScenarioFile scenario_from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) throw SchemaError(std::vector<SchemaError::Issue>{{"", "scenario document must be a JSON object"}});
    detail::SchemaReader r(doc);
    ScenarioFile out;
    Scenario& sc = out.scenario;

    static const char* known[] = {"horizon", "steps", "delta_steps", "lambda", "lambda_max", "driver",
                                  "form", "obstacle", "terminal", "scheme", "implicit_tol",
                                  "implicit_max_iter", "seed", "outputs", "oracle"};
    for (const auto& [key, value] : doc.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || key == k;
        if (!ok) r.fail("/" + key, "unknown key");
    }

    auto horizon = r.number("horizon", true);
    if (horizon && !(*horizon > 0.0)) r.fail("/horizon", "must be positive");
    auto steps = r.integer("steps", true);
    if (steps && (*steps < 1 || *steps > 4096)) r.fail("/steps", "must be in [1, 4096]");
    auto delta = r.integer("delta_steps", false);
    if (delta && *delta < 0) r.fail("/delta_steps", "must be non-negative");

    std::vector<double> lambdas;
    bool lambda_ok = true;
    if (const auto* lam = r.get("lambda", false)) {
        if (lam->is_number()) {
            if (steps && *steps >= 1) lambdas.assign(static_cast<std::size_t>(*steps), lam->get<double>());
        } else if (lam->is_array()) {
            for (std::size_t i = 0; i < lam->size(); ++i) {
                if (!(*lam)[i].is_number()) {
                    r.fail("/lambda/" + std::to_string(i), "must be a number");
                    lambda_ok = false;
                } else {
                    lambdas.push_back((*lam)[i].get<double>());
                }
            }
            if (steps && lambda_ok && lambdas.size() != static_cast<std::size_t>(*steps)) {
                r.fail("/lambda", "array length " + std::to_string(lambdas.size()) + " differs from steps");
                lambda_ok = false;
            }
        } else {
            r.fail("/lambda", "must be a number or an array of numbers");
            lambda_ok = false;
        }
    } else if (steps && *steps >= 1) {
        lambdas.assign(static_cast<std::size_t>(*steps), 0.0);
    }
    for (std::size_t i = 0; i < lambdas.size(); ++i)
        if (!(lambdas[i] >= 0.0)) {
            r.fail("/lambda", "intensity must be non-negative");
            lambda_ok = false;
            break;
        }
    auto lambda_max = r.number("lambda_max", false);

    auto driver = r.expression("driver", false);
    auto form = r.string("form", false);
    if (form && *form != "H" && *form != "M") r.fail("/form", "must be \"H\" or \"M\"");
    auto obstacle = r.expression("obstacle", false);
    auto terminal = r.expression("terminal", true);
    auto scheme = r.string("scheme", false);
    if (scheme && *scheme != "explicit" && *scheme != "implicit")
        r.fail("/scheme", "must be \"explicit\" or \"implicit\"");
    auto itol = r.number("implicit_tol", false);
    if (itol && !(*itol > 0.0)) r.fail("/implicit_tol", "must be positive");
    auto imax = r.integer("implicit_max_iter", false);
    if (imax && *imax < 1) r.fail("/implicit_max_iter", "must be at least 1");

    if (const auto* seed = r.get("seed", false)) {
        if (seed->is_number_unsigned())
            out.seed = seed->get<std::uint64_t>();
        else
            r.fail("/seed", "must be a non-negative integer");
    }
    if (const auto* outs = r.get("outputs", false)) {
        if (!outs->is_array()) {
            r.fail("/outputs", "must be an array of strings");
        } else {
            for (std::size_t i = 0; i < outs->size(); ++i) {
                const auto& o = (*outs)[i];
                bool known_output = false;
                if (o.is_string())
                    for (const char* k : kKnownOutputs) known_output = known_output || o.get<std::string>() == k;
                if (!known_output)
                    r.fail("/outputs/" + std::to_string(i), "unknown output");
                else
                    out.outputs.push_back(o.get<std::string>());
            }
        }
    }
    if (const auto* oracle = r.get("oracle", false)) {
        if (!oracle->is_object() || oracle->value("type", std::string()) != "crr_put") {
            r.fail("/oracle", "must be an object with \"type\": \"crr_put\"");
        } else {
            CrrSpec crr;
            for (auto [key, slot] : {std::pair{"spot", &crr.spot}, std::pair{"strike", &crr.strike},
                                     std::pair{"rate", &crr.rate}, std::pair{"sigma", &crr.sigma}}) {
                auto it = oracle->find(key);
                if (it == oracle->end()) continue;
                if (!it->is_number())
                    r.fail(std::string("/oracle/") + key, "must be a number");
                else
                    *slot = it->get<double>();
            }
            out.crr = crr;
        }
    }

    if (!r.issues.empty()) throw SchemaError(std::move(r.issues));

    sc.horizon = *horizon;
    sc.steps = static_cast<int>(*steps);
    sc.delta_steps = static_cast<int>(delta.value_or(0));
    double lam_hi = lambdas.empty() ? 0.0 : *std::max_element(lambdas.begin(), lambdas.end());
    sc.intensity = IntensitySpec{lambdas, lambda_max.value_or(lam_hi)};
    sc.driver = TransformedDriver(driver.value_or(DriverExpr::parse("0")),
                                  form.value_or("H") == "M" ? DriverForm::m_form : DriverForm::h_form);
    sc.obstacle = obstacle.value_or(DriverExpr::parse("-1e9"));
    sc.terminal = *terminal;
    sc.scheme = scheme.value_or("explicit") == "implicit" ? Scheme::implicit : Scheme::explicit_euler;
    if (itol) sc.implicit_tol = *itol;
    if (imax) sc.implicit_max_iter = static_cast<int>(*imax);

    // Checks that need the assembled lattice.
    std::vector<SchemaError::Issue> late;
    try {
        detail::require_state_only(sc.obstacle, "obstacle");
    } catch (const Error& e) {
        late.push_back({"/obstacle", e.what()});
    }
    try {
        detail::require_state_only(sc.terminal, "terminal");
    } catch (const Error& e) {
        late.push_back({"/terminal", e.what()});
    }
    if (late.empty()) {
        for (const auto& msg : scenario_issues(sc)) {
            std::string ptr = "";
            if (msg.find("terminal value") != std::string::npos) ptr = "/terminal";
            else if (msg.find("intensity") != std::string::npos || msg.find("lambda") != std::string::npos)
                ptr = "/lambda";
            else if (msg.find("horizon") != std::string::npos) ptr = "/horizon";
            late.push_back({ptr, msg});
        }
    }
    if (late.empty() && sc.scheme == Scheme::explicit_euler) {
        SampleGrid coarse;
        for (Var v : {Var::y, Var::z, Var::ey, Var::ez, Var::u, Var::w}) coarse[v].points = 5;
        double c_dt = m_form_lipschitz(sc, coarse).overall() * sc.lattice().dt();
        if (c_dt > 0.5)
            late.push_back({"/scheme", "C'*dt = " + detail::format_double(c_dt) +
                                           " exceeds 0.5; use \"scheme\": \"implicit\""});
    }
    if (!late.empty()) throw SchemaError(std::move(late));
    return out;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("error while reading '" + path + "'");
    return ss.str();
}

inline ScenarioFile load_scenario(const std::string& path) {
    std::string text = read_text_file(path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw SchemaError(std::vector<SchemaError::Issue>{{"", std::string("not valid JSON: ") + e.what()}});
    }
    return scenario_from_json(doc);
}

/// Document that loads back into an equivalent ScenarioFile.
inline nlohmann::json scenario_to_json(const ScenarioFile& f) {
    const Scenario& sc = f.scenario;
    nlohmann::json j;
    j["horizon"] = sc.horizon;
    j["steps"] = sc.steps;
    j["delta_steps"] = sc.delta_steps;
    j["lambda"] = sc.intensity.values;
    j["lambda_max"] = sc.intensity.lambda_max;
    j["driver"] = sc.driver.base().source();
    j["form"] = sc.driver.form() == DriverForm::m_form ? "M" : "H";
    j["obstacle"] = sc.obstacle.source();
    j["terminal"] = sc.terminal.source();
    j["scheme"] = sc.scheme == Scheme::implicit ? "implicit" : "explicit";
    j["implicit_tol"] = sc.implicit_tol;
    j["implicit_max_iter"] = sc.implicit_max_iter;
    if (f.seed) j["seed"] = *f.seed;
    if (!f.outputs.empty()) j["outputs"] = f.outputs;
    if (f.crr) {
        j["oracle"] = {{"type", "crr_put"},
                       {"spot", f.crr->spot},
                       {"strike", f.crr->strike},
                       {"rate", f.crr->rate},
                       {"sigma", f.crr->sigma}};
    }
    return j;
}

}  // namespace rabsde
