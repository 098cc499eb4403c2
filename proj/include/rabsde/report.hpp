#pragma once

#include "rabsde/driver.hpp"
#include "rabsde/error.hpp"
#include "rabsde/lattice.hpp"
#include "rabsde/solver.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

namespace rabsde {

namespace detail {

inline void write_json_string(std::ostream& os, const std::string& s) {
    os << nlohmann::json(s).dump();
}

inline void write_json(std::ostream& os, const nlohmann::json& j, int indent) {
    const std::string pad(static_cast<std::size_t>(indent + 2), ' ');
    const std::string close(static_cast<std::size_t>(indent), ' ');
    switch (j.type()) {
        case nlohmann::json::value_t::object: {
            if (j.empty()) {
                os << "{}";
                return;
            }
            // nlohmann::json stores objects in a std::map, so keys come out sorted
            os << "{\n";
            bool first = true;
            for (auto it = j.begin(); it != j.end(); ++it) {
                if (!first) os << ",\n";
                first = false;
                os << pad;
                write_json_string(os, it.key());
                os << ": ";
                write_json(os, it.value(), indent + 2);
            }
            os << "\n" << close << "}";
            return;
        }
        case nlohmann::json::value_t::array: {
            if (j.empty()) {
                os << "[]";
                return;
            }
            os << "[\n";
            for (std::size_t i = 0; i < j.size(); ++i) {
                if (i) os << ",\n";
                os << pad;
                write_json(os, j[i], indent + 2);
            }
            os << "\n" << close << "]";
            return;
        }
        case nlohmann::json::value_t::number_float: {
            double x = j.get<double>();
            if (std::isfinite(x))
                os << format_double(x);
            else
                write_json_string(os, std::isnan(x) ? "nan" : (x > 0 ? "inf" : "-inf"));
            return;
        }
        default:
            os << j.dump();
    }
}

}  // namespace detail

/// Stable text form of a report: sorted keys, two-space indent, every double
/// printed with 17 significant digits, non-finite values as strings.
inline std::string render_json(const nlohmann::json& report) {
    std::ostringstream os;
    detail::write_json(os, report, 0);
    os << "\n";
    return os.str();
}

inline constexpr const char* kCsvHeader = "step,up_count,default_step,Y,Z,U,K,psi,S";

/// One row per lattice node in (step, index) order. K is the node's reflection
/// increment; default_step is ALIVE before default.
inline std::string render_csv(const Solution& sol, const DefaultLattice& lat) {
    std::ostringstream os;
    os << kCsvHeader << "\n";
    for (int k = 0; k <= lat.n_steps(); ++k)
        for (std::size_t i = 0; i < DefaultLattice::node_count(k); ++i) {
            NodeId n = DefaultLattice::node(k, i);
            os << n.step << ',' << n.up << ',';
            if (n.alive())
                os << "ALIVE";
            else
                os << n.default_step;
            for (double v : {sol.Y(k, i), sol.Z(k, i), sol.U(k, i), sol.dK(k, i), sol.psi(k, i), sol.S(k, i)})
                os << ',' << detail::format_double(v);
            os << "\n";
        }
    return os.str();
}

/// Writes `text` to `path`, or to stdout when `path` is empty or "-".
inline void emit_text(const std::string& text, const std::string& path, std::ostream& fallback) {
    if (path.empty() || path == "-") {
        fallback << text;
        fallback.flush();
        return;
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out << text;
    out.close();
    if (!out) throw IoError("error while writing '" + path + "'");
}

}  // namespace rabsde
