// SPDX-License-Identifier: Apache-2.0

#include "chunktrain/oracle.hpp"

#include <json.hpp>

namespace chunktrain {

std::string grad_report_to_json(const GradReport& rep) {
    nlohmann::json j;
    j["max_rel_err"] = rep.max_rel_err;
    j["mean_l2"] = rep.mean_l2();
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : rep.rows) {
        nlohmann::json row;
        row["name"] = r.name;
        row["layer"] = r.layer;
        row["l2_err"] = r.l2_err;
        row["rel_err"] = r.rel_err;
        row["ref_norm"] = r.ref_norm;
        rows.push_back(row);
    }
    j["rows"] = rows;
    return j.dump(2);
}

}  // namespace chunktrain
