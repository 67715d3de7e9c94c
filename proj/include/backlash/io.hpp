#pragma once

#include "backlash/limits.hpp"
#include "backlash/stabilize.hpp"

#include <json.hpp>

#include <string>

namespace backlash {

using Json = nlohmann::ordered_json;

inline constexpr const char* kSchema = "backlash-opt/1";

/// Shortest form with 17 significant digits.
std::string format_double(double x);

/// Columns t, x_1..x_n, y, v_1..v_n, w, u_1..u_m, nu. At an impact the pre-impact
/// state is written as an extra row with the same time, before the post-impact row.
void write_trajectory_csv(const std::string& path, const Trajectory& traj);

/// Inverse of write_trajectory_csv. Rates and interval regimes are recomputed from the
/// model; gamma empty means limit dynamics.
Trajectory read_trajectory_csv(const std::string& path, const CanonicalModel& model, std::optional<double> gamma,
                               const IntegratorConfig& cfg = {});

/// Columns t, q_1..q_n, sigma, p_1..p_n, r, sigma_left, mu, H.
void write_adjoint_csv(const std::string& path, const AdjointTrajectory& adj);
AdjointTrajectory read_adjoint_csv(const std::string& path, const CanonicalModel& model, const Trajectory& primal);

Json to_json(const Vec& v);
Json to_json(const Mat& m);
Json to_json(const SystemState& s);
Json to_json(const AdjointState& a);
AdjointState adjoint_state_from_json(const Json& j, int n);
Json to_json(const BangBangControl& c);
Json to_json(const OptimalResult& r);
Json to_json(const PMPReport& r);
Json to_json(const ConvergenceReport& r);
Json to_json(const StableNeighborhood& nb);
Json trajectory_summary(const Trajectory& traj);

/// Writes j with the schema tag first.
void write_json(const std::string& path, Json j);
Json read_json(const std::string& path);

}  // namespace backlash
