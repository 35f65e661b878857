#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "srnn/potentials.hpp"
#include "srnn/rigidbody.hpp"

namespace srnn {

enum class StepScheme { ExplicitEuler, RK4, Verlet, LieRK2, LieRK4, LieT2 };

inline constexpr StepScheme kAllSchemes[] = {StepScheme::ExplicitEuler, StepScheme::RK4,    StepScheme::Verlet,
                                             StepScheme::LieRK2,        StepScheme::LieRK4, StepScheme::LieT2};

std::string to_string(StepScheme s);
/// Accepts the canonical names (euler, rk4, verlet, cf2, cf4, liet2) and a few
/// aliases; throws std::invalid_argument otherwise.
StepScheme parse_scheme(std::string_view name);

/// Switches that reproduce alternative readings of the published formulas.
struct IntegratorOptions {
  bool verlet_literal = false;     // full h in both Verlet drifts
  bool asym_literal_left = false;  // rot_y applied on the left of R in the asym flow
  bool cf_literal_left = false;    // CF2/CF4 exponentials applied on the left of R
  bool cf4_literal_stage = false;  // CF4 fourth stage built on the F2 stage instead of the F1 stage
};

struct StepContext {
  SystemParams params;
  PotentialPtr V;
  ForcingPtr F;
  double h = 0.0;
  IntegratorOptions options;

  /// Throws std::invalid_argument on missing models or a zero/non-finite h.
  /// Negative h is allowed (time reversal).
  void validate() const;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::size_t step) : std::runtime_error(what), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

// Exact split flows. None of them touch state.t.
SystemState flow_ke(const SystemState& state, const SystemParams& params, double h);
SystemState flow_pe(const SystemState& state, const StepContext& ctx, double h);
SystemState flow_asym(const SystemState& state, const SystemParams& params, double h, bool literal_left = false);
SystemState flow_force(const SystemState& state, const StepContext& ctx, double h);

// One step of size ctx.h; t advances by h.
SystemState step_lie_t2(const SystemState& state, const StepContext& ctx);
SystemState step_euler(const SystemState& state, const StepContext& ctx);
SystemState step_rk4(const SystemState& state, const StepContext& ctx);
SystemState step_verlet(const SystemState& state, const StepContext& ctx);
SystemState step_cf2(const SystemState& state, const StepContext& ctx);
SystemState step_cf4(const SystemState& state, const StepContext& ctx);
SystemState step(StepScheme scheme, const SystemState& state, const StepContext& ctx);

struct RolloutOptions {
  enum class Keep { All, Last, Stride };
  Keep keep = Keep::All;
  std::size_t stride = 1;  // used with Keep::Stride; the final state is always kept
};

/// n steps of `scheme`. Returns the post-step states selected by `opts` (the
/// initial state is not included). A non-finite component raises
/// DivergenceError carrying the 1-based step index.
std::vector<SystemState> rollout(const SystemState& state, const StepContext& ctx, StepScheme scheme, std::size_t n,
                                 const RolloutOptions& opts = {});

}  // namespace srnn
