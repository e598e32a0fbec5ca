//! Two explicitly solvable mean-field control problems used as ground truth:
//! a linear-quadratic problem solved through a Riccati system, and
//! log-utility consumption from a mean-field cash flow.

mod consumption;
mod lq;

pub use consumption::{
    consumption_model, consumption_objective, consumption_policy, consumption_solution,
    consumption_value, consumption_value_and_objective, ConsumptionSolution, TerminalUtility,
};
pub use lq::{
    lq_cost, lq_feedback, lq_model, lq_value, riccati_rhs, riccati_solve, riccati_solve_form,
    RiccatiCurves, RiccatiForm, BLOW_UP_GUARD,
};
