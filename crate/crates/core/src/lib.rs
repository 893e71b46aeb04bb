//! Model predictive control whose parameters are personalized through
//! natural-language feedback.

pub mod cost;
pub mod error;
pub mod interpreter;
pub mod mppi;
pub mod plant;
pub mod scenarios;
pub mod session;
pub mod users;
pub mod theory;
