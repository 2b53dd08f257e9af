pub mod grid;
pub mod expr;
pub mod problem;
pub mod hypotheses;
pub mod solvers;
pub mod dependence;
pub mod cli;
