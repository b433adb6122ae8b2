pub mod agent;
pub mod aip;
pub mod constellation;
pub mod orchestrator;
pub mod planner;
pub mod sim;
pub mod time;
