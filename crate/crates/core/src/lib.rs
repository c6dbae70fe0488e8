pub mod checker;
pub mod cli;
pub mod diag;
pub mod effects;
pub mod frontend;
pub mod ltl;
pub mod memstace;
pub mod par;
pub mod patcher;
pub mod validator;
