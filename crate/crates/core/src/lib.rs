pub mod alloc;
pub mod checker;
pub mod driver;
pub mod gen;
pub mod instrument;
pub mod ir;
pub mod optimizer;
pub mod runtime;
pub mod shadow;
