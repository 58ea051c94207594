//! Slot tagging navigation for dialogue state tracking.

pub mod checkpoint;
pub mod corpus;
pub mod decoder;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod schema;
pub mod text;
pub mod trainer;
