//! Clock-glitch fault-injection laboratory for a timing-annotated RV32IM
//! pipeline.

pub mod assembler;
pub mod glitch;
pub mod isa;
pub mod latch;
pub mod machine;
pub mod timing;
pub mod pipeline;
pub mod workloads;
pub mod rat;
pub mod campaign;
