pub mod corpus;
pub mod error;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

// Training builds and drops many small graph tensors per step; the system
// allocator spends a third of the wall clock on that.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;
