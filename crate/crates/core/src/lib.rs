//! Preference Transformer reward learning at desk scale.

pub mod checkpoint;
pub mod env;
pub mod error;
pub mod inference;
pub mod io;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod preference;
pub mod server;
pub mod tabular;
pub mod tape;
pub mod teacher;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

// The tape allocates and frees many large buffers per step; glibc returns
// them to the kernel each time.
#[cfg(feature = "mimalloc")]
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
