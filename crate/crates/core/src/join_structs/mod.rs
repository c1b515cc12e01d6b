//! In-memory components shared by the join engines.

pub mod budget;
pub mod cache;
pub mod disk_buffer;
pub mod intermediate;
pub mod stream_store;

pub use budget::{plan_budget, Alpha, BudgetRequest, MemoryBudget};
pub use cache::{CacheReader, FrequencyCache};
pub use disk_buffer::{BufferStatus, DiskBuffers, TransitionOutcome};
pub use intermediate::{Closed, IntermediateBuffer};
pub use stream_store::{QueueHandle, StoreFull, StreamStore};
