mod batch;
mod gradcheck;
mod mining;
mod optim;
mod pretrain;
mod records;
mod stage;

pub use batch::*;
pub use gradcheck::*;
pub use mining::*;
pub use optim::*;
pub use pretrain::*;
pub use records::*;
pub use stage::*;
