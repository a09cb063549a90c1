//! Deep latent-variable models trained with amortized variational inference.
//!
//! The crate is self-contained: dense tensors and a reverse-mode tape
//! ([`tensor`], [`tape`]), distributions and networks, posterior families built
//! from normalizing flows ([`flows`]), the ELBO and its variants
//! ([`objectives`]), optimizers ([`optim`]) and dataset / checkpoint I/O
//! ([`data_io`]).

pub mod data_io;
pub mod distributions;
pub mod error;
pub mod flows;
pub mod gradcheck;
pub mod networks;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
