pub mod error;
pub mod rand_basis;
pub mod special;
pub mod subspace;
pub mod zoo;
pub mod models;
pub mod data;
pub mod wire;
pub mod federation;
pub mod net;
pub mod bench;
