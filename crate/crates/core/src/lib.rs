//! Fact annotation, call and ignore masks, masked training objectives, cascade decoding
//! and evaluation for small language models that delegate hard tokens to a partner model.

pub mod batching;
pub mod cascade;
pub mod evalsuite;
pub mod factlabel;
pub mod formats;
pub mod lingparse;
pub mod maskbuild;
pub mod model;
pub mod objective;
pub mod provenance;
pub mod tokenmap;
