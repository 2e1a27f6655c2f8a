//! Functional and timing simulator for bit-serial DNN inference inside the
//! SRAM arrays of a last-level cache.

pub mod bitarray;
pub mod costmodel;
pub mod engine;
pub mod geometry;
pub mod mapper;
pub mod model_io;
pub mod transpose;
