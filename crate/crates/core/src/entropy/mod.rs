//! Range coding, quantised CDF tables and the sequence container.

pub mod cdf;
pub mod coding;
pub mod container;
pub mod range_coder;

pub use cdf::{snap_sigma, CdfTable};
pub use coding::{
    decode_factorized, decode_gaussian, encode_factorized, encode_gaussian, gaussian_codelength,
};
pub use container::{read_container, write_container, Bitstream, FrameRecord, Header};
