//! Dense tensors, index maps, unfoldings, TTM and fiber gathers.

pub mod dense;
pub mod fibers;
pub mod io;
pub mod shape;
pub mod ttm;
pub mod unfold;

pub use dense::{frobenius_norm, rel_error, DenseTensor};
pub use fibers::{extract_fibers, extract_group_fibers};
pub use io::{load_tensor, read_tensor, save_tensor, write_tensor};
pub use shape::{linear_index, tuple_index, ModeSet, Shape};
pub use ttm::{multi_ttm, ttm, ttm_t};
pub use unfold::{set_unfold_byte_cap, unfold, unfold_byte_cap, unfold_set};
