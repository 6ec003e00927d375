//! Activation interchange: the `ACTV` record container and the `ACTW`
//! named-tensor container.
//!
//! `ACTV` layout (little-endian):
//!
//! ```text
//! header   magic "ACTV" | version u32 = 1 | d u32 | n_layers u32 | record_count u64
//!          | label_len u16 | label utf-8 | zero pad to a multiple of 32 bytes
//! record   pair_id u64 | polarity i8 | reserved u8 | layer u16 | reserved u32
//!          | d x f32
//! ```

mod actv;
mod actw;
mod set;

pub use actv::{
    decode_set, encode_set, file_size, header_len, read_set, read_set_with_dim, write_set,
    ACTV_MAGIC, ACTV_VERSION,
};
pub use actw::{read_tensors, write_tensors, Tensor, TensorFile, ACTW_MAGIC, ACTW_VERSION};
pub use set::{merge, ActivationRecord, ActivationSet};

pub use crate::corpus::Polarity;

pub(crate) fn ensure_parent(path: &std::path::Path) -> crate::Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e)),
        None => Ok(()),
    }
}
