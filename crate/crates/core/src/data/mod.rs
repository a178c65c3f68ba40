//! Image/mask ingestion, grid tiling, source-level splits and synthetic road
//! scenes.

mod io;
mod manifest;
mod synth;
mod tiling;

pub use io::*;
pub use manifest::*;
pub use synth::*;
pub use tiling::*;
