//! Image and label I/O, palettes and tiled inference.

pub mod image;
pub mod palette;
pub mod tiling;

pub use image::{load_image, read_pgm, to_rgb8, write_pgm, write_ppm};
pub use palette::{Palette, PaletteEntry};
pub use tiling::{crop, infer_tiled, pad_to, plan_tiles, stitch_logits, TilePlan};
