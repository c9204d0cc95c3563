pub mod autodiff;
pub mod nn;
pub mod geometry;
pub mod image;
pub mod rasterizer;
pub mod losses;
pub mod scene;
pub mod densify;
pub mod io;
pub mod synthetic;
pub mod stego;
#[cfg(test)]
pub(crate) mod testutil;
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
