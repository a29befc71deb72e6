//! Denoising diffusion on deformable tetrahedral grids.
//!
//! The crate is organised bottom-up:
//!
//! - [`tetgrid`]: multi-resolution tetrahedral grids and their kernel-slot
//!   adjacency.
//! - [`tensorops`]: per-vertex feature operators (tetra convolution, pooling,
//!   unpooling, normalisation, activations) with a reverse-mode tape and Adam.
//! - [`diffusion`]: noise schedule, forward noising, ancestral sampling,
//!   test-time guidance and Slerp interpolation.
//! - [`surface`]: marching tetrahedra, mesh measures, OBJ/PLY I/O.
//! - [`databake`]: turning watertight meshes into per-vertex training fields.
//! - [`denoiser`]: the tetrahedral U-Net and its training loop.
//! - [`metrics`]: Chamfer distance, exact EMD and 1-NNA.

pub mod databake;
pub mod denoiser;
pub mod diffusion;
pub mod field;
pub mod geom;
pub mod metrics;
pub mod rng;
pub mod spatial;
pub mod surface;
pub mod tensorops;
pub mod tetgrid;
