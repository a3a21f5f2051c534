//! Molecular-dynamics trajectories to canonical graph-potential features, an
//! autoencoder with a linear latent timestep operator, and the inverse path
//! from features back to coordinates.

pub mod experiment;
pub mod geometry_recon;
pub mod graph_repr;
pub mod neural;
pub mod operator_model;
pub mod subvolume;
pub mod trajectory_io;
