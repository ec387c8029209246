pub mod diffcore;
pub mod epigeo;
pub mod imageio;
pub mod scene;
pub mod matcher;
pub mod sampler;
pub mod refine;
pub mod evalkit;
pub mod cli;
