pub mod ablation;
pub mod cf;
pub mod ere;
pub mod kgfile;
pub mod model;
pub mod krl;
pub mod rng;
pub mod store;
pub mod synth;
pub mod train;
