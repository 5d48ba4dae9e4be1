pub mod frames;
pub mod gates;
pub mod noiselab;
pub mod optim;
pub mod qlinalg;
pub mod sequencer;
pub mod stark;
pub mod tomography;
