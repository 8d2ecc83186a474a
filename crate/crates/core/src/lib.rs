pub mod camera;
pub mod pose;
pub mod volume;
pub mod render;
pub mod haptics;
pub mod plugin;
pub mod scene;
pub mod sim;
pub mod streaming;
pub mod evalkit;
pub mod phantom;
