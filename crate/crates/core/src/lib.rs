pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod flow;
pub mod geometry;
pub mod image;
pub mod localizer;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod scene;
pub mod trainer;
