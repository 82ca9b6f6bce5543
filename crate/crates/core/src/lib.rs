pub mod edm;
pub mod emedm;
pub mod error;
pub mod hireward;
pub mod linalg;
pub mod metrics;
pub mod persist;
pub mod rmtticc;
pub mod scalar;
pub mod seeding;
pub mod synthgen;
pub mod tglasso;
pub mod themes;
pub mod trajdata;

pub use error::{Error, Result};
pub use scalar::Real;
pub use themes::{fit, predict_actions, run_ablation, Ablation, ThemesConfig};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub type Dataset64 = trajdata::Dataset<f64>;
pub type Dataset32 = trajdata::Dataset<f32>;
pub type ThemesModel64 = themes::ThemesModel<f64>;
pub type ThemesModel32 = themes::ThemesModel<f32>;
pub type PolicyNet64 = edm::PolicyNet<f64>;
pub type PolicyNet32 = edm::PolicyNet<f32>;
pub type PolicyMixture64 = emedm::PolicyMixture<f64>;
pub type PolicyMixture32 = emedm::PolicyMixture<f32>;
pub type ClusterModel64 = rmtticc::ClusterModel<f64>;
pub type ClusterModel32 = rmtticc::ClusterModel<f32>;
