//! Perturbation generators: norm-ball projection, per-instance attacks
//! (FGSM, R-FGSM, PGD, DeepFool) and the two universal solvers.

mod ball;
mod deepfool;
mod instance;
mod universal;

pub use ball::{project, Norm, NormBall};
pub use deepfool::{deepfool, logit_jacobian, DeepFoolResult};
pub use instance::{fgsm, input_gradient, pgd, rfgsm, PgdConfig};
pub use universal::{
    fooling_ratio, ideepfool_universal, perturbed_predictions, universal_attack,
    universal_gradient, AttackStep, IDeepFoolConfig, IDeepFoolOutcome, PerturbationState,
    UniversalAttackConfig, UniversalOutcome,
};
