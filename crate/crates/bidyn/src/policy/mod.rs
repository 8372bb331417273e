//! Policies: the soft actor-critic agent, the backward policy with MLE and
//! conditional-adversarial training, and the shared squashed-Gaussian math.

pub mod backward;
pub mod sac;
pub mod squash;

pub use backward::{train_backward_policy_gan, BackwardPolicy, Discriminator};
pub use sac::{polyak, SacAgent, SacConfig, SacLosses};
pub use squash::ActionBounds;
