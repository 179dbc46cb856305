//! The dual-branch region model.

pub mod backward;
pub mod checkpoint;
pub mod forward;
pub mod params;

pub use backward::{backward, backward_image, batch_loss, image_loss, l2_penalty, LossParts, PROB_EPS};
pub use checkpoint::Checkpoint;
pub use forward::{
    baseline_max_region, classify_regions, detect_regions, encode, forward, forward_with_selection,
    image_posterior, image_scores_for_task, localization_scores, normal_probability, predict,
    select_regions, select_top_k, Dropout, ForwardTrace, Posteriors, Task,
};
pub use params::{init_params, Hyper, Mode, ModelParams, ParamSet};
