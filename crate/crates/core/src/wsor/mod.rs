//! Weakly-supervised object recognition: a multi-label classifier trained on
//! image-level labels, class activation maps, and CAM-threshold instances.

mod cam;
mod model;

pub use cam::{compute_cam, extract_instances, recognize, Cam, ExtractionConfig, Instance, InstanceSet, Recognition};
pub use model::{
    average_precision, invocations, multi_label_soft_margin_loss, predict_objects, select_objects, targets,
    train_classifier, ClassifierConfig, ClassifierTrainer, ClassifierTraining, FeatureMaps, ObjectClassifier,
    Trunk, TrunkConv, CHECKPOINT_KIND,
};
