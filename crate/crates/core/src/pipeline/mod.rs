//! Dataset plumbing: synthetic scenes, example extraction, labeling and storage.

mod dataset;
mod extract;
mod synthetic;

pub use dataset::{load_dataset, save_dataset, EXAMPLES_FILE, IMAGES_FILE};
pub use extract::{anchor_inputs, extract_examples, AnchorInputs, label_intent, split_dataset, DatasetSplit, Example, ExtractionConfig, ExtractionStats, Unlabeled};
pub use synthetic::{generate_synthetic, LotLayout, Maneuver, ManeuverMix, SyntheticSpec, AISLE_WIDTH, SPOT_LENGTH, SPOT_WIDTH, TURN_RADIUS};
