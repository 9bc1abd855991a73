//! Deterministic synthetic generator of labeled vehicle-crop sequences and
//! the on-disk dataset format.

mod dataset;
mod io;
mod render;
mod scene;

pub use dataset::{
    generate_dataset, generate_indexed, largest_remainder, load_split, plan, ClassMix, DatasetConfig, Manifest,
    SplitEntry, SplitRatios, ViewMix, MANIFEST_FILE, SPLIT_NAMES,
};
pub use io::{read_dataset, write_dataset, DatasetHeader, DatasetReader, MAGIC, VERSION};
pub use render::{
    blink_waveform, frame_label, generate_sequence, light_occluded, render_frame, RenderedFrame, SequenceSample,
};
pub use scene::{
    random_scene, Geometry, Occlusion, Patch, Photometrics, Rect, Rgb, SceneOptions, SceneSpec, MAX_BLINK_HZ,
    MIN_BLINK_HZ,
};
