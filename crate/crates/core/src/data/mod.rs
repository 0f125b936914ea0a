//! Deterministic synthetic datasets: oriented glyph images and a small
//! command-to-action corpus.

mod export;
mod scan;
mod shapes;

pub use export::{load_dataset, save_dataset, DatasetError, Manifest};
pub use scan::{
    all_commands, apply_group_to_pair, decode_actions, encode_command, gen_scan, interpret, render_actions, render_command, ScanCorpus, ScanError,
    ScanPair, ScanSplit, ACTION_WORDS, COMMAND_WORDS,
};
pub use shapes::{gen_shapes, render_glyph, ShapeDataset, ShapeSplit, GLYPH_NAMES, NUM_CLASSES, SIDE};
