//! File formats, sequence loading and synthetic data.

pub mod binary;
pub mod frames;
pub mod sequence;
pub mod synth;

pub use binary::{
    decode_checkpoint, decode_model, encode_checkpoint, encode_model, load_checkpoint, load_model,
    save_checkpoint, save_model,
};
pub use frames::{CameraRecord, FrameParamsFile, FrameRecord};
pub use sequence::{
    frame_stem, list_images, load_frame_params, load_sequence, load_video_dir, read_json,
    read_mask, read_rgb, write_json, write_png, write_sequence, FrameImagePair, Sequence,
    FRAMES_FILE, IMAGES_DIR, MASKS_DIR,
};
pub use synth::{
    mouth_volume, synth_camera, synth_dataset, synth_sequence, SynthConfig, SynthDataset,
    GT_MODEL_FILE, INIT_MODEL_FILE, INIT_SPEC_FILE,
};
