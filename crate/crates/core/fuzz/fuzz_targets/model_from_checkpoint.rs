#![no_main]

use cuf_core::checkpoint::model_from_bytes;
use cuf_core::imaging::Image;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(model) = model_from_bytes(data) else { return };
    // Keep the forward pass cheap; only tiny models are worth running.
    if model.num_parameters() > 20_000 {
        return;
    }
    let img = Image::filled(3, 3, [0.25, 0.5, 0.75]);
    let s = model.arch.fixed_scale().map_or(1.5, |s| s as f64);
    let _ = model.upscale(&img, s, s);
});
