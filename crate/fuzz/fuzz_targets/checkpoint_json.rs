#![no_main]

use libfuzzer_sys::fuzz_target;

// Checkpoints rebuild a whole model (kernels, mixing matrices, variational
// state); the parser must reject inconsistent shapes and implausible sizes
// without allocating for them.
fuzz_target!(|data: &[u8]| {
    if data.len() > 1 << 16 {
        return;
    }
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = aggp::data::parse_checkpoint_json(text, "fuzz.json");
    }
});
