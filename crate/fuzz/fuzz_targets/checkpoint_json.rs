#![no_main]

use hybrid_inference::nn::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(ckpt) = Checkpoint::from_json(text) else { return };
    for p in &ckpt.params {
        let _ = p.tensor();
    }
    let again = Checkpoint::from_json(&ckpt.to_json()).expect("re-encoded checkpoint parses");
    assert_eq!(again.params.len(), ckpt.params.len());
});
