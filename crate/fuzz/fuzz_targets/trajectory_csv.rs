#![no_main]

use hybrid_inference::datagen::{read_csv, write_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(t) = read_csv(data) else { return };
    // Whatever parses must survive a write/read cycle unchanged, as long as
    // the regenerated time column stays finite.
    if !(t.dt * t.len() as f64).is_finite() {
        return;
    }
    let mut buf = Vec::new();
    write_csv(&t, &mut buf).expect("parsed trajectory writes");
    let again = read_csv(buf.as_slice()).expect("written trajectory parses");
    assert_eq!(again.observations, t.observations);
    assert_eq!(again.states, t.states);
});
