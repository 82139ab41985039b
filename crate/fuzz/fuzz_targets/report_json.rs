#![no_main]

use hinf_cli::report::{Metrics, RunManifest, TuneFile};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = Metrics::from_json(text) {
        assert_eq!(Metrics::from_json(&m.to_json()).ok().as_ref(), Some(&m));
    }
    if let Ok(t) = TuneFile::from_json(text) {
        assert_eq!(t.grid.len(), t.val_mse_per_point.len());
    }
    let _ = RunManifest::from_json(text);
});
