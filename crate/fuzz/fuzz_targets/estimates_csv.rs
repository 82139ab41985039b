#![no_main]

use hinf_cli::plot::{path_csv, read_estimates};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = read_estimates(text) {
        let _ = path_csv(&rows);
    }
});
