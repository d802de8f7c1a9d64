#![no_main]

use ctcycle::losses::{epoch_means_csv, parse_loss_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rows) = parse_loss_csv(text) {
            let _ = epoch_means_csv(&rows);
        }
    }
});
