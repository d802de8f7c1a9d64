#![no_main]

use ctcycle::metrics::parse_metric_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(report) = parse_metric_csv(text) {
            let _ = report.to_csv();
        }
    }
});
