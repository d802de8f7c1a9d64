#![no_main]

use ctcycle::phantom::RoiFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rois) = RoiFile::parse(text) {
            let _ = RoiFile::parse(&rois.to_toml());
        }
    }
});
