#![no_main]

use ctcycle::Tensor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = Tensor::<f32>::from_tsr1_bytes(data) {
        // NaN payloads may be quieted, so compare structure rather than bytes.
        let again = t.to_tsr1_bytes();
        assert_eq!(again.len(), data.len());
        assert_eq!(Tensor::<f32>::from_tsr1_bytes(&again).unwrap().shape(), t.shape());
    }
    let _ = Tensor::<f64>::from_tsr1_bytes(data);
});
