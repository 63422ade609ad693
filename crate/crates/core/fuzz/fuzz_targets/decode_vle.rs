#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = recal::dataset::decode(data) {
        let bytes = recal::dataset::encode(&ds).expect("decoded dataset re-encodes");
        let again = recal::dataset::decode(&bytes).expect("re-encoded dataset decodes");
        assert_eq!(again.n_samples(), ds.n_samples());
    }
});
