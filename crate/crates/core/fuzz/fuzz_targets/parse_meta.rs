#![no_main]

use libfuzzer_sys::fuzz_target;
use recal::dataset::DatasetMeta;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(meta) = DatasetMeta::parse(text) {
        if let Ok(rendered) = meta.to_text() {
            assert_eq!(DatasetMeta::parse(&rendered).expect("rendered sidecar parses"), meta);
        }
    }
});
