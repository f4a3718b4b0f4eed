#![no_main]

use libfuzzer_sys::fuzz_target;
use metaloc::fingerprint::Dataset;

// Input: manifest length and fingerprint length as little-endian u32, then
// the manifest, fingerprint and label payloads back to back.
fuzz_target!(|data: &[u8]| {
    if data.len() < 8 {
        return;
    }
    let m = u32::from_le_bytes(data[0..4].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(data[4..8].try_into().unwrap()) as usize;
    let rest = &data[8..];
    let Some(split) = m.checked_add(f).filter(|&e| e <= rest.len()) else {
        return;
    };
    let _ = Dataset::from_parts(&rest[..m], &rest[m..split], &rest[split..]);
});
